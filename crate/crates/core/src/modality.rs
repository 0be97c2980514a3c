use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four co-registered MRI sequences, in channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T1,
    T1ce,
    T2,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T1ce, Modality::T2, Modality::Flair];

    pub fn index(self) -> usize {
        self as usize
    }

    /// File-name suffix used by the BraTS layout.
    pub fn suffix(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1ce => "t1ce",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.suffix())
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.suffix().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown modality {s:?}")))
    }
}

/// How the four modalities are split into the two gated pairs. The first
/// member of each pair receives the gate, the second its complement.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// (T1, T2) and (T1ce, FLAIR).
    #[default]
    T1T2T1ceFlair,
    /// (T1, T1ce) and (T2, FLAIR).
    T1T1ceT2Flair,
    /// (T1, FLAIR) and (T1ce, T2).
    T1FlairT1ceT2,
}

impl Pairing {
    pub const ALL: [Pairing; 3] = [Pairing::T1T1ceT2Flair, Pairing::T1FlairT1ceT2, Pairing::T1T2T1ceFlair];

    pub fn pairs(self) -> [(Modality, Modality); 2] {
        use Modality::*;
        match self {
            Pairing::T1T2T1ceFlair => [(T1, T2), (T1ce, Flair)],
            Pairing::T1T1ceT2Flair => [(T1, T1ce), (T2, Flair)],
            Pairing::T1FlairT1ceT2 => [(T1, Flair), (T1ce, T2)],
        }
    }

    pub fn label(self) -> String {
        let [(a, b), (c, d)] = self.pairs();
        format!("{a}+{b}, {c}+{d}")
    }
}

impl FromStr for Pairing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t1t2_t1ceflair" | "t1_t2_t1ce_flair" | "default" => Ok(Pairing::T1T2T1ceFlair),
            "t1t1ce_t2flair" | "t1_t1ce_t2_flair" => Ok(Pairing::T1T1ceT2Flair),
            "t1flair_t1cet2" | "t1_flair_t1ce_t2" => Ok(Pairing::T1FlairT1ceT2),
            other => Err(Error::InvalidArgument(format!("unknown pairing {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_pairing_covers_all_modalities_once() {
        for p in Pairing::ALL {
            let mut seen: Vec<usize> = p.pairs().iter().flat_map(|(a, b)| [a.index(), b.index()]).collect();
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn parse_round_trip() {
        for m in Modality::ALL {
            assert_eq!(m.suffix().parse::<Modality>().unwrap(), m);
        }
        assert!("dwi".parse::<Modality>().is_err());
    }
}
