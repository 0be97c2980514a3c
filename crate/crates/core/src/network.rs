//! The full segmentation network: four parallel residual encoders, gated
//! fusion of their skip features, the compression-interaction bottleneck and
//! a trilinear-upsampling decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Conv3dGeometry, Var};
use crate::error::{shape_err, Error, Result};
use crate::mfci::{Mfci, MfciConfig};
use crate::modality::Pairing;
use crate::nn::{Bound, Conv3d, ConvNormAct, GroupNorm, Init, ParamStore, ResBlock};
use crate::scff::ScffBlock;

pub const NUM_MODALITIES: usize = 4;

/// Class index of each label value: 0, 1, 2, 4 -> 0, 1, 2, 3.
pub fn label_to_class(label: u8) -> usize {
    match label {
        4 => 3,
        l => l as usize,
    }
}

pub fn class_to_label(class: usize) -> u8 {
    match class {
        3 => 4,
        c => c as u8,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub base_width: usize,
    /// Number of stride-2 stages.
    pub depth: usize,
    pub classes: usize,
    /// Upper bound on group-norm groups.
    pub norm_groups: usize,
    /// One encoder per modality; otherwise a single encoder over the stacked
    /// modalities (requires `scff` and `mfci` off).
    pub parallel: bool,
    pub scff: bool,
    pub pairing: Pairing,
    /// Bottleneck transformer on; otherwise the four bottleneck features are
    /// concatenated and projected.
    pub use_mfci: bool,
    pub mfci: MfciConfig,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            depth: 4,
            classes: 4,
            norm_groups: 8,
            parallel: true,
            scff: true,
            pairing: Pairing::default(),
            use_mfci: true,
            mfci: MfciConfig::default(),
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.base_width == 0 || self.classes < 2 || self.norm_groups == 0 {
            return Err(Error::Config("base_width, norm_groups must be positive and classes at least 2".into()));
        }
        if !self.parallel && (self.scff || self.use_mfci) {
            return Err(Error::Config("a single shared encoder cannot be combined with scff or mfci".into()));
        }
        if self.use_mfci {
            self.mfci.validate()?;
        }
        Ok(())
    }

    /// Widths of the stages, `base * 2^i`.
    pub fn stage_widths(&self) -> Vec<usize> {
        (0..self.depth).map(|i| self.base_width << i).collect()
    }

    /// Widths of the skip features, full resolution first.
    pub fn skip_widths(&self) -> Vec<usize> {
        let stages = self.stage_widths();
        std::iter::once(self.base_width).chain(stages[..self.depth - 1].iter().copied()).collect()
    }

    pub fn bottleneck_width(&self) -> usize {
        self.base_width << (self.depth - 1)
    }

    /// Spatial extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        let patch = if self.use_mfci { self.mfci.patch_size } else { 1 };
        (1 << self.depth) * patch
    }
}

/// Stride-2 convolution, normalization, ReLU.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv3d,
    pub norm: GroupNorm,
}

impl Downsample {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, groups: usize) -> Self {
        let g = Conv3dGeometry { kernel: 3, stride: 2, padding: 1 };
        Self {
            conv: Conv3d::new(init, &format!("{name}.conv"), cin, cout, g, false),
            norm: GroupNorm::new(init, &format!("{name}.norm"), cout, groups),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        Ok(self.norm.forward(p, &self.conv.forward(p, x)?)?.relu())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub down: Downsample,
    pub block: ResBlock,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: ConvNormAct,
    pub stages: Vec<EncoderStage>,
}

pub struct EncoderOutput {
    /// Skip features, full resolution first.
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

impl Encoder {
    pub fn new(init: &mut Init, name: &str, cin: usize, cfg: &NetworkConfig) -> Self {
        let g = cfg.norm_groups;
        let mut prev = cfg.base_width;
        let stem = ConvNormAct::new(init, &format!("{name}.stem"), cin, prev, g);
        let stages = cfg
            .stage_widths()
            .into_iter()
            .enumerate()
            .map(|(i, w)| {
                let s = EncoderStage {
                    down: Downsample::new(init, &format!("{name}.stage{i}.down"), prev, w, g),
                    block: ResBlock::new(init, &format!("{name}.stage{i}.res"), w, w, g),
                };
                prev = w;
                s
            })
            .collect();
        Self { stem, stages }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<EncoderOutput> {
        let depth = self.stages.len();
        let s = x.shape();
        if s.len() != 5 || s[2..].iter().any(|&n| n == 0 || n % (1 << depth) != 0) {
            return shape_err(format!("encoder input {s:?} must have spatial extents divisible by {}", 1 << depth));
        }
        let mut h = self.stem.forward(p, x)?;
        let mut skips = vec![h.clone()];
        for stage in &self.stages {
            h = stage.block.forward(p, &stage.down.forward(p, &h)?)?;
            skips.push(h.clone());
        }
        let bottleneck = skips.pop().expect("depth >= 1");
        Ok(EncoderOutput { skips, bottleneck })
    }
}

#[derive(Clone, Debug)]
pub enum Bottleneck {
    Mfci(Box<Mfci>),
    /// Concatenation of the four bottleneck features, projected back.
    Concat(Conv3d),
    /// Single-encoder baseline: the bottleneck feature itself.
    Identity,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub conv1: ConvNormAct,
    pub conv2: ConvNormAct,
}

#[derive(Clone, Debug)]
pub struct CfciNet {
    pub cfg: NetworkConfig,
    pub encoders: Vec<Encoder>,
    /// One fusion block per skip level; empty for the single encoder.
    pub fusions: Vec<ScffBlock>,
    pub bottleneck: Bottleneck,
    /// Deepest stage first.
    pub decoder: Vec<DecoderStage>,
    pub head: Conv3d,
}

pub struct ForwardOutput {
    /// `[B, classes, D, H, W]`.
    pub logits: Var,
    /// Attention weights of the bottleneck, when present.
    pub attention: Vec<Var>,
}

impl CfciNet {
    pub fn new(init: &mut Init, cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.norm_groups;
        let encoders = if cfg.parallel {
            (0..NUM_MODALITIES).map(|m| Encoder::new(init, &format!("enc{m}"), 1, cfg)).collect()
        } else {
            vec![Encoder::new(init, "enc", NUM_MODALITIES, cfg)]
        };
        let skip_widths = cfg.skip_widths();
        let fusions = if cfg.parallel {
            skip_widths
                .iter()
                .enumerate()
                .map(|(l, &w)| ScffBlock::new(init, &format!("fuse{l}"), w, cfg.pairing, cfg.scff, g))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let bw = cfg.bottleneck_width();
        let (bottleneck, mut width) = if cfg.use_mfci {
            let m = Mfci::new(init, "mfci", bw, &cfg.mfci, g)?;
            let w = m.out_channels;
            (Bottleneck::Mfci(Box::new(m)), w)
        } else if cfg.parallel {
            let conv = Conv3d::new(init, "bottleneck", NUM_MODALITIES * bw, bw, Conv3dGeometry::same(1), true);
            (Bottleneck::Concat(conv), bw)
        } else {
            (Bottleneck::Identity, bw)
        };
        let mut decoder = Vec::new();
        for (l, &sw) in skip_widths.iter().enumerate().rev() {
            decoder.push(DecoderStage {
                conv1: ConvNormAct::new(init, &format!("dec{l}.conv1"), width + sw, sw, g),
                conv2: ConvNormAct::new(init, &format!("dec{l}.conv2"), sw, sw, g),
            });
            width = sw;
        }
        let head = Conv3d::new(init, "head", width, cfg.classes, Conv3dGeometry::same(1), true);
        Ok(Self { cfg: cfg.clone(), encoders, fusions, bottleneck, decoder, head })
    }

    pub fn check_input(&self, x: &Var) -> Result<()> {
        let s = x.shape();
        let m = self.cfg.size_multiple();
        if s.len() != 5 || s[1] != NUM_MODALITIES || s[0] == 0 || s[2..].iter().any(|&n| n == 0 || n % m != 0) {
            return shape_err(format!(
                "input must be [B, {NUM_MODALITIES}, D, H, W] with extents divisible by {m}, got {s:?}"
            ));
        }
        Ok(())
    }

    /// `x` is `[B, 4, D, H, W]` with modalities in channel order.
    pub fn forward(&self, p: &Bound, x: &Var) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let (skips, deep, attention) = if self.cfg.parallel {
            let outs = (0..NUM_MODALITIES)
                .map(|m| self.encoders[m].forward(p, &x.narrow(1, m, 1)?))
                .collect::<Result<Vec<_>>>()?;
            let skips = self
                .fusions
                .iter()
                .enumerate()
                .map(|(l, f)| {
                    Ok(f.forward(p, [&outs[0].skips[l], &outs[1].skips[l], &outs[2].skips[l], &outs[3].skips[l]])?.fused)
                })
                .collect::<Result<Vec<_>>>()?;
            let b: Vec<Var> = outs.iter().map(|o| o.bottleneck.clone()).collect();
            match &self.bottleneck {
                Bottleneck::Mfci(m) => {
                    let o = m.forward(p, [&b[0], &b[1], &b[2], &b[3]])?;
                    (skips, o.out, o.weights)
                }
                Bottleneck::Concat(conv) => (skips, conv.forward(p, &Var::concat(&b, 1)?)?, Vec::new()),
                Bottleneck::Identity => unreachable!("validated"),
            }
        } else {
            let o = self.encoders[0].forward(p, x)?;
            (o.skips, o.bottleneck, Vec::new())
        };
        let mut h = deep;
        for (stage, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let up = h.upsample_trilinear(2)?;
            let cat = Var::concat(&[up, skip.clone()], 1)?;
            h = stage.conv2.forward(p, &stage.conv1.forward(p, &cat)?)?;
        }
        Ok(ForwardOutput { logits: self.head.forward(p, &h)?, attention })
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: CfciNet,
    pub params: ParamStore,
}

impl Model {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = CfciNet::new(&mut Init { store: &mut params, rng: &mut rng }, cfg)?;
        Ok(Self { net, params })
    }

    pub fn forward(&self, x: &Var) -> Result<ForwardOutput> {
        self.net.forward(&self.params.bind(), x)
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn param_count_millions(&self) -> f64 {
        self.param_count() as f64 / 1e6
    }
}
