//! Selective complementary feature fusion.
//!
//! For a pair of modality features `(A, B)` a soft-selection gate `g` is
//! computed from their sum `F = A + B`: three axis-retaining average pools
//! (keep D, keep H, keep W), each mixed by a pointwise convolution and
//! broadcast-summed, plus a per-channel logit from a global average pool
//! followed by a 1-D convolution across channels. The pair is fused as the
//! convex blend `g * A + (1 - g) * B`. The two fused pairs are concatenated
//! and merged back to the input width by two 3x3x3 conv-norm-ReLU stages.

use crate::autograd::{Conv3dGeometry, Var};
use crate::error::{shape_err, Error, Result};
use crate::modality::Pairing;
use crate::nn::{Bound, Conv3d, ConvNormAct, Init, ParamId};
use crate::tensor::Tensor;

/// Channel-interaction kernel size: `floor((log2 C + b) / gamma)` with
/// `gamma = 2`, `b = 1`, bumped to the next odd number when even.
pub fn channel_kernel_size(channels: usize) -> Result<usize> {
    if channels < 1 {
        return Err(Error::InvalidArgument("channel count must be at least 1".into()));
    }
    const GAMMA: f64 = 2.0;
    const B: f64 = 1.0;
    let t = (((channels as f64).log2() + B) / GAMMA).floor() as usize;
    Ok(if t.is_multiple_of(2) { t + 1 } else { t })
}

/// Per-voxel soft-selection weights, same shape as the features they gate.
/// Values lie in (0, 1) up to floating-point saturation.
#[derive(Clone, Debug)]
pub struct GateMap(pub Var);

impl GateMap {
    pub fn tensor(&self) -> &Tensor {
        self.0.value()
    }
}

/// Parameters of one complementary gate.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub spatial_d: Conv3d,
    pub spatial_h: Conv3d,
    pub spatial_w: Conv3d,
    pub channel_kernel: ParamId,
    pub kernel_size: usize,
}

impl GateParams {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let pw = Conv3dGeometry::same(1);
        let k = channel_kernel_size(channels)?;
        Ok(Self {
            spatial_d: Conv3d::new(init, &format!("{name}.spatial_d"), channels, channels, pw, true),
            spatial_h: Conv3d::new(init, &format!("{name}.spatial_h"), channels, channels, pw, true),
            spatial_w: Conv3d::new(init, &format!("{name}.spatial_w"), channels, channels, pw, true),
            channel_kernel: init.glorot(format!("{name}.channel_kernel"), &[k], k, k),
            kernel_size: k,
        })
    }

    /// Pre-activation spatial logits, full `[B, C, D, H, W]`.
    pub fn spatial_weight(&self, p: &Bound, f: &Var) -> Result<Var> {
        check_5d(f)?;
        let along_d = self.spatial_d.forward(p, &f.mean_axes(&[3, 4])?)?;
        let along_h = self.spatial_h.forward(p, &f.mean_axes(&[2, 4])?)?;
        let along_w = self.spatial_w.forward(p, &f.mean_axes(&[2, 3])?)?;
        along_d.add(&along_h)?.add(&along_w)
    }

    /// Per-channel logits `[B, C, 1, 1, 1]`.
    pub fn channel_weight(&self, p: &Bound, f: &Var) -> Result<Var> {
        check_5d(f)?;
        let s = f.shape();
        let (b, c) = (s[0], s[1]);
        let pooled = f.mean_axes(&[2, 3, 4])?.reshape(&[b, c])?;
        pooled
            .channel_conv1d(p.var(self.channel_kernel))?
            .reshape(&[b, c, 1, 1, 1])
    }

    pub fn gate(&self, p: &Bound, a: &Var, b: &Var) -> Result<GateMap> {
        if a.shape() != b.shape() {
            return shape_err(format!("gate inputs {:?} vs {:?}", a.shape(), b.shape()));
        }
        let f = a.add(b)?;
        let logits = self.spatial_weight(p, &f)?.add(&self.channel_weight(p, &f)?)?;
        Ok(GateMap(logits.sigmoid()))
    }
}

fn check_5d(f: &Var) -> Result<()> {
    let s = f.shape();
    if s.len() != 5 || s.contains(&0) {
        return shape_err(format!("expected a [B, C, D, H, W] feature map, got {s:?}"));
    }
    Ok(())
}

/// `g * a + (1 - g) * b`
pub fn blend(gate: &GateMap, a: &Var, b: &Var) -> Result<Var> {
    a.mul(&gate.0)?.add(&b.mul(&gate.0.one_minus())?)
}

/// Everything `ScffBlock::forward` computes, for inspection.
pub struct ScffOutput {
    /// Fused feature, `[B, C, D, H, W]`.
    pub fused: Var,
    /// Concatenation of the two blended pairs, `[B, 2C, D, H, W]`.
    pub z: Var,
    /// Gates of the two pairs; empty when gating is disabled.
    pub gates: Vec<GateMap>,
}

/// Four-modality fusion at one resolution level.
#[derive(Clone, Debug)]
pub struct ScffBlock {
    pub gates: [GateParams; 2],
    pub merge1: ConvNormAct,
    pub merge2: ConvNormAct,
    pub pairing: Pairing,
    pub gated: bool,
    pub channels: usize,
}

impl ScffBlock {
    pub fn new(init: &mut Init, name: &str, channels: usize, pairing: Pairing, gated: bool, norm_groups: usize) -> Result<Self> {
        Ok(Self {
            gates: [
                GateParams::new(init, &format!("{name}.gate0"), channels)?,
                GateParams::new(init, &format!("{name}.gate1"), channels)?,
            ],
            merge1: ConvNormAct::new(init, &format!("{name}.merge1"), 2 * channels, channels, norm_groups),
            merge2: ConvNormAct::new(init, &format!("{name}.merge2"), channels, channels, norm_groups),
            pairing,
            gated,
            channels,
        })
    }

    /// Blend the two pairs and concatenate them along channels.
    pub fn pair_fusion(&self, p: &Bound, inputs: [&Var; 4]) -> Result<(Var, Vec<GateMap>)> {
        let shape = inputs[0].shape();
        check_5d(inputs[0])?;
        if inputs.iter().any(|x| x.shape() != shape) {
            return shape_err(format!(
                "fusion inputs differ: {:?}",
                inputs.iter().map(|x| x.shape().to_vec()).collect::<Vec<_>>()
            ));
        }
        if shape[1] != self.channels {
            return shape_err(format!("fusion block for {} channels got {shape:?}", self.channels));
        }
        let mut halves = Vec::with_capacity(2);
        let mut gates = Vec::new();
        for (params, (ma, mb)) in self.gates.iter().zip(self.pairing.pairs()) {
            let a = inputs[ma.index()];
            let b = inputs[mb.index()];
            if self.gated {
                let g = params.gate(p, a, b)?;
                halves.push(blend(&g, a, b)?);
                gates.push(g);
            } else {
                halves.push(a.add(b)?);
            }
        }
        Ok((Var::concat(&halves, 1)?, gates))
    }

    /// `inputs` in modality order (T1, T1ce, T2, FLAIR).
    pub fn forward(&self, p: &Bound, inputs: [&Var; 4]) -> Result<ScffOutput> {
        let (z, gates) = self.pair_fusion(p, inputs)?;
        let fused = self.merge2.forward(p, &self.merge1.forward(p, &z)?)?;
        Ok(ScffOutput { fused, z, gates })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(channels: usize, gated: bool) -> (ParamStore, ScffBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = ScffBlock::new(&mut Init { store: &mut store, rng: &mut rng }, "scff", channels, Pairing::default(), gated, 8).unwrap();
        (store, b)
    }

    fn set_identity(store: &mut ParamStore, conv: &Conv3d) {
        let c = conv.cout;
        store
            .set(conv.weight, Tensor::from_fn(&[c, c, 1, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 }))
            .unwrap();
        if let Some(b) = conv.bias {
            store.set(b, Tensor::zeros(&[c])).unwrap();
        }
    }

    #[test]
    fn kernel_size_examples() {
        assert_eq!(channel_kernel_size(1).unwrap(), 1);
        assert_eq!(channel_kernel_size(2).unwrap(), 1);
        assert_eq!(channel_kernel_size(64).unwrap(), 3);
        assert_eq!(channel_kernel_size(256).unwrap(), 5);
        assert!(channel_kernel_size(0).is_err());
        for e in 0..=10 {
            assert_eq!(channel_kernel_size(1 << e).unwrap() % 2, 1);
        }
    }

    #[test]
    fn spatial_weight_of_constant_is_three_times_constant() {
        let (mut store, b) = block(2, true);
        let g = &b.gates[0];
        for conv in [&g.spatial_d, &g.spatial_h, &g.spatial_w] {
            set_identity(&mut store, conv);
        }
        let p = store.bind();
        let f = Var::constant(Tensor::full(&[1, 2, 3, 2, 4], 1.5));
        let s = g.spatial_weight(&p, &f).unwrap();
        assert_eq!(s.shape(), &[1, 2, 3, 2, 4]);
        assert!(s.value().data().iter().all(|&v| (v - 4.5).abs() < 1e-12));
    }

    #[test]
    fn spatial_weight_sums_axis_means() {
        let (mut store, b) = block(1, true);
        let g = &b.gates[0];
        for conv in [&g.spatial_d, &g.spatial_h, &g.spatial_w] {
            set_identity(&mut store, conv);
        }
        let p = store.bind();
        let x = Tensor::from_fn(&[1, 1, 2, 2, 2], |i| (i + 1) as f64);
        let s = g.spatial_weight(&p, &Var::constant(x.clone())).unwrap();
        for d in 0..2 {
            for h in 0..2 {
                for w in 0..2 {
                    let mut md = 0.0;
                    let mut mh = 0.0;
                    let mut mw = 0.0;
                    for a in 0..2 {
                        for b in 0..2 {
                            md += x.at(&[0, 0, d, a, b]) / 4.0;
                            mh += x.at(&[0, 0, a, h, b]) / 4.0;
                            mw += x.at(&[0, 0, a, b, w]) / 4.0;
                        }
                    }
                    assert!((s.value().at(&[0, 0, d, h, w]) - (md + mh + mw)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn degenerate_extent_pools_are_the_input() {
        let (mut store, b) = block(2, true);
        let g = &b.gates[0];
        for conv in [&g.spatial_d, &g.spatial_h, &g.spatial_w] {
            set_identity(&mut store, conv);
        }
        let p = store.bind();
        let x = Tensor::new(vec![1, 2, 1, 1, 1], vec![0.3, -2.0]).unwrap();
        let s = g.spatial_weight(&p, &Var::constant(x.clone())).unwrap();
        assert_eq!(s.value().data(), x.scale(3.0).data());
    }

    #[test]
    fn channel_weight_examples() {
        // K = 1 with unit weight: plain per-channel means
        let (mut store, b) = block(2, true);
        store.set(b.gates[0].channel_kernel, Tensor::ones(&[1])).unwrap();
        let p = store.bind();
        let x = Tensor::from_fn(&[1, 2, 2, 1, 1], |i| i as f64);
        let c = b.gates[0].channel_weight(&p, &Var::constant(x)).unwrap();
        assert_eq!(c.value().data(), &[0.5, 2.5]);

        // K = 3 over 8 channels of a constant: interior = c * sum(w)
        let (mut store, b) = block(8, true);
        assert_eq!(b.gates[0].kernel_size, 3);
        store.set(b.gates[0].channel_kernel, Tensor::new(vec![3], vec![0.2, 0.5, -0.1]).unwrap()).unwrap();
        let p = store.bind();
        let c = b.gates[0].channel_weight(&p, &Var::constant(Tensor::full(&[1, 8, 2, 2, 2], 2.0))).unwrap();
        let d = c.value().data();
        for v in &d[1..7] {
            assert!((v - 2.0 * 0.6).abs() < 1e-12);
        }
        assert!((d[0] - 2.0 * 0.4).abs() < 1e-12);

        // single channel: K forced to 1
        let (store, b) = block(1, true);
        assert_eq!(b.gates[0].kernel_size, 1);
        let w = store.get(b.gates[0].channel_kernel).item();
        let p = store.bind();
        let c = b.gates[0].channel_weight(&p, &Var::constant(Tensor::full(&[1, 1, 2, 2, 2], 3.0))).unwrap();
        assert!((c.value().item() - 3.0 * w).abs() < 1e-12);
    }

    #[test]
    fn zero_inputs_give_half_gate() {
        let (store, b) = block(2, true);
        let p = store.bind();
        let z = Var::constant(Tensor::zeros(&[1, 2, 2, 2, 2]));
        let g = b.gates[0].gate(&p, &z, &z).unwrap();
        assert!(g.tensor().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn large_logit_saturates_gate() {
        let (mut store, b) = block(1, true);
        let g = &b.gates[0];
        store.set(g.spatial_d.bias.unwrap(), Tensor::full(&[1], 20.0)).unwrap();
        for conv in [&g.spatial_d, &g.spatial_h, &g.spatial_w] {
            store.set(conv.weight, Tensor::zeros(&[1, 1, 1, 1, 1])).unwrap();
        }
        store.set(g.channel_kernel, Tensor::zeros(&[1])).unwrap();
        let p = store.bind();
        let x = Var::constant(Tensor::ones(&[1, 1, 2, 2, 2]));
        let gate = g.gate(&p, &x, &x).unwrap();
        assert!(gate.tensor().data().iter().all(|&v| v > 0.9999 && v <= 1.0));
    }

    #[test]
    fn identical_pairs_pass_through() {
        let (store, b) = block(2, true);
        let p = store.bind();
        let a = Var::constant(Tensor::from_fn(&[1, 2, 2, 2, 2], |i| (i as f64).sin()));
        let c = Var::constant(Tensor::from_fn(&[1, 2, 2, 2, 2], |i| (i as f64).cos()));
        // order T1, T1ce, T2, FLAIR: T1 == T2 and T1ce == FLAIR
        let (z, _) = b.pair_fusion(&p, [&a, &c, &a, &c]).unwrap();
        let first = z.value().narrow(1, 0, 2).unwrap();
        let second = z.value().narrow(1, 2, 2).unwrap();
        for (x, y) in first.data().iter().zip(a.value().data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in second.data().iter().zip(c.value().data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (store, b) = block(2, true);
        let p = store.bind();
        let a = Var::constant(Tensor::zeros(&[1, 2, 2, 2, 2]));
        let c = Var::constant(Tensor::zeros(&[1, 2, 2, 2, 1]));
        assert!(b.forward(&p, [&a, &a, &a, &c]).is_err());
        assert!(b.gates[0].gate(&p, &a, &c).is_err());
    }

    #[test]
    fn fused_output_has_input_width() {
        let (store, b) = block(4, true);
        let p = store.bind();
        let x = Var::constant(Tensor::from_fn(&[2, 4, 2, 3, 2], |i| (i as f64 * 0.1).sin()));
        let out = b.forward(&p, [&x, &x, &x, &x]).unwrap();
        assert_eq!(out.fused.shape(), &[2, 4, 2, 3, 2]);
        assert_eq!(out.z.shape(), &[2, 8, 2, 3, 2]);
        assert_eq!(out.gates.len(), 2);
    }
}
