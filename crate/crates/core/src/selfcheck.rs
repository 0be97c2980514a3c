//! A quick invariant suite that can run from an installed binary.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{no_grad, Var};
use crate::data::{io, synth_case, PhantomSpec};
use crate::engine::{dice_loss, one_hot, Checkpoint};
use crate::error::{Error, Result};
use crate::gradcheck::{check, GradCheckOptions};
use crate::infer::{coverage, tile_positions, SlidingSpec};
use crate::metrics::{confusion, dice, hausdorff95, LabelVolume, RegionMask, Shape3};
use crate::mfci::{attention_core, MfciConfig};
use crate::modality::Pairing;
use crate::network::{Model, NetworkConfig};
use crate::nn::{Init, ParamId, ParamStore};
use crate::scff::{blend, channel_kernel_size, GateParams, ScffBlock};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn fail(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn random_mask(rng: &mut ChaCha8Rng, shape: Shape3) -> RegionMask {
    let p = rng.gen_range(0.1..0.7);
    let n: usize = shape.iter().product();
    RegionMask::new((0..n).map(|_| rng.gen_bool(p)).collect(), shape).expect("sizes agree")
}

fn metrics_vs_brute_force() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..40 {
        let shape: Shape3 = std::array::from_fn(|_| rng.gen_range(1..=4));
        let (a, b) = (random_mask(&mut rng, shape), random_mask(&mut rng, shape));
        let tp = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count() as f64;
        let (na, nb) = (a.count() as f64, b.count() as f64);
        let expect = if na + nb == 0.0 { 1.0 } else { 2.0 * tp / (na + nb) };
        let got = dice(&confusion(&a, &b)?);
        if got != expect {
            return Err(fail(format!("dice {got} vs {expect} on {shape:?}")));
        }
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let (ba, bb) = (a.boundary(), b.boundary());
        let directed = |from: &[Shape3], to: &[Shape3]| {
            let mut d: Vec<f64> = from
                .iter()
                .map(|p| {
                    to.iter()
                        .map(|q| (0..3).map(|k| (p[k] as f64 - q[k] as f64).powi(2)).sum::<f64>().sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            d.sort_by(|x, y| x.total_cmp(y));
            let r = 0.95 * (d.len() - 1) as f64;
            let (lo, hi) = (r.floor() as usize, r.ceil() as usize);
            d[lo] + (r - lo as f64) * (d[hi] - d[lo])
        };
        let expect = directed(&ba, &bb).max(directed(&bb, &ba));
        let got = hausdorff95(&a, &b)?.value().ok_or_else(|| fail("undefined HD95 for non-empty masks"))?;
        if (got - expect).abs() > 1e-9 {
            return Err(fail(format!("hd95 {got} vs {expect} on {shape:?}")));
        }
    }
    Ok("40 random mask pairs".into())
}

fn kernel_rule() -> Result<String> {
    for c in [2usize, 4, 8, 16, 32, 64, 128, 256, 512, 1024] {
        let t = (c.trailing_zeros() as usize).div_ceil(2);
        let expect = if t % 2 == 1 { t } else { t + 1 };
        let got = channel_kernel_size(c)?;
        if got != expect {
            return Err(fail(format!("k({c}) = {got}, expected {expect}")));
        }
    }
    Ok("C = 2..1024".into())
}

fn scff_convexity() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let gp = GateParams::new(&mut Init { store: &mut store, rng: &mut rng }, "g", 6)?;
    let p = store.bind();
    for _ in 0..10 {
        let a = Var::constant(Tensor::randn(&[1, 6, 3, 4, 5], 2.0, &mut rng));
        let b = Var::constant(Tensor::randn(&[1, 6, 3, 4, 5], 2.0, &mut rng));
        let g = gp.gate(&p, &a, &b)?;
        let f = blend(&g, &a, &b)?;
        for (i, &w) in g.tensor().data().iter().enumerate() {
            let comp = 1.0 - w;
            if !(0.0..=1.0).contains(&w) || (w + comp - 1.0).abs() > 1e-12 {
                return Err(fail(format!("gate {w} at {i}")));
            }
        }
        let (ad, bd, fd) = (a.value().data(), b.value().data(), f.value().data());
        for i in 0..fd.len() {
            let (lo, hi) = (ad[i].min(bd[i]), ad[i].max(bd[i]));
            if fd[i] < lo - 1e-12 || fd[i] > hi + 1e-12 {
                return Err(fail(format!("fusion {} outside [{lo}, {hi}]", fd[i])));
            }
        }
    }
    Ok("10 random pairs".into())
}

fn attention_rows() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (h, n, m, d) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..9), rng.gen_range(1..5));
        let q = Var::constant(Tensor::randn(&[1, h, n, d], 3.0, &mut rng));
        let k = Var::constant(Tensor::randn(&[1, h, m, d], 3.0, &mut rng));
        let v = Var::constant(Tensor::randn(&[1, h, m, 2], 1.0, &mut rng));
        let (_, w) = attention_core(&q, &k, &v, d)?;
        for row in w.value().data().chunks(m) {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(fail(format!("row sums to {s}")));
            }
        }
    }
    Ok("20 random head/token shapes".into())
}

fn gradients() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let block = ScffBlock::new(&mut Init { store: &mut store, rng: &mut rng }, "s", 4, Pairing::default(), true, 2)?;
    let xs: Vec<ParamId> = (0..4).map(|i| store.add(format!("x{i}"), Tensor::randn(&[1, 4, 2, 2, 2], 1.0, &mut rng))).collect();
    // the two fused pairs are concatenated along channels
    let probe = Var::constant(Tensor::randn(&[1, 8, 2, 2, 2], 1.0, &mut rng));
    let ids: Vec<ParamId> = store.ids().collect();
    let r = check(
        &mut store,
        &ids,
        |p| {
            let v: Vec<&Var> = xs.iter().map(|&x| p.var(x)).collect();
            Ok(block.pair_fusion(p, [v[0], v[1], v[2], v[3]])?.0.mul(&probe)?.sum_all())
        },
        &GradCheckOptions { max_per_param: 8, ..Default::default() },
    )?;
    if !r.passed() {
        return Err(fail(format!("scff: {}", r.failures.join("; "))));
    }

    let mut store = ParamStore::new();
    let logits = store.add("logits", Tensor::randn(&[1, 4, 2, 2, 2], 1.0, &mut rng));
    let labels = LabelVolume::new((0..8).map(|i| [0, 1, 2, 4][i % 4]).collect(), [2, 2, 2])?;
    let target = one_hot(&[&labels], 4)?;
    let r2 = check(&mut store, &[logits], |p| dice_loss(p.var(logits), &target), &GradCheckOptions { rtol: 1e-4, ..Default::default() })?;
    if !r2.passed() {
        return Err(fail(format!("dice loss: {}", r2.failures.join("; "))));
    }
    Ok(format!("{} entries, worst relative error {:.2e}", r.checked + r2.checked, r.worst_relative.max(r2.worst_relative)))
}

fn tiling() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let patch: Shape3 = std::array::from_fn(|_| rng.gen_range(1..6));
        let shape: Shape3 = std::array::from_fn(|a| patch[a] + rng.gen_range(0..9));
        let spec = SlidingSpec { patch, overlap: rng.gen_range(0.0..0.9) };
        let origins = tile_positions(shape, &spec)?;
        if coverage(shape, patch, &origins).contains(&0) {
            return Err(fail(format!("uncovered voxel for {shape:?} / {patch:?}")));
        }
    }
    Ok("50 random shapes".into())
}

fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        base_width: 4,
        depth: 2,
        norm_groups: 2,
        mfci: MfciConfig { l1: 1, l2: 1, heads: 1, embed_dim: 4, token_grid: 2, ..Default::default() },
        ..Default::default()
    }
}

fn checkpoint_round_trip() -> Result<String> {
    let model = Model::new(&tiny_network())?;
    let path = std::env::temp_dir().join(format!("cfci-selfcheck-{}.ckpt", std::process::id()));
    Checkpoint::from_model(&model).save(&path)?;
    let loaded = Checkpoint::load(&path);
    let _ = std::fs::remove_file(&path);
    let back = loaded?.to_model()?;
    let x = Var::constant(Tensor::randn(&[1, 4, 8, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(6)));
    let (a, b) = no_grad(|| -> Result<_> { Ok((model.forward(&x)?.logits, back.forward(&x)?.logits)) })?;
    if a.value() != b.value() {
        return Err(fail("reloaded model differs"));
    }
    Ok(format!("{} parameters", model.param_count()))
}

fn nifti_round_trip() -> Result<String> {
    let case = synth_case(&mut ChaCha8Rng::seed_from_u64(7), &PhantomSpec { size: 16, ..Default::default() }, "sc")?;
    let dir = std::env::temp_dir().join(format!("cfci-selfcheck-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let result = (|| -> Result<()> {
        let p = dir.join("seg.nii.gz");
        let labels = case.labels.as_ref().expect("phantoms are labelled");
        io::write_labels(&p, labels)?;
        if io::read_labels(&p)?.data() != labels.data() {
            return Err(fail("labels changed"));
        }
        let back = crate::data::load_case(&crate::data::write_case(&case, &dir)?)?;
        if back != case {
            return Err(fail("case changed"));
        }
        Ok(())
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result.map(|_| "16^3 phantom".into())
}

/// Run every check; never panics.
pub fn run_all() -> Vec<CheckOutcome> {
    let checks: [(&'static str, fn() -> Result<String>); 8] = [
        ("metrics match brute force", metrics_vs_brute_force),
        ("channel kernel rule", kernel_rule),
        ("scff gates are convex", scff_convexity),
        ("attention rows sum to one", attention_rows),
        ("analytic gradients", gradients),
        ("tiles cover the volume", tiling),
        ("checkpoint round trip", checkpoint_round_trip),
        ("nifti round trip", nifti_round_trip),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let r = std::panic::catch_unwind(f).unwrap_or_else(|_| Err(fail("panicked")));
            let seconds = start.elapsed().as_secs_f64();
            match r {
                Ok(detail) => CheckOutcome { name, passed: true, detail, seconds },
                Err(e) => CheckOutcome { name, passed: false, detail: e.to_string(), seconds },
            }
        })
        .collect()
}
