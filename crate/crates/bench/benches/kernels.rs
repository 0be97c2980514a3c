use std::hint::black_box;

use cfci::autograd::{no_grad, Conv3dGeometry, Var};
use cfci::data::{synth_case, PhantomSpec};
use cfci::infer::{sliding_window_infer, tile_positions, SlidingSpec};
use cfci::metrics::{hausdorff95, region_extract, Region};
use cfci::mfci::{Mfci, MfciConfig};
use cfci::modality::Pairing;
use cfci::nn::{Init, ParamStore};
use cfci::scff::ScffBlock;
use cfci::{Model, NetworkConfig, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv3d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv3d");
    for (cin, cout, n) in [(4, 16, 16), (16, 16, 16), (32, 32, 8)] {
        let x = Var::constant(Tensor::randn(&[1, cin, n, n, n], 1.0, &mut rng));
        let w = Var::constant(Tensor::randn(&[cout, cin, 3, 3, 3], 0.1, &mut rng));
        group.bench_with_input(BenchmarkId::from_parameter(format!("{cin}x{cout}@{n}")), &(), |b, _| {
            b.iter(|| no_grad(|| black_box(x.conv3d(&w, None, Conv3dGeometry::same(3)).unwrap())))
        });
    }
    group.finish();
}

fn scff(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let block = ScffBlock::new(&mut Init { store: &mut store, rng: &mut rng }, "s", 16, Pairing::default(), true, 8).unwrap();
    let xs: Vec<Var> = (0..4).map(|_| Var::constant(Tensor::randn(&[1, 16, 16, 16, 16], 1.0, &mut rng))).collect();
    let p = store.bind();
    c.bench_function("scff_forward_16c_16", |b| {
        b.iter(|| no_grad(|| black_box(block.forward(&p, [&xs[0], &xs[1], &xs[2], &xs[3]]).unwrap().fused)))
    });
}

fn mfci(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let cfg = MfciConfig { l1: 2, l2: 2, heads: 4, embed_dim: 64, ..Default::default() };
    let m = Mfci::new(&mut Init { store: &mut store, rng: &mut rng }, "m", 64, &cfg, 8).unwrap();
    let xs: Vec<Var> = (0..4).map(|_| Var::constant(Tensor::randn(&[1, 64, 4, 4, 4], 1.0, &mut rng))).collect();
    let p = store.bind();
    c.bench_function("mfci_forward_64c_4", |b| {
        b.iter(|| no_grad(|| black_box(m.forward(&p, [&xs[0], &xs[1], &xs[2], &xs[3]]).unwrap().out)))
    });
}

fn hd95(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = synth_case(&mut rng, &PhantomSpec { size: 64, ..Default::default() }, "a").unwrap();
    let b = synth_case(&mut rng, &PhantomSpec { size: 64, ..Default::default() }, "b").unwrap();
    let (ma, mb) = (
        region_extract(a.labels.as_ref().unwrap(), Region::WT),
        region_extract(b.labels.as_ref().unwrap(), Region::WT),
    );
    c.bench_function("hd95_wt_64", |bch| bch.iter(|| black_box(hausdorff95(&ma, &mb).unwrap())));
}

fn tiling(c: &mut Criterion) {
    c.bench_function("tile_positions_240x240x155", |b| {
        b.iter(|| black_box(tile_positions([155, 240, 240], &SlidingSpec::default()).unwrap()))
    });
    let net = NetworkConfig {
        base_width: 4,
        depth: 2,
        norm_groups: 2,
        mfci: MfciConfig { l1: 1, l2: 1, heads: 1, embed_dim: 8, token_grid: 4, ..Default::default() },
        ..Default::default()
    };
    let model = Model::new(&net).unwrap();
    let case = synth_case(&mut ChaCha8Rng::seed_from_u64(4), &PhantomSpec { size: 32, ..Default::default() }, "c").unwrap();
    let spec = SlidingSpec { patch: [16; 3], overlap: 0.5 };
    let mut group = c.benchmark_group("sliding_window");
    group.sample_size(10);
    group.bench_function("tiny_net_32", |b| b.iter(|| black_box(sliding_window_infer(&case, &model, &spec).unwrap().labels)));
    group.finish();
}

criterion_group!(benches, conv3d, scff, mfci, hd95, tiling);
criterion_main!(benches);
