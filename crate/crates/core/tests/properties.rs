use cfci::data::normalize;
use cfci::engine::{cosine_lr, one_hot, soft_dice_loss};
use cfci::infer::{accumulate_tiles, coverage, tile_positions, PatchModel, SlidingSpec};
use cfci::metrics::{confusion, dice, hausdorff95, region_extract, RegionMask, Shape3};
use cfci::mfci::sum_values;
use cfci::nn::{Init, ParamStore};
use cfci::scff::{blend, channel_kernel_size, GateMap, GateParams};
use cfci::{LabelVolume, MultiModalVolume, Region, Result, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn shape3(max: usize) -> impl Strategy<Value = Shape3> {
    [1..=max, 1..=max, 1..=max]
}

fn mask_pair(max: usize) -> impl Strategy<Value = (Shape3, Vec<bool>, Vec<bool>)> {
    shape3(max).prop_flat_map(|s| {
        let n = s.iter().product::<usize>();
        (Just(s), prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n))
    })
}

fn labels(max: usize) -> impl Strategy<Value = LabelVolume> {
    shape3(max).prop_flat_map(|s| {
        prop::collection::vec(prop::sample::select(vec![0u8, 1, 2, 4]), s.iter().product::<usize>())
            .prop_map(move |d| LabelVolume::new(d, s).unwrap())
    })
}

fn mask(data: Vec<bool>, s: Shape3) -> RegionMask {
    RegionMask::new(data, s).unwrap()
}

/// Place `m` at `offset` inside a larger empty grid.
fn embed(m: &[bool], s: Shape3, offset: Shape3, big: Shape3) -> Vec<bool> {
    let mut out = vec![false; big.iter().product()];
    for d in 0..s[0] {
        for h in 0..s[1] {
            for w in 0..s[2] {
                let (bd, bh, bw) = (d + offset[0], h + offset[1], w + offset[2]);
                out[(bd * big[1] + bh) * big[2] + bw] = m[(d * s[1] + h) * s[2] + w];
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn dice_is_symmetric_and_bounded((s, a, b) in mask_pair(5)) {
        let (a, b) = (mask(a, s), mask(b, s));
        let ab = dice(&confusion(&a, &b).unwrap());
        prop_assert_eq!(ab, dice(&confusion(&b, &a).unwrap()));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&confusion(&a, &a).unwrap()), 1.0);
    }

    #[test]
    fn hd95_is_symmetric_and_zero_on_self((s, a, b) in mask_pair(5)) {
        let (a, b) = (mask(a, s), mask(b, s));
        prop_assert_eq!(hausdorff95(&a, &b).unwrap(), hausdorff95(&b, &a).unwrap());
        prop_assert_eq!(hausdorff95(&a, &a).unwrap().value(), Some(0.0));
    }

    #[test]
    fn hd95_is_translation_invariant((s, a, b) in mask_pair(4), shift in shape3(3)) {
        prop_assume!(a.contains(&true) && b.contains(&true));
        // surround by a margin so the grid edge does not create new boundary
        let big: Shape3 = std::array::from_fn(|k| s[k] + 6);
        let base: Shape3 = [1, 1, 1];
        let moved: Shape3 = std::array::from_fn(|k| 1 + shift[k] % 4);
        let h0 = hausdorff95(&mask(embed(&a, s, base, big), big), &mask(embed(&b, s, base, big), big)).unwrap().value().unwrap();
        let h1 = hausdorff95(&mask(embed(&a, s, moved, big), big), &mask(embed(&b, s, moved, big), big)).unwrap().value().unwrap();
        prop_assert!((h0 - h1).abs() < 1e-12, "{h0} vs {h1}");
    }

    #[test]
    fn regions_are_nested(l in labels(5)) {
        let [wt, tc, et] = [Region::WT, Region::TC, Region::ET].map(|r| region_extract(&l, r));
        for i in 0..l.data().len() {
            prop_assert!(!et.data()[i] || tc.data()[i]);
            prop_assert!(!tc.data()[i] || wt.data()[i]);
        }
    }

    #[test]
    fn kernel_size_is_odd(c in 1usize..5000) {
        let k = channel_kernel_size(c).unwrap();
        prop_assert!(k >= 1 && k % 2 == 1);
    }

    #[test]
    fn one_hot_rows_sum_to_one(l in labels(4)) {
        let t = one_hot(&[&l], 4).unwrap();
        let n = l.data().len();
        for v in 0..n {
            let s: f64 = (0..4).map(|c| t.data()[c * n + v]).sum();
            prop_assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn cosine_lr_decays_within_bounds(lr in 1e-5f64..1.0, ratio in 0.0f64..1.0, total in 1usize..500) {
        let mut prev = f64::INFINITY;
        for step in 0..=total {
            let v = cosine_lr(lr, ratio, step, total);
            prop_assert!(v <= prev + 1e-15);
            prop_assert!(v >= lr * ratio - 1e-15 && v <= lr + 1e-15);
            prev = v;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn soft_dice_loss_is_bounded(seed in any::<u64>(), l in labels(3)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [d, h, w] = l.shape();
        let logits = Var::constant(Tensor::randn(&[1, 4, d, h, w], 3.0, &mut rng));
        let loss = soft_dice_loss(&logits.softmax(1).unwrap(), &one_hot(&[&l], 4).unwrap(), 1).unwrap().value().item();
        prop_assert!((0.0..=1.0).contains(&loss), "{loss}");
    }

    #[test]
    fn normalize_is_idempotent(seed in any::<u64>(), s in shape3(5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Tensor::randn(&[4, s[0], s[1], s[2]], 2.0, &mut rng).map(|x| x + 0.5);
        let v = MultiModalVolume::new("n", images, None, [1.0; 3]).unwrap();
        let once = normalize(&v).unwrap();
        let twice = normalize(&once).unwrap();
        for (a, b) in once.images.data().iter().zip(twice.images.data()) {
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn tiles_cover_every_voxel(patch in shape3(6), extra in shape3(10), overlap in 0.0f64..0.95) {
        let shape: Shape3 = std::array::from_fn(|k| patch[k] + extra[k] - 1);
        let origins = tile_positions(shape, &SlidingSpec { patch, overlap }).unwrap();
        for o in &origins {
            for k in 0..3 {
                prop_assert!(o[k] + patch[k] <= shape[k]);
            }
        }
        prop_assert!(!coverage(shape, patch, &origins).contains(&0));
    }

    #[test]
    fn tile_order_does_not_change_the_average(seed in any::<u64>(), perm_seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [9, 8, 7];
        let images = Tensor::randn(&[4, 9, 8, 7], 1.0, &mut rng);
        let v = MultiModalVolume::new("t", images, None, [1.0; 3]).unwrap();
        let spec = SlidingSpec { patch: [4, 4, 4], overlap: 0.5 };
        let origins = tile_positions(shape, &spec).unwrap();
        let mut shuffled = origins.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(perm_seed));
        let a = accumulate_tiles(&v, &Squash, spec.patch, &origins).unwrap();
        let b = accumulate_tiles(&v, &Squash, spec.patch, &shuffled).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn swapping_a_pair_complements_the_gate(seed in any::<u64>(), c in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gp = GateParams::new(&mut Init { store: &mut store, rng: &mut rng }, "g", c).unwrap();
        let a = Var::constant(Tensor::randn(&[1, c, 2, 3, 2], 1.5, &mut rng));
        let b = Var::constant(Tensor::randn(&[1, c, 2, 3, 2], 1.5, &mut rng));
        let p = store.bind();
        let g = gp.gate(&p, &a, &b).unwrap();
        let f = blend(&g, &a, &b).unwrap();
        let swapped = blend(&GateMap(g.0.one_minus()), &b, &a).unwrap();
        for (x, y) in f.value().data().iter().zip(swapped.value().data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        // the gate sees only the sum of the pair, so it is itself order-free
        let reversed = gp.gate(&p, &b, &a).unwrap();
        prop_assert_eq!(g.tensor(), reversed.tensor());
    }

    #[test]
    fn value_sum_is_order_free(seed in any::<u64>(), perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<Var> = (0..4).map(|_| Var::constant(Tensor::randn(&[1, 3, 4], 1.0, &mut rng))).collect();
        let a = sum_values([&v[0], &v[1], &v[2], &v[3]]).unwrap();
        let b = sum_values([&v[perm[0]], &v[perm[1]], &v[perm[2]], &v[perm[3]]]).unwrap();
        for (x, y) in a.value().data().iter().zip(b.value().data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

/// A nonlinear but position-independent per-voxel model.
struct Squash;

impl PatchModel for Squash {
    fn classes(&self) -> usize {
        2
    }
    fn predict(&self, patch: &Tensor) -> Result<Tensor> {
        let s = patch.shape();
        let x = patch.narrow(1, 0, 1)?.map(|v| 1.0 / (1.0 + (-v).exp()));
        Tensor::concat(&[&x.map(|v| 1.0 - v), &x], 1).inspect(|t| {
            debug_assert_eq!(t.shape(), &[1, 2, s[2], s[3], s[4]]);
        })
    }
}
