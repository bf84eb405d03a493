use std::collections::HashMap;

use ndarray::{Array2, Array3, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scribseg::bap::{extract_boundary, fuse_pseudo_label, fusion_weights, loss_weighted};
use scribseg::data::{resize_nearest, standardize};
use scribseg::eval::dice_score;
use scribseg::model::checkpoint;
use scribseg::tas::{apply_jigsaw, infer_cutout_box, invert_jigsaw, permute_patches, sample_jigsaw};
use scribseg::train::TrainState;
use scribseg::{one_hot, HardLabelMap, Image, ProbMap, ScribbleMask, TrainConfig};

fn label_map(k: i32, max_side: usize) -> impl Strategy<Value = Array2<i32>> {
    (1..=max_side, 1..=max_side).prop_flat_map(move |(h, w)| {
        prop::collection::vec(0..k, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn jigsaw_round_trip(grid in 1usize..6, cell in 1usize..6, seed: u64) {
        let side = grid * cell;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Image::new(Array2::from_shape_fn((side, side), |(r, c)| (r * side + c) as f32)).unwrap();
        let spec = sample_jigsaw(grid, &mut rng).unwrap();
        let shuffled = apply_jigsaw(&img, &spec).unwrap();
        // A permutation of pixels: same multiset of values.
        let mut a: Vec<f32> = shuffled.pixels().iter().copied().collect();
        a.sort_by(f32::total_cmp);
        let mut b: Vec<f32> = img.pixels().iter().copied().collect();
        b.sort_by(f32::total_cmp);
        prop_assert_eq!(a, b);
        let back = permute_patches(shuffled.pixels().view(), &spec.inverse()).unwrap();
        prop_assert_eq!(&back, img.pixels());
        let probs = ProbMap::new(Array3::from_shape_fn((1, side, side), |_| 1.0f32)).unwrap();
        let inv = invert_jigsaw(&probs, &spec).unwrap();
        prop_assert_eq!(inv.probs(), probs.probs());
    }

    #[test]
    fn pairwise_fusion_weights(lj in 0.0f64..50.0, lk in 0.0f64..50.0) {
        let w = fusion_weights(lj, lk).unwrap();
        prop_assert!((w.w_j() + w.w_k() - 1.0).abs() < 1e-12);
        prop_assert!(w.w_j() >= 0.0 && w.w_k() >= 0.0);
        if lj + lk > 1e-9 {
            prop_assert!((w.w_j() - lk / (lj + lk)).abs() < 1e-12);
        }
        let general = loss_weighted(&[lj, lk]).unwrap();
        prop_assert_eq!(w.weights(), general.weights());
    }

    #[test]
    fn n_branch_fusion_weights(losses in prop::collection::vec(0.0f64..10.0, 1..6)) {
        let w = loss_weighted(&losses).unwrap();
        prop_assert!((w.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..losses.len() {
            for j in 0..losses.len() {
                if losses[i] < losses[j] {
                    prop_assert!(w.weights()[i] >= w.weights()[j]);
                }
            }
        }
    }

    #[test]
    fn fused_label_of_identical_branches_is_their_argmax(labels in label_map(4, 10), lj in 0.0f64..3.0, lk in 0.0f64..3.0) {
        let y = one_hot::<f64>(labels.view(), 4, None).unwrap();
        let fused = fuse_pseudo_label(&[y.view(), y.view()], &fusion_weights(lj, lk).unwrap()).unwrap();
        prop_assert_eq!(fused.labels(), &labels);
    }

    #[test]
    fn boundary_of_probabilities_lies_in_unit_interval(k in 1usize..4, h in 1usize..12, w in 1usize..12, seed: u64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Array3::from_shape_fn((k, h, w), |_| rng.random::<f64>());
        let b = extract_boundary(y.view(), 3).unwrap();
        prop_assert!(b.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Never above the map itself.
        prop_assert!(b.values().iter().zip(y.iter()).all(|(b, y)| b <= y));
    }

    #[test]
    fn one_hot_columns_sum_to_one_except_ignored(labels in label_map(5, 12)) {
        // Label 4 plays the ignore role for K = 4.
        let oh = one_hot::<f32>(labels.view(), 4, Some(4)).unwrap();
        for ((r, c), &l) in labels.indexed_iter() {
            let s: f32 = oh.slice(ndarray::s![.., r, c]).sum();
            prop_assert_eq!(s, if l == 4 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded(a in label_map(4, 10), seed: u64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = a.mapv(|v| if rng.random_bool(0.3) { rng.random_range(0..4) } else { v });
        let (ha, hb) = (HardLabelMap::new(a, 4).unwrap(), HardLabelMap::new(b, 4).unwrap());
        for class in 1..4 {
            let d = dice_score(&ha, &hb, class).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, dice_score(&hb, &ha, class).unwrap());
            prop_assert_eq!(dice_score(&ha, &ha, class).unwrap(), 1.0);
        }
    }

    #[test]
    fn nearest_resize_only_uses_existing_labels(labels in label_map(4, 16), size in 1usize..40) {
        let out = resize_nearest(labels.view(), size, size);
        prop_assert_eq!(out.dim(), (size, size));
        prop_assert!(out.iter().all(|v| labels.iter().any(|l| l == v)));
    }

    #[test]
    fn standardized_slices_have_zero_mean(v in prop::collection::vec(-1e3f32..1e3, 4..200)) {
        let n = v.len();
        let img = Image::new(Array2::from_shape_vec((1, n), v).unwrap()).unwrap();
        let z = standardize(&img);
        let z = z.pixels();
        let mean: f64 = z.iter().map(|&x| f64::from(x)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-4);
        prop_assert!(z.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn cutout_box_covers_every_foreground_scribble(labels in label_map(5, 20), margin in 0usize..4) {
        let s = ScribbleMask::new(labels, 4, 4).unwrap();
        match infer_cutout_box(&s, margin, 0.0) {
            Ok(b) => {
                prop_assert!(b.fits(s.dims().0, s.dims().1));
                for (r, c, class) in s.annotated() {
                    prop_assert!(class == 0 || b.contains(r, c));
                }
            }
            Err(_) => prop_assert!(s.annotated().all(|(_, _, class)| class == 0)),
        }
    }
}

#[test]
fn jigsaw_permutations_are_uniform() {
    // 2x2 grid: 24 permutations, 10^4 draws, every count within 3 sigma.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draws = 10_000;
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..draws {
        *counts.entry(sample_jigsaw(2, &mut rng).unwrap().perm().to_vec()).or_default() += 1;
    }
    assert_eq!(counts.len(), 24);
    let p = 1.0 / 24.0;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (perm, &c) in &counts {
        assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{perm:?}: {c}");
    }
}

#[test]
fn checkpoint_round_trip_preserves_everything() {
    let cfg = TrainConfig::default()
        .with_overrides(&["image_size=32".into(), "base_width=4".into(), "depth=2".into()])
        .unwrap();
    let mut state = TrainState::new(&cfg);
    state.epoch = 3;
    state.best_score = Some(0.5);
    let ck = state.checkpoint(&cfg, true);
    let bytes = checkpoint::encode(&ck).unwrap();
    let back = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.params, ck.params);
    assert_eq!(back.optimizer, ck.optimizer);
    assert_eq!((back.epoch, back.best_score), (3, Some(0.5)));
    assert_eq!(back.config_hash, cfg.hash());

    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 1;
    assert!(checkpoint::decode(&corrupt).is_err());
    assert!(checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn probabilities_keep_their_class_axis_through_inversion() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = sample_jigsaw(4, &mut rng).unwrap();
    let probs = Array3::from_shape_fn((3, 8, 8), |(ch, r, c)| if ch == 0 { (r * 8 + c) as f32 / 64.0 } else { 0.0 });
    let mut p = probs.clone();
    p.index_axis_mut(Axis(0), 1).assign(&probs.index_axis(Axis(0), 0).mapv(|v| 1.0 - v));
    let pm = ProbMap::new(p.clone()).unwrap();
    let round = invert_jigsaw(&ProbMap::new(scribseg::tas::permute_patches_channels(p.view(), &spec).unwrap()).unwrap(), &spec)
        .unwrap();
    assert_eq!(round.probs(), pm.probs());
}
