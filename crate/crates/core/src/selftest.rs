//! Fast invariant checks that need no dataset. Each check has its own small
//! reference computation.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bap::{boundary_loss_grad, dice_loss_grad, extract_boundary, fuse_pseudo_label, fusion_weights};
use crate::config::{BoundaryReduction, CeReduction, TrainConfig};
use crate::data::{resize_nearest, standardize, synth_case};
use crate::eval::{dice_score, evaluate_cases, GroundTruthPredictor};
use crate::model::{checkpoint, Checkpoint, NetworkSpec, UNet};
use crate::tas::{apply_jigsaw, partial_cross_entropy_grad, permute_patches, sample_jigsaw};
use crate::train::total_loss;
use crate::types::{HardLabelMap, Image, ScribbleMask};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub outcome: std::result::Result<(), String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }
}

type Check = fn(&mut ChaCha8Rng) -> std::result::Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn random_probs(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> Array3<f64> {
    let mut a = Array3::from_shape_fn((k, h, w), |_| rng.random_range(0.05..1.0f64));
    for mut col in a.lanes_mut(Axis(0)) {
        let s = col.sum();
        col.mapv_inplace(|v| v / s);
    }
    a
}

fn jigsaw_inverse(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    for _ in 0..100 {
        let grid = [2, 3, 4, 7][rng.random_range(0..4)];
        let side = grid * rng.random_range(1..6);
        let img = Image::new(Array2::from_shape_fn((side, side), |_| rng.random::<f32>())).map_err(err)?;
        let spec = sample_jigsaw(grid, rng).map_err(err)?;
        let shuffled = apply_jigsaw(&img, &spec).map_err(err)?;
        let back = permute_patches(shuffled.pixels().view(), &spec.inverse()).map_err(err)?;
        ensure(back == *img.pixels(), || format!("grid {grid}: inverse is not exact"))?;
    }
    Ok(())
}

fn fusion_matches_scalar_loop(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    for _ in 0..50 {
        let (yj, yk) = (random_probs(rng, 4, 8, 8), random_probs(rng, 4, 8, 8));
        let (lj, lk) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
        let w = fusion_weights(lj, lk).map_err(err)?;
        ensure((w.w_j() + w.w_k() - 1.0).abs() < 1e-6, || "weights do not sum to one".into())?;
        ensure((lj < lk) == (w.w_j() > w.w_k()) || lj == lk, || "smaller loss must weigh more".into())?;
        let fused = fuse_pseudo_label(&[yj.view(), yk.view()], &w).map_err(err)?;
        let (wj, wk) = (lk / (lj + lk), lj / (lj + lk));
        for r in 0..8 {
            for c in 0..8 {
                let mut best = (0, f64::NEG_INFINITY);
                for ch in 0..4 {
                    let v = wj * yj[[ch, r, c]] + wk * yk[[ch, r, c]];
                    if v > best.1 {
                        best = (ch, v);
                    }
                }
                ensure(fused.labels()[[r, c]] == best.0 as i32, || format!("pixel ({r},{c}) differs"))?;
            }
        }
    }
    Ok(())
}

fn boundary_is_mask_minus_erosion(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    for _ in 0..50 {
        let (h, w) = (rng.random_range(3..12), rng.random_range(3..12));
        let m = Array3::from_shape_fn((1, h, w), |_| if rng.random_bool(0.6) { 1.0f64 } else { 0.0 });
        let b = extract_boundary(m.view(), 3).map_err(err)?;
        for r in 0..h {
            for c in 0..w {
                let mut eroded = 1.0f64;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let rr = (r as i64 + dr).clamp(0, h as i64 - 1) as usize;
                        let cc = (c as i64 + dc).clamp(0, w as i64 - 1) as usize;
                        eroded = eroded.min(m[[0, rr, cc]]);
                    }
                }
                ensure(b.values()[[0, r, c]] == m[[0, r, c]] - eroded, || format!("pixel ({r},{c})"))?;
            }
        }
    }
    let flat = Array3::from_elem((2, 5, 5), 0.4f64);
    ensure(extract_boundary(flat.view(), 3).map_err(err)?.values().iter().all(|&v| v == 0.0), || {
        "constant map has a boundary".into()
    })
}

fn max_rel_err(analytic: &Array3<f64>, f: &dyn Fn(&Array3<f64>) -> f64, x: &Array3<f64>) -> f64 {
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (idx, &a) in analytic.indexed_iter() {
        let mut p = x.clone();
        p[idx] += h;
        let mut m = x.clone();
        m[idx] -= h;
        let fd = (f(&p) - f(&m)) / (2.0 * h);
        worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-3));
    }
    worst
}

fn loss_gradients(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    for _ in 0..5 {
        let x = random_probs(rng, 3, 4, 5);
        let labels = Array2::from_shape_fn((4, 5), |_| if rng.random_bool(0.4) { rng.random_range(0..3) } else { 3 });
        let scribble = ScribbleMask::new(labels, 3, 3).map_err(err)?;
        let (_, g) = partial_cross_entropy_grad(x.view(), &scribble, CeReduction::Mean).map_err(err)?;
        let f = |p: &Array3<f64>| partial_cross_entropy_grad(p.view(), &scribble, CeReduction::Mean).unwrap().0;
        let e = max_rel_err(&g, &f, &x);
        ensure(e < 1e-4, || format!("cross-entropy relative error {e:e}"))?;

        let target = random_probs(rng, 3, 4, 5);
        let (_, g) = dice_loss_grad(x.view(), target.view(), 1e-5).map_err(err)?;
        let f = |p: &Array3<f64>| dice_loss_grad(p.view(), target.view(), 1e-5).unwrap().0;
        let e = max_rel_err(&g, &f, &x);
        ensure(e < 1e-4, || format!("Dice relative error {e:e}"))?;

        let bpl = Array3::from_shape_fn((3, 4, 5), |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        for red in [BoundaryReduction::Joint, BoundaryReduction::PerClass] {
            let (_, g) = boundary_loss_grad(&[x.view()], bpl.view(), 1e-5, red).map_err(err)?;
            let f = |p: &Array3<f64>| boundary_loss_grad(&[p.view()], bpl.view(), 1e-5, red).unwrap().0;
            let e = max_rel_err(&g[0], &f, &x);
            ensure(e < 1e-4, || format!("boundary relative error {e:e}"))?;
        }
    }
    Ok(())
}

fn schedule_and_total(_: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    let cfg = TrainConfig::default();
    for e in 0..50 {
        let want = 1e-4 * 0.95f64.powi(e);
        ensure((cfg.lr_at_epoch(e as usize) - want).abs() < 1e-12, || format!("lr at epoch {e}"))?;
    }
    let t = total_loss(1.0, 1.0, 1.0, &cfg.loss).map_err(err)?;
    ensure((t - 1.4).abs() < 1e-12, || format!("total {t}"))?;
    ensure(total_loss(1.0, f64::NAN, 0.0, &cfg.loss).is_err(), || "NaN accepted".into())
}

fn dice_conventions(_: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    let a = HardLabelMap::new(Array2::from_shape_fn((4, 4), |(r, _)| (r < 2) as i32), 4).map_err(err)?;
    let b = HardLabelMap::new(Array2::from_shape_fn((4, 4), |(r, _)| (1..3).contains(&r) as i32), 4).map_err(err)?;
    ensure(dice_score(&a, &a, 1).map_err(err)? == 1.0, || "self Dice".into())?;
    ensure(dice_score(&a, &b, 1).map_err(err)? == 0.5, || "half overlap".into())?;
    ensure(dice_score(&a, &b, 2).map_err(err)? == 1.0, || "both empty".into())
}

fn preprocessing(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    let img = Image::new(Array2::from_shape_fn((20, 30), |_| rng.random_range(-5.0..5.0f32))).map_err(err)?;
    let z = standardize(&img);
    let n = z.pixels().len() as f64;
    let mean = z.pixels().iter().map(|&v| v as f64).sum::<f64>() / n;
    let sd = (z.pixels().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    ensure(mean.abs() < 1e-5 && (sd - 1.0).abs() < 1e-3, || format!("mean {mean} std {sd}"))?;
    let labels = Array2::from_shape_fn((17, 23), |_| [0, 1, 2, 4][rng.random_range(0..4)]);
    let r = resize_nearest(labels.view(), 40, 11);
    ensure(r.iter().all(|v| [0, 1, 2, 4].contains(v)), || "nearest resize invented a label".into())
}

fn network_contracts(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    let spec = NetworkSpec { in_channels: 1, num_classes: 4, base_width: 2, depth: 2 };
    let net = UNet::new(spec, rng.random());
    let x = ndarray::Array4::from_shape_fn((2, 1, 8, 8), |_| rng.random_range(-1.0..1.0f32));
    let y = net.forward(&x).map_err(err)?;
    ensure(y.sum_axis(Axis(1)).iter().all(|s| (s - 1.0).abs() < 1e-5), || "softmax not normalized".into())?;
    let one = net.forward(&x.slice(ndarray::s![1..2, .., .., ..]).to_owned()).map_err(err)?;
    ensure(one.index_axis(Axis(0), 0) == y.index_axis(Axis(0), 1), || "batching changed outputs".into())?;
    let ck = Checkpoint {
        spec,
        params: net.params().clone(),
        optimizer: None,
        epoch: 0,
        best_score: None,
        config: String::new(),
        config_hash: String::new(),
    };
    let back = checkpoint::decode(&checkpoint::encode(&ck).map_err(err)?).map_err(err)?;
    ensure(back == ck, || "checkpoint round trip".into())
}

fn synthetic_data(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    let case = synth_case(rng, 48, 3);
    for z in 0..3 {
        let s = case.scribble.index_axis(Axis(2), z);
        let g = case.ground_truth.index_axis(Axis(2), z);
        let n = s.iter().filter(|&&v| v != 4).count();
        ensure(n as f64 <= 0.05 * s.len() as f64, || format!("slice {z}: {n} annotated"))?;
        ensure(s.iter().zip(g.iter()).all(|(a, b)| *a == 4 || a == b), || "scribble outside its class".into())?;
    }
    let cases: Vec<crate::data::Case> = vec![crate::data::Case {
        case_id: "synthetic".into(),
        phase: None,
        slices: (0..3)
            .map(|z| crate::data::CaseSlice {
                image: Image::new(case.image.index_axis(Axis(2), z).to_owned()).unwrap(),
                scribble: ScribbleMask::new(case.scribble.index_axis(Axis(2), z).to_owned(), 4, 4).unwrap(),
                ground_truth: Some(HardLabelMap::new(case.ground_truth.index_axis(Axis(2), z).to_owned(), 4).unwrap()),
            })
            .collect(),
    }];
    let t = evaluate_cases(&GroundTruthPredictor, &cases, 4).map_err(err)?;
    ensure(t.mean.iter().all(|&m| m == 1.0) && t.avg == 1.0, || "ground truth against itself".into())
}

const CHECKS: &[(&str, Check)] = &[
    ("jigsaw inverse is exact", jigsaw_inverse),
    ("fusion matches per-pixel loop", fusion_matches_scalar_loop),
    ("boundary equals mask minus erosion", boundary_is_mask_minus_erosion),
    ("loss gradients match finite differences", loss_gradients),
    ("lr schedule and loss weighting", schedule_and_total),
    ("Dice conventions", dice_conventions),
    ("z-score and nearest resize", preprocessing),
    ("network softmax, batching, checkpoint", network_contracts),
    ("synthetic scribbles and GT scoring", synthetic_data),
];

/// Runs every check with a fixed seed.
pub fn run_selftest() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed + i as u64);
            CheckResult { name, outcome: check(&mut rng) }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn selftest_passes() {
        for r in super::run_selftest() {
            assert!(r.passed(), "{}: {:?}", r.name, r.outcome);
        }
    }
}
