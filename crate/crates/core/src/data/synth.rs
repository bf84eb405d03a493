//! Synthetic short-axis-like slices: a bright disk (LV, label 3) inside a dark
//! ring (Myo, label 2), a crescent beside the ring (RV, label 1), textured
//! background (label 0). Scribbles are thin curves drawn inside each region.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::SplitManifest;
use super::volume::{write_label_volume, write_volume};
use crate::error::Result;

pub const RV: i32 = 1;
pub const MYO: i32 = 2;
pub const LV: i32 = 3;
const UNLABELED: i32 = 4;
/// Upper bound on the annotated fraction of each slice.
pub const MAX_ANNOTATED_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthOptions {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub slices_per_case: usize,
    pub size: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { n_train: 20, n_val: 5, n_test: 5, slices_per_case: 4, size: 64 }
    }
}

/// Volumes indexed `[x, y, z]`.
#[derive(Debug, Clone)]
pub struct SynthCase {
    pub image: Array3<f32>,
    pub ground_truth: Array3<i32>,
    pub scribble: Array3<i32>,
}

struct Anatomy {
    cy: f64,
    cx: f64,
    r_lv: f64,
    r_outer: f64,
    /// Unit vector from the LV centre towards the RV.
    dir: (f64, f64),
    rv_a: f64,
    rv_b: f64,
    rv_center: (f64, f64),
}

impl Anatomy {
    fn sample(rng: &mut ChaCha8Rng, size: f64, scale: f64) -> Self {
        let cy = size * (0.5 + rng.random_range(-0.06..0.06));
        let cx = size * (0.52 + rng.random_range(-0.06..0.06));
        let r_lv = size * rng.random_range(0.11..0.15) * scale;
        let r_outer = r_lv + size * rng.random_range(0.05..0.07) * scale.sqrt();
        let phi = PI + rng.random_range(-0.5..0.5);
        let dir = (phi.sin(), phi.cos());
        let rv_a = size * rng.random_range(0.10..0.14) * scale;
        let rv_b = size * rng.random_range(0.18..0.24) * scale;
        let d = r_outer + 0.4 * rv_a;
        Self { cy, cx, r_lv, r_outer, dir, rv_a, rv_b, rv_center: (cy + d * dir.0, cx + d * dir.1) }
    }

    fn label(&self, y: f64, x: f64) -> i32 {
        let r = ((y - self.cy).powi(2) + (x - self.cx).powi(2)).sqrt();
        if r <= self.r_lv {
            return LV;
        }
        if r <= self.r_outer {
            return MYO;
        }
        let (dy, dx) = (y - self.rv_center.0, x - self.rv_center.1);
        let along = dy * self.dir.0 + dx * self.dir.1;
        let across = -dy * self.dir.1 + dx * self.dir.0;
        if r > self.r_outer + 1.0 && (along / self.rv_a).powi(2) + (across / self.rv_b).powi(2) <= 1.0 {
            return RV;
        }
        0
    }
}

fn arc(cy: f64, cx: f64, radius: f64, start: f64, span: f64) -> Vec<(f64, f64)> {
    let n = ((radius * span).abs() * 3.0).ceil().max(2.0) as usize;
    (0..=n)
        .map(|i| {
            let t = start + span * i as f64 / n as f64;
            (cy + radius * t.sin(), cx + radius * t.cos())
        })
        .collect()
}

fn segment(a: (f64, f64), b: (f64, f64)) -> Vec<(f64, f64)> {
    let len = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let n = (len * 3.0).ceil().max(2.0) as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
        })
        .collect()
}

/// Paints `curve` with the given width (1 or 2 px), keeping only pixels whose
/// ground-truth class is `class` and stopping once `budget` pixels are used.
fn paint(
    scribble: &mut Array2<i32>,
    gt: &Array2<i32>,
    curve: &[(f64, f64)],
    width: usize,
    class: i32,
    budget: &mut usize,
) {
    let (h, w) = gt.dim();
    for &(y, x) in curve {
        let (r0, c0) = (y.round() as isize, x.round() as isize);
        let offsets: &[(isize, isize)] = if width >= 2 { &[(0, 0), (0, 1), (1, 0)] } else { &[(0, 0)] };
        for &(dr, dc) in offsets {
            let (r, c) = (r0 + dr, c0 + dc);
            if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                continue;
            }
            let (r, c) = (r as usize, c as usize);
            if gt[[r, c]] != class || scribble[[r, c]] != UNLABELED {
                continue;
            }
            if *budget == 0 {
                return;
            }
            scribble[[r, c]] = class;
            *budget -= 1;
        }
    }
}

fn synth_slice(rng: &mut ChaCha8Rng, size: usize, scale: f64, gain: f64) -> (Array2<f32>, Array2<i32>, Array2<i32>) {
    let s = size as f64;
    let anat = Anatomy::sample(rng, s, scale);
    let gt = Array2::from_shape_fn((size, size), |(r, c)| anat.label(r as f64 + 0.5, c as f64 + 0.5));

    let noise = Normal::new(0.0, 0.06).expect("valid std");
    let (fy, fx, py, px) = (
        rng.random_range(0.15..0.4),
        rng.random_range(0.15..0.4),
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
    );
    let tilt = rng.random_range(-0.15..0.15);
    let mut image = Array2::<f32>::zeros((size, size));
    for ((r, c), v) in image.indexed_iter_mut() {
        let base = match gt[[r, c]] {
            LV => 0.85,
            RV => 0.7,
            MYO => 0.15,
            _ => 0.35 + 0.1 * (fy * r as f64 + py).sin() * (fx * c as f64 + px).sin(),
        };
        let bias = 1.0 + tilt * (c as f64 / s - 0.5);
        *v = (gain * (base * bias + noise.sample(rng))) as f32;
    }

    let mut scribble = Array2::from_elem((size, size), UNLABELED);
    let mut budget = (MAX_ANNOTATED_FRACTION * (size * size) as f64).floor() as usize;
    let start = |rng: &mut ChaCha8Rng| rng.random_range(0.0..2.0 * PI);
    let lv = arc(anat.cy, anat.cx, 0.45 * anat.r_lv, start(rng), rng.random_range(PI..1.6 * PI));
    paint(&mut scribble, &gt, &lv, 2, LV, &mut budget);
    let myo_r = 0.5 * (anat.r_lv + anat.r_outer);
    let myo = arc(anat.cy, anat.cx, myo_r, start(rng), rng.random_range(PI..1.5 * PI));
    paint(&mut scribble, &gt, &myo, 1, MYO, &mut budget);
    let (d0, d1) = anat.dir;
    let mid = (anat.rv_center.0 + 0.3 * anat.rv_a * d0, anat.rv_center.1 + 0.3 * anat.rv_a * d1);
    let half = 0.6 * anat.rv_b;
    let rv = segment((mid.0 - half * d1, mid.1 + half * d0), (mid.0 + half * d1, mid.1 - half * d0));
    paint(&mut scribble, &gt, &rv, 2, RV, &mut budget);
    let bg_r = anat.r_outer + 2.0 * anat.rv_a + 4.0;
    let bg = arc(anat.cy, anat.cx, bg_r, start(rng), rng.random_range(0.8 * PI..1.3 * PI));
    paint(&mut scribble, &gt, &bg, 1, 0, &mut budget);
    (image, gt, scribble)
}

/// One synthetic case; `slices` run from base (largest) to apex.
pub fn synth_case(rng: &mut ChaCha8Rng, size: usize, slices: usize) -> SynthCase {
    let gain = rng.random_range(0.6..1.6);
    let mut image = Array3::<f32>::zeros((size, size, slices));
    let mut ground_truth = Array3::<i32>::zeros((size, size, slices));
    let mut scribble = Array3::<i32>::zeros((size, size, slices));
    for z in 0..slices {
        let scale = 1.0 - 0.3 * z as f64 / (slices.max(2) - 1) as f64;
        let (img, gt, scr) = synth_slice(rng, size, scale, gain);
        image.index_axis_mut(Axis(2), z).assign(&img);
        ground_truth.index_axis_mut(Axis(2), z).assign(&gt);
        scribble.index_axis_mut(Axis(2), z).assign(&scr);
    }
    SynthCase { image, ground_truth, scribble }
}

/// Writes a synthetic dataset under `root` and returns its manifest. Output is
/// byte-identical for the same options and seed.
pub fn synth_generate(root: &Path, opts: &SynthOptions, seed: u64) -> Result<SplitManifest> {
    let total = opts.n_train + opts.n_val + opts.n_test;
    let ids: Vec<String> = (0..total).map(|i| format!("case_{i:03}")).collect();
    for (i, id) in ids.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let case = synth_case(&mut rng, opts.size, opts.slices_per_case);
        let dir = root.join(id);
        std::fs::create_dir_all(&dir)?;
        write_volume(&dir.join("image.nii.gz"), &case.image)?;
        write_label_volume(&dir.join("scribble.nii.gz"), &case.scribble)?;
        write_label_volume(&dir.join("gt.nii.gz"), &case.ground_truth)?;
    }
    let manifest = SplitManifest::new(
        ids[..opts.n_train].to_vec(),
        ids[opts.n_train..opts.n_train + opts.n_val].to_vec(),
        ids[opts.n_train + opts.n_val..].to_vec(),
    )?;
    manifest.write_dir(&root.join("splits"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scribbles_inside_their_class_and_sparse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let case = synth_case(&mut rng, 64, 4);
            for z in 0..4 {
                let scr = case.scribble.index_axis(Axis(2), z);
                let gt = case.ground_truth.index_axis(Axis(2), z);
                let mut annotated = 0;
                let mut seen = [false; 4];
                for (s, g) in scr.iter().zip(gt.iter()) {
                    if *s != UNLABELED {
                        assert_eq!(s, g);
                        annotated += 1;
                        seen[*s as usize] = true;
                    }
                }
                assert!(annotated as f64 <= MAX_ANNOTATED_FRACTION * 4096.0);
                assert!(seen.iter().all(|&b| b), "every class scribbled: {seen:?}");
                for class in 0..4 {
                    assert!(gt.iter().any(|&g| g == class));
                }
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let opts = SynthOptions { n_train: 2, n_val: 1, n_test: 1, slices_per_case: 2, size: 32 };
        synth_generate(a.path(), &opts, 5).unwrap();
        synth_generate(b.path(), &opts, 5).unwrap();
        for id in ["case_000", "case_003"] {
            for f in ["image.nii.gz", "scribble.nii.gz", "gt.nii.gz"] {
                let x = std::fs::read(a.path().join(id).join(f)).unwrap();
                let y = std::fs::read(b.path().join(id).join(f)).unwrap();
                assert_eq!(x, y, "{id}/{f}");
            }
        }
        assert_eq!(
            std::fs::read(a.path().join("splits/val.txt")).unwrap(),
            b"case_002\n".to_vec()
        );
    }
}
