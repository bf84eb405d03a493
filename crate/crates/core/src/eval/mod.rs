//! Dice scoring, per-structure tables, ablation runs and overlays.

mod ablation;
pub mod reference;
mod render;
mod stats;

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use rayon::prelude::*;

pub use ablation::{run_ablation, AblationAxis, AblationRow, AblationTable};
pub use render::{render_overlay, CONTOUR_PALETTE, GT_COLOR};
pub use stats::{paired_t_test, TTest};

use crate::data::{preprocess, resize_bilinear, Case, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{checkpoint, stack_images, UNet};
use crate::types::{argmax_channels, HardLabelMap};
use crate::TrainConfig;

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("prediction {a:?} vs ground truth {b:?}")));
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)` for one class; 1.0 when both masks are empty.
pub fn dice_score(pred: &HardLabelMap, gt: &HardLabelMap, class_id: usize) -> Result<f64> {
    check_dims(pred.dims(), gt.dims())?;
    Ok(dice_from_counts(dice_counts(pred.labels().view(), gt.labels().view(), class_id)))
}

fn dice_counts<D: ndarray::Dimension>(
    pred: ndarray::ArrayView<'_, i32, D>,
    gt: ndarray::ArrayView<'_, i32, D>,
    class_id: usize,
) -> (usize, usize, usize) {
    let c = class_id as i32;
    let (mut inter, mut np, mut ng) = (0, 0, 0);
    Zip::from(pred).and(gt).for_each(|&p, &g| {
        let (a, b) = (p == c, g == c);
        inter += (a && b) as usize;
        np += a as usize;
        ng += b as usize;
    });
    (inter, np, ng)
}

fn dice_from_counts((inter, np, ng): (usize, usize, usize)) -> f64 {
    if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    }
}

/// Dice of one class over whole volumes (`slices x H x W`).
pub fn dice_volume(pred: &Array3<i32>, gt: &Array3<i32>, class_id: usize) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    Ok(dice_from_counts(dice_counts(pred.view(), gt.view(), class_id)))
}

/// Produces a label volume (`slices x H x W`) at the case's own resolution.
pub trait Predictor: Sync {
    fn predict_case(&self, case: &Case) -> Result<Array3<i32>>;
}

/// Returns the ground truth; scoring it yields perfect Dice.
pub struct GroundTruthPredictor;

impl Predictor for GroundTruthPredictor {
    fn predict_case(&self, case: &Case) -> Result<Array3<i32>> {
        case.ground_truth_volume()
    }
}

/// Runs the network on standardized, resized slices and maps the class
/// probabilities back to the original grid with bilinear interpolation before
/// taking the argmax. No post-processing.
pub struct NetworkPredictor<'a> {
    pub net: &'a UNet,
    pub image_size: usize,
}

impl NetworkPredictor<'_> {
    pub fn predict_slices(&self, case: &Case) -> Result<Vec<HardLabelMap>> {
        let inputs: Vec<_> = case.slices.iter().map(|s| preprocess(&s.image, self.image_size)).collect();
        let probs = self.net.forward(&stack_images(&inputs)?)?;
        let mut out = Vec::with_capacity(case.slices.len());
        for (s, p) in case.slices.iter().zip(probs.outer_iter()) {
            let (h, w) = s.image.dims();
            let k = p.dim().0;
            let mut full = Array3::<f32>::zeros((k, h, w));
            for ch in 0..k {
                full.index_axis_mut(Axis(0), ch).assign(&resize_bilinear(p.index_axis(Axis(0), ch), h, w));
            }
            out.push(argmax_channels(full.view()));
        }
        Ok(out)
    }
}

impl Predictor for NetworkPredictor<'_> {
    fn predict_case(&self, case: &Case) -> Result<Array3<i32>> {
        let slices = self.predict_slices(case)?;
        let views: Vec<ArrayView2<'_, i32>> = slices.iter().map(|s| s.labels().view()).collect();
        ndarray::stack(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))
    }
}

/// Display names of the foreground classes.
pub fn class_names(num_classes: usize) -> Vec<String> {
    if num_classes == 4 {
        vec!["RV".into(), "Myo".into(), "LV".into()]
    } else {
        (1..num_classes).map(|c| format!("class{c}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseScores {
    pub case_id: String,
    /// Dice per foreground class `1..K`.
    pub dice: Vec<f64>,
}

/// Per-structure mean ± std over cases; `avg` is the mean of the structure means.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceTable {
    pub class_names: Vec<String>,
    pub cases: Vec<CaseScores>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub avg: f64,
}

impl DiceTable {
    pub fn from_cases(class_names: Vec<String>, cases: Vec<CaseScores>) -> Self {
        let n_fg = class_names.len();
        let n = cases.len() as f64;
        let mut mean = vec![0.0; n_fg];
        let mut std = vec![0.0; n_fg];
        for c in 0..n_fg {
            let vals: Vec<f64> = cases.iter().map(|s| s.dice[c]).collect();
            if vals.is_empty() {
                mean[c] = f64::NAN;
                std[c] = f64::NAN;
                continue;
            }
            mean[c] = vals.iter().sum::<f64>() / n;
            std[c] = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
        }
        let avg = mean.iter().sum::<f64>() / n_fg as f64;
        Self { class_names, cases, mean, std, avg }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for name in &self.class_names {
            let _ = write!(s, "{name:>14}");
        }
        let _ = writeln!(s, "{:>8}", "Avg");
        for (m, sd) in self.mean.iter().zip(&self.std) {
            let _ = write!(s, "{:>14}", format!("{m:.3}±{sd:.2}"));
        }
        let _ = writeln!(s, "{:>8.3}", self.avg);
        s
    }

    /// One row per case followed by `mean`, `std` rows.
    pub fn to_csv(&self) -> String {
        let mut s = format!("case,{},avg\n", self.class_names.join(","));
        let row = |s: &mut String, label: &str, vals: &[f64]| {
            let avg = vals.iter().sum::<f64>() / vals.len() as f64;
            let cells: Vec<String> = vals.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "{label},{},{avg:.6}", cells.join(","));
        };
        for c in &self.cases {
            row(&mut s, &c.case_id, &c.dice);
        }
        row(&mut s, "mean", &self.mean);
        let cells: Vec<String> = self.std.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "std,{},", cells.join(","));
        s
    }
}

/// Volume-level Dice per case and structure, in parallel over cases.
pub fn evaluate_cases<P: Predictor>(predictor: &P, cases: &[Case], num_classes: usize) -> Result<DiceTable> {
    let scores = cases
        .par_iter()
        .map(|case| {
            let gt = case.ground_truth_volume()?;
            let pred = predictor.predict_case(case)?;
            let dice = (1..num_classes).map(|c| dice_volume(&pred, &gt, c)).collect::<Result<Vec<_>>>()?;
            Ok(CaseScores { case_id: case.case_id.clone(), dice })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DiceTable::from_cases(class_names(num_classes), scores))
}

/// Loads a checkpoint and scores it on one split of `dataset`.
pub fn evaluate_split(checkpoint_path: &Path, dataset: &Dataset, split: Split) -> Result<DiceTable> {
    let ck = checkpoint::load(checkpoint_path, None)?;
    let cfg = TrainConfig::from_toml_str(&ck.config)?;
    let net = ck.network()?;
    let cases = dataset.load_split(split)?;
    if let Some(c) = cases.iter().find(|c| !c.has_ground_truth()) {
        return Err(Error::Dataset(format!("case '{}' has no ground truth", c.case_id)));
    }
    evaluate_cases(&NetworkPredictor { net: &net, image_size: cfg.model.image_size }, &cases, ck.spec.num_classes)
}

/// Binary contour of `labels == class`: pixels of the class with a 4-neighbour
/// outside it (image borders count as outside).
pub fn contour(labels: ArrayView2<'_, i32>, class: i32) -> Array2<bool> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        if labels[[r, c]] != class {
            return false;
        }
        r == 0
            || c == 0
            || r + 1 == h
            || c + 1 == w
            || labels[[r - 1, c]] != class
            || labels[[r + 1, c]] != class
            || labels[[r, c - 1]] != class
            || labels[[r, c + 1]] != class
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CaseSlice;
    use crate::types::{Image, ScribbleMask};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn map(v: Array2<i32>) -> HardLabelMap {
        HardLabelMap::new(v, 4).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = map(Array2::from_shape_fn((4, 4), |(r, _)| if r < 2 { 1 } else { 0 }));
        assert_eq!(dice_score(&a, &a, 1).unwrap(), 1.0);
        let b = map(Array2::from_shape_fn((4, 4), |(r, _)| if r >= 2 { 1 } else { 0 }));
        assert_eq!(dice_score(&a, &b, 1).unwrap(), 0.0);
        // |P| = |G| = 8, overlap 4.
        let c = map(Array2::from_shape_fn((4, 4), |(r, _)| if (1..3).contains(&r) { 1 } else { 0 }));
        assert_eq!(dice_score(&a, &c, 1).unwrap(), 0.5);
        assert_eq!(dice_score(&a, &c, 3).unwrap(), 1.0);
        assert!(dice_score(&a, &map(Array2::zeros((3, 4))), 1).is_err());
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_permutation_invariant(
            p in proptest::collection::vec(0i32..4, 36),
            g in proptest::collection::vec(0i32..4, 36),
            shift in 0usize..36,
        ) {
            let pm = map(Array2::from_shape_vec((6, 6), p.clone()).unwrap());
            let gm = map(Array2::from_shape_vec((6, 6), g.clone()).unwrap());
            let rot = |v: &Vec<i32>| {
                let mut v = v.clone();
                v.rotate_left(shift);
                map(Array2::from_shape_vec((6, 6), v).unwrap())
            };
            for c in 0..4 {
                let d = dice_score(&pm, &gm, c).unwrap();
                prop_assert_eq!(d, dice_score(&gm, &pm, c).unwrap());
                prop_assert_eq!(d, dice_score(&rot(&p), &rot(&g), c).unwrap());
                prop_assert!((0.0..=1.0).contains(&d));
            }
        }
    }

    fn case(id: &str, gt: Array2<i32>) -> Case {
        let (h, w) = gt.dim();
        Case {
            case_id: id.into(),
            phase: None,
            slices: vec![CaseSlice {
                image: Image::zeros(h, w),
                scribble: ScribbleMask::empty(h, w, 4, 4),
                ground_truth: Some(map(gt)),
            }],
        }
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let cases: Vec<Case> = (0..3)
            .map(|i| case(&format!("c{i}"), Array2::from_shape_fn((8, 8), |(r, c)| ((r + c + i) % 4) as i32)))
            .collect();
        let t = evaluate_cases(&GroundTruthPredictor, &cases, 4).unwrap();
        assert_eq!(t.mean, vec![1.0; 3]);
        assert_eq!(t.std, vec![0.0; 3]);
        assert_eq!(t.avg, 1.0);
        assert!(t.to_text().contains("1.000±0.00"));
        assert!(t.to_csv().starts_with("case,RV,Myo,LV,avg\n"));
    }

    #[test]
    fn avg_is_mean_of_structure_means() {
        let t = DiceTable::from_cases(
            class_names(4),
            vec![
                CaseScores { case_id: "a".into(), dice: vec![0.9, 0.8, 0.7] },
                CaseScores { case_id: "b".into(), dice: vec![0.7, 0.6, 0.9] },
            ],
        );
        assert!((t.avg - (0.8 + 0.7 + 0.8) / 3.0).abs() < 1e-12);
        assert!((t.std[0] - (0.02f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn contour_of_square() {
        let mut l = Array2::zeros((6, 6));
        l.slice_mut(ndarray::s![1..5, 1..5]).fill(2);
        let c = contour(l.view(), 2);
        assert_eq!(c.iter().filter(|&&b| b).count(), 12);
        assert!(!c[[2, 2]]);
    }
}
