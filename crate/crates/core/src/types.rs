//! Domain types shared by the augmentation, loss, model and evaluation code.
//!
//! Arrays are channel-first: a probability map is `K x H x W`, images and
//! label maps are `H x W`. All types are plain values; operations return new
//! values instead of mutating their inputs.

use std::fmt::{Debug, Display};

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, ScalarOperand};
use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating point type usable by the loss code. Training runs in `f32`;
/// gradient checks run the same code in `f64`.
pub trait Real:
    Float + FromPrimitive + ScalarOperand + Debug + Display + Default + Send + Sync + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits in float type")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Single-channel 2-D image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array2<f32>,
}

impl Image {
    pub fn new(pixels: Array2<f32>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::ShapeMismatch("image must be non-empty".into()));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite pixel {bad}")));
        }
        Ok(Self {
            pixels: pixels.as_standard_layout().into_owned(),
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            pixels: Array2::zeros((height, width)),
        }
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f32> {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

/// Sparse per-pixel labels. Pixels equal to `ignore_label` are unannotated.
#[derive(Debug, Clone, PartialEq)]
pub struct ScribbleMask {
    labels: Array2<i32>,
    num_classes: usize,
    ignore_label: i32,
}

impl ScribbleMask {
    pub fn new(labels: Array2<i32>, num_classes: usize, ignore_label: i32) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidValue("num_classes must be positive".into()));
        }
        if ignore_label >= 0 && (ignore_label as usize) < num_classes {
            return Err(Error::InvalidValue(format!(
                "ignore label {ignore_label} collides with class range [0, {num_classes})"
            )));
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != ignore_label && (l < 0 || l as usize >= num_classes))
        {
            return Err(Error::LabelOutOfRange {
                label: bad as i64,
                num_classes,
            });
        }
        Ok(Self {
            labels: labels.as_standard_layout().into_owned(),
            num_classes,
            ignore_label,
        })
    }

    /// A mask with no annotated pixel.
    pub fn empty(height: usize, width: usize, num_classes: usize, ignore_label: i32) -> Self {
        Self {
            labels: Array2::from_elem((height, width), ignore_label),
            num_classes,
            ignore_label,
        }
    }

    pub fn labels(&self) -> &Array2<i32> {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ignore_label(&self) -> i32 {
        self.ignore_label
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn is_annotated(&self, row: usize, col: usize) -> bool {
        self.labels[[row, col]] != self.ignore_label
    }

    /// Annotated pixels as `(row, col, class)`.
    pub fn annotated(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.labels
            .indexed_iter()
            .filter(move |(_, &l)| l != self.ignore_label)
            .map(|((r, c), &l)| (r, c, l as usize))
    }

    pub fn annotated_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != self.ignore_label).count()
    }
}

/// Per-class probability field, `K x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<F = f32> {
    probs: Array3<F>,
}

impl<F: Real> ProbMap<F> {
    /// Checks entries lie in `[0, 1]` and every pixel sums to one within `1e-5`.
    pub fn new(probs: Array3<F>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::ShapeMismatch("probability map must be non-empty".into()));
        }
        if let Some(bad) = probs
            .iter()
            .find(|&&p| !(p >= F::zero() && p <= F::one()))
        {
            return Err(Error::InvalidValue(format!("probability {bad} outside [0, 1]")));
        }
        let tol = F::lit(1e-5);
        let sums = probs.sum_axis(Axis(0));
        if let Some(bad) = sums.iter().find(|&&s| (s - F::one()).abs() > tol) {
            return Err(Error::InvalidValue(format!("pixel probabilities sum to {bad}")));
        }
        Ok(Self {
            probs: probs.as_standard_layout().into_owned(),
        })
    }

    /// Wraps an array without validation; used for network outputs, which are
    /// softmax-normalized by construction.
    pub(crate) fn from_softmax(probs: Array3<F>) -> Self {
        Self { probs }
    }

    /// Uniform distribution over `num_classes` at every pixel.
    pub fn uniform(num_classes: usize, height: usize, width: usize) -> Self {
        let v = F::one() / F::from_usize(num_classes).unwrap();
        Self {
            probs: Array3::from_elem((num_classes, height, width), v),
        }
    }

    pub fn probs(&self) -> &Array3<F> {
        &self.probs
    }

    pub fn view(&self) -> ArrayView3<'_, F> {
        self.probs.view()
    }

    pub fn into_array(self) -> Array3<F> {
        self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.dim().0
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.probs.dim();
        (h, w)
    }

    /// Per-pixel argmax, ties to the lowest class index.
    pub fn argmax(&self) -> HardLabelMap {
        argmax_channels(self.probs.view())
    }
}

pub(crate) fn argmax_channels<F: Real>(probs: ArrayView3<'_, F>) -> HardLabelMap {
    let (k, h, w) = probs.dim();
    let mut labels = Array2::<i32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut best = 0;
            let mut best_v = probs[[0, r, c]];
            for ch in 1..k {
                let v = probs[[ch, r, c]];
                if v > best_v {
                    best = ch;
                    best_v = v;
                }
            }
            labels[[r, c]] = best as i32;
        }
    }
    HardLabelMap {
        labels,
        num_classes: k,
    }
}

/// Grid geometry plus patch permutation. Output patch `p` of the jigsaw
/// takes input patch `perm[p]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JigsawSpec {
    grid_rows: usize,
    grid_cols: usize,
    perm: Vec<usize>,
}

impl JigsawSpec {
    pub fn new(grid_rows: usize, grid_cols: usize, perm: Vec<usize>) -> Result<Self> {
        if grid_rows == 0 || grid_cols == 0 {
            return Err(Error::InvalidValue("jigsaw grid must be at least 1x1".into()));
        }
        let n = grid_rows * grid_cols;
        if perm.len() != n {
            return Err(Error::InvalidValue(format!(
                "permutation has {} entries, grid has {n} patches",
                perm.len()
            )));
        }
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || seen[p] {
                return Err(Error::InvalidValue(format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        Ok(Self {
            grid_rows,
            grid_cols,
            perm,
        })
    }

    pub fn identity(grid: usize) -> Self {
        Self {
            grid_rows: grid,
            grid_cols: grid,
            perm: (0..grid * grid).collect(),
        }
    }

    pub fn grid_rows(&self) -> usize {
        self.grid_rows
    }

    pub fn grid_cols(&self) -> usize {
        self.grid_cols
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    /// The permutation that undoes this one.
    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.perm.len()];
        for (dst, &src) in self.perm.iter().enumerate() {
            inv[src] = dst;
        }
        Self {
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            perm: inv,
        }
    }
}

/// Inclusive axis-aligned box plus the value written into it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoutBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
    pub fill_value: f32,
}

impl CutoutBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_min..=self.row_max).contains(&row) && (self.col_min..=self.col_max).contains(&col)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.row_min <= self.row_max
            && self.row_max < height
            && self.col_min <= self.col_max
            && self.col_max < width
    }
}

/// Dense labels in `[0, K)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardLabelMap {
    labels: Array2<i32>,
    num_classes: usize,
}

impl HardLabelMap {
    pub fn new(labels: Array2<i32>, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l < 0 || l as usize >= num_classes)
        {
            return Err(Error::LabelOutOfRange {
                label: bad as i64,
                num_classes,
            });
        }
        Ok(Self {
            labels: labels.as_standard_layout().into_owned(),
            num_classes,
        })
    }

    pub fn labels(&self) -> &Array2<i32> {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn one_hot<F: Real>(&self) -> Array3<F> {
        one_hot(self.labels.view(), self.num_classes, None).expect("labels validated on construction")
    }
}

/// Per-class soft boundary field, `K x H x W`, entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMap<F = f32> {
    values: Array3<F>,
}

impl<F: Real> BoundaryMap<F> {
    pub(crate) fn from_array(values: Array3<F>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Array3<F> {
        &self.values
    }

    pub fn view(&self) -> ArrayView3<'_, F> {
        self.values.view()
    }
}

/// Per-branch pseudo-label fusion weights; nonnegative, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    weights: Vec<f64>,
}

impl FusionWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidValue(format!("invalid fusion weights {weights:?}")));
        }
        Ok(Self { weights })
    }

    pub fn pair(w_j: f64, w_k: f64) -> Result<Self> {
        Self::new(vec![w_j, w_k])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn w_j(&self) -> f64 {
        self.weights[0]
    }

    pub fn w_k(&self) -> f64 {
        self.weights[self.weights.len() - 1]
    }
}

/// One-hot expansion of a label map. Pixels equal to `ignore_label` become
/// all-zero columns.
pub fn one_hot<F: Real>(
    labels: ArrayView2<'_, i32>,
    num_classes: usize,
    ignore_label: Option<i32>,
) -> Result<Array3<F>> {
    let (h, w) = labels.dim();
    let mut out = Array3::<F>::zeros((num_classes, h, w));
    for ((r, c), &l) in labels.indexed_iter() {
        if Some(l) == ignore_label {
            continue;
        }
        if l < 0 || l as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: l as i64,
                num_classes,
            });
        }
        out[[l as usize, r, c]] = F::one();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn one_hot_single_pixel() {
        let oh = one_hot::<f32>(array![[2]].view(), 4, None).unwrap();
        assert_eq!(oh.iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn one_hot_all_ignored_is_zero() {
        let oh = one_hot::<f32>(Array2::from_elem((2, 2), 4).view(), 4, Some(4)).unwrap();
        assert_eq!(oh.dim(), (4, 2, 2));
        assert!(oh.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_complementary_channels() {
        let oh = one_hot::<f64>(array![[0, 1], [1, 0]].view(), 2, None).unwrap();
        assert_eq!(oh.index_axis(Axis(0), 0), array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(oh.index_axis(Axis(0), 1), array![[0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        let err = one_hot::<f32>(array![[0, 5]].view(), 4, Some(4)).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 5, .. }));
    }

    #[test]
    fn scribble_validation() {
        assert!(ScribbleMask::new(array![[0, 4], [3, 1]], 4, 4).is_ok());
        assert!(ScribbleMask::new(array![[0, 7]], 4, 4).is_err());
        assert!(ScribbleMask::new(array![[0]], 4, 2).is_err());
    }

    #[test]
    fn prob_map_validation() {
        assert!(ProbMap::<f32>::new(Array3::from_elem((4, 2, 2), 0.25)).is_ok());
        assert!(ProbMap::<f32>::new(Array3::from_elem((4, 2, 2), 0.3)).is_err());
        assert!(ProbMap::<f64>::new(Array3::from_elem((1, 2, 2), 1.5)).is_err());
    }

    #[test]
    fn jigsaw_inverse_round_trips() {
        let spec = JigsawSpec::new(2, 2, vec![2, 0, 3, 1]).unwrap();
        let inv = spec.inverse();
        for i in 0..4 {
            assert_eq!(spec.perm()[inv.perm()[i]], i);
            assert_eq!(inv.perm()[spec.perm()[i]], i);
        }
        assert!(JigsawSpec::new(2, 2, vec![0, 0, 1, 2]).is_err());
    }

    #[test]
    fn fusion_weights_validation() {
        assert!(FusionWeights::pair(0.25, 0.75).is_ok());
        assert!(FusionWeights::pair(0.5, 0.6).is_err());
        assert!(FusionWeights::pair(-0.5, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn one_hot_argmax_round_trip(
            k in 2usize..6,
            cells in proptest::collection::vec(0u32..1000, 1..64),
        ) {
            let ignore = k as i32;
            let labels: Vec<i32> = cells
                .iter()
                .map(|&c| if c % 7 == 0 { ignore } else { (c as usize % k) as i32 })
                .collect();
            let n = labels.len();
            let map = Array2::from_shape_vec((1, n), labels).unwrap();
            let oh = one_hot::<f32>(map.view(), k, Some(ignore)).unwrap();
            let back = argmax_channels(oh.view());
            for (i, &l) in map.iter().enumerate() {
                let col_sum: f32 = (0..k).map(|ch| oh[[ch, 0, i]]).sum();
                if l == ignore {
                    prop_assert_eq!(col_sum, 0.0);
                } else {
                    prop_assert_eq!(col_sum, 1.0);
                    prop_assert_eq!(back.labels()[[0, i]], l);
                }
            }
        }
    }
}
