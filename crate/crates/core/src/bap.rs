//! Boundary-aware pseudo-label supervision.
//!
//! Branch predictions are fused into a hard pseudo-label with weights derived
//! from each branch's scribble cross-entropy, then every branch is pulled
//! toward that label by a region Dice loss and by a Dice loss between soft
//! boundary bands (prediction minus its min-pooled erosion).
//!
//! The pseudo-label, the fusion weights and the pseudo-label boundary are
//! constants: gradients flow only into the branch predictions.

use ndarray::{Array2, Array3, ArrayView3, Axis, Zip};
use rand::Rng;

use crate::config::{BoundaryReduction, CeReduction, PlFusion, TrainConfig};
use crate::error::{Error, Result};
use crate::tas::partial_cross_entropy;
use crate::types::{BoundaryMap, FusionWeights, HardLabelMap, Real, ScribbleMask};

/// Loss sums below this are treated as zero when fusing.
const DEGENERATE_LOSS_SUM: f64 = 1e-12;

/// Fusion weights for a pair of branches.
///
/// The weights are cross-assigned: `w_j = loss_k / (loss_j + loss_k)` and
/// `w_k = loss_j / (loss_j + loss_k)`, so the branch with the smaller loss gets
/// the larger weight. Both losses zero gives `(0.5, 0.5)`.
pub fn fusion_weights(loss_j: f64, loss_k: f64) -> Result<FusionWeights> {
    loss_weighted(&[loss_j, loss_k])
}

/// Generalizes the pairwise rule to `n` branches:
/// `w_b = (S - L_b) / ((n - 1) S)` with `S` the loss sum. For `n = 2` this is
/// exactly [`fusion_weights`]; a single branch gets weight one.
pub fn loss_weighted(losses: &[f64]) -> Result<FusionWeights> {
    if let Some(bad) = losses.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidValue(format!(
            "fusion losses must be finite and nonnegative, got {bad}"
        )));
    }
    let n = losses.len();
    if n == 0 {
        return Err(Error::InvalidValue("no branches to fuse".into()));
    }
    if n == 1 {
        return FusionWeights::new(vec![1.0]);
    }
    let sum: f64 = losses.iter().sum();
    if sum < DEGENERATE_LOSS_SUM {
        return FusionWeights::new(vec![1.0 / n as f64; n]);
    }
    if n == 2 {
        return FusionWeights::new(vec![losses[1] / sum, losses[0] / sum]);
    }
    let denom = (n - 1) as f64 * sum;
    FusionWeights::new(losses.iter().map(|l| (sum - l) / denom).collect())
}

/// Weights for the configured fusion strategy.
pub fn fusion_weights_for<R: Rng + ?Sized>(
    strategy: PlFusion,
    losses: &[f64],
    rng: &mut R,
) -> Result<FusionWeights> {
    match strategy {
        PlFusion::LossWeighted => loss_weighted(losses),
        PlFusion::Average => FusionWeights::new(vec![1.0 / losses.len() as f64; losses.len()]),
        PlFusion::Random => {
            let raw: Vec<f64> = (0..losses.len()).map(|_| rng.random::<f64>() + 1e-9).collect();
            let sum: f64 = raw.iter().sum();
            FusionWeights::new(raw.into_iter().map(|w| w / sum).collect())
        }
    }
}

fn check_same_shape<F>(a: &ArrayView3<'_, F>, b: &ArrayView3<'_, F>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Per-pixel argmax of the weighted mixture of branch predictions, ties to
/// the lowest class. The mixture is accumulated in `f64` in branch order.
pub fn fuse_pseudo_label<F: Real>(
    preds: &[ArrayView3<'_, F>],
    weights: &FusionWeights,
) -> Result<HardLabelMap> {
    if preds.is_empty() || preds.len() != weights.weights().len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} weights",
            preds.len(),
            weights.weights().len()
        )));
    }
    for p in &preds[1..] {
        check_same_shape(&preds[0], p)?;
    }
    let (k, h, w) = preds[0].dim();
    let mut labels = Array2::<i32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for ch in 0..k {
                let mut v = 0.0f64;
                for (p, &wt) in preds.iter().zip(weights.weights()) {
                    v += wt * p[[ch, r, c]].to_f64().unwrap();
                }
                if v > best_v {
                    best = ch;
                    best_v = v;
                }
            }
            labels[[r, c]] = best as i32;
        }
    }
    HardLabelMap::new(labels, k)
}

pub fn fuse_pseudo_label_pair<F: Real>(
    y_j: ArrayView3<'_, F>,
    y_k: ArrayView3<'_, F>,
    w: &FusionWeights,
) -> Result<HardLabelMap> {
    fuse_pseudo_label(&[y_j, y_k], w)
}

/// Soft Dice over foreground channels `1..K`, averaged over those channels,
/// with `epsilon` added to numerator and denominator.
pub fn dice_loss<F: Real>(pred: ArrayView3<'_, F>, target: ArrayView3<'_, F>, epsilon: F) -> Result<F> {
    Ok(dice_loss_impl(pred, target, epsilon, false)?.0)
}

pub fn dice_loss_grad<F: Real>(
    pred: ArrayView3<'_, F>,
    target: ArrayView3<'_, F>,
    epsilon: F,
) -> Result<(F, Array3<F>)> {
    let (l, g) = dice_loss_impl(pred, target, epsilon, true)?;
    Ok((l, g.expect("gradient requested")))
}

fn dice_loss_impl<F: Real>(
    pred: ArrayView3<'_, F>,
    target: ArrayView3<'_, F>,
    eps: F,
    want_grad: bool,
) -> Result<(F, Option<Array3<F>>)> {
    check_same_shape(&pred, &target)?;
    let k = pred.dim().0;
    if k < 2 {
        return Err(Error::ShapeMismatch("dice loss needs a foreground channel".into()));
    }
    let two = F::lit(2.0);
    let n_fg = F::from_usize(k - 1).unwrap();
    let mut grad = want_grad.then(|| Array3::<F>::zeros(pred.dim()));
    let mut score_sum = F::zero();
    for ch in 1..k {
        let p = pred.index_axis(Axis(0), ch);
        let t = target.index_axis(Axis(0), ch);
        let inter = Zip::from(&p).and(&t).fold(F::zero(), |acc, &a, &b| acc + a * b);
        let num = two * inter + eps;
        let den = p.sum() + t.sum() + eps;
        score_sum = score_sum + num / den;
        if let Some(g) = grad.as_mut() {
            let den2 = den * den;
            Zip::from(g.index_axis_mut(Axis(0), ch))
                .and(&t)
                .for_each(|gv, &tv| *gv = -(two * tv * den - num) / den2 / n_fg);
        }
    }
    Ok((F::one() - score_sum / n_fg, grad))
}

/// Region Dice of every branch against the one-hot pseudo-label, summed.
pub fn pl_loss<F: Real>(preds: &[ArrayView3<'_, F>], y_pl: &HardLabelMap, epsilon: F) -> Result<F> {
    let target = y_pl.one_hot::<F>();
    preds
        .iter()
        .try_fold(F::zero(), |acc, p| Ok(acc + dice_loss(*p, target.view(), epsilon)?))
}

/// Min pooling over a `pool x pool` window with replicate padding. Also
/// returns, per pixel, the flat index of the first minimum in scan order.
fn min_pool<F: Real>(channel: ndarray::ArrayView2<'_, F>, pool: usize) -> (Array2<F>, Array2<usize>) {
    let (h, w) = channel.dim();
    let half = (pool / 2) as isize;
    let mut out = Array2::<F>::zeros((h, w));
    let mut arg = Array2::<usize>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut best = F::infinity();
            let mut best_idx = 0;
            for dr in -half..=half {
                let rr = (r as isize + dr).clamp(0, h as isize - 1) as usize;
                for dc in -half..=half {
                    let cc = (c as isize + dc).clamp(0, w as isize - 1) as usize;
                    let v = channel[[rr, cc]];
                    if v < best {
                        best = v;
                        best_idx = rr * w + cc;
                    }
                }
            }
            out[[r, c]] = best;
            arg[[r, c]] = best_idx;
        }
    }
    (out, arg)
}

fn check_pool(pool: usize) -> Result<()> {
    if pool == 0 || pool.is_multiple_of(2) {
        return Err(Error::Config(format!("min-pool window must be odd, got {pool}")));
    }
    Ok(())
}

/// `ReLU(y - minpool(y))` per channel.
pub fn extract_boundary<F: Real>(map: ArrayView3<'_, F>, pool: usize) -> Result<BoundaryMap<F>> {
    check_pool(pool)?;
    let mut out = Array3::<F>::zeros(map.dim());
    for (ch, y) in map.axis_iter(Axis(0)).enumerate() {
        let (m, _) = min_pool(y, pool);
        Zip::from(out.index_axis_mut(Axis(0), ch))
            .and(&y)
            .and(&m)
            .for_each(|b, &yv, &mv| *b = (yv - mv).max(F::zero()));
    }
    Ok(BoundaryMap::from_array(out))
}

/// Boundary map plus the vector-Jacobian product `upstream -> d/dmap`.
/// At `B = 0` the ReLU passes no gradient; through the min the gradient goes
/// to the first minimizing pixel.
pub fn extract_boundary_vjp<F: Real>(
    map: ArrayView3<'_, F>,
    upstream: ArrayView3<'_, F>,
    pool: usize,
) -> Result<(BoundaryMap<F>, Array3<F>)> {
    check_pool(pool)?;
    check_same_shape(&map, &upstream)?;
    let (_, h, w) = map.dim();
    let mut out = Array3::<F>::zeros(map.dim());
    let mut grad = Array3::<F>::zeros(map.dim());
    for (ch, y) in map.axis_iter(Axis(0)).enumerate() {
        let (m, arg) = min_pool(y, pool);
        let up = upstream.index_axis(Axis(0), ch);
        let mut g = grad.index_axis_mut(Axis(0), ch);
        let mut b = out.index_axis_mut(Axis(0), ch);
        for r in 0..h {
            for c in 0..w {
                let v = y[[r, c]] - m[[r, c]];
                if v > F::zero() {
                    b[[r, c]] = v;
                    let u = up[[r, c]];
                    g[[r, c]] = g[[r, c]] + u;
                    let a = arg[[r, c]];
                    g[[a / w, a % w]] = g[[a / w, a % w]] - u;
                }
            }
        }
    }
    Ok((BoundaryMap::from_array(out), grad))
}

/// One boundary Dice term `1 - (2 sum(B Bpl) + eps) / (sum B + sum Bpl + eps)`
/// and its gradient in `B`.
fn boundary_term<F: Real>(
    b: ArrayView3<'_, F>,
    b_pl: ArrayView3<'_, F>,
    eps: F,
    reduction: BoundaryReduction,
) -> (F, Array3<F>) {
    let two = F::lit(2.0);
    let dice = |bv: ndarray::ArrayViewD<'_, F>, pv: ndarray::ArrayViewD<'_, F>| {
        let inter = Zip::from(&bv).and(&pv).fold(F::zero(), |acc, &x, &y| acc + x * y);
        let num = two * inter + eps;
        let den = bv.sum() + pv.sum() + eps;
        let den2 = den * den;
        let g = Zip::from(&pv).map_collect(|&p| -(two * p * den - num) / den2);
        (F::one() - num / den, g)
    };
    match reduction {
        BoundaryReduction::Joint => {
            let (l, g) = dice(b.into_dyn(), b_pl.into_dyn());
            (l, g.into_dimensionality().expect("3-d"))
        }
        BoundaryReduction::PerClass => {
            let k = b.dim().0;
            let kf = F::from_usize(k).unwrap();
            let mut grad = Array3::<F>::zeros(b.dim());
            let mut total = F::zero();
            for ch in 0..k {
                let (l, g) = dice(
                    b.index_axis(Axis(0), ch).into_dyn(),
                    b_pl.index_axis(Axis(0), ch).into_dyn(),
                );
                total = total + l;
                grad.index_axis_mut(Axis(0), ch)
                    .assign(&g.into_dimensionality::<ndarray::Ix2>().expect("2-d").mapv(|v| v / kf));
            }
            (total / kf, grad)
        }
    }
}

/// Boundary Dice of each branch boundary against the pseudo-label boundary, summed.
pub fn boundary_loss<F: Real>(
    branches: &[ArrayView3<'_, F>],
    b_pl: ArrayView3<'_, F>,
    epsilon: F,
    reduction: BoundaryReduction,
) -> Result<F> {
    Ok(boundary_loss_grad(branches, b_pl, epsilon, reduction)?.0)
}

/// Loss plus one gradient array per branch boundary.
pub fn boundary_loss_grad<F: Real>(
    branches: &[ArrayView3<'_, F>],
    b_pl: ArrayView3<'_, F>,
    epsilon: F,
    reduction: BoundaryReduction,
) -> Result<(F, Vec<Array3<F>>)> {
    let mut total = F::zero();
    let mut grads = Vec::with_capacity(branches.len());
    for b in branches {
        check_same_shape(b, &b_pl)?;
        let (l, g) = boundary_term(*b, b_pl, epsilon, reduction);
        total = total + l;
        grads.push(g);
    }
    Ok((total, grads))
}

/// Settings the BAP losses read from the run configuration.
#[derive(Debug, Clone, Copy)]
pub struct BapParams {
    pub fusion: PlFusion,
    pub pool_size: usize,
    pub epsilon: f64,
    pub boundary_reduction: BoundaryReduction,
    pub ce_reduction: CeReduction,
}

impl BapParams {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            fusion: cfg.bap.pl_fusion,
            pool_size: cfg.bap.boundary_pool_size,
            epsilon: cfg.loss.epsilon,
            boundary_reduction: cfg.loss.boundary_reduction,
            ce_reduction: cfg.loss.ce_reduction,
        }
    }
}

impl Default for BapParams {
    fn default() -> Self {
        Self::from_config(&TrainConfig::default())
    }
}

#[derive(Debug, Clone)]
pub struct BapOutput<F> {
    pub l_pl: F,
    pub l_bd: F,
    pub y_pl: HardLabelMap,
    pub weights: FusionWeights,
    /// Gradient of `l_pl` per branch prediction.
    pub grad_pl: Vec<Array3<F>>,
    /// Gradient of `l_bd` per branch prediction.
    pub grad_bd: Vec<Array3<F>>,
}

/// Full BAP pass with the per-branch cross-entropies computed here.
pub fn bap_forward<F: Real, R: Rng + ?Sized>(
    preds: &[ArrayView3<'_, F>],
    scribble: &ScribbleMask,
    params: &BapParams,
    rng: &mut R,
) -> Result<BapOutput<F>> {
    let losses = preds
        .iter()
        .map(|p| Ok(partial_cross_entropy(*p, scribble, params.ce_reduction)?.to_f64().unwrap()))
        .collect::<Result<Vec<_>>>()?;
    bap_forward_with_losses(preds, &losses, params, rng)
}

/// BAP pass reusing already computed (detached) branch cross-entropies:
/// fusion weights, hard pseudo-label, region Dice and boundary Dice, with
/// gradients into each branch prediction.
pub fn bap_forward_with_losses<F: Real, R: Rng + ?Sized>(
    preds: &[ArrayView3<'_, F>],
    ce_losses: &[f64],
    params: &BapParams,
    rng: &mut R,
) -> Result<BapOutput<F>> {
    if preds.len() != ce_losses.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions, {} losses",
            preds.len(),
            ce_losses.len()
        )));
    }
    let eps = F::lit(params.epsilon);
    let weights = fusion_weights_for(params.fusion, ce_losses, rng)?;
    let y_pl = fuse_pseudo_label(preds, &weights)?;
    let target = y_pl.one_hot::<F>();

    let mut l_pl = F::zero();
    let mut grad_pl = Vec::with_capacity(preds.len());
    for p in preds {
        let (l, g) = dice_loss_grad(*p, target.view(), eps)?;
        l_pl = l_pl + l;
        grad_pl.push(g);
    }

    let b_pl = extract_boundary(target.view(), params.pool_size)?;
    let mut l_bd = F::zero();
    let mut grad_bd = Vec::with_capacity(preds.len());
    for p in preds {
        let b = extract_boundary(*p, params.pool_size)?;
        let (l, gb) = boundary_term(b.view(), b_pl.view(), eps, params.boundary_reduction);
        let (_, gy) = extract_boundary_vjp(*p, gb.view(), params.pool_size)?;
        l_bd = l_bd + l;
        grad_bd.push(gy);
    }

    Ok(BapOutput {
        l_pl,
        l_bd,
        y_pl,
        weights,
        grad_pl,
        grad_bd,
    })
}
