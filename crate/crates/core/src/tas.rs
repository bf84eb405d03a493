//! Triplet augmentation with self-recovery.
//!
//! Three views of each image go through the same network: a cutout view whose
//! scribbled foreground box is blanked, a jigsaw view with shuffled patches and
//! an intensity view with an affine grey-level change. Every view is supervised
//! by partial cross-entropy on the scribble in the original frame, so the
//! cutout view must recover labels under its mask and the jigsaw prediction is
//! un-shuffled before it is scored.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Zip};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{AugmentConfig, CeReduction, TasBranch};
use crate::error::{Error, Result};
use crate::types::{CutoutBox, Image, JigsawSpec, ProbMap, Real, ScribbleMask};

/// Probabilities are clamped to this floor before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Tight bounding box of the foreground scribble (classes `1..K`), grown by
/// `margin` and clamped to the image.
pub fn infer_cutout_box(scribble: &ScribbleMask, margin: usize, fill_value: f32) -> Result<CutoutBox> {
    let (h, w) = scribble.dims();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (r, c, class) in scribble.annotated() {
        if class == 0 {
            continue;
        }
        bounds = Some(match bounds {
            None => (r, r, c, c),
            Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
        });
    }
    let (r0, r1, c0, c1) = bounds.ok_or(Error::NoForeground)?;
    Ok(CutoutBox {
        row_min: r0.saturating_sub(margin),
        row_max: (r1 + margin).min(h - 1),
        col_min: c0.saturating_sub(margin),
        col_max: (c1 + margin).min(w - 1),
        fill_value,
    })
}

pub fn apply_cutout(image: &Image, bbox: &CutoutBox) -> Result<Image> {
    let (h, w) = image.dims();
    if !bbox.fits(h, w) {
        return Err(Error::ShapeMismatch(format!(
            "cutout box {bbox:?} outside {h}x{w} image"
        )));
    }
    let mut out = image.pixels().clone();
    out.slice_mut(s![bbox.row_min..=bbox.row_max, bbox.col_min..=bbox.col_max])
        .fill(bbox.fill_value);
    Image::new(out)
}

/// Uniformly random patch permutation on a `grid x grid` layout.
pub fn sample_jigsaw<R: Rng + ?Sized>(grid: usize, rng: &mut R) -> Result<JigsawSpec> {
    if grid == 0 {
        return Err(Error::InvalidValue("jigsaw grid must be >= 1".into()));
    }
    let mut perm: Vec<usize> = (0..grid * grid).collect();
    perm.shuffle(rng);
    JigsawSpec::new(grid, grid, perm)
}

fn patch_size(h: usize, w: usize, spec: &JigsawSpec) -> Result<(usize, usize)> {
    let (gr, gc) = (spec.grid_rows(), spec.grid_cols());
    if !h.is_multiple_of(gr) || !w.is_multiple_of(gc) {
        return Err(Error::ShapeMismatch(format!(
            "{h}x{w} not divisible by a {gr}x{gc} jigsaw grid"
        )));
    }
    Ok((h / gr, w / gc))
}

/// Output patch `p` receives input patch `spec.perm()[p]`.
pub fn permute_patches<T: Copy>(src: ArrayView2<'_, T>, spec: &JigsawSpec) -> Result<Array2<T>> {
    let (h, w) = src.dim();
    let (ph, pw) = patch_size(h, w, spec)?;
    let gc = spec.grid_cols();
    let mut out = src.to_owned();
    for (dst, &from) in spec.perm().iter().enumerate() {
        let (dr, dc) = ((dst / gc) * ph, (dst % gc) * pw);
        let (sr, sc) = ((from / gc) * ph, (from % gc) * pw);
        out.slice_mut(s![dr..dr + ph, dc..dc + pw])
            .assign(&src.slice(s![sr..sr + ph, sc..sc + pw]));
    }
    Ok(out)
}

/// [`permute_patches`] applied to every channel of a `C x H x W` array.
pub fn permute_patches_channels<T: Copy>(
    src: ArrayView3<'_, T>,
    spec: &JigsawSpec,
) -> Result<Array3<T>> {
    let (_, h, w) = src.dim();
    let (ph, pw) = patch_size(h, w, spec)?;
    let gc = spec.grid_cols();
    let mut out = src.to_owned();
    for (dst, &from) in spec.perm().iter().enumerate() {
        let (dr, dc) = ((dst / gc) * ph, (dst % gc) * pw);
        let (sr, sc) = ((from / gc) * ph, (from % gc) * pw);
        out.slice_mut(s![.., dr..dr + ph, dc..dc + pw])
            .assign(&src.slice(s![.., sr..sr + ph, sc..sc + pw]));
    }
    Ok(out)
}

pub fn apply_jigsaw(image: &Image, spec: &JigsawSpec) -> Result<Image> {
    Image::new(permute_patches(image.pixels().view(), spec)?)
}

/// Puts a prediction made on a jigsaw-shuffled input back into the original frame.
pub fn invert_jigsaw<F: Real>(pred: &ProbMap<F>, spec: &JigsawSpec) -> Result<ProbMap<F>> {
    Ok(ProbMap::from_softmax(permute_patches_channels(
        pred.view(),
        &spec.inverse(),
    )?))
}

/// `alpha * x + beta`, no clipping.
pub fn apply_intensity(image: &Image, alpha: f32, beta: f32) -> Result<Image> {
    Image::new(image.pixels().mapv(|v| alpha * v + beta))
}

pub fn sample_intensity<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> (f32, f32) {
    let draw = |rng: &mut R, [lo, hi]: [f64; 2]| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    };
    let alpha = draw(rng, cfg.intensity_alpha_range);
    let beta = draw(rng, cfg.intensity_beta_range);
    (alpha as f32, beta as f32)
}

fn check_pred_shape<F>(pred: &ArrayView3<'_, F>, scribble: &ScribbleMask) -> Result<()> {
    let (k, h, w) = pred.dim();
    if (h, w) != scribble.dims() || k != scribble.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {k}x{h}x{w} vs scribble {}x{:?}",
            scribble.num_classes(),
            scribble.dims()
        )));
    }
    Ok(())
}

/// `max(p, floor)` that keeps NaN, so a broken prediction surfaces as a
/// non-finite loss instead of the floor value.
fn clamp_floor<F: Real>(p: F) -> F {
    if p.is_nan() {
        p
    } else {
        p.max(F::lit(LOG_FLOOR))
    }
}

/// Cross-entropy over the annotated pixels only. Returns zero when nothing is
/// annotated.
pub fn partial_cross_entropy<F: Real>(
    pred: ArrayView3<'_, F>,
    scribble: &ScribbleMask,
    reduction: CeReduction,
) -> Result<F> {
    check_pred_shape(&pred, scribble)?;
    let mut total = F::zero();
    let mut n = 0usize;
    for (r, c, class) in scribble.annotated() {
        total = total - clamp_floor(pred[[class, r, c]]).ln();
        n += 1;
    }
    Ok(match reduction {
        CeReduction::Mean if n > 0 => total / F::from_usize(n).unwrap(),
        _ => total,
    })
}

/// Loss and its gradient with respect to `pred`. The gradient of the clamped
/// log uses `-1 / max(p, floor)`.
pub fn partial_cross_entropy_grad<F: Real>(
    pred: ArrayView3<'_, F>,
    scribble: &ScribbleMask,
    reduction: CeReduction,
) -> Result<(F, Array3<F>)> {
    let loss = partial_cross_entropy(pred, scribble, reduction)?;
    let mut grad = Array3::<F>::zeros(pred.dim());
    let n = scribble.annotated_count();
    if n == 0 {
        return Ok((loss, grad));
    }
    let scale = match reduction {
        CeReduction::Mean => F::one() / F::from_usize(n).unwrap(),
        CeReduction::Sum => F::one(),
    };
    for (r, c, class) in scribble.annotated() {
        grad[[class, r, c]] = -scale / clamp_floor(pred[[class, r, c]]);
    }
    Ok((loss, grad))
}

/// Sum of the three partial cross-entropies. All maps must already be in the
/// original image frame. The cutout term covers every scribble pixel, including
/// the masked ones.
pub fn tas_loss<F: Real>(
    y_i: ArrayView3<'_, F>,
    y_j: ArrayView3<'_, F>,
    y_k: ArrayView3<'_, F>,
    scribble: &ScribbleMask,
    reduction: CeReduction,
) -> Result<F> {
    Ok(partial_cross_entropy(y_i, scribble, reduction)?
        + partial_cross_entropy(y_j, scribble, reduction)?
        + partial_cross_entropy(y_k, scribble, reduction)?)
}

/// The three network inputs for one image plus the parameters that produced them.
#[derive(Debug, Clone)]
pub struct TripletViews {
    pub cutout: Image,
    pub jigsaw: Image,
    pub intensity: Image,
    pub cutout_box: Option<CutoutBox>,
    pub jigsaw_spec: JigsawSpec,
    pub alpha: f32,
    pub beta: f32,
}

/// Draws fresh augmentation parameters and builds the views. Branches not
/// listed in `cfg.tas_branches` receive the original image (identity jigsaw,
/// no box, `alpha = 1`, `beta = 0`). Without foreground scribble the cutout
/// degrades to the identity.
pub fn augment_triplet<R: Rng + ?Sized>(
    image: &Image,
    scribble: &ScribbleMask,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<TripletViews> {
    let active = |b: TasBranch| cfg.tas_branches.contains(&b);

    let cutout_box = if active(TasBranch::Cutout) {
        match infer_cutout_box(scribble, cfg.cutout_margin, cfg.cutout_fill as f32) {
            Ok(b) => Some(b),
            Err(Error::NoForeground) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let cutout = match &cutout_box {
        Some(b) => apply_cutout(image, b)?,
        None => image.clone(),
    };

    let jigsaw_spec = if active(TasBranch::Jigsaw) {
        sample_jigsaw(cfg.jigsaw_grid, rng)?
    } else {
        JigsawSpec::identity(cfg.jigsaw_grid)
    };
    let jigsaw = apply_jigsaw(image, &jigsaw_spec)?;

    let (alpha, beta) = if active(TasBranch::Intensity) {
        sample_intensity(cfg, rng)
    } else {
        (1.0, 0.0)
    };
    let intensity = apply_intensity(image, alpha, beta)?;

    Ok(TripletViews {
        cutout,
        jigsaw,
        intensity,
        cutout_box,
        jigsaw_spec,
        alpha,
        beta,
    })
}

/// Element-wise `|a - b|` summed; handy for locality checks.
pub fn abs_diff_sum(a: &Image, b: &Image) -> f64 {
    let mut acc = 0.0f64;
    Zip::from(a.pixels())
        .and(b.pixels())
        .for_each(|&x, &y| acc += (x as f64 - y as f64).abs());
    acc
}
