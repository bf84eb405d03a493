use ndarray::{Array2, ArrayView2};

use crate::types::Image;

/// Per-slice z-score. Constant slices become all zeros.
pub fn standardize(image: &Image) -> Image {
    let px = image.pixels();
    let n = px.len() as f64;
    let mean = px.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = px.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= f64::EPSILON * mean.abs().max(1.0) {
        return Image::zeros(image.height(), image.width());
    }
    Image::new(px.mapv(|v| ((v as f64 - mean) / std) as f32)).expect("finite standardized pixels")
}

fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: ArrayView2<'_, f32>, height: usize, width: usize) -> Array2<f32> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (height, width) {
        return src.to_owned();
    }
    let axis = |len_src: usize, len_dst: usize| -> Vec<(usize, usize, f32)> {
        (0..len_dst)
            .map(|d| {
                let s = source_coord(d, len_src, len_dst).clamp(0.0, (len_src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(len_src - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let rows = axis(sh, height);
    let cols = axis(sw, width);
    Array2::from_shape_fn((height, width), |(r, c)| {
        let (r0, r1, fr) = rows[r];
        let (c0, c1, fc) = cols[c];
        let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
        let bottom = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

/// Nearest-neighbour resize; output values are always copies of input values.
pub fn resize_nearest<T: Copy>(src: ArrayView2<'_, T>, height: usize, width: usize) -> Array2<T> {
    let (sh, sw) = src.dim();
    let pick = |d: usize, len_src: usize, len_dst: usize| ((d * 2 + 1) * len_src / (2 * len_dst)).min(len_src - 1);
    Array2::from_shape_fn((height, width), |(r, c)| src[[pick(r, sh, height), pick(c, sw, width)]])
}

/// Standardize, then resize to `size x size`.
pub fn preprocess(image: &Image, size: usize) -> Image {
    let z = standardize(image);
    Image::new(resize_bilinear(z.pixels().view(), size, size)).expect("finite resized pixels")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn constant_slice_is_zero() {
        let img = Image::new(Array2::from_elem((5, 7), 3.5)).unwrap();
        assert!(standardize(&img).pixels().iter().all(|&v| v == 0.0));
        assert!(preprocess(&img, 8).pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let a = Array2::from_shape_fn((4, 6), |(r, c)| (r * 6 + c) as f32);
        assert_eq!(resize_bilinear(a.view(), 4, 6), a);
        let k = Array2::from_elem((7, 5), 2.0f32);
        assert!(resize_bilinear(k.view(), 11, 3).iter().all(|&v| (v - 2.0).abs() < 1e-6));
        // 2x upsample of a ramp stays inside the input range.
        let up = resize_bilinear(a.view(), 8, 12);
        assert_eq!(up[[0, 0]], 0.0);
        assert_eq!(up[[7, 11]], 23.0);
    }

    #[test]
    fn single_scribble_pixel_survives_nearest_resize() {
        let mut s = Array2::from_elem((256, 256), 4i32);
        s[[100, 100]] = 2;
        let r = resize_nearest(s.view(), 224, 224);
        let twos = r.iter().filter(|&&v| v == 2).count();
        assert_eq!(twos, 1);
        assert!(r.iter().all(|&v| v == 2 || v == 4));
    }

    proptest! {
        #[test]
        fn zscore_moments(vals in proptest::collection::vec(-100.0f32..100.0, 16..200)) {
            let n = vals.len();
            let img = Image::new(Array2::from_shape_vec((1, n), vals.clone()).unwrap()).unwrap();
            let z = standardize(&img);
            let spread = vals.iter().cloned().fold(f32::MIN, f32::max) - vals.iter().cloned().fold(f32::MAX, f32::min);
            prop_assume!(spread > 1e-2);
            let m = z.pixels().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let sd = (z.pixels().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            prop_assert!(m.abs() < 1e-5);
            prop_assert!((sd - 1.0).abs() < 1e-3);
        }

        #[test]
        fn nearest_never_invents_labels(
            h in 1usize..40, w in 1usize..40, oh in 1usize..50, ow in 1usize..50, seed in any::<u64>()
        ) {
            let src = Array2::from_shape_fn((h, w), |(r, c)| ((seed >> ((r * 7 + c) % 60)) % 5) as i32);
            let out = resize_nearest(src.view(), oh, ow);
            prop_assert!(out.iter().all(|v| src.iter().any(|s| s == v)));
        }
    }
}
