//! Per-sample kernels with hand-written backward passes. Tensors are
//! `N x C x H x W` in standard layout; every kernel loops over the batch and
//! treats each sample independently, so a batched call is bit-identical to
//! separate calls.

use ndarray::{Array4, ArrayView4, Axis};

/// `C = alpha * A B + beta * C` on strided row-major buffers.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches; `c`
    // does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square same-padding convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

fn im2col(x: &[f32], shape: ConvShape, h: usize, w: usize, col: &mut [f32]) {
    let k = shape.kernel;
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..shape.in_channels {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let dst = &mut col[row + y * w..row + (y + 1) * w];
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..x_lo].fill(0.0);
                    dst[x_hi..].fill(0.0);
                    let s0 = (x_lo as isize + dx) as usize;
                    dst[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn col2im(col: &[f32], shape: ConvShape, h: usize, w: usize, dx: &mut [f32]) {
    let k = shape.kernel;
    let pad = (k / 2) as isize;
    let hw = h * w;
    dx.fill(0.0);
    for ci in 0..shape.in_channels {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let off = kx as isize - pad;
                let x_lo = (-off).max(0) as usize;
                let x_hi = (w as isize - off).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let src = &col[row + y * w + x_lo..row + y * w + x_hi];
                    let s0 = (x_lo as isize + off) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub fn conv_forward(
    x: ArrayView4<'_, f32>,
    weight: &[f32],
    bias: &[f32],
    shape: ConvShape,
) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    assert_eq!(c, shape.in_channels, "conv input channels");
    let hw = h * w;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array4::<f32>::zeros((n, shape.out_channels, h, w));
    let ys = out.as_slice_mut().expect("standard layout");
    let patch = shape.patch_len();
    let mut col = if shape.kernel == 1 { Vec::new() } else { vec![0.0f32; patch * hw] };
    for i in 0..n {
        let xi = &xs[i * c * hw..(i + 1) * c * hw];
        let yi = &mut ys[i * shape.out_channels * hw..(i + 1) * shape.out_channels * hw];
        for (o, &b) in bias.iter().enumerate() {
            yi[o * hw..(o + 1) * hw].fill(b);
        }
        let cols: &[f32] = if shape.kernel == 1 {
            xi
        } else {
            im2col(xi, shape, h, w, &mut col);
            &col
        };
        sgemm(shape.out_channels, patch, hw, weight, patch, 1, cols, hw, 1, 1.0, yi);
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input_grad` is set.
pub fn conv_backward(
    x: ArrayView4<'_, f32>,
    dy: ArrayView4<'_, f32>,
    weight: &[f32],
    shape: ConvShape,
    dweight: &mut [f32],
    dbias: &mut [f32],
    need_input_grad: bool,
) -> Option<Array4<f32>> {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let patch = shape.patch_len();
    let x = x.as_standard_layout();
    let dy = dy.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let dys = dy.as_slice().expect("standard layout");
    let mut dx = need_input_grad.then(|| Array4::<f32>::zeros((n, c, h, w)));
    let mut col = if shape.kernel == 1 { Vec::new() } else { vec![0.0f32; patch * hw] };
    let mut dcol = vec![0.0f32; if need_input_grad { patch * hw } else { 0 }];
    let co = shape.out_channels;
    for i in 0..n {
        let xi = &xs[i * c * hw..(i + 1) * c * hw];
        let dyi = &dys[i * co * hw..(i + 1) * co * hw];
        for (o, db) in dbias.iter_mut().enumerate() {
            *db += dyi[o * hw..(o + 1) * hw].iter().sum::<f32>();
        }
        let cols: &[f32] = if shape.kernel == 1 {
            xi
        } else {
            im2col(xi, shape, h, w, &mut col);
            &col
        };
        // dW += dY * col^T
        sgemm(co, hw, patch, dyi, hw, 1, cols, 1, hw, 1.0, dweight);
        if let Some(dx) = dx.as_mut() {
            let dxs = dx.as_slice_mut().expect("standard layout");
            let dxi = &mut dxs[i * c * hw..(i + 1) * c * hw];
            if shape.kernel == 1 {
                sgemm(patch, co, hw, weight, 1, patch, dyi, hw, 1, 0.0, dxi);
            } else {
                // dcol = W^T * dY
                sgemm(patch, co, hw, weight, 1, patch, dyi, hw, 1, 0.0, &mut dcol);
                col2im(&dcol, shape, h, w, dxi);
            }
        }
    }
    dx
}

/// `max(x, 0)`, keeping NaN.
pub fn relu_inplace(x: &mut Array4<f32>) {
    x.mapv_inplace(|v| if v < 0.0 { 0.0 } else { v });
}

/// Masks `grad` where the ReLU output was not positive.
pub fn relu_backward_inplace(grad: &mut Array4<f32>, out: &Array4<f32>) {
    ndarray::Zip::from(grad).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// 2x2 max pooling, stride 2. Returns the pooled tensor and the flat input
/// index of each maximum (first in scan order on ties).
pub fn max_pool2(x: &Array4<f32>) -> (Array4<f32>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<f32>::zeros((n, c, oh, ow));
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    let xs = x.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for r in 0..oh {
            for col in 0..ow {
                let mut best_i = base + 2 * r * w + 2 * col;
                let mut best = xs[best_i];
                for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * r + dr) * w + 2 * col + dc;
                    if xs[j] > best {
                        best = xs[j];
                        best_i = j;
                    }
                }
                os[o] = best;
                idx.push(best_i as u32);
                o += 1;
            }
        }
    }
    (out, idx)
}

pub fn max_pool2_backward(dy: &Array4<f32>, idx: &[u32], input_dim: (usize, usize, usize, usize)) -> Array4<f32> {
    let mut dx = Array4::<f32>::zeros(input_dim);
    let dxs = dx.as_slice_mut().expect("standard layout");
    for (&g, &i) in dy.iter().zip(idx) {
        dxs[i as usize] += g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(i, ch, r, col)| x[[i, ch, r / 2, col / 2]])
}

pub fn upsample2_backward(dy: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = dy.dim();
    let mut dx = Array4::<f32>::zeros((n, c, h / 2, w / 2));
    for ((i, ch, r, col), &g) in dy.indexed_iter() {
        dx[[i, ch, r / 2, col / 2]] += g;
    }
    dx
}

pub fn concat_channels(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching batch and spatial dims")
}

pub fn split_channels(g: &Array4<f32>, first: usize) -> (Array4<f32>, Array4<f32>) {
    let (a, b) = g.view().split_at(Axis(1), first);
    (a.to_owned(), b.to_owned())
}

/// Softmax over the channel axis.
pub fn softmax_channels(logits: &Array4<f32>) -> Array4<f32> {
    let (n, k, h, w) = logits.dim();
    let mut out = Array4::<f32>::zeros((n, k, h, w));
    for i in 0..n {
        for r in 0..h {
            for c in 0..w {
                let mut m = f32::NEG_INFINITY;
                for ch in 0..k {
                    m = m.max(logits[[i, ch, r, c]]);
                }
                let mut sum = 0.0f32;
                for ch in 0..k {
                    let e = (logits[[i, ch, r, c]] - m).exp();
                    out[[i, ch, r, c]] = e;
                    sum += e;
                }
                for ch in 0..k {
                    out[[i, ch, r, c]] /= sum;
                }
            }
        }
    }
    out
}

/// `dlogits = p * (dp - sum_c p_c dp_c)`.
pub fn softmax_backward(probs: &Array4<f32>, dprobs: &Array4<f32>) -> Array4<f32> {
    let (n, k, h, w) = probs.dim();
    let mut out = Array4::<f32>::zeros((n, k, h, w));
    for i in 0..n {
        for r in 0..h {
            for c in 0..w {
                let mut dot = 0.0f32;
                for ch in 0..k {
                    dot += probs[[i, ch, r, c]] * dprobs[[i, ch, r, c]];
                }
                for ch in 0..k {
                    out[[i, ch, r, c]] = probs[[i, ch, r, c]] * (dprobs[[i, ch, r, c]] - dot);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f32> {
        Array4::from_shape_fn(dim, |_| rng.random_range(-1.0f32..1.0))
    }

    /// Direct 7-loop convolution used as the reference.
    fn naive_conv(x: &Array4<f32>, wt: &[f32], b: &[f32], s: ConvShape) -> Array4<f32> {
        let (n, _, h, w) = x.dim();
        let k = s.kernel as isize;
        let pad = k / 2;
        Array4::from_shape_fn((n, s.out_channels, h, w), |(i, o, r, c)| {
            let mut acc = b[o] as f64;
            for ci in 0..s.in_channels {
                for ky in 0..k {
                    for kx in 0..k {
                        let (sr, sc) = (r as isize + ky - pad, c as isize + kx - pad);
                        if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                            continue;
                        }
                        let wi = ((o * s.in_channels + ci) * s.kernel + ky as usize) * s.kernel + kx as usize;
                        acc += wt[wi] as f64 * x[[i, ci, sr as usize, sc as usize]] as f64;
                    }
                }
            }
            acc as f32
        })
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(ci, co, k) in &[(1, 3, 3), (3, 2, 3), (4, 5, 1)] {
            let s = ConvShape { in_channels: ci, out_channels: co, kernel: k };
            let x = rand4(&mut rng, (2, ci, 5, 6));
            let wt: Vec<f32> = (0..s.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = conv_forward(x.view(), &wt, &b, s);
            let r = naive_conv(&x, &wt, &b, s);
            for (a, b) in y.iter().zip(r.iter()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = ConvShape { in_channels: 2, out_channels: 3, kernel: 3 };
        let x = rand4(&mut rng, (2, 2, 4, 5));
        let wt: Vec<f32> = (0..s.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = vec![0.1f32, -0.2, 0.3];
        let probe = rand4(&mut rng, (2, 3, 4, 5));
        // loss = sum(probe * conv(x)), computed in f64 through the naive reference.
        let loss = |x: &Array4<f32>, wt: &[f32]| -> f64 {
            naive_conv(x, wt, &b, s).iter().zip(probe.iter()).map(|(a, p)| *a as f64 * *p as f64).sum()
        };
        let mut dw = vec![0.0f32; s.weight_len()];
        let mut db = vec![0.0f32; 3];
        let dx = conv_backward(x.view(), probe.view(), &wt, s, &mut dw, &mut db, true).unwrap();
        let h = 1e-2f32;
        for wi in [0, 7, 20, 53] {
            let mut wp = wt.clone();
            wp[wi] += h;
            let mut wm = wt.clone();
            wm[wi] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h as f64);
            assert!((fd - dw[wi] as f64).abs() < 1e-3, "dW[{wi}] {fd} vs {}", dw[wi]);
        }
        for idx in [(0, 0, 0, 0), (1, 1, 2, 3), (0, 1, 3, 4)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp, &wt) - loss(&xm, &wt)) / (2.0 * h as f64);
            assert!((fd - dx[idx] as f64).abs() < 1e-3, "dx{idx:?} {fd} vs {}", dx[idx]);
        }
        let expect_db: f32 = probe.index_axis(Axis(1), 2).sum();
        assert!((db[2] - expect_db).abs() < 1e-4);
    }

    #[test]
    fn pool_and_upsample_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand4(&mut rng, (2, 3, 4, 6));
        let (y, idx) = max_pool2(&x);
        assert_eq!(y.dim(), (2, 3, 2, 3));
        assert_eq!(y[[1, 2, 1, 1]], x.slice(ndarray::s![1, 2, 2..4, 2..4]).fold(f32::MIN, |a, &b| a.max(b)));
        let g = rand4(&mut rng, y.dim());
        let dx = max_pool2_backward(&g, &idx, x.dim());
        assert!((dx.sum() - g.sum()).abs() < 1e-5);

        // <up(a), b> == <a, up^T(b)>
        let a = rand4(&mut rng, (1, 2, 3, 3));
        let b = rand4(&mut rng, (1, 2, 6, 6));
        let lhs: f32 = (&upsample2(&a) * &b).sum();
        let rhs: f32 = (&a * &upsample2_backward(&b)).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn softmax_normalized_and_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = rand4(&mut rng, (1, 4, 2, 2)).mapv(|v| v * 5.0);
        let p = softmax_channels(&z);
        for s in p.sum_axis(Axis(1)).iter() {
            assert!((s - 1.0).abs() < 1e-6);
        }
        let g = rand4(&mut rng, p.dim());
        let dz = softmax_backward(&p, &g);
        let h = 1e-3f32;
        let idx = (0, 2, 1, 0);
        let mut zp = z.clone();
        zp[idx] += h;
        let mut zm = z.clone();
        zm[idx] -= h;
        let f = |z: &Array4<f32>| (&softmax_channels(z) * &g).sum();
        let fd = (f(&zp) - f(&zm)) / (2.0 * h);
        assert!((fd - dz[idx]).abs() < 1e-3);
    }
}
