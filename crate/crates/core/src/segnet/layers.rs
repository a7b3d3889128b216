//! Batched layer kernels. Convolutions run one sample per rayon task and
//! reduce per-sample weight gradients in sample order, so results do not
//! depend on scheduling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::params::BN_EPS;
use super::tensor::Tensor;
use crate::scalar::Scalar;

fn im2col3<T: Scalar>(x: &[T], cin: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    let zero = T::zero();
    for ci in 0..cin {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let (xs, xe) = (usize::from(kx == 0), if kx == 2 { w - 1 } else { w });
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy == 0 || sy > h {
                        dst.fill(zero);
                        continue;
                    }
                    let srow = &src[(sy - 1) * w..sy * w];
                    if xs > 0 {
                        dst[0] = zero;
                    }
                    if xe < w {
                        dst[w - 1] = zero;
                    }
                    if xe > xs {
                        dst[xs..xe].copy_from_slice(&srow[xs + kx - 1..xe + kx - 1]);
                    }
                }
            }
        }
    }
}

fn col2im3<T: Scalar>(col: &[T], cin: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..cin {
        let dst = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let (xs, xe) = (usize::from(kx == 0), if kx == 2 { w - 1 } else { w });
                if xe <= xs {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy == 0 || sy > h {
                        continue;
                    }
                    let drow = &mut dst[(sy - 1) * w..sy * w];
                    for (d, &g) in drow[xs + kx - 1..xe + kx - 1]
                        .iter_mut()
                        .zip(&row[y * w + xs..y * w + xe])
                    {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// Same-padded convolution with a `k x k` kernel, `k` in {1, 3}.
pub(crate) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    cout: usize,
    k: usize,
) -> Tensor<T> {
    let (cin, hw) = (x.c, x.plane());
    let mut out = Tensor::zeros(x.n, cout, x.h, x.w);
    out.data
        .par_chunks_mut(cout * hw)
        .zip(x.data.par_chunks(cin * hw))
        .for_each(|(o, xi)| {
            for (co, &b) in bias.iter().enumerate() {
                o[co * hw..(co + 1) * hw].fill(b);
            }
            if k == 1 {
                T::gemm(cout, cin, hw, weight, false, xi, false, T::one(), o);
            } else {
                let mut col = vec![T::zero(); cin * 9 * hw];
                im2col3(xi, cin, x.h, x.w, &mut col);
                T::gemm(cout, cin * 9, hw, weight, false, &col, false, T::one(), o);
            }
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dw: Vec<T>,
    pub db: Vec<T>,
    pub dx: Option<Tensor<T>>,
}

pub(crate) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    weight: &[T],
    cout: usize,
    k: usize,
    need_dx: bool,
) -> ConvGrads<T> {
    let (cin, hw) = (x.c, x.plane());
    let kk = cin * k * k;
    let per_sample: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = x
        .data
        .par_chunks(cin * hw)
        .zip(dy.data.par_chunks(cout * hw))
        .map(|(xi, dyi)| {
            let col_buf;
            let col: &[T] = if k == 1 {
                xi
            } else {
                let mut c = vec![T::zero(); kk * hw];
                im2col3(xi, cin, x.h, x.w, &mut c);
                col_buf = c;
                &col_buf
            };
            let mut dw = vec![T::zero(); cout * kk];
            T::gemm(cout, hw, kk, dyi, false, col, true, T::zero(), &mut dw);
            let db = (0..cout)
                .map(|co| dyi[co * hw..(co + 1) * hw].iter().copied().sum())
                .collect();
            let dx = need_dx.then(|| {
                let mut dcol = vec![T::zero(); kk * hw];
                T::gemm(kk, cout, hw, weight, true, dyi, false, T::zero(), &mut dcol);
                if k == 1 {
                    dcol
                } else {
                    let mut dxi = vec![T::zero(); cin * hw];
                    col2im3(&dcol, cin, x.h, x.w, &mut dxi);
                    dxi
                }
            });
            (dw, db, dx)
        })
        .collect();

    let mut dw = vec![T::zero(); cout * kk];
    let mut db = vec![T::zero(); cout];
    let mut dx = need_dx.then(|| Tensor::zeros(x.n, cin, x.h, x.w));
    for (i, (sw, sb, sx)) in per_sample.into_iter().enumerate() {
        dw.iter_mut().zip(&sw).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(&sb).for_each(|(a, &b)| *a += b);
        if let (Some(dx), Some(sx)) = (dx.as_mut(), sx) {
            dx.sample_mut(i).copy_from_slice(&sx);
        }
    }
    ConvGrads { dw, db, dx }
}

pub(crate) struct BnCache<T> {
    pub xhat: Vec<T>,
    pub invstd: Vec<f64>,
    pub batch: bool,
}

/// In-place batch normalization. With `running = None` the batch
/// statistics are used and returned as `(mean, unbiased variance)`.
pub(crate) fn bn_forward<T: Scalar>(
    x: &mut Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
) -> (BnCache<T>, Option<(Vec<f64>, Vec<f64>)>) {
    let (n, c, hw) = (x.n, x.c, x.plane());
    let count = (n * hw) as f64;
    let mut means = vec![0.0; c];
    let mut vars = vec![0.0; c];
    let mut invstd = vec![0.0; c];
    for ch in 0..c {
        let planes = (0..n).map(|s| (s * c + ch) * hw);
        let (mean, var) = match running {
            Some((rm, rv)) => (rm[ch].as_f64(), rv[ch].as_f64()),
            None => {
                let mean = planes
                    .clone()
                    .flat_map(|o| x.data[o..o + hw].iter())
                    .map(|v| v.as_f64())
                    .sum::<f64>()
                    / count;
                let ss = planes
                    .clone()
                    .flat_map(|o| x.data[o..o + hw].iter())
                    .map(|v| (v.as_f64() - mean).powi(2))
                    .sum::<f64>();
                (mean, ss / count)
            }
        };
        means[ch] = mean;
        vars[ch] = var;
        invstd[ch] = 1.0 / (var + BN_EPS).sqrt();
    }
    let mut xhat = vec![T::zero(); x.data.len()];
    for s in 0..n {
        for ch in 0..c {
            let o = (s * c + ch) * hw;
            let (m, is) = (T::from_f64_lossy(means[ch]), T::from_f64_lossy(invstd[ch]));
            let (g, b) = (gamma[ch], beta[ch]);
            for (v, xh) in x.data[o..o + hw].iter_mut().zip(&mut xhat[o..o + hw]) {
                *xh = (*v - m) * is;
                *v = g * *xh + b;
            }
        }
    }
    let stats = running.is_none().then(|| {
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        (means, vars.iter().map(|v| v * unbias).collect())
    });
    (
        BnCache {
            xhat,
            invstd,
            batch: running.is_none(),
        },
        stats,
    )
}

/// In-place: `dy` becomes the gradient w.r.t. the normalization input.
/// Returns `(dgamma, dbeta)`.
pub(crate) fn bn_backward<T: Scalar>(
    dy: &mut Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
) -> (Vec<T>, Vec<T>) {
    let (n, c, hw) = (dy.n, dy.c, dy.plane());
    let count = (n * hw) as f64;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for s in 0..n {
            let o = (s * c + ch) * hw;
            for (g, xh) in dy.data[o..o + hw].iter().zip(&cache.xhat[o..o + hw]) {
                sum_dy += g.as_f64();
                sum_dy_xhat += g.as_f64() * xh.as_f64();
            }
        }
        dgamma[ch] = T::from_f64_lossy(sum_dy_xhat);
        dbeta[ch] = T::from_f64_lossy(sum_dy);
        let scale = gamma[ch].as_f64() * cache.invstd[ch];
        for s in 0..n {
            let o = (s * c + ch) * hw;
            for (g, xh) in dy.data[o..o + hw].iter_mut().zip(&cache.xhat[o..o + hw]) {
                let v = if cache.batch {
                    scale * (g.as_f64() - sum_dy / count - xh.as_f64() * sum_dy_xhat / count)
                } else {
                    scale * g.as_f64()
                };
                *g = T::from_f64_lossy(v);
            }
        }
    }
    (dgamma, dbeta)
}

pub(crate) fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    let zero = T::zero();
    x.data.iter_mut().for_each(|v| {
        if *v < zero {
            *v = zero
        }
    });
}

/// Zero the gradient wherever the ReLU output was not positive.
pub(crate) fn relu_backward<T: Scalar>(dy: &mut Tensor<T>, output: &Tensor<T>) {
    let zero = T::zero();
    for (g, &o) in dy.data.iter_mut().zip(&output.data) {
        if o <= zero {
            *g = zero;
        }
    }
}

/// 2x2 max-pool; ties go to the first element in row-major order.
pub(crate) fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u8; out.data.len()];
    for p in 0..x.n * x.c {
        let src = &x.data[p * x.plane()..(p + 1) * x.plane()];
        for y in 0..oh {
            for xx in 0..ow {
                let o = p * oh * ow + y * ow + xx;
                let base = 2 * y * x.w + 2 * xx;
                let cand = [base, base + 1, base + x.w, base + x.w + 1];
                let mut best = 0;
                for (j, &i) in cand.iter().enumerate().skip(1) {
                    if src[i] > src[cand[best]] {
                        best = j;
                    }
                }
                out.data[o] = src[cand[best]];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward<T: Scalar>(dy: &Tensor<T>, arg: &[u8], h: usize, w: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let (oh, ow) = (dy.h, dy.w);
    for p in 0..dy.n * dy.c {
        for y in 0..oh {
            for xx in 0..ow {
                let o = p * oh * ow + y * ow + xx;
                let a = arg[o] as usize;
                let i = (2 * y + a / 2) * w + 2 * xx + a % 2;
                dx.data[p * h * w + i] += dy.data[o];
            }
        }
    }
    dx
}

pub(crate) fn upsample_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    for p in 0..x.n * x.c {
        let src = &x.data[p * x.plane()..(p + 1) * x.plane()];
        let dst = &mut out.data[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for p in 0..dy.n * dy.c {
        let src = &dy.data[p * dy.plane()..(p + 1) * dy.plane()];
        let dst = &mut dx.data[p * h * w..(p + 1) * h * w];
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dst[(y / 2) * w + xx / 2] += src[y * dy.w + xx];
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub(crate) fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    let (la, lb) = (a.sample_len(), b.sample_len());
    for s in 0..a.n {
        let dst = out.sample_mut(s);
        dst[..la].copy_from_slice(a.sample(s));
        dst[la..la + lb].copy_from_slice(b.sample(s));
    }
    out
}

pub(crate) fn split_channels<T: Scalar>(d: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let cb = d.c - ca;
    let mut a = Tensor::zeros(d.n, ca, d.h, d.w);
    let mut b = Tensor::zeros(d.n, cb, d.h, d.w);
    let la = ca * d.plane();
    for s in 0..d.n {
        a.sample_mut(s).copy_from_slice(&d.sample(s)[..la]);
        b.sample_mut(s).copy_from_slice(&d.sample(s)[la..]);
    }
    (a, b)
}

/// Whole-channel dropout masks for every sample, scaled by `1 / (1 - rate)`.
/// Sample `s` draws its `channels` keep decisions from `rngs[s]`.
pub(crate) fn dropout_scales<T: Scalar>(
    rngs: &mut [ChaCha8Rng],
    channels: usize,
    rate: f64,
) -> Vec<T> {
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let mut scales = Vec::with_capacity(rngs.len() * channels);
    for rng in rngs.iter_mut() {
        for _ in 0..channels {
            let u: f64 = rng.random();
            scales.push(if u >= rate { keep } else { T::zero() });
        }
    }
    scales
}

pub(crate) fn scale_channels<T: Scalar>(x: &mut Tensor<T>, scales: &[T]) {
    let hw = x.plane();
    for (plane, &s) in x.data.chunks_mut(hw).zip(scales) {
        plane.iter_mut().for_each(|v| *v *= s);
    }
}
