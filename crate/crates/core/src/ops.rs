//! Forward and backward kernels for the layers a residual CNN needs.
//!
//! Activations are NCHW. Convolutions lower each sample with im2col and run a
//! single GEMM; the backward pass recomputes the lowered input instead of
//! caching it.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_area(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let area = ho * wo;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * area..(row + 1) * area];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let area = ho * wo;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * area..(row + 1) * area];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let n = x.shape()[0];
    let (plen, area) = (g.patch_len(), g.out_area());
    debug_assert_eq!(w.len(), g.out_channels * plen);
    let mut out = Tensor::zeros(&[n, g.out_channels, g.out_h(), g.out_w()]);
    let mut col = vec![T::zero(); plen * area];
    let out_per = g.out_channels * area;
    for i in 0..n {
        im2col(g, x.sample(i), &mut col);
        let dst = &mut out.data_mut()[i * out_per..(i + 1) * out_per];
        T::gemm(
            g.out_channels,
            plen,
            area,
            T::one(),
            (w.data(), plen as isize, 1),
            (&col, area as isize, 1),
            T::zero(),
            (dst, area as isize, 1),
        );
    }
    out
}

/// Returns `(dx, dw)`; `dx` is skipped when the input is the network input.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let n = x.shape()[0];
    let (plen, area) = (g.patch_len(), g.out_area());
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = vec![T::zero(); plen * area];
    let mut dcol = vec![T::zero(); plen * area];
    let in_per = g.in_channels * g.in_h * g.in_w;
    for i in 0..n {
        let dyi = dy.sample(i);
        im2col(g, x.sample(i), &mut col);
        // dw += dy_i * col^T
        T::gemm(
            g.out_channels,
            area,
            plen,
            T::one(),
            (dyi, area as isize, 1),
            (&col, 1, area as isize),
            T::one(),
            (dw.data_mut(), plen as isize, 1),
        );
        if let Some(dx) = dx.as_mut() {
            // dcol = w^T * dy_i
            T::gemm(
                plen,
                g.out_channels,
                area,
                T::one(),
                (w.data(), 1, plen as isize),
                (dyi, area as isize, 1),
                T::zero(),
                (&mut dcol, area as isize, 1),
            );
            col2im_add(g, &dcol, &mut dx.data_mut()[i * in_per..(i + 1) * in_per]);
        }
    }
    (dx, dw)
}

/// Saved state for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
}

/// Per-channel batch statistics of one train-mode batch-norm call.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the value folded into running statistics.
    pub var: Vec<T>,
}

fn channel_dims<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2] * s[3])
}

pub fn batchnorm_forward_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Tensor<T>, BnCache<T>, BatchStats<T>) {
    let (n, c, hw) = channel_dims(x);
    let m = (n * hw) as f64;
    let mut mean = vec![T::zero(); c];
    let mut var_biased = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            sum += x.data()[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = sum / m;
        let mut sq = 0.0f64;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            sq += x.data()[base..base + hw]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = T::of(mu);
        var_biased[ch] = T::of(sq / m);
    }
    let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (y, xhat) = normalize(x, &mean, &inv_std, gamma, beta);
    let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
    let var = var_biased.iter().map(|&v| T::of(v.as_f64() * unbiased)).collect();
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_stats: true,
        },
        BatchStats { mean, var },
    )
}

pub fn batchnorm_forward_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> (Tensor<T>, BnCache<T>) {
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (y, xhat) = normalize(x, running_mean, &inv_std, gamma, beta);
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_stats: false,
        },
    )
}

fn normalize<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, hw) = channel_dims(x);
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            let src = &x.data()[base..base + hw];
            let xh = &mut xhat.data_mut()[base..base + hw];
            for (d, &v) in xh.iter_mut().zip(src) {
                *d = (v - mu) * is;
            }
            let dst = &mut y.data_mut()[base..base + hw];
            for (d, &h) in dst.iter_mut().zip(xh.iter()) {
                *d = h * g + b;
            }
        }
    }
    (y, xhat)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, hw) = channel_dims(dy);
    let m = T::of((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for (d, h) in dy.data()[base..base + hw].iter().zip(&cache.xhat.data()[base..base + hw]) {
                dgamma[ch] += *d * *h;
                dbeta[ch] += *d;
            }
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let scale = gamma[ch] * cache.inv_std[ch];
            let src = &dy.data()[base..base + hw];
            let dst = &mut dx.data_mut()[base..base + hw];
            if cache.batch_stats {
                let xh = &cache.xhat.data()[base..base + hw];
                let (sb, sg) = (dbeta[ch] / m, dgamma[ch] / m);
                for ((d, &g), &h) in dst.iter_mut().zip(src).zip(xh) {
                    *d = scale * (g - sb - h * sg);
                }
            } else {
                for (d, &g) in dst.iter_mut().zip(src) {
                    *d = scale * g;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Masks `dy` in place by the positive entries of the ReLU output `y`.
pub fn relu_backward_inplace<T: Scalar>(dy: &mut Tensor<T>, y: &Tensor<T>) {
    for (d, &o) in dy.data_mut().iter_mut().zip(y.data()) {
        if !(o > T::zero()) {
            *d = T::zero();
        }
    }
}

pub fn add_inplace<T: Scalar>(x: &mut Tensor<T>, other: &Tensor<T>) {
    debug_assert_eq!(x.shape(), other.shape());
    for (a, &b) in x.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, hw) = channel_dims(x);
    let inv = T::of(1.0 / hw as f64);
    let data = (0..n * c)
        .map(|nc| x.data()[nc * hw..(nc + 1) * hw].iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[n, c], data).expect("pool shape")
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, input_shape: &[usize]) -> Tensor<T> {
    let hw = input_shape[2] * input_shape[3];
    let inv = T::of(1.0 / hw as f64);
    let mut dx = Tensor::zeros(input_shape);
    for (nc, &g) in dy.data().iter().enumerate() {
        dx.data_mut()[nc * hw..(nc + 1) * hw].fill(g * inv);
    }
    dx
}

/// `y = x w^T + b` with `x: (n, in)`, `w: (out, in)`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &[T]) -> Tensor<T> {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    let mut y = Tensor::zeros(&[n, fout]);
    for row in y.data_mut().chunks_mut(fout) {
        row.copy_from_slice(b);
    }
    T::gemm(
        n,
        fin,
        fout,
        T::one(),
        (x.data(), fin as isize, 1),
        (w.data(), 1, fin as isize),
        T::one(),
        (y.data_mut(), fout as isize, 1),
    );
    y
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    let mut dx = Tensor::zeros(x.shape());
    T::gemm(
        n,
        fout,
        fin,
        T::one(),
        (dy.data(), fout as isize, 1),
        (w.data(), fin as isize, 1),
        T::zero(),
        (dx.data_mut(), fin as isize, 1),
    );
    let mut dw = Tensor::zeros(w.shape());
    T::gemm(
        fout,
        n,
        fin,
        T::one(),
        (dy.data(), 1, fout as isize),
        (x.data(), fin as isize, 1),
        T::zero(),
        (dw.data_mut(), fin as isize, 1),
    );
    let mut db = vec![T::zero(); fout];
    for row in dy.data().chunks(fout) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    (dx, dw, db)
}

/// Mean softmax cross-entropy times `scale`.
#[derive(Debug, Clone)]
pub struct CrossEntropy<T> {
    pub loss: T,
    pub dlogits: Tensor<T>,
    pub correct: usize,
}

pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    scale: T,
) -> Result<CrossEntropy<T>> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let mut dlogits = Tensor::zeros(logits.shape());
    let mut total = 0.0f64;
    let mut correct = 0;
    let inv_n = T::of(1.0 / n as f64);
    for (i, (&label, row)) in labels.iter().zip(logits.data().chunks(k)).enumerate() {
        if label >= k {
            return Err(Error::LabelSpace(format!("label {label} with {k} classes")));
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        let loss_i = z.ln() + max - row[label];
        if !loss_i.is_finite() {
            return Err(Error::NonFiniteLoss { index: i });
        }
        total += loss_i.as_f64();
        let argmax = row
            .iter()
            .enumerate()
            .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
        if argmax == label {
            correct += 1;
        }
        let d = &mut dlogits.data_mut()[i * k..(i + 1) * k];
        for (j, (dj, e)) in d.iter_mut().zip(&exps).enumerate() {
            let target = if j == label { T::one() } else { T::zero() };
            *dj = (*e / z - target) * inv_n * scale;
        }
    }
    Ok(CrossEntropy {
        loss: T::of(total / n as f64) * scale,
        dlogits,
        correct,
    })
}
