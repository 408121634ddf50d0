//! Small dense kernels used by the forward and backward passes.

use std::fmt::Debug;

use num_traits::{Float, NumAssign};

pub(crate) trait Real: Float + NumAssign + Debug + Default + Send + Sync + 'static {
    fn lit(x: f64) -> Self;
    fn from_f32(x: f32) -> Self;
}

impl Real for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }
    fn from_f32(x: f32) -> Self {
        x
    }
}

impl Real for f64 {
    fn lit(x: f64) -> Self {
        x
    }
    fn from_f32(x: f32) -> Self {
        f64::from(x)
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `x (n x k) * w (k x m) + b`.
pub(crate) fn linear<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        if let Some(b) = b {
            row.copy_from_slice(b);
        }
        for (p, &xv) in x[i * k..(i + 1) * k].iter().enumerate() {
            if xv != T::zero() {
                axpy(xv, &w[p * m..(p + 1) * m], row);
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients of `y = x w + b` and returns
/// `dx = dy w^T` when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    k: usize,
    m: usize,
    dw: &mut [T],
    db: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    for i in 0..n {
        let dyr = &dy[i * m..(i + 1) * m];
        for (p, &xv) in x[i * k..(i + 1) * k].iter().enumerate() {
            if xv != T::zero() {
                axpy(xv, dyr, &mut dw[p * m..(p + 1) * m]);
            }
        }
    }
    if let Some(db) = db {
        for i in 0..n {
            axpy(T::one(), &dy[i * m..(i + 1) * m], db);
        }
    }
    want_dx.then(|| {
        let mut dx = vec![T::zero(); n * k];
        for i in 0..n {
            let dyr = &dy[i * m..(i + 1) * m];
            for p in 0..k {
                dx[i * k + p] = dot(dyr, &w[p * m..(p + 1) * m]);
            }
        }
        dx
    })
}

pub(crate) struct LayerNormOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn layer_norm<T: Real>(x: &[T], g: &[T], b: &[T], n: usize, d: usize) -> LayerNormOut<T> {
    let mut y = vec![T::zero(); n * d];
    let mut xhat = vec![T::zero(); n * d];
    let mut rstd = vec![T::zero(); n];
    let inv_d = T::lit(1.0 / d as f64);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let r = T::one() / (var + T::lit(LN_EPS)).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = g[j] * h + b[j];
        }
    }
    LayerNormOut { y, xhat, rstd }
}

/// Returns `dx` and accumulates gain/bias gradients.
pub(crate) fn layer_norm_backward<T: Real>(
    dy: &[T],
    ln: &LayerNormOut<T>,
    g: &[T],
    n: usize,
    d: usize,
    dg: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); n * d];
    let inv_d = T::lit(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &ln.xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let r = ln.rstd[i];
        for j in 0..d {
            dx[i * d + j] = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    T::lit(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..19).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
