//! Forward kernels shared by the taped graph and the cached inference path.

use ndarray::{ArrayView2, Axis, Zip};

use super::Mat;
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm. Returns the output, the normalized input and each
/// row's inverse standard deviation.
pub fn layer_norm<T: Scalar>(x: ArrayView2<T>, gain: ArrayView2<T>, bias: ArrayView2<T>) -> (Mat<T>, Mat<T>, Vec<T>) {
    let n = T::of_usize(x.ncols());
    let eps = T::of(LAYER_NORM_EPS);
    let mut xhat = x.to_owned();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| *v * *v).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        inv_std.push(inv);
    }
    let g = gain.row(0);
    let b = bias.row(0);
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        Zip::from(&mut row).and(&g).and(&b).for_each(|v, &g, &b| *v = *v * g + b);
    }
    (y, xhat, inv_std)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`, which is markedly cheaper than the libm
/// routine on long rows.
#[inline]
fn fast_tanh<T: Scalar>(u: T) -> T {
    let two = T::of(2.0);
    if u.abs() > T::of(15.0) {
        return u.signum();
    }
    T::one() - two / ((two * u).exp() + T::one())
}

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(v: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * v * (T::one() + fast_tanh(c * (v + a * v * v * v)))
}

pub fn gelu_grad<T: Scalar>(v: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let u = c * (v + a * v * v * v);
    let th = fast_tanh(u);
    let du = c * (T::one() + T::of(3.0) * a * v * v);
    half * (T::one() + th) + half * v * (T::one() - th * th) * du
}

/// In-place numerically stable softmax over each row.
pub fn softmax_rows<T: Scalar>(m: &mut Mat<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Row-wise log-softmax of `x`.
pub fn log_softmax_rows<T: Scalar>(x: ArrayView2<T>) -> Mat<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Attention probabilities and output for one (sequence, head) block.
/// `causal` masks key `j > i + offset`, where `offset` lets a short query
/// block sit at the end of a longer key block.
pub fn attend<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    causal: bool,
    offset: usize,
) -> (Mat<T>, Mat<T>) {
    let scale = T::one() / T::of_usize(q.ncols()).sqrt();
    let mut scores = q.dot(&k.t());
    let width = scores.ncols();
    for (i, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        let valid = if causal { (i + offset + 1).min(width) } else { width };
        let (mut live, mut masked) = row.view_mut().split_at(Axis(0), valid);
        masked.fill(T::zero());
        let max = live.iter().fold(T::neg_infinity(), |m, &s| m.max(s * scale));
        let mut sum = T::zero();
        live.mapv_inplace(|s| {
            let e = (s * scale - max).exp();
            sum += e;
            e
        });
        let inv = T::one() / sum;
        live.mapv_inplace(|e| e * inv);
    }
    let out = scores.dot(&v);
    (scores, out)
}
