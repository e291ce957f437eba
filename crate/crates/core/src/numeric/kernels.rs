//! Slice-level kernels shared by the tape and no-grad inference paths.

use super::tensor::Scalar;

/// `out += a[m×k] · b[k×n]`
#[inline]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + s * bv;
            }
        }
    }
}

/// `ga[m×k] += g[m×n] · b[k×n]ᵀ`
#[inline]
pub fn matmul_bt_acc<T: Scalar>(g: &[T], b: &[T], m: usize, n: usize, k: usize, ga: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            ga[i * k + p] = ga[i * k + p] + dot(grow, brow);
        }
    }
}

/// `gb[k×n] += a[m×k]ᵀ · g[m×n]`
#[inline]
pub fn matmul_at_acc<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize, gb: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == T::zero() {
                continue;
            }
            let brow = &mut gb[p * n..(p + 1) * n];
            for (o, &gv) in brow.iter_mut().zip(grow) {
                *o = *o + s * gv;
            }
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // Four independent accumulators so the loop vectorizes without reassociation.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] = acc[l] + a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s = s + a[j] * b[j];
    }
    s
}

#[inline]
pub fn axpy<T: Scalar>(y: &mut [T], x: &[T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = *o + v;
    }
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64c(GELU_C);
    let k = T::from_f64c(GELU_K);
    let half = T::from_f64c(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64c(GELU_C);
    let k = T::from_f64c(GELU_K);
    let half = T::from_f64c(0.5);
    let three = T::from_f64c(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}
