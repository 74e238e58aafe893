//! Pure array routines shared by the autodiff tape and the tape-free
//! inference path, so both compute the same arithmetic.
//!
//! All kernels are deterministic: parallel variants split work into
//! fixed-size chunks whose per-element accumulation order does not depend
//! on the thread count.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::Scalar;

/// Multiply-add count above which matmul splits into parallel chunks.
const PAR_MATMUL_THRESHOLD: usize = 1 << 23;
const MATMUL_ROW_CHUNK: usize = 256;
const MATMUL_COL_CHUNK: usize = 4096;
const PAR_SOFTMAX_THRESHOLD: usize = 1 << 20;
const SOFTMAX_ROW_CHUNK: usize = 64;

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// tanh-form GELU; `gelu_deriv` differentiates this same form so the
/// analytic gradient matches finite differences.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_deriv<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Numerically stable softmax over one contiguous row.
pub fn softmax_slice_inplace<T: Scalar>(row: &mut [T]) {
    debug_assert!(!row.is_empty());
    let mut mx = row[0];
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Row-wise softmax over a standard-layout matrix; parallel over fixed row
/// chunks when large.
pub fn softmax_rows_inplace<T: Scalar>(x: &mut Array2<T>) {
    let (n, d) = x.dim();
    if n == 0 || d == 0 {
        return;
    }
    let data = x.as_slice_mut().expect("standard layout");
    if n * d >= PAR_SOFTMAX_THRESHOLD {
        data.par_chunks_mut(SOFTMAX_ROW_CHUNK * d).for_each(|chunk| {
            for row in chunk.chunks_mut(d) {
                softmax_slice_inplace(row);
            }
        });
    } else {
        for row in data.chunks_mut(d) {
            softmax_slice_inplace(row);
        }
    }
}

/// max + ln(sum exp(x - max)) over one row.
pub fn row_logsumexp<T: Scalar>(row: &[T]) -> T {
    debug_assert!(!row.is_empty());
    let mut mx = row[0];
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for &v in row.iter() {
        sum = sum + (v - mx).exp();
    }
    mx + sum.ln()
}

/// Kernel scores used by the convolution: softmax of each channel row when
/// `scored`, the raw weights otherwise.
pub fn conv_scores<T: Scalar>(weights: ArrayView2<T>, scored: bool) -> Array2<T> {
    let mut alpha = weights.to_owned();
    if scored {
        for row in alpha
            .as_slice_mut()
            .expect("standard layout")
            .chunks_mut(weights.ncols())
        {
            softmax_slice_inplace(row);
        }
    }
    alpha
}

/// Depthwise convolution with left-aligned windows:
/// `out[t][c] = sum_i alpha[c][i] * x[t+i][c]`, reading implicit zero rows
/// past the end of the sequence so the output length equals the input
/// length.
pub fn depthwise_conv<T: Scalar>(x: ArrayView2<T>, alpha: ArrayView2<T>) -> Array2<T> {
    let (n, d) = x.dim();
    let k = alpha.ncols();
    assert_eq!(alpha.nrows(), d, "kernel rows {} != channels {}", alpha.nrows(), d);
    let mut out = Array2::<T>::zeros((n, d));
    if n == 0 || d == 0 {
        return out;
    }
    // (k x d) transpose keeps the channel loop contiguous
    let alpha_t: Array2<T> = alpha.t().as_standard_layout().to_owned();
    let at = alpha_t.as_slice().expect("standard layout");
    let xc = x.as_standard_layout();
    let xs = xc.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    for t in 0..n {
        let orow = &mut os[t * d..(t + 1) * d];
        let imax = k.min(n - t);
        for i in 0..imax {
            let xrow = &xs[(t + i) * d..(t + i + 1) * d];
            let arow = &at[i * d..(i + 1) * d];
            for c in 0..d {
                orow[c] = orow[c] + arow[c] * xrow[c];
            }
        }
    }
    out
}

/// Gradient of `depthwise_conv` w.r.t. its input:
/// `dx[t+i][c] += alpha[c][i] * dout[t][c]`.
pub fn depthwise_conv_backward_x<T: Scalar>(
    dout: ArrayView2<T>,
    alpha: ArrayView2<T>,
) -> Array2<T> {
    let (n, d) = dout.dim();
    let k = alpha.ncols();
    let mut dx = Array2::<T>::zeros((n, d));
    if n == 0 || d == 0 {
        return dx;
    }
    let alpha_t: Array2<T> = alpha.t().as_standard_layout().to_owned();
    let at = alpha_t.as_slice().expect("standard layout");
    let gc = dout.as_standard_layout();
    let gs = gc.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");
    for t in 0..n {
        let grow = &gs[t * d..(t + 1) * d];
        let imax = k.min(n - t);
        for i in 0..imax {
            let xrow = &mut xs[(t + i) * d..(t + i + 1) * d];
            let arow = &at[i * d..(i + 1) * d];
            for c in 0..d {
                xrow[c] = xrow[c] + arow[c] * grow[c];
            }
        }
    }
    dx
}

/// Gradient of `depthwise_conv` w.r.t. the per-channel scores:
/// `v[c][i] = sum_t dout[t][c] * x[t+i][c]`.
pub fn depthwise_conv_score_grad<T: Scalar>(
    dout: ArrayView2<T>,
    x: ArrayView2<T>,
    k: usize,
) -> Array2<T> {
    let (n, d) = x.dim();
    let mut vt = Array2::<T>::zeros((k, d));
    if n > 0 && d > 0 {
        let gc = dout.as_standard_layout();
        let gs = gc.as_slice().expect("standard layout");
        let xc = x.as_standard_layout();
        let xs = xc.as_slice().expect("standard layout");
        let vs = vt.as_slice_mut().expect("standard layout");
        for t in 0..n {
            let grow = &gs[t * d..(t + 1) * d];
            let imax = k.min(n - t);
            for i in 0..imax {
                let xrow = &xs[(t + i) * d..(t + i + 1) * d];
                let vrow = &mut vs[i * d..(i + 1) * d];
                for c in 0..d {
                    vrow[c] = vrow[c] + grow[c] * xrow[c];
                }
            }
        }
    }
    vt.t().as_standard_layout().to_owned()
}

/// Matrix product with fixed-chunk parallelism for large outputs. Each
/// output element is produced by exactly one sequential inner gemm, so the
/// result is bit-identical for any thread count.
pub fn matmul<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let (m, ka) = a.dim();
    let (kb, n) = b.dim();
    assert_eq!(ka, kb, "matmul: inner dims {} vs {}", ka, kb);
    if m * ka * n < PAR_MATMUL_THRESHOLD {
        return a.dot(&b);
    }
    let mut out = Array2::<T>::zeros((m, n));
    if m >= n {
        let oc: Vec<_> = out.axis_chunks_iter_mut(Axis(0), MATMUL_ROW_CHUNK).collect();
        let ac: Vec<_> = a.axis_chunks_iter(Axis(0), MATMUL_ROW_CHUNK).collect();
        oc.into_par_iter().zip(ac).for_each(|(mut o, asub)| {
            o.assign(&asub.dot(&b));
        });
    } else {
        let oc: Vec<_> = out.axis_chunks_iter_mut(Axis(1), MATMUL_COL_CHUNK).collect();
        let bc: Vec<_> = b.axis_chunks_iter(Axis(1), MATMUL_COL_CHUNK).collect();
        oc.into_par_iter().zip(bc).for_each(|(mut o, bsub)| {
            o.assign(&a.dot(&bsub));
        });
    }
    out
}

/// Per-row layer normalization with biased variance.
pub fn layer_norm_rows<T: Scalar>(
    x: ArrayView2<T>,
    gain: &[T],
    bias: &[T],
    eps: f64,
) -> Array2<T> {
    let (n, d) = x.dim();
    assert_eq!(gain.len(), d);
    assert_eq!(bias.len(), d);
    let eps = T::from_f64(eps);
    let mut out = Array2::<T>::zeros((n, d));
    if d == 0 {
        return out;
    }
    let xc = x.as_standard_layout();
    let xs = xc.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    let dn = T::from_f64(d as f64);
    for t in 0..n {
        let xrow = &xs[t * d..(t + 1) * d];
        let orow = &mut os[t * d..(t + 1) * d];
        let mut mean = T::zero();
        for &v in xrow {
            mean = mean + v;
        }
        mean = mean / dn;
        let mut var = T::zero();
        for &v in xrow {
            let c = v - mean;
            var = var + c * c;
        }
        var = var / dn;
        let inv = T::one() / (var + eps).sqrt();
        for c in 0..d {
            orow[c] = (xrow[c] - mean) * inv * gain[c] + bias[c];
        }
    }
    out
}

/// Max over valid rows per channel, with the argmax rows for backward.
/// Returns `None` when no row is valid.
pub fn max_pool_rows<T: Scalar>(
    x: ArrayView2<T>,
    valid: &[bool],
) -> Option<(Array1<T>, Vec<usize>)> {
    let (n, d) = x.dim();
    assert_eq!(valid.len(), n);
    let first = valid.iter().position(|&v| v)?;
    let mut out = x.row(first).to_owned();
    let mut arg = vec![first; d];
    for t in first + 1..n {
        if !valid[t] {
            continue;
        }
        let row = x.row(t);
        for c in 0..d {
            if row[c] > out[c] {
                out[c] = row[c];
                arg[c] = t;
            }
        }
    }
    Some((out, arg))
}

/// Mean over valid rows per channel. Returns `None` when no row is valid.
pub fn mean_pool_rows<T: Scalar>(x: ArrayView2<T>, valid: &[bool]) -> Option<Array1<T>> {
    let (n, d) = x.dim();
    assert_eq!(valid.len(), n);
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return None;
    }
    let mut out = Array1::<T>::zeros(d);
    for t in 0..n {
        if valid[t] {
            out += &x.row(t);
        }
    }
    let inv = T::one() / T::from_f64(count as f64);
    out.mapv_inplace(|v| v * inv);
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut row = [0.0f64; 4];
        softmax_slice_inplace(&mut row);
        for v in row {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let mut row = [1000.0f32, 0.0];
        softmax_slice_inplace(&mut row);
        assert!(row.iter().all(|v| v.is_finite()));
        assert!((row[0] - 1.0).abs() < 1e-6);
        assert!(row[1] < 1e-6);
    }

    #[test]
    fn conv_matches_hand_case() {
        // x=[1,2,3,4], alpha=[0.25,0.75], zero pad on the right
        let x = array![[1.0f64], [2.0], [3.0], [4.0]];
        let alpha = array![[0.25f64, 0.75]];
        let out = depthwise_conv(x.view(), alpha.view());
        let expect = [1.75, 2.75, 3.75, 1.0];
        for (o, e) in out.column(0).iter().zip(expect) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn matmul_parallel_matches_serial() {
        let a = Array2::from_shape_fn((300, 40), |(i, j)| ((i * 7 + j * 13) % 11) as f64 - 5.0);
        let b = Array2::from_shape_fn((40, 900), |(i, j)| ((i * 3 + j * 5) % 7) as f64 - 3.0);
        let full = a.dot(&b);
        let chunked = matmul(a.view(), b.view());
        assert_eq!(full, chunked);
    }

    #[test]
    fn max_pool_respects_mask() {
        let x = array![[1.0f64, 5.0], [9.0, 9.0]];
        let (out, arg) = max_pool_rows(x.view(), &[true, false]).unwrap();
        assert_eq!(out, array![1.0, 5.0]);
        assert_eq!(arg, vec![0, 0]);
        assert!(max_pool_rows(x.view(), &[false, false]).is_none());
    }
}
