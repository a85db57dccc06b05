//! Raw loops over flat row-major buffers. No shape validation happens here.

use super::Element;

#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    let s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    s + tail
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = c[i * n + j] + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(brow) {
                *cj = *cj + api * bj;
            }
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visits every multi-index of `shape` in row-major order, calling `f` with
/// the offset computed from `src_strides`.
fn for_each_offset(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    if shape.is_empty() {
        f(0, 0);
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for flat in 0..n {
        f(flat, off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= src_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn permuted_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    axes.iter().map(|&a| shape[a]).collect()
}

pub(crate) fn permute<T: Element>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape = permuted_shape(shape, axes);
    let src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![T::zero(); data.len()];
    for_each_offset(&out_shape, &src, |flat, off| out[flat] = data[off]);
    out
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn broadcast_strides(in_shape: &[usize]) -> Vec<usize> {
    strides(in_shape)
        .into_iter()
        .zip(in_shape)
        .map(|(s, &e)| if e == 1 { 0 } else { s })
        .collect()
}

pub(crate) fn broadcast<T: Element>(data: &[T], in_shape: &[usize], out_shape: &[usize]) -> Vec<T> {
    let n = out_shape.iter().product();
    let mut out = vec![T::zero(); n];
    for_each_offset(out_shape, &broadcast_strides(in_shape), |flat, off| {
        out[flat] = data[off]
    });
    out
}

/// Adjoint of [`broadcast`]: sums `grad` (shaped `out_shape`) back onto `in_shape`.
pub(crate) fn unbroadcast<T: Element>(grad: &[T], in_shape: &[usize], out_shape: &[usize]) -> Vec<T> {
    let n = in_shape.iter().product();
    let mut out = vec![T::zero(); n];
    for_each_offset(out_shape, &broadcast_strides(in_shape), |flat, off| {
        out[off] = out[off] + grad[flat]
    });
    out
}

pub(crate) fn softmax<T: Element>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = 0.0f64;
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                sum += e.as_f64();
            }
            let inv = T::from_f64_lossy(1.0 / sum);
            for j in 0..len {
                y[at(j)] = y[at(j)] * inv;
            }
        }
    }
    y
}

pub(crate) fn log_softmax<T: Element>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = 0.0f64;
            for j in 0..len {
                sum += (x[at(j)] - max).exp().as_f64();
            }
            let lse = max + T::from_f64_lossy(sum.ln());
            for j in 0..len {
                y[at(j)] = x[at(j)] - lse;
            }
        }
    }
    y
}
