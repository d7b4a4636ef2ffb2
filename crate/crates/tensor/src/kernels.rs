//! Dense kernels. Products go through `matrixmultiply`; everything else is
//! plain loops over contiguous rows.

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    // SAFETY: the slices cover the strided extents passed to dgemm.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 1.0, out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `out[m,k] += a[m,n] · b[k,n]ᵀ`
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert!(a.len() >= m * n && b.len() >= k * n && out.len() >= m * k);
    // SAFETY: as above; `b` is read as an `[n, k]` column-major view.
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0, a.as_ptr(), n as isize, 1, b.as_ptr(), 1, n as isize, 1.0, out.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= m * n && out.len() >= k * n);
    // SAFETY: as above; `a` is read as a `[k, m]` column-major view.
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0, a.as_ptr(), 1, k as isize, b.as_ptr(), n as isize, 1, 1.0, out.as_mut_ptr(), n as isize, 1,
        );
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves axis `perm[j]` of the input to axis `j` of the output.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Row-wise softmax over the trailing axis with max subtraction.
pub(crate) fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, o) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (x, y) in row.iter().zip(o.iter_mut()) {
            *y = (x - max).exp();
            total += *y;
        }
        for y in o.iter_mut() {
            *y /= total;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, o) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        for (x, y) in row.iter().zip(o.iter_mut()) {
            *y = x - lse;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh` through a single `exp`, cheaper than libm's.
fn fast_tanh(y: f64) -> f64 {
    if y.abs() > 20.0 {
        return y.signum();
    }
    let e = (2.0 * y).exp();
    (e - 1.0) / (e + 1.0)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = fast_tanh(inner);
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
}
