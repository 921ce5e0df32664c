//! Raw loops behind the tape operations.

pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    // Row-major strides: (row, col) = (k, 1), (n, 1), (n, 1).
    gemm(a, (k, 1), b, (n, 1), out, m, k, n);
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
pub(crate) fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(g, (n, 1), b, (1, n), out, m, n, k);
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (1, k), g, (n, 1), out, k, m, n);
}

/// `out[m,n] += A[m,k] * B[k,n]` with A and B read through (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(
        a.len() >= m * k && b.len() >= k * n && out.len() >= m * n,
        "gemm operand too short"
    );
    // SAFETY: the extents were checked above and every stride addresses inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Index map for swapping two axes: `out[j] = x[map[j]]`.
pub(crate) fn transpose_map(dims: &[usize], a1: usize, a2: usize) -> (Vec<usize>, Vec<usize>) {
    let mut out_dims = dims.to_vec();
    out_dims.swap(a1, a2);
    let in_strides = strides(dims);
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(a1, a2);
    let total: usize = dims.iter().product();
    // Odometer over output coordinates, tracking the matching input offset.
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_dims.len()];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for ax in (0..out_dims.len()).rev() {
            idx[ax] += 1;
            offset += perm_strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            offset -= perm_strides[ax] * out_dims[ax];
            idx[ax] = 0;
        }
    }
    (out_dims, map)
}

/// Splits dims around `axis` into (outer, len, inner) loop extents.
pub(crate) fn axis_extents(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
    }

    #[test]
    fn transpose_2d() {
        let (dims, map) = transpose_map(&[2, 3], 0, 1);
        assert_eq!(dims, vec![3, 2]);
        assert_eq!(map, vec![0, 3, 1, 4, 2, 5]);
    }
}
