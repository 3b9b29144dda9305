//! Slice-level kernels shared by the forward and backward passes.

use super::{Real, Result, TensorError};

/// Product of `a` (m×k) and `b` (k×n) into `c` (m×n), overwriting or
/// accumulating. `ta`/`tb` mean the operand is stored transposed, i.e. `a` is
/// laid out as k×m and `b` as n×k.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    ta: bool,
    b: &[F],
    tb: bool,
    c: &mut [F],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: the asserts above bound every strided access; `c` is a
    // distinct mutable borrow so it cannot alias `a` or `b`.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// For every element of `out`, the flat offset of the element of a tensor
/// with shape `input` that broadcasts onto it.
pub(crate) fn broadcast_offsets(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        let oi = i + rank - input.len();
        strides[oi] = if input[i] == 1 { 0 } else { s };
        s *= input[i];
    }
    let numel: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn is_suffix(shape: &[usize], of: &[usize]) -> bool {
    shape.len() <= of.len() && of[of.len() - shape.len()..] == *shape
}

/// Element-wise binary op under broadcasting; `out` is the broadcast shape.
pub(crate) fn broadcast_binary<F: Real>(
    a: &[F],
    a_shape: &[usize],
    b: &[F],
    b_shape: &[usize],
    out: &[usize],
    f: impl Fn(F, F) -> F,
) -> Vec<F> {
    if a_shape == out && b_shape == out {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if a_shape == out && is_suffix(b_shape, out) {
        let mut v = Vec::with_capacity(a.len());
        for c in a.chunks(b.len()) {
            v.extend(c.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
        return v;
    }
    if b_shape == out && is_suffix(a_shape, out) {
        let mut v = Vec::with_capacity(b.len());
        for c in b.chunks(a.len()) {
            v.extend(a.iter().zip(c).map(|(&x, &y)| f(x, y)));
        }
        return v;
    }
    let oa = broadcast_offsets(out, a_shape);
    let ob = broadcast_offsets(out, b_shape);
    oa.iter().zip(&ob).map(|(&i, &j)| f(a[i], b[j])).collect()
}

/// Sums `grad` (shaped `out`) down to `target`, the inverse of broadcasting.
pub(crate) fn reduce_to<F: Real>(grad: &[F], out: &[usize], target: &[usize]) -> Vec<F> {
    if out == target {
        return grad.to_vec();
    }
    let n: usize = target.iter().product();
    let mut acc = vec![F::zero(); n];
    if is_suffix(target, out) {
        for (i, &g) in grad.iter().enumerate() {
            acc[i % n] = acc[i % n] + g;
        }
    } else {
        for (&off, &g) in broadcast_offsets(out, target).iter().zip(grad) {
            acc[off] = acc[off] + g;
        }
    }
    acc
}

/// `(outer, len, inner)` decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<F: Real>(x: &[F], shape: &[usize], axis: usize, log: bool) -> Vec<F> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut y = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut max = F::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = F::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                sum = sum + e;
            }
            if log {
                let lse = sum.ln();
                for j in 0..len {
                    y[at(j)] = x[at(j)] - max - lse;
                }
            } else {
                for j in 0..len {
                    y[at(j)] = y[at(j)] / sum;
                }
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<F: Real>(
    y: &[F],
    dy: &[F],
    shape: &[usize],
    axis: usize,
    log: bool,
) -> Vec<F> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut dx = vec![F::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            if log {
                let mut s = F::zero();
                for j in 0..len {
                    s = s + dy[at(j)];
                }
                for j in 0..len {
                    dx[at(j)] = dy[at(j)] - y[at(j)].exp() * s;
                }
            } else {
                let mut s = F::zero();
                for j in 0..len {
                    s = s + dy[at(j)] * y[at(j)];
                }
                for j in 0..len {
                    dx[at(j)] = y[at(j)] * (dy[at(j)] - s);
                }
            }
        }
    }
    dx
}

/// Row-wise normalization; returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm<F: Real>(
    x: &[F],
    dim: usize,
    gamma: &[F],
    beta: &[F],
    eps: F,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let rows = x.len() / dim;
    let n = F::from_usize(dim).unwrap();
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().fold(F::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let rs = (var + eps).sqrt().recip();
        rstd[r] = rs;
        for j in 0..dim {
            let h = (row[j] - mean) * rs;
            xhat[r * dim + j] = h;
            y[r * dim + j] = h * gamma[j] + beta[j];
        }
    }
    (y, xhat, rstd)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward<F: Real>(
    dy: &[F],
    xhat: &[F],
    rstd: &[F],
    gamma: &[F],
    dim: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let rows = dy.len() / dim;
    let n = F::from_usize(dim).unwrap();
    let mut dx = vec![F::zero(); dy.len()];
    let mut dgamma = vec![F::zero(); dim];
    let mut dbeta = vec![F::zero(); dim];
    for r in 0..rows {
        let mut mean_d = F::zero();
        let mut mean_dx = F::zero();
        for j in 0..dim {
            let k = r * dim + j;
            let d = dy[k] * gamma[j];
            mean_d = mean_d + d;
            mean_dx = mean_dx + d * xhat[k];
            dgamma[j] = dgamma[j] + dy[k] * xhat[k];
            dbeta[j] = dbeta[j] + dy[k];
        }
        mean_d = mean_d / n;
        mean_dx = mean_dx / n;
        for j in 0..dim {
            let k = r * dim + j;
            dx[k] = rstd[r] * (dy[k] * gamma[j] - mean_d - xhat[k] * mean_dx);
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn permute<F: Real>(x: &[F], shape: &[usize], perm: &[usize]) -> (Vec<F>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // Trailing axes that stay in place are copied as contiguous runs.
    let mut keep = 0;
    while keep < rank && perm[rank - 1 - keep] == rank - 1 - keep {
        keep += 1;
    }
    let run: usize = shape[rank - keep..].iter().product();
    let outer = rank - keep;
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = perm[..outer].iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if run == 0 {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; outer];
    let mut off = 0usize;
    for _ in 0..x.len() / run {
        out.extend_from_slice(&x[off..off + run]);
        for d in (0..outer).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn add_assign<F: Real>(acc: &mut [F], g: &[F]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        let err = broadcast_shape("add", &[2, 3], &[4]).unwrap_err();
        assert_eq!(
            err.to_string(),
            "add: shape mismatch between [2, 3] and [4]"
        );
    }

    #[test]
    fn offsets_for_middle_broadcast() {
        let offs = broadcast_offsets(&[2, 2, 2], &[2, 1, 2]);
        assert_eq!(offs, vec![0, 1, 0, 1, 2, 3, 2, 3]);
    }

    #[test]
    fn permute_2d_is_transpose() {
        let (y, s) = permute(&[1.0f64, 2., 3., 4., 5., 6.], &[2, 3], &[1, 0]);
        assert_eq!(s, vec![3, 2]);
        assert_eq!(y, vec![1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn gemm_transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2., 3., 4.];
        let b = [5.0f64, 6., 7., 8.];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19., 22., 43., 50.]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26., 30., 38., 44.]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17., 23., 39., 53.]);
    }
}
