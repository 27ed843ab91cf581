//! Slice-level kernels shared by forward and backward passes.

use crate::Real;

/// `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// When `a_t` is set, `a` holds the `k x m` matrix whose transpose is used;
/// likewise `b_t` means `b` holds `n x k`. `c` is row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths checked above; strides describe the stated layouts and
    // `c` is a distinct mutable slice.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materializes `x` permuted so that output axis `i` is input axis `perm[i]`.
pub(crate) fn permute<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let nd = out_shape.len();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    let inner = out_shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    loop {
        for j in 0..inner {
            out.push(x[offset + j * inner_stride]);
        }
        // advance all but the innermost axis
        let mut axis = nd - 1;
        loop {
            if axis == 0 {
                return (out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            offset += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= src_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_axis<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_extents(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for j in 0..len {
                out[base + j * inner] *= inv;
            }
        }
    }
    out
}

/// Log of the sum of exponentials of one row.
pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}
