//! Dense row-major tensors over `f32` / `f64`.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Floating-point element type of the network. `f32` for inference and
/// training, `f64` for gradient checks.
pub trait Real:
    Copy
    + Default
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;

    /// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` m x k and
    /// `op(b)` k x n, all row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        alpha: Self,
        beta: Self,
    );
}

/// Below this reduction length the packed kernel wins for `A * B^T`.
const DOT_MIN_K: usize = 256;

/// `c = alpha * a * b^T + beta * c` with `a` `[m, k]` and `b` `[n, k]`
/// row-major: every output is a dot product of two contiguous rows. The
/// packed kernel is several times slower on this shape when `k` dwarfs
/// `m` and `n`, as in convolution weight gradients.
#[allow(clippy::too_many_arguments)]
fn dot_rows<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], alpha: T, beta: T) {
    const LANES: usize = 8;
    for i in 0..m {
        let ra = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let rb = &b[j * k..(j + 1) * k];
            let mut acc = [T::ZERO; LANES];
            let (ca, cb) = (ra.chunks_exact(LANES), rb.chunks_exact(LANES));
            let (ta, tb) = (ca.remainder(), cb.remainder());
            for (xa, xb) in ca.zip(cb) {
                for l in 0..LANES {
                    acc[l] += xa[l] * xb[l];
                }
            }
            let mut sum = acc.iter().fold(T::ZERO, |s, &v| s + v);
            for (&x, &y) in ta.iter().zip(tb) {
                sum += x * y;
            }
            let out = &mut c[i * n + j];
            *out = if beta == T::ZERO { alpha * sum } else { alpha * sum + beta * *out };
        }
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                alpha: Self,
                beta: Self,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand sizes");
                if m == 0 || n == 0 {
                    return;
                }
                if !a_t && b_t && k >= DOT_MIN_K {
                    dot_rows(m, k, n, a, b, c, alpha, beta);
                    return;
                }
                let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: the slices cover every index the strides reach
                // (checked above) and `c` does not alias `a` or `b`.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
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
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a rank-4 tensor, got shape {:?}", self.shape),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Stacks equal-shaped tensors along a new leading axis, or along the
    /// existing leading axis when `concat` is set.
    pub fn stack(parts: &[&Tensor<T>], concat: bool) -> Self {
        let first = parts[0].shape();
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut lead = 0;
        for p in parts {
            assert_eq!(&p.shape()[1..], &first[1..], "stack shape mismatch");
            if !concat {
                assert_eq!(p.shape(), first, "stack shape mismatch");
            }
            lead += p.shape()[0];
            data.extend_from_slice(p.data());
        }
        let mut shape = if concat { first.to_vec() } else { [&[parts.len()], first].concat() };
        if concat {
            shape[0] = lead;
        }
        Tensor { shape, data }
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_lead(&self, start: usize, end: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        }
    }
}
