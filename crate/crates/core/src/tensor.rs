//! Dense row-major tensors and the scalar abstraction shared by the model.
//!
//! Training and attacks run in `f32`; an `f64` mode exists for finite
//! difference gradient checking, where single precision is too coarse.

use crate::error::{Error, Result};
use num_traits::Float;

/// Scalar element of a [`Tensor`]. Implemented for `f32` and `f64`.
///
/// The GEMM hook dispatches to `matrixmultiply`, which keeps the hot matrix
/// products vectorized while all surrounding math stays in this crate.
pub trait Scalar:
    Float + std::ops::AddAssign + std::ops::SubAssign + std::ops::MulAssign + std::fmt::Debug + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * a(m x k) * b(k x n) + beta * c` with explicit row/column
    /// strides, so transposed and sliced views multiply without copies.
    /// Slices start at the first logical element; callers offset beforehand.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize + 1
}

macro_rules! impl_scalar {
    ($ty:ty, $gemm:path) => {
        impl Scalar for $ty {
            fn from_f64(v: f64) -> Self {
                v as $ty
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[allow(clippy::too_many_arguments)]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || k == 0 || n == 0 {
                    return;
                }
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
                assert!(a.len() >= span(m, k, rsa, csa), "lhs slice too short");
                assert!(b.len() >= span(k, n, rsb, csb), "rhs slice too short");
                assert!(c.len() >= span(m, n, rsc, csc), "out slice too short");
                unsafe {
                    $gemm(
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
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Row-major contiguous `c = alpha * a(m x k) * b(k x n) + beta * c`.
pub fn gemm<S: Scalar>(m: usize, k: usize, n: usize, alpha: S, a: &[S], b: &[S], beta: S, c: &mut [S]) {
    S::gemm(m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
}

/// Dense array with shape metadata; data is contiguous and row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Tensor(format!("zero extent in shape {shape:?}")));
        }
        if data.len() != expect {
            return Err(Error::Tensor(format!(
                "shape {shape:?} wants {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        if self.shape != other.shape {
            return Err(Error::Tensor(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(S::zero(), S::max))
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

impl Tensor<f32> {
    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(f64::from)
    }
}

impl Tensor<f64> {
    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(|v| v as f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn gemm_matches_naive() {
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f32, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f32; 4];
        gemm(2, 3, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // beta accumulates
        gemm(2, 3, 2, 1.0, &a, &b, 1.0, &mut c);
        assert_eq!(c, [116.0, 128.0, 278.0, 308.0]);
    }

    #[test]
    fn gemm_f64_matches_naive() {
        let a = [0.5f64, -1.0, 2.0, 0.25]; // 2x2
        let b = [1.0f64, 2.0, 3.0, -1.0]; // 2x2
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [-2.5, 2.0, 2.75, 3.75]);
    }

    #[test]
    fn strided_gemm_computes_transposes() {
        // a^T * a for a 2x3 matrix a, via strides only.
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let mut c = [0.0f32; 9]; // 3x3
        f32::gemm(3, 2, 3, 1.0, &a, 1, 3, &a, 3, 1, 0.0, &mut c, 3, 1);
        assert_eq!(c, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }

    #[test]
    fn finite_check_catches_nan() {
        let mut t = Tensor::<f32>::zeros(&[2, 2]);
        assert!(t.all_finite());
        t.data_mut()[3] = f32::NAN;
        assert!(!t.all_finite());
    }
}
