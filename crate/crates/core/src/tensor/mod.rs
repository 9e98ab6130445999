//! Dense row-major tensors and the dense layers used by the forecasting models.
//!
//! Every layer comes as a forward/backward pair of free functions. Backward
//! functions take whatever the forward pass cached (usually its input) and
//! return gradients with the same shapes as the forward arguments. The dense
//! layers double as the reference implementation the sparse engine is tested
//! against. Convolutions unfold their input and hand the product to a GEMM.

mod conv;
mod dump;
mod ops;
mod tape;

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::{Float, NumCast};

use crate::error::{Error, Result};

pub use conv::{
    conv2d_backward, conv2d_forward, conv3d_backward, conv3d_forward, conv_transpose3d_backward,
    conv_transpose3d_forward, maxpool3d_backward, maxpool3d_forward, pooled_dims, ConvGrads, ConvSpec, KernelWeights,
    MaxPoolResult,
};
pub use dump::{read_dense_dump, write_dense_dump, DENSE_DUMP_MAGIC};
pub use ops::{
    add_backward, add_forward, broadcast_time, broadcast_time_backward, concat_channels, concat_time, mse_loss,
    relu_backward, relu_forward, slice_time, split_channels, stack_time_channels, unstack_time_channels, MseResult,
};
pub use tape::GradientTape;

/// Scalar element type. Training runs in `f32`; gradient checks run in `f64`.
pub trait Real: Float + AddAssign + SubAssign + MulAssign + Default + Debug + Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 is representable")
    }

    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("finite cast to f64")
    }

    /// `C = A B + beta C` for strided `m x k`, `k x n` and `m x n` matrices.
    fn gemm(m: usize, k: usize, n: usize, a: Mat<'_, Self>, b: Mat<'_, Self>, beta: Self, c: MatMut<'_, Self>);
}

/// Read-only strided matrix operand: `(values, row_stride, col_stride)`.
pub type Mat<'a, T> = (&'a [T], usize, usize);
/// Output matrix operand: `(values, row_stride, col_stride)`.
pub type MatMut<'a, T> = (&'a mut [T], usize, usize);

fn reach(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, a: Mat<'_, $t>, b: Mat<'_, $t>, beta: $t, c: MatMut<'_, $t>) {
                assert!(reach(m, k, a.1, a.2) <= a.0.len(), "gemm: A out of bounds");
                assert!(reach(k, n, b.1, b.2) <= b.0.len(), "gemm: B out of bounds");
                assert!(reach(m, n, c.1, c.2) <= c.0.len(), "gemm: C out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched lies inside the slices checked above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.0.as_ptr(),
                        a.1 as isize,
                        a.2 as isize,
                        b.0.as_ptr(),
                        b.1 as isize,
                        b.2 as isize,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1 as isize,
                        c.2 as isize,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major N-dimensional array. Values are shared between reshaped views
/// and copied on write.
#[derive(Clone, PartialEq)]
pub struct DenseTensor<T = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Debug> Debug for DenseTensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenseTensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Real> DenseTensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) && !data.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "shape {shape:?} has a zero dimension but {} values",
                data.len()
            )));
        }
        if expected != data.len() {
            return Err(Error::shape("DenseTensor::new", "element count", expected, data.len()));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); n]),
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new((0..n).map(&mut f).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; clones the buffer if it is shared with another view.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// New header over the same values.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", "element count", self.data.len(), n));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn cast<U: Real>(&self) -> DenseTensor<U> {
        DenseTensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect()),
        }
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| !v.is_zero()).count()
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for axis in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.shape[axis + 1];
        }
        strides
    }

    pub fn at(&self, index: &[usize]) -> T {
        let offset: usize = index.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        self.data[offset]
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::RankMismatch {
                op,
                expected: rank,
                actual: self.shape.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        self.expect_rank(op, shape.len())?;
        for (axis, (&want, &got)) in shape.iter().zip(&self.shape).enumerate() {
            if want != got {
                return Err(Error::shape(op, format!("axis {axis}"), want, got));
            }
        }
        Ok(())
    }

    /// Shape as `[B, C, T, H, W]`; errors unless the tensor is rank 5.
    pub(crate) fn dims5(&self, op: &'static str) -> Result<[usize; 5]> {
        self.expect_rank(op, 5)?;
        Ok([
            self.shape[0],
            self.shape[1],
            self.shape[2],
            self.shape[3],
            self.shape[4],
        ])
    }
}

/// Largest elementwise `|a - b| / max(|a|, |b|)`, ignoring pairs where both are
/// below `floor` in magnitude.
pub fn max_relative_diff<T: Real>(a: &[T], b: &[T], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x.to_f64(), y.to_f64());
            let scale = x.abs().max(y.abs());
            if scale <= floor {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(DenseTensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = DenseTensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn reshape_shares_values() {
        let t = DenseTensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(Arc::ptr_eq(&r.data, &t.data));
        assert!(t.reshape(&[4]).is_err());
    }

    #[test]
    fn copy_on_write_keeps_views_independent() {
        let t = DenseTensor::<f32>::zeros(&[4]);
        let mut r = t.reshape(&[2, 2]).unwrap();
        r.data_mut()[0] = 1.0;
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(r.data()[0], 1.0);
    }

    #[test]
    fn at_uses_row_major_strides() {
        let t = DenseTensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.strides(), vec![12, 4, 1]);
    }
}
