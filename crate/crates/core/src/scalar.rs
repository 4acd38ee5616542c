//! Scalar abstraction shared by volumes, resampling and the autoencoder.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point voxel / parameter type: `f32` or `f64`.
///
/// Voxel data and model parameters are stored as `Scalar`; every reduction
/// (means, variances, losses, gradients) is carried out in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Display + Send + Sync + 'static
{
    /// Number of bytes in the on-disk little-endian representation.
    const BYTES: usize;

    fn from_f64_lossy(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Pairwise (cascade) summation of `n` terms produced by `term(i)`.
///
/// The split points depend only on `n`, so the result is bit-reproducible no
/// matter how the caller schedules work.
pub fn pairwise_sum<F: Fn(usize) -> f64>(n: usize, term: F) -> f64 {
    fn go<F: Fn(usize) -> f64>(lo: usize, hi: usize, term: &F) -> f64 {
        let len = hi - lo;
        if len <= 16 {
            let mut acc = 0.0;
            for i in lo..hi {
                acc += term(i);
            }
            return acc;
        }
        let mid = lo + len / 2;
        go(lo, mid, term) + go(mid, hi, term)
    }
    go(0, n, &term)
}
