//! Layer primitives shared by every block: convolution, transposed
//! convolution, pooling, bilinear resize and activations.
//!
//! All padding is zero padding. Bilinear resizing uses half-pixel centers
//! (align-corners disabled).

mod conv;
mod pool;
mod resize;

pub use conv::{conv2d, conv2d_backward, conv_transpose2x2, conv_transpose2x2_backward, ConvSpec};
pub use pool::{pool2d, pool2d_backward, PoolKind, PoolSpec};
pub use resize::{resize_bilinear, resize_bilinear_backward};

use crate::tensor::{Real, Tensor};

/// Logistic function evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_reference_points() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert!((sigmoid_scalar(3.0f64.ln()) - 0.75).abs() < 1e-15);
        let lo = sigmoid_scalar(-800.0f64);
        assert!(lo >= 0.0 && lo.is_finite());
        assert_eq!(sigmoid_scalar(800.0f64), 1.0);
        assert!(sigmoid_scalar(-30.0f32) > 0.0);
    }
}
