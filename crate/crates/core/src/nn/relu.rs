use super::{Scalar, Tensor4};

/// `max(0, x)` elementwise.
pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let mut out = x.clone();
    for v in out.as_mut_slice() {
        *v = if *v > T::zero() { *v } else { T::zero() };
    }
    out
}

/// Passes `dy` where the forward input was positive.
pub fn relu_backward<T: Scalar>(x: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    assert_eq!(x.dims(), dy.dims());
    let mut dx = dy.clone();
    for (g, &v) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *g = if v > T::zero() { *g } else { T::zero() };
    }
    dx
}
