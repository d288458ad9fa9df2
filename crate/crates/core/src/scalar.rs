use nalgebra::RealField;

/// Floating-point scalar accepted by the linear-algebra core (`f32`, `f64`).
pub trait Real: RealField + Copy + Send + Sync + 'static {}

impl<T: RealField + Copy + Send + Sync + 'static> Real for T {}

pub fn cast<T: Real>(x: f64) -> T {
    nalgebra::convert(x)
}

pub fn to_f64<T: Real>(x: T) -> f64 {
    nalgebra::try_convert(x).unwrap_or(f64::NAN)
}

/// Tolerance `tol` relaxed to a small multiple of the type's machine epsilon when the type is coarser.
pub fn tol<T: Real>(tol: f64) -> T {
    let eps = to_f64(T::default_epsilon());
    cast(tol.max(64.0 * eps))
}
