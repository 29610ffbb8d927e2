//! Scalar abstraction shared by every numerical module.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating point type the solvers are generic over (`f32` or `f64`).
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {
    /// Converts an `f64` literal. Panics only if the target type cannot hold it.
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("literal not representable")
    }

    /// Lossy conversion used for reporting.
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn infinity() -> Self {
        Self::lit(f64::INFINITY)
    }

    fn neg_infinity() -> Self {
        Self::lit(f64::NEG_INFINITY)
    }

    fn eps() -> Self {
        Self::default_epsilon()
    }

    /// Base tolerance for feasibility and optimality decisions.
    ///
    /// `eps^(3/4)`: about 2e-12 for `f64`, 6e-6 for `f32`.
    fn base_tol() -> Self {
        Self::eps().powf(Self::lit(0.75))
    }

    fn is_finite_value(self) -> bool {
        self.as_f64().is_finite()
    }
}

impl Real for f32 {}
impl Real for f64 {}
