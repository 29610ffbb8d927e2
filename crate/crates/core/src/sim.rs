//! True plant, baseline stage cost, exploration and the transition buffer.

use std::collections::VecDeque;

use nalgebra::{Matrix2, Vector2};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::learners::{Batch, Transition};
use crate::scalar::Real;

/// Random number generator of a run. Seeded with [`seeded_rng`].
pub type SimRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("input {0} outside [-1, 1]")]
    InputOutOfBounds(f64),
    #[error("transition buffer is empty")]
    EmptyBuffer,
    #[error("window must be at least 1")]
    ZeroWindow,
}

/// `x⁺ = A x + B u + [e, 0]ᵀ` with `e ~ U[low, high]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel<T: Real> {
    pub a_true: Matrix2<T>,
    pub b_true: Vector2<T>,
    pub disturbance_low: T,
    pub disturbance_high: T,
}

impl<T: Real> Default for PlantModel<T> {
    fn default() -> Self {
        Self {
            a_true: Matrix2::new(T::lit(0.9), T::lit(0.35), T::zero(), T::lit(1.1)),
            b_true: Vector2::new(T::lit(0.0813), T::lit(0.2)),
            disturbance_low: T::lit(-0.1),
            disturbance_high: T::zero(),
        }
    }
}

impl<T: Real> PlantModel<T> {
    pub fn mean_disturbance(&self) -> T {
        (self.disturbance_low + self.disturbance_high) * T::lit(0.5)
    }

    pub fn sample_disturbance(&self, rng: &mut SimRng) -> T {
        let (lo, hi) = (self.disturbance_low.as_f64(), self.disturbance_high.as_f64());
        if lo == hi {
            return self.disturbance_low;
        }
        T::lit(Uniform::new_inclusive(lo, hi).sample(rng))
    }
}

fn check_input<T: Real>(u: T) -> Result<(), SimError> {
    if u >= -T::one() && u <= T::one() {
        Ok(())
    } else {
        Err(SimError::InputOutOfBounds(u.as_f64()))
    }
}

/// Advances the plant with the given disturbance on the first state.
pub fn plant_step_with<T: Real>(plant: &PlantModel<T>, x: &Vector2<T>, u: T, disturbance: T) -> Result<Vector2<T>, SimError> {
    check_input(u)?;
    Ok(plant.a_true * x + plant.b_true * u + Vector2::new(disturbance, T::zero()))
}

/// Advances the plant with a freshly drawn disturbance. Returns `(x⁺, e)`.
pub fn plant_step<T: Real>(plant: &PlantModel<T>, x: &Vector2<T>, u: T, rng: &mut SimRng) -> Result<(Vector2<T>, T), SimError> {
    check_input(u)?;
    let e = plant.sample_disturbance(rng);
    Ok((plant_step_with(plant, x, u, e)?, e))
}

/// Lower and upper state bounds of the benchmark without modifiers.
pub fn base_state_bounds<T: Real>() -> (Vector2<T>, Vector2<T>) {
    (Vector2::new(T::zero(), -T::one()), Vector2::new(T::one(), T::one()))
}

/// Largest violation of the base state bounds (zero when inside).
pub fn state_violation<T: Real>(x: &Vector2<T>) -> Vector2<T> {
    let (lo, hi) = base_state_bounds::<T>();
    Vector2::from_fn(|j, _| (lo[j] - x[j]).max(x[j] - hi[j]).max(T::zero()))
}

/// `L̄(x, u) = ‖x‖² + ½u² + ωᵀ max(0, h(x))`.
pub fn baseline_stage_cost<T: Real>(x: &Vector2<T>, u: T, omega: &Vector2<T>) -> T {
    x.norm_squared() + T::lit(0.5) * u * u + omega.dot(&state_violation(x))
}

/// `clip(a + η, −1, 1)` with `η ~ U[−amplitude, amplitude]`.
pub fn explore_action<T: Real>(policy_action: T, rng: &mut SimRng, amplitude: T) -> T {
    let eta = if amplitude > T::zero() {
        let a = amplitude.as_f64();
        T::lit(Uniform::new_inclusive(-a, a).sample(rng))
    } else {
        T::zero()
    };
    (policy_action + eta).max(-T::one()).min(T::one())
}

/// FIFO store of the most recent transitions.
#[derive(Debug, Clone)]
pub struct TransitionBuffer<T: Real> {
    items: VecDeque<Transition<T>>,
    capacity: usize,
}

impl<T: Real> TransitionBuffer<T> {
    /// Keeps at most `capacity` transitions (unbounded for `usize::MAX`).
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition<T>) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    /// The most recent `min(window, len)` transitions, oldest first.
    pub fn recent(&self, window: usize) -> Result<Batch<T>, SimError> {
        if window == 0 {
            return Err(SimError::ZeroWindow);
        }
        if self.items.is_empty() {
            return Err(SimError::EmptyBuffer);
        }
        let skip = self.items.len().saturating_sub(window);
        Ok(Batch::new(self.items.iter().skip(skip).copied().collect()).expect("nonempty"))
    }
}
