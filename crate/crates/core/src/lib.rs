//! Linear MPC used as a Q-function approximator, tuned by Gauss-Newton
//! Q-learning and combined with prediction-error system identification.
//!
//! Numerical modules are generic over [`scalar::Real`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`.

pub mod combiners;
pub mod experiment;
pub mod learners;
pub mod linalg;
pub mod mpc;
pub mod qp;
pub mod scalar;
pub mod sim;

pub type QpProblemF64 = qp::QpProblem<f64>;
pub type QpSolutionF64 = qp::QpSolution<f64>;
pub type ParamVectorF64 = mpc::ParamVector<f64>;
pub type MpcConfigF64 = mpc::MpcConfig<f64>;
pub type MpcModelF64 = mpc::MpcModel<f64>;
pub type TransitionF64 = learners::Transition<f64>;
pub type BatchF64 = learners::Batch<f64>;
pub type UpdateStepF64 = learners::UpdateStep<f64>;
pub type PlantModelF64 = sim::PlantModel<f64>;
