//! Closed-loop learning runs on the benchmark plant and their metrics.

mod report;

pub use report::{aggregate_report, read_csv, read_summary, run_metrics, write_csv, write_summary, RunMetrics, SummaryRow, CONSTRAINT_FREE_WINDOW, COST_WINDOW};

use std::path::Path;

use nalgebra::{DMatrix, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combiners::{compose_update_split, CombineError, CombinerHyper, CombinerMethod, RlRegularizer, SvpMode};
use crate::mpc::{MpcConfig, MpcError, MpcModel, ParamVector};
use crate::qp::{solve_dare, DareError, DareSpec};
use crate::sim::{baseline_stage_cost, explore_action, plant_step, seeded_rng, PlantModel, SimError, TransitionBuffer};
use crate::learners::Transition;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("MPC failed at step {step}: {source}")]
    Mpc { step: usize, source: MpcError },
    #[error("update failed at step {step}: {source}")]
    Update { step: usize, source: CombineError },
    #[error("update at step {step} produced non-finite parameters")]
    NonFinite { step: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dare(#[from] DareError),
    #[error("empty series")]
    EmptySeries,
    #[error("no run records")]
    NoRecords,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitModel {
    /// `A = [[1, 0.25], [0, 1]]`, `B = [0.0312, 0.25]`.
    PaperInitial,
    /// `A = [[1, 1], [0, 1]]`, `B = [0, 1]`.
    DoubleIntegrator,
}

/// Reference affine term used by the parameter error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BTrueConvention {
    Zero,
    /// `[E e, 0]`, what least squares converges to.
    MeanDisturbance,
}

/// Configuration of one closed-loop run. Serialized as a flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: CombinerMethod,
    pub steps: usize,
    pub seed: u64,
    pub init_model: InitModel,
    pub b_true_convention: BTrueConvention,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_q: f64,
    pub lambda_f: f64,
    pub horizon: usize,
    pub gamma: f64,
    pub omega: [f64; 2],
    /// Number of most recent transitions in each RL batch.
    pub window: usize,
    /// Number of most recent transitions in each PEM batch.
    pub pem_window: usize,
    /// Plant steps between two updates.
    pub update_period: usize,
    /// Plant steps before the first update.
    pub warmup: usize,
    pub exploration: f64,
    pub svp_mode: SvpMode,
    pub hierarchical_rl_regularizer: RlRegularizer,
    /// Solve the terminal-cost Riccati equation with `√γ A, √γ B`.
    pub riccati_discounted: bool,
    pub initial_state: [f64; 2],
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: CombinerMethod::Baseline,
            steps: 3000,
            seed: 0,
            init_model: InitModel::PaperInitial,
            b_true_convention: BTrueConvention::MeanDisturbance,
            alpha: 0.1,
            beta: 0.5,
            lambda_q: 1.0,
            lambda_f: 1e-6,
            horizon: 10,
            gamma: 0.99,
            omega: [100.0, 100.0],
            window: 50,
            pem_window: 3000,
            update_period: 10,
            warmup: 20,
            exploration: 0.1,
            svp_mode: SvpMode::default(),
            hierarchical_rl_regularizer: RlRegularizer::default(),
            riccati_discounted: false,
            initial_state: [0.5, 0.0],
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: &str| Err(ExperimentError::Config(msg.to_string()));
        if self.steps < self.warmup {
            return bad("steps must be at least warmup");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be nonnegative");
        }
        if !(self.lambda_q > 0.0 && self.lambda_f > 0.0) {
            return bad("lambda_q and lambda_f must be positive");
        }
        if self.window == 0 || self.pem_window == 0 || self.update_period == 0 {
            return bad("window, pem_window and update_period must be at least 1");
        }
        if !(self.exploration >= 0.0) {
            return bad("exploration amplitude must be nonnegative");
        }
        if !self.initial_state.iter().all(|v| v.is_finite()) {
            return bad("initial_state must be finite");
        }
        match self.svp_mode {
            SvpMode::FixedP(p) if p > crate::mpc::PARAM_DIM => return bad("svp fixed_p exceeds the parameter dimension"),
            SvpMode::Threshold(t) if !(t >= 0.0) => return bad("svp threshold must be nonnegative"),
            _ => {}
        }
        self.mpc_config().validate().map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn mpc_config(&self) -> MpcConfig<f64> {
        MpcConfig {
            horizon: self.horizon,
            discount: self.gamma,
            slack_weight: Vector2::from(self.omega),
            ..MpcConfig::default()
        }
    }

    pub fn hyper(&self) -> CombinerHyper<f64> {
        CombinerHyper {
            alpha: self.alpha,
            beta: self.beta,
            lambda_q: self.lambda_q,
            lambda_f: self.lambda_f,
            svp_mode: self.svp_mode,
            rl_regularizer: self.hierarchical_rl_regularizer,
        }
    }
}

/// One closed-loop step. `td_error_abs` is the mean `|δ|` of the latest
/// update batch (zero before the first update).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub x1: f64,
    pub x2: f64,
    pub u: f64,
    pub stage_cost: f64,
    pub td_error_abs: f64,
    pub param_error: f64,
    pub method: CombinerMethod,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub final_theta: ParamVector<f64>,
    pub updates: usize,
    /// Batch points at which the Q-gradient was flagged degenerate.
    pub degenerate_points: usize,
}

/// Initial parameters: the chosen model, DARE terminal cost with `Q = I`,
/// `R = 0.5`, every other block zero.
pub fn make_initial_theta(init: InitModel) -> Result<ParamVector<f64>, ExperimentError> {
    initial_theta_with(init, None)
}

/// As [`make_initial_theta`]; with `Some(γ)` the Riccati equation uses the
/// discounted pair `(√γ A, √γ B)`.
pub fn initial_theta_with(init: InitModel, riccati_discount: Option<f64>) -> Result<ParamVector<f64>, ExperimentError> {
    let (a, b) = match init {
        InitModel::PaperInitial => (Matrix2::new(1.0, 0.25, 0.0, 1.0), Vector2::new(0.0312, 0.25)),
        InitModel::DoubleIntegrator => (Matrix2::new(1.0, 1.0, 0.0, 1.0), Vector2::new(0.0, 1.0)),
    };
    let scale = riccati_discount.map_or(1.0, f64::sqrt);
    let spec = DareSpec {
        a: DMatrix::from_column_slice(2, 2, (a * scale).as_slice()),
        b: DMatrix::from_column_slice(2, 1, (b * scale).as_slice()),
        q: DMatrix::identity(2, 2),
        r: DMatrix::from_element(1, 1, 0.5),
    };
    let s = solve_dare(&spec)?;
    let s = Matrix2::new(s[(0, 0)], s[(0, 1)], s[(1, 0)], s[(1, 1)]);
    Ok(ParamVector::with_model(a, b, Vector2::zeros(), s))
}

/// `‖[vec(A − A_true), B − B_true, b − b_ref]‖₂`.
pub fn parameter_error(theta: &ParamVector<f64>, plant: &PlantModel<f64>, convention: BTrueConvention) -> f64 {
    let b_ref = match convention {
        BTrueConvention::Zero => Vector2::zeros(),
        BTrueConvention::MeanDisturbance => Vector2::new(plant.mean_disturbance(), 0.0),
    };
    let da = theta.a_mat - plant.a_true;
    let db = theta.b_mat - plant.b_true;
    let dc = theta.b_aff - b_ref;
    (da.norm_squared() + db.norm_squared() + dc.norm_squared()).sqrt()
}

/// Trailing mean over at most `window` samples (growing window at the start).
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>, ExperimentError> {
    if series.is_empty() {
        return Err(ExperimentError::EmptySeries);
    }
    if window == 0 {
        return Err(ExperimentError::Config("moving-average window must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (i, v) in series.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= series[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    Ok(out)
}

/// Runs one closed loop: act with the exploring MPC policy, observe the
/// plant, and every `update_period` steps after `warmup` apply the combined
/// update on the most recent `window` (RL) and `pem_window` (PEM)
/// transitions.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, ExperimentError> {
    cfg.validate()?;
    let plant = PlantModel::default();
    let mpc_cfg = cfg.mpc_config();
    let hyper = cfg.hyper();
    let omega = Vector2::from(cfg.omega);
    let mut rng = seeded_rng(cfg.seed);
    let riccati = cfg.riccati_discounted.then_some(cfg.gamma);
    let mut model = MpcModel::new(initial_theta_with(cfg.init_model, riccati)?, mpc_cfg.clone()).map_err(|source| ExperimentError::Mpc { step: 0, source })?;
    let mut buffer = TransitionBuffer::new(cfg.window.max(cfg.pem_window));
    let mut x = Vector2::from(cfg.initial_state);
    let mut td_abs = 0.0;
    let mut updates = 0;
    let mut degenerate_points = 0;
    let mut records = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let action = model.policy(&x).map_err(|source| ExperimentError::Mpc { step, source })?;
        let u = explore_action(action, &mut rng, cfg.exploration);
        let (x_next, _) = plant_step(&plant, &x, u, &mut rng)?;
        let stage_cost = baseline_stage_cost(&x, u, &omega);
        buffer.push(Transition {
            x,
            u,
            x_next,
            baseline_cost: stage_cost,
        });
        let param_error = parameter_error(model.theta(), &plant, cfg.b_true_convention);

        let elapsed = step + 1;
        let mut next_theta = None;
        if elapsed >= cfg.warmup && (elapsed - cfg.warmup) % cfg.update_period == 0 {
            let batch = buffer.recent(cfg.window)?;
            let pem_batch = buffer.recent(cfg.pem_window)?;
            let update = compose_update_split(cfg.method, &mut model, &batch, &pem_batch, &hyper).map_err(|source| ExperimentError::Update { step, source })?;
            if !update.step.is_finite() {
                return Err(ExperimentError::NonFinite { step });
            }
            td_abs = update.rl.mean_abs_td();
            degenerate_points += update.rl.degenerate;
            updates += 1;
            next_theta = Some(model.theta().apply_step(&update.step.delta));
        }

        records.push(RunRecord {
            step,
            x1: x[0],
            x2: x[1],
            u,
            stage_cost,
            td_error_abs: td_abs,
            param_error,
            method: cfg.method,
            seed: cfg.seed,
        });

        if let Some(theta) = next_theta {
            if theta.flatten().iter().any(|v| !v.is_finite()) {
                return Err(ExperimentError::NonFinite { step });
            }
            if &theta != model.theta() {
                model = MpcModel::new(theta, mpc_cfg.clone()).map_err(|source| ExperimentError::Mpc { step, source })?;
            }
        }
        x = x_next;
    }

    Ok(RunOutput {
        records,
        final_theta: model.theta().clone(),
        updates,
        degenerate_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_parameters() {
        let p = make_initial_theta(InitModel::PaperInitial).unwrap();
        assert_eq!(p.a_mat[(0, 1)], 0.25);
        assert_eq!(p.b_mat, Vector2::new(0.0312, 0.25));
        assert_eq!(p.f_mod, nalgebra::Vector3::zeros());
        let d = make_initial_theta(InitModel::DoubleIntegrator).unwrap();
        assert_eq!(d.b_mat, Vector2::new(0.0, 1.0));
    }

    #[test]
    fn initial_parameter_error() {
        let p = make_initial_theta(InitModel::PaperInitial).unwrap();
        let plant = PlantModel::default();
        let expected = (3.0 * 0.01f64 + 0.0501 * 0.0501 + 2.0 * 0.0025).sqrt();
        assert!((parameter_error(&p, &plant, BTrueConvention::MeanDisturbance) - expected).abs() < 1e-12);
        assert!((expected - 0.1937).abs() < 1e-4);
    }

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[2.0; 5], 3).unwrap(), vec![2.0; 5]);
        assert_eq!(moving_average(&[1.0, 5.0, 3.0], 1).unwrap(), vec![1.0, 5.0, 3.0]);
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2).unwrap(), vec![1.0, 2.0, 4.0, 6.0]);
        assert!(moving_average(&[], 3).is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(ExperimentConfig::from_json(r#"{"method": "sum", "steps": 30}"#).is_ok());
        assert!(ExperimentConfig::from_json(r#"{"methd": "sum"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"steps": 5, "warmup": 20}"#).is_err());
        let cfg = ExperimentConfig::from_json(r#"{"svp_mode": {"fixed_p": 4}}"#).unwrap();
        assert_eq!(cfg.svp_mode, SvpMode::FixedP(4));
    }
}
