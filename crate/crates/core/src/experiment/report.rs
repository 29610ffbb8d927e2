use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::{moving_average, ExperimentError, RunRecord};
use crate::combiners::CombinerMethod;
use crate::sim::state_violation;

/// Window of the moving-average stage cost.
pub const COST_WINDOW: usize = 100;
/// Length of the window that must be free of state-bound violations.
pub const CONSTRAINT_FREE_WINDOW: usize = 100;

pub fn write_csv(records: &[RunRecord], path: &Path) -> Result<(), ExperimentError> {
    if records.is_empty() {
        return Err(ExperimentError::NoRecords);
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<RunRecord>, ExperimentError> {
    let mut r = csv::Reader::from_path(path)?;
    let records = r.deserialize().collect::<Result<Vec<RunRecord>, _>>()?;
    if records.is_empty() {
        return Err(ExperimentError::NoRecords);
    }
    Ok(records)
}

/// Summary numbers of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    /// Last value of the 100-step moving-average stage cost.
    pub final_ma_cost: f64,
    pub final_param_error: f64,
    /// Steps until the end of the first 100-step window without any
    /// state-bound violation; the run length if there is none.
    pub steps_to_constraint_free: usize,
}

pub fn run_metrics(records: &[RunRecord]) -> Result<RunMetrics, ExperimentError> {
    let costs: Vec<f64> = records.iter().map(|r| r.stage_cost).collect();
    let ma = moving_average(&costs, COST_WINDOW)?;
    let mut clean = 0;
    let mut reached = None;
    for (i, r) in records.iter().enumerate() {
        if state_violation(&Vector2::new(r.x1, r.x2)).amax() > 0.0 {
            clean = 0;
        } else {
            clean += 1;
        }
        if clean == CONSTRAINT_FREE_WINDOW {
            reached = Some(i + 1);
            break;
        }
    }
    Ok(RunMetrics {
        final_ma_cost: *ma.last().unwrap(),
        final_param_error: records.last().unwrap().param_error,
        steps_to_constraint_free: reached.unwrap_or(records.len()),
    })
}

/// Per-method median and interquartile range of the run metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: CombinerMethod,
    pub runs: usize,
    pub final_ma_cost_median: f64,
    pub final_ma_cost_iqr: f64,
    pub final_param_error_median: f64,
    pub final_param_error_iqr: f64,
    pub steps_to_constraint_free_median: f64,
    pub steps_to_constraint_free_iqr: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn median_iqr(mut values: Vec<f64>) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    (quantile(&values, 0.5), quantile(&values, 0.75) - quantile(&values, 0.25))
}

/// Reads run CSVs and summarizes them per method (sorted by method).
pub fn aggregate_report(paths: &[PathBuf]) -> Result<Vec<SummaryRow>, ExperimentError> {
    let mut groups: BTreeMap<CombinerMethod, Vec<RunMetrics>> = BTreeMap::new();
    for path in paths {
        let records = read_csv(path)?;
        groups.entry(records[0].method).or_default().push(run_metrics(&records)?);
    }
    if groups.is_empty() {
        return Err(ExperimentError::NoRecords);
    }
    Ok(groups
        .into_iter()
        .map(|(method, runs)| {
            let (cost_med, cost_iqr) = median_iqr(runs.iter().map(|m| m.final_ma_cost).collect());
            let (err_med, err_iqr) = median_iqr(runs.iter().map(|m| m.final_param_error).collect());
            let (free_med, free_iqr) = median_iqr(runs.iter().map(|m| m.steps_to_constraint_free as f64).collect());
            SummaryRow {
                method,
                runs: runs.len(),
                final_ma_cost_median: cost_med,
                final_ma_cost_iqr: cost_iqr,
                final_param_error_median: err_med,
                final_param_error_iqr: err_iqr,
                steps_to_constraint_free_median: free_med,
                steps_to_constraint_free_iqr: free_iqr,
            }
        })
        .collect())
}

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<(), ExperimentError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, ExperimentError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<SummaryRow>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        assert_eq!(median_iqr(vec![3.0, 1.0, 2.0, 4.0]), (2.5, 1.5));
        assert_eq!(median_iqr(vec![7.0]), (7.0, 0.0));
    }
}
