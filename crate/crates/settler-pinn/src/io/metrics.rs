//! Evaluation metrics for predicted versus ground-truth trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Error statistics for one variable along one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableMetrics {
    pub variable: String,
    pub rmse: f64,
    pub max_abs_error: f64,
    /// First time after which the absolute error stays below the threshold
    /// for the rest of the horizon; `None` when the error never settles.
    pub convergence_time_s: Option<f64>,
    pub convergence_threshold: f64,
    pub n_points: usize,
}

impl VariableMetrics {
    pub fn from_series(
        variable: &str,
        times: &[f64],
        pred: &[f64],
        truth: &[f64],
        threshold: f64,
    ) -> Result<Self> {
        if pred.len() != truth.len() || pred.len() != times.len() || pred.is_empty() {
            return Err(Error::Domain(format!(
                "metric series for {variable} must be non-empty and equally long"
            )));
        }
        let errs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
        let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
        let max_abs_error = errs.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
        let mut convergence_time_s = None;
        for k in 0..errs.len() {
            if errs[k..].iter().all(|e| e.abs() < threshold) {
                convergence_time_s = Some(times[k]);
                break;
            }
        }
        Ok(Self {
            variable: variable.to_string(),
            rmse,
            max_abs_error,
            convergence_time_s,
            convergence_threshold: threshold,
            n_points: errs.len(),
        })
    }
}

/// Metrics report for an evaluation run: ensemble-mean metrics plus the
/// per-member breakdown when member trajectories are available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub ensemble_mean: Vec<VariableMetrics>,
    pub per_member: Vec<Vec<VariableMetrics>>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Numeric(e.to_string()))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        super::write_atomic(path, self.to_json()?.as_bytes())
    }
}

/// Compares the height channels of a predicted trajectory against truth
/// columns, matching rows on `tau_s`.
pub fn evaluate_heights(
    pred: &[super::TrajectoryRow],
    truth: &[super::TrajectoryRow],
    threshold_m: f64,
) -> Result<MetricsReport> {
    let mut times = Vec::new();
    let mut p_hp = Vec::new();
    let mut p_dp = Vec::new();
    let mut t_hp = Vec::new();
    let mut t_dp = Vec::new();
    let mut truth_iter = truth.iter().peekable();
    for p in pred {
        while let Some(t) = truth_iter.peek() {
            if t.tau_s < p.tau_s - 1e-9 {
                truth_iter.next();
            } else {
                break;
            }
        }
        let Some(t) = truth_iter.peek() else { break };
        if (t.tau_s - p.tau_s).abs() > 1e-9 {
            continue;
        }
        let truth_hp = t.truth_h_hp_m.or(t.h_hp_m);
        let truth_dp = t.truth_h_dp_m.or(t.h_dp_m);
        if let (Some(ph), Some(pd), Some(th), Some(td)) = (p.h_hp_m, p.h_dp_m, truth_hp, truth_dp)
        {
            times.push(p.tau_s);
            p_hp.push(ph);
            p_dp.push(pd);
            t_hp.push(th);
            t_dp.push(td);
        }
    }
    if times.is_empty() {
        return Err(Error::Domain(
            "no overlapping rows with height channels to evaluate".into(),
        ));
    }
    Ok(MetricsReport {
        ensemble_mean: vec![
            VariableMetrics::from_series("h_hp_m", &times, &p_hp, &t_hp, threshold_m)?,
            VariableMetrics::from_series("h_dp_m", &times, &p_dp, &t_dp, threshold_m)?,
        ],
        per_member: Vec::new(),
    })
}
