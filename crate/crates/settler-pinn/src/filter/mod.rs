//! Height estimation from outlet flow measurements.
//!
//! The trained surrogate doubles as state-transition model (evaluated at
//! segment time t = 1) and measurement model (t = 0). A Kalman-style filter
//! linearizes both around the current estimate with exact Jacobians, updates
//! with the Joseph form, and derives its process noise adaptively from the
//! spread of an ensemble of independently trained surrogates.
//!
//! Units: the state (heavy-phase and dense-packed-zone heights) and its
//! covariances are in meters/m²; measurements live in scaled flow units,
//! matching the sensor noise figure that the default R encodes.

pub mod outlet;

pub use outlet::{outlet_dpz_predict, outlet_dpz_train, OutletTrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::domain::{FilterParams, SettlerConfig};
use crate::error::{Error, Result};
use crate::io::EstimationRow;
use crate::mech::SEGMENT_DURATION;
use crate::nn::MlpModel;

/// Row-major 2×2 matrix with the handful of operations the filter needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2(pub [f64; 4]);

impl Mat2 {
    pub fn zero() -> Self {
        Mat2([0.0; 4])
    }

    pub fn identity() -> Self {
        Mat2([1.0, 0.0, 0.0, 1.0])
    }

    pub fn diag(a: f64, b: f64) -> Self {
        Mat2([a, 0.0, 0.0, b])
    }

    pub fn mul(&self, o: &Mat2) -> Mat2 {
        let a = &self.0;
        let b = &o.0;
        Mat2([
            a[0] * b[0] + a[1] * b[2],
            a[0] * b[1] + a[1] * b[3],
            a[2] * b[0] + a[3] * b[2],
            a[2] * b[1] + a[3] * b[3],
        ])
    }

    pub fn add(&self, o: &Mat2) -> Mat2 {
        Mat2([
            self.0[0] + o.0[0],
            self.0[1] + o.0[1],
            self.0[2] + o.0[2],
            self.0[3] + o.0[3],
        ])
    }

    pub fn sub(&self, o: &Mat2) -> Mat2 {
        Mat2([
            self.0[0] - o.0[0],
            self.0[1] - o.0[1],
            self.0[2] - o.0[2],
            self.0[3] - o.0[3],
        ])
    }

    pub fn transpose(&self) -> Mat2 {
        Mat2([self.0[0], self.0[2], self.0[1], self.0[3]])
    }

    pub fn scale(&self, s: f64) -> Mat2 {
        Mat2([self.0[0] * s, self.0[1] * s, self.0[2] * s, self.0[3] * s])
    }

    pub fn mul_vec(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.0[0] * v[0] + self.0[1] * v[1],
            self.0[2] * v[0] + self.0[3] * v[1],
        ]
    }

    pub fn det(&self) -> f64 {
        self.0[0] * self.0[3] - self.0[1] * self.0[2]
    }

    /// Closed-form inverse via the adjugate.
    pub fn inverse(&self) -> Option<Mat2> {
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let inv = 1.0 / det;
        Some(Mat2([
            self.0[3] * inv,
            -self.0[1] * inv,
            -self.0[2] * inv,
            self.0[0] * inv,
        ]))
    }

    /// Eigenvalues of a symmetric matrix, ascending.
    pub fn sym_eigenvalues(&self) -> [f64; 2] {
        let tr = self.0[0] + self.0[3];
        let b = 0.5 * (self.0[1] + self.0[2]);
        let disc = (0.5 * (self.0[0] - self.0[3])).powi(2) + b * b;
        let root = disc.max(0.0).sqrt();
        [0.5 * tr - root, 0.5 * tr + root]
    }

    /// Condition number assuming a symmetric positive-definite matrix.
    pub fn sym_condition(&self) -> f64 {
        let [lo, hi] = self.sym_eigenvalues();
        if lo <= 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    pub fn asymmetry(&self) -> f64 {
        (self.0[1] - self.0[2]).abs()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Filter state between steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterState {
    /// Height estimate [h_HP, h_DP] in meters.
    pub x: [f64; 2],
    /// State covariance, m².
    pub p: Mat2,
    /// Process noise covariance, m².
    pub w: Mat2,
    /// Measurement noise covariance, scaled flow units squared.
    pub r: Mat2,
    /// Last computed Kalman gain.
    pub k: Mat2,
}

impl FilterState {
    pub fn new(x0: [f64; 2], params: &FilterParams) -> Self {
        Self {
            x: x0,
            p: Mat2::diag(params.p0_diag[0], params.p0_diag[1]),
            w: Mat2::zero(),
            r: Mat2::diag(params.r_diag, params.r_diag),
            k: Mat2::zero(),
        }
    }
}

/// Innovation covariances above this condition number skip the update.
pub const CONDITION_LIMIT: f64 = 1.0e12;
/// Covariance health bounds checked after every update.
const SYMMETRY_TOL: f64 = 1.0e-12;
const EIG_FLOOR: f64 = -1.0e-12;

fn clip_to_bounds(x: [f64; 2], config: &SettlerConfig) -> ([f64; 2], bool) {
    let hb = &config.bounds.h_hp.extrapolation;
    let db = &config.bounds.h_dp.extrapolation;
    let clipped = [hb.clamp(x[0]), db.clamp(x[1])];
    (clipped, clipped != x)
}

/// Prediction step: the surrogate propagates the state one second ahead,
/// and the covariance follows the state-transition Jacobian.
pub fn predict(
    model: &MlpModel,
    state: &FilterState,
    u: f64,
    config: &SettlerConfig,
) -> Result<FilterState> {
    let (x_in, was_clipped) = clip_to_bounds(state.x, config);
    if was_clipped {
        log::debug!("predict: state {:?} clipped to operating bounds", state.x);
    }
    let input = [SEGMENT_DURATION, x_in[0], x_in[1], u];
    let out = model.forward(&input)?;
    let h_scale = config.scaling.h_scale;
    let x_pred = [out[0] * h_scale, out[1] * h_scale];
    let jac = model.input_jacobian(&input, &[0, 1], &[1, 2])?;
    let f = Mat2([jac[0][0], jac[0][1], jac[1][0], jac[1][1]]).scale(h_scale);
    if !f.is_finite() {
        return Err(Error::Filter(format!(
            "non-finite state-transition Jacobian at state {x_in:?}"
        )));
    }
    let p_pred = f.mul(&state.p).mul(&f.transpose()).add(&state.w);
    Ok(FilterState {
        x: x_pred,
        p: p_pred,
        ..*state
    })
}

/// Measurement update with the Joseph-form covariance. Returns the updated
/// state and whether the update was skipped for conditioning reasons.
pub fn update(
    model: &MlpModel,
    state: &FilterState,
    u_prev: f64,
    y_scaled: [f64; 2],
    config: &SettlerConfig,
) -> Result<(FilterState, UpdateInfo)> {
    let (x_in, _) = clip_to_bounds(state.x, config);
    let input = [0.0, x_in[0], x_in[1], u_prev];
    let out = model.forward(&input)?;
    let y_pred = [out[2], out[3]];
    let jac = model.input_jacobian(&input, &[2, 3], &[1, 2])?;
    let h = Mat2([jac[0][0], jac[0][1], jac[1][0], jac[1][1]]);
    if !h.is_finite() {
        return Err(Error::Filter(format!(
            "non-finite measurement Jacobian at state {x_in:?}"
        )));
    }

    let s = h.mul(&state.p).mul(&h.transpose()).add(&state.r);
    if s.sym_condition() > CONDITION_LIMIT {
        log::warn!(
            "update skipped: innovation covariance condition {:.3e} exceeds {CONDITION_LIMIT:.1e}",
            s.sym_condition()
        );
        return Ok((
            *state,
            UpdateInfo {
                y_pred,
                skipped: true,
            },
        ));
    }
    let s_inv = s
        .inverse()
        .ok_or_else(|| Error::Filter("innovation covariance is singular".into()))?;
    let k = state.p.mul(&h.transpose()).mul(&s_inv);
    let innovation = [y_scaled[0] - y_pred[0], y_scaled[1] - y_pred[1]];
    let dx = k.mul_vec(innovation);
    let x_new = [state.x[0] + dx[0], state.x[1] + dx[1]];

    let i_kh = Mat2::identity().sub(&k.mul(&h));
    let p_new = i_kh
        .mul(&state.p)
        .mul(&i_kh.transpose())
        .add(&k.mul(&state.r).mul(&k.transpose()));

    if p_new.asymmetry() >= SYMMETRY_TOL || p_new.sym_eigenvalues()[0] < EIG_FLOOR {
        return Err(Error::Filter(format!(
            "covariance health violated after update: asymmetry {:.3e}, min eig {:.3e}",
            p_new.asymmetry(),
            p_new.sym_eigenvalues()[0]
        )));
    }

    Ok((
        FilterState {
            x: x_new,
            p: p_new,
            k,
            ..*state
        },
        UpdateInfo {
            y_pred,
            skipped: false,
        },
    ))
}

#[derive(Debug, Clone, Copy)]
pub struct UpdateInfo {
    /// Predicted measurement, scaled flow units.
    pub y_pred: [f64; 2],
    pub skipped: bool,
}

/// Process noise from ensemble spread: every member propagates the shared
/// mean state one second ahead, and the sample covariance of those
/// predictions (divided by the attenuation factor) becomes W.
pub fn adaptive_w(
    models: &[&MlpModel],
    mean_state: [f64; 2],
    u: f64,
    attenuation: f64,
    config: &SettlerConfig,
) -> Result<Mat2> {
    if models.len() < 2 {
        return Err(Error::Config(
            "adaptive process noise requires an ensemble of at least two members".into(),
        ));
    }
    let (x_in, _) = clip_to_bounds(mean_state, config);
    let input = [SEGMENT_DURATION, x_in[0], x_in[1], u];
    let h_scale = config.scaling.h_scale;
    let mut preds = Vec::with_capacity(models.len());
    for m in models {
        let out = m.forward(&input)?;
        preds.push([out[0] * h_scale, out[1] * h_scale]);
    }
    let n = preds.len() as f64;
    let mean = preds.iter().fold([0.0; 2], |acc, p| [acc[0] + p[0] / n, acc[1] + p[1] / n]);
    let mut cov = [0.0; 4];
    for p in &preds {
        let d = [p[0] - mean[0], p[1] - mean[1]];
        cov[0] += d[0] * d[0];
        cov[1] += d[0] * d[1];
        cov[3] += d[1] * d[1];
    }
    cov[2] = cov[1];
    let denom = (n - 1.0) * attenuation;
    Ok(Mat2(cov).scale(1.0 / denom))
}

/// Uniformly samples `n_samples` candidate height pairs within the
/// extrapolation bounds and returns the candidate whose predicted outlet
/// flows at t = 0 best match the first measurement (least squares).
pub fn initial_state_search(
    model: &MlpModel,
    y0_scaled: [f64; 2],
    u0: f64,
    n_samples: usize,
    seed: u64,
    config: &SettlerConfig,
) -> Result<[f64; 2]> {
    let candidates = sample_candidates(n_samples, seed, config)?;
    best_candidate(model, &candidates, y0_scaled, u0)
}

fn sample_candidates(n: usize, seed: u64, config: &SettlerConfig) -> Result<Vec<[f64; 2]>> {
    if n == 0 {
        return Err(Error::Config("initial-state search needs n_samples >= 1".into()));
    }
    let hb = config.bounds.h_hp.extrapolation;
    let db = config.bounds.h_dp.extrapolation;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            [
                hb.lb + rng.gen::<f64>() * hb.width(),
                db.lb + rng.gen::<f64>() * db.width(),
            ]
        })
        .collect())
}

fn best_candidate(
    model: &MlpModel,
    candidates: &[[f64; 2]],
    y0_scaled: [f64; 2],
    u0: f64,
) -> Result<[f64; 2]> {
    let mut best = candidates[0];
    let mut best_err = f64::INFINITY;
    for c in candidates {
        let out = model.forward(&[0.0, c[0], c[1], u0])?;
        let err = (out[2] - y0_scaled[0]).powi(2) + (out[3] - y0_scaled[1]).powi(2);
        if err < best_err {
            best_err = err;
            best = *c;
        }
    }
    Ok(best)
}

/// One step of a measured trajectory fed to the filter, physical units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterStep {
    pub tau_s: f64,
    pub q_in: f64,
    /// Measured outlet flows (q_bot, q_top), m³/s.
    pub y: [f64; 2],
}

/// Per-member filtering record.
#[derive(Debug, Clone)]
pub struct MemberRun {
    pub member: usize,
    pub rows: Vec<EstimationRow>,
    /// Estimates per step, meters.
    pub estimates: Vec<[f64; 2]>,
    /// Step index at which the member failed, if it did.
    pub failed_at: Option<usize>,
}

/// Ensemble filtering result.
#[derive(Debug, Clone)]
pub struct EstimationOutcome {
    pub members: Vec<MemberRun>,
    /// Ensemble-mean estimate per step, meters.
    pub mean_estimates: Vec<[f64; 2]>,
    pub skipped_updates: usize,
}

/// Runs the filter over a measured trajectory for every ensemble member.
///
/// Per step: the ensemble mean of the latest estimates drives the shared
/// adaptive process noise, then each member predicts with the previous
/// control and assimilates the current flow measurement. Members filter
/// their own state; only the mean feeds the noise adaptation. After each
/// update a member's transition input is reset to its updated estimate.
pub fn run_filter(
    models: &[MlpModel],
    steps: &[FilterStep],
    config: &SettlerConfig,
    seed: u64,
) -> Result<EstimationOutcome> {
    if models.is_empty() {
        return Err(Error::Config("filter needs at least one model".into()));
    }
    if steps.len() < 2 {
        return Err(Error::Filter("trajectory must have at least two steps".into()));
    }
    let params = &config.filter;
    let q_scale = config.scaling.q_scale;
    let y_scaled =
        |y: [f64; 2]| -> [f64; 2] { [y[0] / q_scale, y[1] / q_scale] };

    // shared candidate set, per-member argmin
    let candidates = sample_candidates(params.init_search_samples, seed, config)?;
    let mut states: Vec<FilterState> = models
        .iter()
        .map(|m| {
            best_candidate(m, &candidates, y_scaled(steps[0].y), steps[0].q_in)
                .map(|x0| FilterState::new(x0, params))
        })
        .collect::<Result<_>>()?;

    let mut members: Vec<MemberRun> = (0..models.len())
        .map(|i| MemberRun {
            member: i,
            rows: Vec::with_capacity(steps.len()),
            estimates: vec![states[i].x],
            failed_at: None,
        })
        .collect();
    let mut skipped_updates = 0usize;

    for k in 1..steps.len() {
        let u_prev = steps[k - 1].q_in;
        let y_k = y_scaled(steps[k].y);

        // ensemble mean of the latest estimates over active members
        let active: Vec<usize> = members
            .iter()
            .filter(|m| m.failed_at.is_none())
            .map(|m| m.member)
            .collect();
        if active.is_empty() {
            return Err(Error::Filter(format!("all ensemble members failed by step {k}")));
        }
        let mean = active.iter().fold([0.0; 2], |acc, &i| {
            [
                acc[0] + states[i].x[0] / active.len() as f64,
                acc[1] + states[i].x[1] / active.len() as f64,
            ]
        });
        let w = if models.len() >= 2 {
            let model_refs: Vec<&MlpModel> = models.iter().collect();
            adaptive_w(&model_refs, mean, u_prev, params.w_attenuation, config)?
        } else {
            Mat2::zero()
        };

        let step_results: Vec<(usize, Result<(FilterState, EstimationRow, bool)>)> = active
            .par_iter()
            .map(|&i| {
                let mut st = states[i];
                st.w = w;
                let res = (|| {
                    let pred = predict(&models[i], &st, u_prev, config)?;
                    let (upd, info) = update(&models[i], &pred, u_prev, y_k, config)?;
                    let row = EstimationRow {
                        tau_s: steps[k].tau_s,
                        q_in_m3s: steps[k].q_in,
                        meas_q_bot_m3s: steps[k].y[0],
                        meas_q_top_m3s: steps[k].y[1],
                        pred_q_bot_m3s: info.y_pred[0] * q_scale,
                        pred_q_top_m3s: info.y_pred[1] * q_scale,
                        x_pred_h_hp_m: pred.x[0],
                        x_pred_h_dp_m: pred.x[1],
                        x_upd_h_hp_m: upd.x[0],
                        x_upd_h_dp_m: upd.x[1],
                        p_00: upd.p.0[0],
                        p_01: upd.p.0[1],
                        p_11: upd.p.0[3],
                        w_00: w.0[0],
                        w_01: w.0[1],
                        w_11: w.0[3],
                        k_00: upd.k.0[0],
                        k_01: upd.k.0[1],
                        k_10: upd.k.0[2],
                        k_11: upd.k.0[3],
                    };
                    Ok((upd, row, info.skipped))
                })();
                (i, res)
            })
            .collect();

        for (i, res) in step_results {
            match res {
                Ok((st, row, skipped)) => {
                    states[i] = st;
                    members[i].rows.push(row);
                    members[i].estimates.push(st.x);
                    if skipped {
                        skipped_updates += 1;
                    }
                }
                Err(e) => {
                    log::warn!("filter member {i} failed at step {k}: {e}");
                    members[i].failed_at = Some(k);
                }
            }
        }
    }

    // ensemble mean per step over members active at that step
    let mut mean_estimates = Vec::with_capacity(steps.len());
    for k in 0..steps.len() {
        let mut acc = [0.0; 2];
        let mut n = 0usize;
        for m in &members {
            if m.failed_at.map(|f| k < f).unwrap_or(true) && k < m.estimates.len() {
                acc[0] += m.estimates[k][0];
                acc[1] += m.estimates[k][1];
                n += 1;
            }
        }
        if n == 0 {
            break;
        }
        mean_estimates.push([acc[0] / n as f64, acc[1] / n as f64]);
    }

    Ok(EstimationOutcome {
        members,
        mean_estimates,
        skipped_updates,
    })
}

/// Open-loop rollout: chained one-second predictions without measurement
/// updates. States leaving the operating bounds are clipped and counted,
/// and the rollout continues.
#[derive(Debug, Clone)]
pub struct RolloutOutcome {
    /// Per member: heights at τ = 0, 1, ..., N, meters.
    pub members: Vec<Vec<[f64; 2]>>,
    pub mean: Vec<[f64; 2]>,
    pub clipped_steps: usize,
}

pub fn chain_forward(
    models: &[MlpModel],
    initial: [f64; 2],
    q_in_schedule: &[f64],
    config: &SettlerConfig,
) -> Result<RolloutOutcome> {
    if models.is_empty() {
        return Err(Error::Config("rollout needs at least one model".into()));
    }
    let h_scale = config.scaling.h_scale;
    let results: Vec<Result<(Vec<[f64; 2]>, usize)>> = models
        .par_iter()
        .map(|m| {
            let mut clipped = 0usize;
            let mut xs = Vec::with_capacity(q_in_schedule.len() + 1);
            let mut x = initial;
            xs.push(x);
            for &u in q_in_schedule {
                let (x_in, was_clipped) = clip_to_bounds(x, config);
                if was_clipped {
                    clipped += 1;
                }
                let out = m.forward(&[SEGMENT_DURATION, x_in[0], x_in[1], u])?;
                x = [out[0] * h_scale, out[1] * h_scale];
                xs.push(x);
            }
            Ok((xs, clipped))
        })
        .collect();

    let mut members = Vec::with_capacity(models.len());
    let mut clipped_steps = 0;
    for r in results {
        let (xs, clipped) = r?;
        members.push(xs);
        clipped_steps += clipped;
    }
    let n = members.len() as f64;
    let len = members[0].len();
    let mean = (0..len)
        .map(|k| {
            members.iter().fold([0.0; 2], |acc, m| {
                [acc[0] + m[k][0] / n, acc[1] + m[k][1] / n]
            })
        })
        .collect();
    if clipped_steps > 0 {
        log::info!("rollout clipped {clipped_steps} out-of-bounds states");
    }
    Ok(RolloutOutcome {
        members,
        mean,
        clipped_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Interval, ScalingConstants};
    use crate::nn::{OutputHead, OutputRole};
    use approx::assert_relative_eq;

    fn cfg() -> SettlerConfig {
        SettlerConfig::default()
    }

    /// Linear model (no hidden layer, identity head) whose first two outputs
    /// reproduce the scaled input heights exactly and whose flow outputs are
    /// affine in the heights: q̂ = c + g·(h_hp + h_dp) in scaled units.
    fn linear_surrogate(config: &SettlerConfig, flow_gain: f64, flow_offset: f64) -> MlpModel {
        let bounds = crate::train::surrogate_input_bounds(config).unwrap();
        let mut m = MlpModel::xavier_init(
            &[4, 4],
            bounds.clone(),
            OutputHead::Identity,
            vec![
                OutputRole::Height,
                OutputRole::Height,
                OutputRole::OutletFlow,
                OutputRole::OutletFlow,
            ],
            ScalingConstants::default(),
            0,
        )
        .unwrap();
        let h_scale = config.scaling.h_scale;
        let mut theta = vec![0.0; m.n_params()];
        // out_j = sum_i w[j,i]·a0[i] + b[j], a0[i] = (x_i − lb)·slope − 1
        let set = |theta: &mut [f64], j: usize, i: usize, v: f64| {
            theta[j * 4 + i] = v;
        };
        let bias = |theta: &mut [f64], j: usize, v: f64| {
            theta[16 + j] = v;
        };
        let w_for = |iv: &Interval, gain: f64| gain / iv.normalize_slope();
        // heights: out0 = h_hp/h_scale, out1 = h_dp/h_scale
        for (j, iv) in [(0usize, bounds[1]), (1usize, bounds[2])] {
            let w = w_for(&iv, 1.0 / h_scale);
            set(&mut theta, j, j + 1, w);
            bias(&mut theta, j, iv.lb / h_scale + w);
        }
        // flows: out2 = out3 = offset + gain·(h_hp + h_dp), scaled units
        for j in [2usize, 3usize] {
            let w1 = w_for(&bounds[1], flow_gain);
            let w2 = w_for(&bounds[2], flow_gain);
            set(&mut theta, j, 1, w1);
            set(&mut theta, j, 2, w2);
            bias(&mut theta, j, flow_offset + flow_gain * (bounds[1].lb + bounds[2].lb) + w1 + w2);
        }
        m.set_params(&theta).unwrap();
        m
    }

    /// Constant-output model: identity head, zero weights, chosen biases.
    fn constant_surrogate(config: &SettlerConfig, outputs: [f64; 4]) -> MlpModel {
        let bounds = crate::train::surrogate_input_bounds(config).unwrap();
        let mut m = MlpModel::xavier_init(
            &[4, 4],
            bounds,
            OutputHead::Identity,
            vec![OutputRole::Generic; 4],
            ScalingConstants::default(),
            0,
        )
        .unwrap();
        let mut theta = vec![0.0; m.n_params()];
        theta[16..20].copy_from_slice(&outputs);
        m.set_params(&theta).unwrap();
        m
    }

    #[test]
    fn predict_through_identity_surrogate_adds_process_noise_only() {
        let config = cfg();
        let m = linear_surrogate(&config, 0.0, 0.2);
        let mut st = FilterState::new([0.08, 0.04], &config.filter);
        st.w = Mat2::diag(3.0e-6, 4.0e-6);
        let out = predict(&m, &st, 4.0e-4, &config).unwrap();
        assert_relative_eq!(out.x[0], 0.08, max_relative = 1e-12);
        assert_relative_eq!(out.x[1], 0.04, max_relative = 1e-12);
        // F = I, so P ← P + W
        assert_relative_eq!(out.p.0[0], config.filter.p0_diag[0] + 3.0e-6, max_relative = 1e-9);
        assert_relative_eq!(out.p.0[3], config.filter.p0_diag[1] + 4.0e-6, max_relative = 1e-9);

        // W = 0 leaves P unchanged
        let mut st = FilterState::new([0.08, 0.04], &config.filter);
        st.w = Mat2::zero();
        let out = predict(&m, &st, 4.0e-4, &config).unwrap();
        assert_relative_eq!(out.p.0[0], config.filter.p0_diag[0], max_relative = 1e-9);
    }

    #[test]
    fn update_with_zero_covariance_is_a_no_op() {
        let config = cfg();
        let m = linear_surrogate(&config, 2.0, 0.05);
        let mut st = FilterState::new([0.08, 0.04], &config.filter);
        st.p = Mat2::zero();
        let (out, info) = update(&m, &st, 4.0e-4, [0.3, 0.3], &config).unwrap();
        assert!(!info.skipped);
        assert_eq!(out.x, st.x);
        assert_eq!(out.p, st.p);
    }

    #[test]
    fn enormous_measurement_noise_disables_the_update() {
        let config = cfg();
        let m = linear_surrogate(&config, 2.0, 0.05);
        let mut st = FilterState::new([0.08, 0.04], &config.filter);
        st.r = Mat2::diag(config.filter.r_diag * 1.0e6, config.filter.r_diag * 1.0e6);
        // make R utterly dominant relative to P
        st.r = st.r.scale(1.0e12);
        let (out, _) = update(&m, &st, 4.0e-4, [5.0, 5.0], &config).unwrap();
        assert!((out.x[0] - st.x[0]).abs() < 1.0e-8);
        assert!((out.x[1] - st.x[1]).abs() < 1.0e-8);
    }

    #[test]
    fn gain_norm_decreases_monotonically_as_r_grows() {
        let config = cfg();
        let m = linear_surrogate(&config, 2.0, 0.05);
        let mut prev_norm = f64::INFINITY;
        for scale in [1.0, 1.0e2, 1.0e4, 1.0e6] {
            let mut st = FilterState::new([0.08, 0.04], &config.filter);
            st.r = Mat2::diag(config.filter.r_diag * scale, config.filter.r_diag * scale);
            let (out, _) = update(&m, &st, 4.0e-4, [0.3, 0.3], &config).unwrap();
            let norm = out.k.0.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm < prev_norm, "gain norm should shrink with R");
            prev_norm = norm;
        }
    }

    #[test]
    fn joseph_update_preserves_symmetry_and_psd_on_random_cases() {
        let config = cfg();
        let m = linear_surrogate(&config, 2.0, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            // random SPD covariance
            let a = [
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            ];
            let aa = Mat2(a);
            let spd = aa.mul(&aa.transpose()).add(&Mat2::diag(1e-6, 1e-6)).scale(1e-4);
            let mut st = FilterState::new(
                [
                    0.067 + rng.gen::<f64>() * 0.033,
                    0.019 + rng.gen::<f64>() * 0.05,
                ],
                &config.filter,
            );
            st.p = spd;
            let y = [rng.gen::<f64>(), rng.gen::<f64>()];
            let (out, _) = update(&m, &st, 4.0e-4, y, &config).unwrap();
            assert!(out.p.asymmetry() < 1e-12);
            assert!(out.p.sym_eigenvalues()[0] >= -1e-12);
        }
    }

    #[test]
    fn adaptive_w_matches_two_member_hand_value() {
        let config = cfg();
        // identical h_HP predictions, h_DP of 0.050 m and 0.052 m (scaled by 0.2)
        let m1 = constant_surrogate(&config, [0.08 / 0.2, 0.050 / 0.2, 0.0, 0.0]);
        let m2 = constant_surrogate(&config, [0.08 / 0.2, 0.052 / 0.2, 0.0, 0.0]);
        let w = adaptive_w(&[&m1, &m2], [0.08, 0.04], 4.0e-4, 100.0, &config).unwrap();
        // sample variance (n−1 denominator): 2·(1e-3)² = 2e-6 m², attenuated to 2e-8
        assert_relative_eq!(w.0[3], 2.0e-8, max_relative = 1e-9);
        assert_relative_eq!(w.0[0], 0.0, epsilon = 1e-18);
        assert_relative_eq!(w.0[1], w.0[2]);

        // identical members → zero spread
        let w = adaptive_w(&[&m1, &m1], [0.08, 0.04], 4.0e-4, 100.0, &config).unwrap();
        assert_eq!(w, Mat2::zero());

        // singleton ensembles are rejected
        assert!(adaptive_w(&[&m1], [0.08, 0.04], 4.0e-4, 100.0, &config).is_err());
    }

    #[test]
    fn adaptive_w_is_symmetric_psd_for_random_ensembles() {
        let config = cfg();
        let models: Vec<MlpModel> = (0..6)
            .map(|seed| crate::train::build_surrogate(crate::train::ModelKind::Pinn, &config, seed).unwrap())
            .collect();
        let refs: Vec<&MlpModel> = models.iter().collect();
        let w = adaptive_w(&refs, [0.08, 0.04], 4.0e-4, 100.0, &config).unwrap();
        assert!(w.asymmetry() == 0.0);
        assert!(w.sym_eigenvalues()[0] >= -1e-18);
    }

    #[test]
    fn initial_state_search_recovers_a_candidate_that_explains_the_flows() {
        let config = cfg();
        let m = linear_surrogate(&config, 2.0, 0.05);
        // pick the candidate that the search should find: evaluate the model
        // at a known candidate and feed those flows as the measurement
        let candidates = sample_candidates(100, 31, &config).unwrap();
        let truth = candidates[37];
        let out = m.forward(&[0.0, truth[0], truth[1], 4.0e-4]).unwrap();
        let found =
            initial_state_search(&m, [out[2], out[3]], 4.0e-4, 100, 31, &config).unwrap();
        assert_eq!(found, truth);

        // n_samples = 1 returns the only sample
        let only = sample_candidates(1, 7, &config).unwrap()[0];
        let found = initial_state_search(&m, [0.0, 0.0], 4.0e-4, 1, 7, &config).unwrap();
        assert_eq!(found, only);
    }

    #[test]
    fn one_segment_chain_equals_single_forward_evaluation() {
        let config = cfg();
        let m = crate::train::build_surrogate(crate::train::ModelKind::Pinn, &config, 5).unwrap();
        let x0 = [0.08, 0.04];
        let u = 4.0e-4;
        let roll = chain_forward(std::slice::from_ref(&m), x0, &[u], &config).unwrap();
        let out = m.forward(&[1.0, x0[0], x0[1], u]).unwrap();
        assert_eq!(roll.members[0][1], [out[0] * 0.2, out[1] * 0.2]);
        assert_eq!(roll.members[0][0], x0);
        // ensemble mean of one member is the member
        assert_eq!(roll.mean, roll.members[0]);
    }

    #[test]
    fn ensemble_mean_is_pointwise_mean_of_member_rollouts() {
        let config = cfg();
        let models: Vec<MlpModel> = (0..3)
            .map(|seed| crate::train::build_surrogate(crate::train::ModelKind::Pinn, &config, seed).unwrap())
            .collect();
        let roll = chain_forward(&models, [0.08, 0.04], &[4.0e-4; 5], &config).unwrap();
        for k in 0..roll.mean.len() {
            let mut acc = [0.0; 2];
            for m in &roll.members {
                acc[0] += m[k][0] / 3.0;
                acc[1] += m[k][1] / 3.0;
            }
            assert_relative_eq!(roll.mean[k][0], acc[0], max_relative = 1e-14);
            assert_relative_eq!(roll.mean[k][1], acc[1], max_relative = 1e-14);
        }
    }

    #[test]
    fn run_filter_tracks_a_consistent_linear_world() {
        // measurement model: flows = 0.05 + 2·(h_hp + h_dp); transition:
        // heights persist. The filter should pull the state toward the pair
        // explaining the measured flows.
        let config = cfg();
        let m = linear_surrogate(&config, 2.0, 0.05);
        let truth = [0.080, 0.045];
        let y_scaled = 0.05 + 2.0 * (truth[0] + truth[1]);
        let q_scale = config.scaling.q_scale;
        let steps: Vec<FilterStep> = (0..40)
            .map(|k| FilterStep {
                tau_s: k as f64,
                q_in: 4.0e-4,
                y: [y_scaled * q_scale, y_scaled * q_scale],
            })
            .collect();
        let out = run_filter(std::slice::from_ref(&m), &steps, &config, 3).unwrap();
        let last = *out.mean_estimates.last().unwrap();
        // only the sum h_hp + h_dp is observable in this world
        let sum_err = (last[0] + last[1]) - (truth[0] + truth[1]);
        assert!(
            sum_err.abs() < 5.0e-4,
            "filter should reconstruct the observable subspace, err {sum_err}"
        );
        assert_eq!(out.members[0].estimates.len(), steps.len());
        assert_eq!(out.members[0].rows.len(), steps.len() - 1);
    }
}
