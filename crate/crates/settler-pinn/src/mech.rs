//! Low-fidelity mechanistic settler model.
//!
//! Volume-balance ODEs for the heavy-phase and dense-packed-zone heights of a
//! horizontal cylindrical separator, closed by a pluggable surrogate submodel
//! for the coalescence and sedimentation rates. Fixed-step RK4 integration on
//! one-second segments, Latin-hypercube dataset generation, and chained
//! trajectory simulation for the synthetic twin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{
    ControlInput, FlowMeasurement, InternalFlows, Interval, SettlerConfig, SettlerState,
    SettlerGeometry,
};
use crate::error::{Error, Result};

/// Grid step of one simulated segment, seconds.
pub const SEGMENT_DT: f64 = 0.1;
/// Duration of one simulated segment, seconds.
pub const SEGMENT_DURATION: f64 = 1.0;
/// Grid points per segment (t = 0.0, 0.1, ..., 1.0).
pub const SEGMENT_POINTS: usize = 11;

/// Chord denominators below this area (m²) are treated as singular.
const DENOM_FLOOR: f64 = 1.0e-12;

/// Coalescence/sedimentation closure for the volume balances.
///
/// The full population-balance submodels are out of scope here; these
/// surrogates keep the dependency structure (sedimentation driven by the
/// heavy-phase interface, coalescence driven by the dense-packed zone) and
/// return nonnegative rates for every admissible state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum SubmodelSpec {
    /// Fixed rates, mostly useful for tests.
    Constant { q_c: f64, q_s: f64 },
    /// q_s = s0 + s1·h_HP and q_c = c0 + c1·h_DP, clamped to >= 0.
    /// Slopes carry units of m²/s.
    AffineInHeights { s0: f64, s1: f64, c0: f64, c1: f64 },
    /// Interfacial-area-driven rates:
    ///   q_s = k_s · A(h_HP) · (h_HP / 2r)^n_swarm
    ///   q_c = k_c · A(h_HP + h_DP) · h_DP / (h_DP + h_half)
    /// with A(h) the flat interface area 2·L·sqrt(h(2r − h)). Rate constants
    /// k_s, k_c in m/s; h_half in m. Defaults are calibrated so that
    /// flow-balanced steady states sit inside the operating envelope.
    SaturatingSurrogate { k_s: f64, k_c: f64, h_half: f64 },
}

impl SubmodelSpec {
    pub fn validate(&self) -> Result<()> {
        let all_finite = |vals: &[f64]| vals.iter().all(|v| v.is_finite());
        match self {
            SubmodelSpec::Constant { q_c, q_s } => {
                if !all_finite(&[*q_c, *q_s]) || *q_c < 0.0 || *q_s < 0.0 {
                    return Err(Error::Config("constant submodel rates must be >= 0".into()));
                }
            }
            SubmodelSpec::AffineInHeights { s0, s1, c0, c1 } => {
                if !all_finite(&[*s0, *s1, *c0, *c1]) {
                    return Err(Error::Config("affine submodel parameters must be finite".into()));
                }
            }
            SubmodelSpec::SaturatingSurrogate { k_s, k_c, h_half } => {
                if !all_finite(&[*k_s, *k_c, *h_half]) || *k_s < 0.0 || *k_c < 0.0 || *h_half <= 0.0
                {
                    return Err(Error::Config(
                        "saturating surrogate requires k_s, k_c >= 0 and h_half > 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

impl Default for SubmodelSpec {
    fn default() -> Self {
        SubmodelSpec::SaturatingSurrogate {
            k_s: 6.5e-3,
            k_c: 4.2e-3,
            h_half: 0.1,
        }
    }
}

/// Area of a horizontal interface at height `h` in a cylinder of radius `r`
/// and length `L`: 2·L·sqrt(h·(2r − h)). This is also dV/dh of the
/// cylindrical segment below `h`, hence the denominator of the height ODEs.
pub fn chord_denominator(h: f64, geometry: &SettlerGeometry) -> Result<f64> {
    let d = geometry.height_sep();
    if !h.is_finite() || h < 0.0 || h > d {
        return Err(Error::Domain(format!(
            "interface height {h} outside [0, {d}]"
        )));
    }
    Ok(2.0 * geometry.length_l * (h * (d - h)).sqrt())
}

/// Net volume imbalance q_in − q_bot − q_top; zero when the vessel stays full.
pub fn balance_residual(q_in: f64, q_bot: f64, q_top: f64) -> f64 {
    q_in - q_bot - q_top
}

/// Time derivatives of the phase heights, m/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightRates {
    pub dh_hp: f64,
    pub dh_dp: f64,
}

/// Volume-balance right-hand side evaluated at one state.
///
/// The heavy-phase and dense-packed-zone balances share the heavy-phase term:
/// the DPZ grows with the net flow not removed through the bottom or consumed
/// by coalescence, measured relative to the moving heavy-phase interface.
pub fn mech_rhs(
    state: &SettlerState,
    q_in: f64,
    q_bot: f64,
    flows: &InternalFlows,
    config: &SettlerConfig,
) -> Result<HeightRates> {
    let eps = config.dispersion.epsilon_dp;
    let geom = &config.geometry;
    let d = geom.height_sep();
    if !(state.h_hp > 0.0) || !(state.h_hp + state.h_dp < d) {
        return Err(Error::Domain(format!(
            "state outside open admissible region: h_hp = {}, h_hp + h_dp = {}",
            state.h_hp,
            state.h_hp + state.h_dp
        )));
    }

    let denom_hp = chord_denominator(state.h_hp, geom)?;
    if denom_hp < DENOM_FLOOR {
        return Err(Error::Singularity {
            which: "h_hp",
            height_m: state.h_hp,
        });
    }
    let denom_dp = chord_denominator(state.h_hp + state.h_dp, geom)?;
    if denom_dp < DENOM_FLOOR {
        return Err(Error::Singularity {
            which: "h_hp + h_dp",
            height_m: state.h_hp + state.h_dp,
        });
    }

    let dh_hp = (q_in - q_bot - flows.q_s / eps + flows.q_c * (1.0 - eps) / eps) / denom_hp;
    let dh_dp = (q_in - q_bot - flows.q_c) / denom_dp - dh_hp;
    Ok(HeightRates { dh_hp, dh_dp })
}

/// Evaluates the configured coalescence/sedimentation surrogate.
pub fn eval_submodel(
    spec: &SubmodelSpec,
    state: &SettlerState,
    config: &SettlerConfig,
) -> Result<InternalFlows> {
    let geom = &config.geometry;
    let (q_c, q_s) = match *spec {
        SubmodelSpec::Constant { q_c, q_s } => (q_c, q_s),
        SubmodelSpec::AffineInHeights { s0, s1, c0, c1 } => {
            ((c0 + c1 * state.h_dp).max(0.0), (s0 + s1 * state.h_hp).max(0.0))
        }
        SubmodelSpec::SaturatingSurrogate { k_s, k_c, h_half } => {
            let d = geom.height_sep();
            let area_hp = chord_denominator(state.h_hp, geom)?;
            let area_top = chord_denominator((state.h_hp + state.h_dp).min(d), geom)?;
            let swarm = (state.h_hp / d).powf(config.dispersion.n_swarm);
            let q_s = k_s * area_hp * swarm;
            let q_c = k_c * area_top * state.h_dp / (state.h_dp + h_half);
            (q_c.max(0.0), q_s.max(0.0))
        }
    };
    InternalFlows::new(q_c, q_s)
}

/// One integrated one-second segment on the fixed 0.1 s grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSegment {
    pub initial: SettlerState,
    pub control: ControlInput,
    pub q_bot: f64,
    /// Grid times in seconds: 0.0, 0.1, ..., 1.0.
    pub times: Vec<f64>,
    pub states: Vec<SettlerState>,
    pub flows: Vec<FlowMeasurement>,
    pub internal: Vec<InternalFlows>,
}

impl SimSegment {
    pub fn final_state(&self) -> SettlerState {
        *self.states.last().expect("segment has grid points")
    }
}

fn rk4_step<F>(f: &F, y: [f64; 2], dt: f64) -> Result<[f64; 2]>
where
    F: Fn([f64; 2]) -> Result<[f64; 2]>,
{
    let k1 = f(y)?;
    let k2 = f([y[0] + 0.5 * dt * k1[0], y[1] + 0.5 * dt * k1[1]])?;
    let k3 = f([y[0] + 0.5 * dt * k2[0], y[1] + 0.5 * dt * k2[1]])?;
    let k4 = f([y[0] + dt * k3[0], y[1] + dt * k3[1]])?;
    Ok([
        y[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        y[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ])
}

fn admissible(y: [f64; 2], geom: &SettlerGeometry) -> bool {
    let margin = 1.0e-9;
    y[0] > margin && y[1] >= 0.0 && y[0] + y[1] < geom.height_sep() - margin
}

fn rhs_for<'a>(
    q_in: f64,
    q_bot: f64,
    spec: &'a SubmodelSpec,
    config: &'a SettlerConfig,
) -> impl Fn([f64; 2]) -> Result<[f64; 2]> + 'a {
    move |y: [f64; 2]| {
        if !admissible(y, &config.geometry) {
            return Err(Error::Domain(format!(
                "state left admissible region (h_hp = {}, h_dp = {})",
                y[0], y[1]
            )));
        }
        let state = SettlerState { h_hp: y[0], h_dp: y[1] };
        let flows = eval_submodel(spec, &state, config)?;
        let rates = mech_rhs(&state, q_in, q_bot, &flows, config)?;
        Ok([rates.dh_hp, rates.dh_dp])
    }
}

/// Integrates with an arbitrary fixed step; returns the state after each step.
/// Used for convergence studies; [`integrate_segment`] covers the standard grid.
pub fn integrate_fixed(
    initial: &SettlerState,
    q_in: f64,
    q_bot: f64,
    spec: &SubmodelSpec,
    config: &SettlerConfig,
    dt: f64,
    steps: usize,
) -> Result<Vec<SettlerState>> {
    let f = rhs_for(q_in, q_bot, spec, config);
    let mut out = Vec::with_capacity(steps + 1);
    let mut y = [initial.h_hp, initial.h_dp];
    out.push(*initial);
    for k in 0..steps {
        y = rk4_step(&f, y, dt).map_err(|e| match e {
            Error::Domain(reason) | Error::Numeric(reason) => Error::Divergence {
                time_s: (k as f64 + 1.0) * dt,
                h_hp_m: y[0],
                h_dp_m: y[1],
                reason,
            },
            other => other,
        })?;
        if !admissible(y, &config.geometry) {
            return Err(Error::Divergence {
                time_s: (k as f64 + 1.0) * dt,
                h_hp_m: y[0],
                h_dp_m: y[1],
                reason: "integrated state left the admissible region".into(),
            });
        }
        out.push(SettlerState { h_hp: y[0], h_dp: y[1] });
    }
    Ok(out)
}

/// Integrates one one-second segment on the fixed 0.1 s grid.
///
/// The top outlet flow is recorded as q_in − q_bot at every grid point, which
/// enforces the algebraic volume balance exactly.
pub fn integrate_segment(
    initial: &SettlerState,
    q_in: f64,
    q_bot: f64,
    spec: &SubmodelSpec,
    config: &SettlerConfig,
) -> Result<SimSegment> {
    let steps = SEGMENT_POINTS - 1;
    let states = integrate_fixed(initial, q_in, q_bot, spec, config, SEGMENT_DT, steps)?;
    let q_top = q_in - q_bot;
    if q_top < 0.0 {
        return Err(Error::Domain(format!(
            "q_bot = {q_bot} exceeds q_in = {q_in}; top outlet would reverse"
        )));
    }
    let mut internal = Vec::with_capacity(SEGMENT_POINTS);
    for s in &states {
        internal.push(eval_submodel(spec, s, config)?);
    }
    Ok(SimSegment {
        initial: *initial,
        control: ControlInput::new(q_in)?,
        q_bot,
        times: (0..SEGMENT_POINTS).map(|i| i as f64 * SEGMENT_DT).collect(),
        states,
        flows: vec![FlowMeasurement::new(q_bot, q_top)?; SEGMENT_POINTS],
        internal,
    })
}

/// Pretraining dataset of independently sampled one-second segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentDataset {
    pub segments: Vec<SimSegment>,
    /// Number of diverged samples that had to be redrawn.
    pub resampled: usize,
}

fn sample_in(iv: &Interval, rng: &mut impl Rng) -> f64 {
    iv.lb + rng.gen::<f64>() * iv.width()
}

/// Latin hypercube sample of `n` points over the given ranges.
pub fn latin_hypercube(n: usize, ranges: &[Interval], rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; ranges.len()]; n];
    for (j, iv) in ranges.iter().enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        // Fisher-Yates with the shared stream keeps the design reproducible.
        for i in (1..n).rev() {
            let k = rng.gen_range(0..=i);
            strata.swap(i, k);
        }
        for (i, point) in points.iter_mut().enumerate() {
            let u = rng.gen::<f64>();
            point[j] = iv.lb + (strata[i] as f64 + u) / n as f64 * iv.width();
        }
    }
    points
}

/// Generates `n_segments` one-second segments with Latin-hypercube sampled
/// initial heights, inlet flow, and bottom outlet flow over the extrapolation
/// bounds. Diverging samples are redrawn uniformly from a per-segment stream,
/// so parallel and serial runs produce identical datasets for a given seed.
pub fn generate_pretrain_dataset(
    n_segments: usize,
    config: &SettlerConfig,
    seed: u64,
) -> Result<SegmentDataset> {
    if n_segments == 0 {
        return Ok(SegmentDataset {
            segments: Vec::new(),
            resampled: 0,
        });
    }
    let bounds = &config.bounds;
    let ranges = [
        bounds.h_hp.extrapolation,
        bounds.h_dp.extrapolation,
        bounds.q_in.extrapolation,
        bounds.q_bot.extrapolation,
    ];
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let design = latin_hypercube(n_segments, &ranges, &mut master);

    let results: Vec<Result<(SimSegment, usize)>> = design
        .par_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut sample = [row[0], row[1], row[2], row[3]];
            let mut stream = ChaCha8Rng::seed_from_u64(seed);
            stream.set_stream(1 + i as u64);
            let mut redraws = 0usize;
            loop {
                let initial = SettlerState::new(sample[0], sample[1], &config.geometry)?;
                match integrate_segment(&initial, sample[2], sample[3], &config.submodel, config) {
                    Ok(seg) => return Ok((seg, redraws)),
                    Err(Error::Divergence { .. }) | Err(Error::Domain(_)) => {
                        redraws += 1;
                        if redraws > 100 {
                            return Err(Error::Numeric(format!(
                                "segment {i}: exceeded 100 redraws without an admissible sample"
                            )));
                        }
                        sample = [
                            sample_in(&ranges[0], &mut stream),
                            sample_in(&ranges[1], &mut stream),
                            sample_in(&ranges[2], &mut stream),
                            sample_in(&ranges[3], &mut stream),
                        ];
                    }
                    Err(other) => return Err(other),
                }
            }
        })
        .collect();

    let mut segments = Vec::with_capacity(n_segments);
    let mut resampled = 0;
    for r in results {
        let (seg, redraws) = r?;
        segments.push(seg);
        resampled += redraws;
    }
    if resampled > 0 {
        log::info!("pretraining dataset: redrew {resampled} diverged segments");
    }
    Ok(SegmentDataset { segments, resampled })
}

/// Bottom-outlet flow policy of the synthetic twin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QBotPolicy {
    /// Explicit per-second schedule, m³/s.
    Schedule(Vec<f64>),
    /// Proportional interface valve: q_bot = (1 − ε_in)·q_in + gain·(h_HP − h_ref),
    /// sampled at segment starts and held for one second, mirroring how the
    /// rig's check valve regulates the interfacial position.
    BalancedValve,
}

/// Additive Gaussian measurement noise for twin trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Height channel standard deviation, meters.
    pub sigma_h: f64,
    /// Flow channel standard deviation, m³/s.
    pub sigma_q: f64,
    pub seed: u64,
}

/// One-second step of a simulated trajectory. Measured channels may carry
/// noise; `*_true` fields always hold the clean values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub tau_s: f64,
    pub q_in: f64,
    pub q_bot: f64,
    pub q_top: f64,
    pub h_hp: f64,
    pub h_dp: f64,
    pub h_hp_true: f64,
    pub h_dp_true: f64,
    pub q_bot_true: f64,
    pub q_top_true: f64,
    pub q_c_true: f64,
    pub q_s_true: f64,
}

/// Chained segment simulation at one-second resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    pub steps: Vec<TrajectoryStep>,
    /// Set when the simulation stopped early, with the divergence diagnostic.
    pub truncated: Option<String>,
}

/// Simulates a trajectory by chaining one-second segments over a piecewise
/// constant inlet schedule. Returns ground-truth heights, outlet flows, and
/// internal flows per second; optionally superimposes measurement noise.
pub fn simulate_trajectory(
    initial: &SettlerState,
    q_in_schedule: &[f64],
    q_bot_policy: &QBotPolicy,
    noise: Option<&NoiseSpec>,
    config: &SettlerConfig,
) -> Result<TrajectoryDataset> {
    if let QBotPolicy::Schedule(q) = q_bot_policy {
        if q.len() != q_in_schedule.len() {
            return Err(Error::Config(format!(
                "q_bot schedule length {} does not match q_in schedule length {}",
                q.len(),
                q_in_schedule.len()
            )));
        }
    }
    let mut rng = noise.map(|n| ChaCha8Rng::seed_from_u64(n.seed));
    let gauss = |sigma: f64, rng: &mut Option<ChaCha8Rng>| -> f64 {
        match rng {
            Some(r) => {
                use rand_distr::Distribution;
                rand_distr::Normal::new(0.0, sigma).map(|n| n.sample(r)).unwrap_or(0.0)
            }
            None => 0.0,
        }
    };

    let mut steps = Vec::with_capacity(q_in_schedule.len());
    let mut state = *initial;
    let mut truncated = None;
    for (k, &q_in) in q_in_schedule.iter().enumerate() {
        let q_bot = match q_bot_policy {
            QBotPolicy::Schedule(q) => q[k],
            QBotPolicy::BalancedValve => {
                let ff = (1.0 - config.dispersion.epsilon_in) * q_in;
                let fb = config.twin.valve_gain * (state.h_hp - config.twin.h_ref);
                // physical valve limits only: no reverse flow on either outlet
                (ff + fb).clamp(0.0, q_in)
            }
        };
        let segment = match integrate_segment(&state, q_in, q_bot, &config.submodel, config) {
            Ok(s) => s,
            Err(e @ Error::Divergence { .. }) => {
                truncated = Some(e.to_string());
                log::warn!("trajectory truncated at tau = {k} s: {e}");
                break;
            }
            Err(e) => return Err(e),
        };
        let q_top = q_in - q_bot;
        let internal = segment.internal[0];
        let (nh, nq) = noise.map(|n| (n.sigma_h, n.sigma_q)).unwrap_or((0.0, 0.0));
        steps.push(TrajectoryStep {
            tau_s: k as f64,
            q_in,
            q_bot: q_bot + gauss(nq, &mut rng),
            q_top: q_top + gauss(nq, &mut rng),
            h_hp: state.h_hp + gauss(nh, &mut rng),
            h_dp: state.h_dp + gauss(nh, &mut rng),
            h_hp_true: state.h_hp,
            h_dp_true: state.h_dp,
            q_bot_true: q_bot,
            q_top_true: q_top,
            q_c_true: internal.q_c,
            q_s_true: internal.q_s,
        });
        state = segment.final_state();
    }
    Ok(TrajectoryDataset { steps, truncated })
}

/// Expands flow levels held for fixed durations into a per-second schedule.
pub fn stepwise_schedule(levels_m3s: &[f64], hold_s: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(levels_m3s.len() * hold_s);
    for &level in levels_m3s {
        out.extend(std::iter::repeat(level).take(hold_s));
    }
    out
}

fn bisect(mut lo: f64, mut hi: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let flo = f(lo)?;
    let fhi = f(hi)?;
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::Numeric(format!(
            "bisection bracket [{lo}, {hi}] does not straddle a root"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if fm == 0.0 || hi - lo < 1.0e-13 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Steady state of the twin under the balanced valve policy for a constant
/// inlet flow, found by nested bisection on the surrogate rate balances.
pub fn balanced_equilibrium(q_in: f64, config: &SettlerConfig) -> Result<SettlerState> {
    let eps_in = config.dispersion.epsilon_in;
    let gain = config.twin.valve_gain;
    let h_ref = config.twin.h_ref;
    let target = eps_in * q_in;
    let d = config.geometry.height_sep();

    // At steady state both internal rates equal q_in − q_bot. With the valve,
    // sedimentation must satisfy q_s(h) + gain·(h − h_ref) = ε_in·q_in.
    let h_hp = bisect(1.0e-4, d - 1.0e-4, |h| {
        let s = SettlerState { h_hp: h, h_dp: 0.0 };
        let flows = eval_submodel(&config.submodel, &s, config)?;
        Ok(flows.q_s + gain * (h - h_ref) - target)
    })?;
    let q_eq = target - gain * (h_hp - h_ref);

    // Coalescence branch: scan for the first bracket of q_c(h_hp, ·) = q_eq
    // on the rising branch, then bisect inside it.
    let h_dp_max = d - h_hp - 1.0e-4;
    let q_c_at = |h_dp: f64| -> Result<f64> {
        let s = SettlerState { h_hp, h_dp };
        Ok(eval_submodel(&config.submodel, &s, config)?.q_c - q_eq)
    };
    let n_scan = 400;
    let mut prev_h = 0.0;
    let mut prev_v = q_c_at(0.0)?;
    let mut bracket = None;
    for i in 1..=n_scan {
        let h = h_dp_max * i as f64 / n_scan as f64;
        let v = q_c_at(h)?;
        if prev_v.signum() != v.signum() || v == 0.0 {
            bracket = Some((prev_h, h));
            break;
        }
        prev_h = h;
        prev_v = v;
    }
    let (lo, hi) = bracket.ok_or_else(|| {
        Error::Numeric(format!(
            "no coalescence equilibrium below flooding for q_in = {q_in}; the surrogate cannot sustain this throughput"
        ))
    })?;
    let h_dp = bisect(lo, hi, q_c_at)?;
    SettlerState::new(h_hp, h_dp, &config.geometry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg() -> SettlerConfig {
        SettlerConfig::default()
    }

    #[test]
    fn chord_matches_hand_values() {
        let g = SettlerGeometry::default();
        assert_relative_eq!(chord_denominator(0.1, &g).unwrap(), 0.2, max_relative = 1e-15);
        assert_relative_eq!(chord_denominator(0.0, &g).unwrap(), 0.0);
        assert_relative_eq!(
            chord_denominator(0.05, &g).unwrap(),
            0.17320508075688773,
            max_relative = 1e-12
        );
        assert!(chord_denominator(0.25, &g).is_err());
        assert!(chord_denominator(-0.01, &g).is_err());
    }

    #[test]
    fn balance_residual_hand_values() {
        assert_relative_eq!(balance_residual(0.3, 0.1, 0.2), 0.0);
        assert_relative_eq!(balance_residual(1.0, 0.0, 0.0), 1.0);
        assert_relative_eq!(balance_residual(0.245, 0.117, 0.105), 0.023, max_relative = 1e-12);
    }

    #[test]
    fn rhs_vanishes_for_balanced_flows_without_internal_transport() {
        let config = cfg();
        let state = SettlerState { h_hp: 0.08, h_dp: 0.04 };
        let flows = InternalFlows { q_c: 0.0, q_s: 0.0 };
        let rates = mech_rhs(&state, 3.0e-4, 3.0e-4, &flows, &config).unwrap();
        assert_relative_eq!(rates.dh_hp, 0.0);
        assert_relative_eq!(rates.dh_dp, 0.0);
    }

    #[test]
    fn rhs_matches_hand_evaluation() {
        let config = cfg();
        let state = SettlerState { h_hp: 0.1, h_dp: 0.04 };
        let flows = InternalFlows { q_c: 0.0, q_s: 1.8e-4 };
        let rates = mech_rhs(&state, 3.0e-4, 3.0e-4, &flows, &config).unwrap();
        // -(q_s / 0.9) / 0.2 = -(2e-4) / 0.2
        assert_relative_eq!(rates.dh_hp, -1.0e-3, max_relative = 1e-12);
        // first DPZ term vanishes, so dh_dp = -dh_hp
        assert_relative_eq!(rates.dh_dp, 1.0e-3, max_relative = 1e-12);
    }

    #[test]
    fn rhs_reports_singular_heights() {
        let config = cfg();
        let state = SettlerState { h_hp: 1.0e-30, h_dp: 0.01 };
        let err = mech_rhs(&state, 0.0, 0.0, &InternalFlows { q_c: 0.0, q_s: 0.0 }, &config)
            .unwrap_err();
        match err {
            Error::Singularity { which, .. } => assert_eq!(which, "h_hp"),
            other => panic!("expected singularity, got {other:?}"),
        }
    }

    #[test]
    fn dpz_rate_mirrors_hp_rate_when_coalescence_is_zero() {
        let config = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let h_hp = 0.02 + 0.1 * rng.gen::<f64>();
            let h_dp = 0.005 + 0.07 * rng.gen::<f64>();
            let q = 1.0e-4 + 4.0e-4 * rng.gen::<f64>();
            let q_s = 3.0e-4 * rng.gen::<f64>();
            let state = SettlerState { h_hp, h_dp };
            let flows = InternalFlows { q_c: 0.0, q_s };
            let rates = mech_rhs(&state, q, q, &flows, &config).unwrap();
            assert_relative_eq!(rates.dh_dp, -rates.dh_hp, max_relative = 1e-12);
        }
    }

    #[test]
    fn submodel_hand_values() {
        let config = cfg();
        let state = SettlerState { h_hp: 0.08, h_dp: 0.05 };
        let zero = SubmodelSpec::Constant { q_c: 0.0, q_s: 0.0 };
        let f = eval_submodel(&zero, &state, &config).unwrap();
        assert_eq!((f.q_c, f.q_s), (0.0, 0.0));

        let affine = SubmodelSpec::AffineInHeights { s0: 0.0, s1: 0.0, c0: 0.0, c1: 1.0e-3 };
        let f = eval_submodel(&affine, &state, &config).unwrap();
        assert_relative_eq!(f.q_c, 5.0e-5, max_relative = 1e-12);

        let sat = SubmodelSpec::default();
        let nodpz = SettlerState { h_hp: 0.08, h_dp: 0.0 };
        let f = eval_submodel(&sat, &nodpz, &config).unwrap();
        assert_eq!(f.q_c, 0.0);
        assert!(f.q_s > 0.0);
    }

    #[test]
    fn rk4_is_exact_on_constant_rate() {
        // Stub RHS: constant rates; RK4 reproduces the linear solution exactly.
        let f = |_: [f64; 2]| Ok([3.0e-3, -1.0e-3]);
        let mut y = [0.08, 0.04];
        for _ in 0..10 {
            y = rk4_step(&f, y, 0.1).unwrap();
        }
        assert_relative_eq!(y[0], 0.08 + 3.0e-3, max_relative = 1e-15);
        assert_relative_eq!(y[1], 0.04 - 1.0e-3, max_relative = 1e-15);
    }

    #[test]
    fn rk4_order_is_about_four_on_the_surrogate() {
        let config = cfg();
        let initial = SettlerState { h_hp: 0.075, h_dp: 0.03 };
        let (q_in, q_bot) = (4.5e-4, 2.0e-4);
        let endpoint = |dt: f64| {
            let steps = (1.0 / dt).round() as usize;
            let states =
                integrate_fixed(&initial, q_in, q_bot, &config.submodel, &config, dt, steps)
                    .unwrap();
            *states.last().unwrap()
        };
        let reference = endpoint(0.0125);
        let err = |s: SettlerState| {
            ((s.h_hp - reference.h_hp).powi(2) + (s.h_dp - reference.h_dp).powi(2)).sqrt()
        };
        let e1 = err(endpoint(0.1));
        let e2 = err(endpoint(0.05));
        let order = (e1 / e2).log2();
        assert!(
            (3.7..=4.3).contains(&order),
            "observed RK4 order {order} outside [3.7, 4.3] (e1 = {e1:.3e}, e2 = {e2:.3e})"
        );
    }

    #[test]
    fn balanced_zero_submodel_keeps_state_constant() {
        let config = {
            let mut c = cfg();
            c.submodel = SubmodelSpec::Constant { q_c: 0.0, q_s: 0.0 };
            c
        };
        let initial = SettlerState { h_hp: 0.08, h_dp: 0.04 };
        let seg = integrate_segment(&initial, 3.0e-4, 3.0e-4, &config.submodel, &config).unwrap();
        assert_eq!(seg.states.len(), SEGMENT_POINTS);
        for s in &seg.states {
            assert_relative_eq!(s.h_hp, initial.h_hp, max_relative = 1e-14);
            assert_relative_eq!(s.h_dp, initial.h_dp, max_relative = 1e-14);
        }
    }

    #[test]
    fn segment_enforces_volume_balance_exactly() {
        let config = cfg();
        let initial = SettlerState { h_hp: 0.08, h_dp: 0.04 };
        let seg = integrate_segment(&initial, 4.0e-4, 1.8e-4, &config.submodel, &config).unwrap();
        for f in &seg.flows {
            assert_eq!(f.q_top, 4.0e-4 - 1.8e-4);
            assert_eq!(balance_residual(4.0e-4, f.q_bot, f.q_top), 0.0);
        }
        // admissibility along the segment
        for s in &seg.states {
            assert!(s.h_hp > 0.0 && s.h_hp + s.h_dp < config.geometry.height_sep());
        }
    }

    #[test]
    fn dataset_generation_is_deterministic_and_sized() {
        let config = cfg();
        let a = generate_pretrain_dataset(40, &config, 42).unwrap();
        let b = generate_pretrain_dataset(40, &config, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.segments.len(), 40);
        assert!(a.segments.iter().all(|s| s.states.len() == SEGMENT_POINTS));
        let c = generate_pretrain_dataset(40, &config, 43).unwrap();
        assert_ne!(a, c);
        let empty = generate_pretrain_dataset(0, &config, 1).unwrap();
        assert!(empty.segments.is_empty());
    }

    #[test]
    fn lhs_stratifies_every_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ranges = [Interval { lb: 0.0, ub: 1.0 }, Interval { lb: -2.0, ub: 2.0 }];
        let pts = latin_hypercube(16, &ranges, &mut rng);
        for j in 0..2 {
            let mut hit = vec![false; 16];
            for p in &pts {
                let u = (p[j] - ranges[j].lb) / ranges[j].width();
                hit[(u * 16.0).floor().min(15.0) as usize] = true;
            }
            assert!(hit.iter().all(|h| *h), "dimension {j} misses a stratum");
        }
    }

    #[test]
    fn balanced_equilibria_sit_inside_operating_bounds() {
        let config = cfg();
        let m3h = 1.0 / 3600.0;
        // Interior levels settle inside the interpolation box.
        for q_in in [1.25 * m3h, 1.5 * m3h, 1.75 * m3h] {
            let eq = balanced_equilibrium(q_in, &config).unwrap();
            assert!(
                config.bounds.h_hp.interpolation.contains(eq.h_hp),
                "h_hp equilibrium {} outside interpolation bounds at q_in = {q_in}",
                eq.h_hp
            );
            assert!(
                config.bounds.h_dp.interpolation.contains(eq.h_dp),
                "h_dp equilibrium {} outside interpolation bounds at q_in = {q_in}",
                eq.h_dp
            );
        }
        // The extreme schedule levels stay within the extrapolation box.
        for q_in in [0.75 * m3h, 1.0 * m3h, 2.0 * m3h, 2.25 * m3h] {
            let eq = balanced_equilibrium(q_in, &config).unwrap();
            assert!(
                config.bounds.h_hp.extrapolation.contains(eq.h_hp),
                "h_hp equilibrium {} outside extrapolation bounds at q_in = {q_in}",
                eq.h_hp
            );
            assert!(
                config.bounds.h_dp.extrapolation.contains(eq.h_dp),
                "h_dp equilibrium {} outside extrapolation bounds at q_in = {q_in}",
                eq.h_dp
            );
        }
    }

    #[test]
    fn twin_trajectory_stays_in_bounds_over_full_schedule() {
        let config = cfg();
        let m3h = 1.0 / 3600.0;
        let schedule = stepwise_schedule(
            &[1.0 * m3h, 1.5 * m3h, 2.0 * m3h, 1.5 * m3h, 1.0 * m3h],
            120,
        );
        let initial = balanced_equilibrium(1.0 * m3h, &config).unwrap();
        let traj =
            simulate_trajectory(&initial, &schedule, &QBotPolicy::BalancedValve, None, &config)
                .unwrap();
        assert!(traj.truncated.is_none(), "twin diverged: {:?}", traj.truncated);
        assert_eq!(traj.steps.len(), 600);
        for s in &traj.steps {
            assert!(
                config.bounds.h_hp.extrapolation.contains(s.h_hp_true),
                "h_hp = {} left extrapolation bounds at tau = {}",
                s.h_hp_true,
                s.tau_s
            );
            assert!(
                config.bounds.h_dp.extrapolation.contains(s.h_dp_true),
                "h_dp = {} left extrapolation bounds at tau = {}",
                s.h_dp_true,
                s.tau_s
            );
        }
    }

    #[test]
    fn noiseless_twin_matches_truth_channels() {
        let config = cfg();
        let schedule = vec![4.0e-4; 10];
        let initial = SettlerState { h_hp: 0.08, h_dp: 0.04 };
        let clean =
            simulate_trajectory(&initial, &schedule, &QBotPolicy::BalancedValve, None, &config)
                .unwrap();
        for s in &clean.steps {
            assert_eq!(s.h_hp, s.h_hp_true);
            assert_eq!(s.q_bot, s.q_bot_true);
        }
        let noisy = simulate_trajectory(
            &initial,
            &schedule,
            &QBotPolicy::BalancedValve,
            Some(&NoiseSpec { sigma_h: 1.0e-3, sigma_q: 5.0e-7, seed: 3 }),
            &config,
        )
        .unwrap();
        assert!(noisy.steps.iter().any(|s| s.h_hp != s.h_hp_true));
        for (a, b) in clean.steps.iter().zip(noisy.steps.iter()) {
            assert_eq!(a.h_hp_true, b.h_hp_true);
        }
    }
}
