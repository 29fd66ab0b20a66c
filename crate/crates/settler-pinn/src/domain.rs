//! Shared domain types, unit conventions, operating bounds, and scaling.
//!
//! Everything downstream (simulation, training, filtering) works in scaled,
//! dimensionless quantities; physical SI units (m, m³/s, s) appear only at
//! I/O boundaries such as CSV files, config files, and constructor arguments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn ensure_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be finite, got {v}")))
    }
}

/// Cylindrical separator geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SettlerGeometry {
    /// Effective length in meters.
    pub length_l: f64,
    /// Inner radius in meters.
    pub radius_r: f64,
}

impl SettlerGeometry {
    pub fn new(length_l: f64, radius_r: f64) -> Result<Self> {
        ensure_finite("length_l", length_l)?;
        ensure_finite("radius_r", radius_r)?;
        if length_l <= 0.0 || radius_r <= 0.0 {
            return Err(Error::Config(
                "geometry requires positive length and radius".into(),
            ));
        }
        Ok(Self { length_l, radius_r })
    }

    /// Full vessel height, equal to the diameter.
    pub fn height_sep(&self) -> f64 {
        2.0 * self.radius_r
    }
}

impl Default for SettlerGeometry {
    fn default() -> Self {
        Self {
            length_l: 1.0,
            radius_r: 0.1,
        }
    }
}

/// Physical properties of the saturated biphasic system at operating temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalProperties {
    /// Heavy (aqueous) phase density, kg/m³.
    pub rho_heavy: f64,
    /// Light (organic) phase density, kg/m³.
    pub rho_light: f64,
    /// Heavy-phase dynamic viscosity, Pa·s.
    pub eta_hp: f64,
    /// Interfacial tension, N/m.
    pub gamma: f64,
}

impl PhysicalProperties {
    pub fn new(rho_heavy: f64, rho_light: f64, eta_hp: f64, gamma: f64) -> Result<Self> {
        for (name, v) in [
            ("rho_heavy", rho_heavy),
            ("rho_light", rho_light),
            ("eta_hp", eta_hp),
            ("gamma", gamma),
        ] {
            ensure_finite(name, v)?;
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if rho_heavy <= rho_light {
            return Err(Error::Config(
                "rho_heavy must exceed rho_light for a settling system".into(),
            ));
        }
        Ok(Self {
            rho_heavy,
            rho_light,
            eta_hp,
            gamma,
        })
    }

    /// Density difference between heavy and light phase, kg/m³.
    pub fn delta_rho(&self) -> f64 {
        self.rho_heavy - self.rho_light
    }
}

impl Default for PhysicalProperties {
    fn default() -> Self {
        // Water / 1-octanol at 30 °C.
        Self {
            rho_heavy: 996.0,
            rho_light: 825.0,
            eta_hp: 0.82e-3,
            gamma: 8.2e-3,
        }
    }
}

/// Dispersion and hold-up parameters of the feed and the dense-packed zone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionParams {
    /// Dispersed (organic) phase fraction of the feed.
    pub epsilon_in: f64,
    /// Hold-up of the dense-packed zone.
    pub epsilon_dp: f64,
    /// Sauter mean diameter of the inlet dispersion, meters.
    pub d32_in: f64,
    /// Normalized standard deviation of the inlet drop-size distribution.
    pub sigma_selfsimilar: f64,
    /// Swarm exponent of the hindered-settling correction.
    pub n_swarm: f64,
}

impl DispersionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_in > 0.0 && self.epsilon_in < 1.0) {
            return Err(Error::Config(format!(
                "epsilon_in must lie in (0, 1), got {}",
                self.epsilon_in
            )));
        }
        if !(self.epsilon_dp > 0.0 && self.epsilon_dp <= 1.0) {
            return Err(Error::Config(format!(
                "epsilon_dp must lie in (0, 1], got {}",
                self.epsilon_dp
            )));
        }
        if !(self.d32_in > 0.0 && self.d32_in.is_finite()) {
            return Err(Error::Config(format!(
                "d32_in must be positive, got {}",
                self.d32_in
            )));
        }
        Ok(())
    }
}

impl Default for DispersionParams {
    fn default() -> Self {
        Self {
            epsilon_in: 0.5,
            epsilon_dp: 0.9,
            // No canonical value exists for this rig; only the synthetic-twin
            // surrogate consumes it, so any value with in-bounds dynamics works.
            d32_in: 0.5e-3,
            sigma_selfsimilar: 0.32,
            n_swarm: 2.0,
        }
    }
}

/// Phase heights of the settler, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SettlerState {
    /// Heavy-phase (water) height.
    pub h_hp: f64,
    /// Dense-packed-zone height.
    pub h_dp: f64,
}

impl SettlerState {
    pub fn new(h_hp: f64, h_dp: f64, geometry: &SettlerGeometry) -> Result<Self> {
        ensure_finite("h_hp", h_hp)?;
        ensure_finite("h_dp", h_dp)?;
        if h_hp < 0.0 || h_dp < 0.0 {
            return Err(Error::Domain(format!(
                "heights must be nonnegative, got h_hp = {h_hp}, h_dp = {h_dp}"
            )));
        }
        if h_hp + h_dp > geometry.height_sep() {
            return Err(Error::Domain(format!(
                "h_hp + h_dp = {} exceeds vessel height {}",
                h_hp + h_dp,
                geometry.height_sep()
            )));
        }
        Ok(Self { h_hp, h_dp })
    }
}

/// Inlet volume flow (the control action), m³/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub q_in: f64,
}

impl ControlInput {
    pub fn new(q_in: f64) -> Result<Self> {
        ensure_finite("q_in", q_in)?;
        if q_in < 0.0 {
            return Err(Error::Domain(format!("q_in must be >= 0, got {q_in}")));
        }
        Ok(Self { q_in })
    }
}

/// Measured outlet volume flows, m³/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowMeasurement {
    pub q_bot: f64,
    pub q_top: f64,
}

impl FlowMeasurement {
    pub fn new(q_bot: f64, q_top: f64) -> Result<Self> {
        ensure_finite("q_bot", q_bot)?;
        ensure_finite("q_top", q_top)?;
        if q_bot < 0.0 || q_top < 0.0 {
            return Err(Error::Domain(format!(
                "outlet flows must be >= 0, got q_bot = {q_bot}, q_top = {q_top}"
            )));
        }
        Ok(Self { q_bot, q_top })
    }
}

/// Immeasurable internal flows: coalescence and sedimentation rate, m³/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InternalFlows {
    pub q_c: f64,
    pub q_s: f64,
}

impl InternalFlows {
    pub fn new(q_c: f64, q_s: f64) -> Result<Self> {
        ensure_finite("q_c", q_c)?;
        ensure_finite("q_s", q_s)?;
        if q_c < 0.0 || q_s < 0.0 {
            return Err(Error::Domain(format!(
                "internal flows must be >= 0, got q_c = {q_c}, q_s = {q_s}"
            )));
        }
        Ok(Self { q_c, q_s })
    }
}

/// Closed interval used for normalization and sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lb: f64,
    pub ub: f64,
}

impl Interval {
    pub fn new(lb: f64, ub: f64) -> Result<Self> {
        ensure_finite("lb", lb)?;
        ensure_finite("ub", ub)?;
        if lb >= ub {
            return Err(Error::Config(format!(
                "interval requires lb < ub, got [{lb}, {ub}]"
            )));
        }
        Ok(Self { lb, ub })
    }

    /// Affine map onto [-1, 1]; the lower bound maps to -1, the upper to +1.
    pub fn normalize(&self, value: f64) -> f64 {
        2.0 * (value - self.lb) / (self.ub - self.lb) - 1.0
    }

    /// Inverse of [`Interval::normalize`].
    pub fn denormalize(&self, unit: f64) -> f64 {
        self.lb + (unit + 1.0) * 0.5 * (self.ub - self.lb)
    }

    /// d(normalized)/d(value).
    pub fn normalize_slope(&self) -> f64 {
        2.0 / (self.ub - self.lb)
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.lb && value <= self.ub
    }

    pub fn clamp(&self, value: f64) -> f64 {
        value.clamp(self.lb, self.ub)
    }

    pub fn width(&self) -> f64 {
        self.ub - self.lb
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lb + self.ub)
    }

    fn contains_interval(&self, inner: &Interval) -> bool {
        self.lb <= inner.lb && inner.ub <= self.ub
    }
}

/// Interpolation and extrapolation operating ranges for one variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangePair {
    pub interpolation: Interval,
    pub extrapolation: Interval,
}

impl RangePair {
    fn validate(&self, name: &str) -> Result<()> {
        if !self.extrapolation.contains_interval(&self.interpolation) {
            return Err(Error::Config(format!(
                "{name}: interpolation interval must lie inside the extrapolation interval"
            )));
        }
        Ok(())
    }
}

/// Operating ranges for the phase heights and volume flow rates.
///
/// Heights in meters, flows in m³/s. Defaults reproduce the rig's recorded
/// operating envelope; sampling defaults to the extrapolation ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariableBounds {
    pub h_hp: RangePair,
    pub h_dp: RangePair,
    pub q_in: RangePair,
    pub q_top: RangePair,
    pub q_bot: RangePair,
}

impl VariableBounds {
    pub fn validate(&self) -> Result<()> {
        self.h_hp.validate("h_hp")?;
        self.h_dp.validate("h_dp")?;
        self.q_in.validate("q_in")?;
        self.q_top.validate("q_top")?;
        self.q_bot.validate("q_bot")?;
        Ok(())
    }
}

const LPS: f64 = 1.0e-3; // liters per second in m³/s

impl Default for VariableBounds {
    fn default() -> Self {
        let iv = |lb, ub| Interval { lb, ub };
        Self {
            h_hp: RangePair {
                interpolation: iv(0.071, 0.091),
                extrapolation: iv(0.067, 0.100),
            },
            h_dp: RangePair {
                interpolation: iv(0.023, 0.059),
                extrapolation: iv(0.019, 0.069),
            },
            q_in: RangePair {
                interpolation: iv(0.245 * LPS, 0.563 * LPS),
                extrapolation: iv(0.175 * LPS, 0.644 * LPS),
            },
            q_top: RangePair {
                interpolation: iv(0.105 * LPS, 0.286 * LPS),
                extrapolation: iv(0.069 * LPS, 0.321 * LPS),
            },
            q_bot: RangePair {
                interpolation: iv(0.117 * LPS, 0.295 * LPS),
                extrapolation: iv(0.083 * LPS, 0.356 * LPS),
            },
        }
    }
}

/// Scaling constants that map physical quantities to dimensionless ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingConstants {
    /// Height scale in meters (the vessel height).
    pub h_scale: f64,
    /// Flow scale in m³/s.
    pub q_scale: f64,
}

impl ScalingConstants {
    pub fn new(h_scale: f64, q_scale: f64) -> Result<Self> {
        ensure_finite("h_scale", h_scale)?;
        ensure_finite("q_scale", q_scale)?;
        if h_scale <= 0.0 || q_scale <= 0.0 {
            return Err(Error::Config(
                "scaling constants must be strictly positive".into(),
            ));
        }
        Ok(Self { h_scale, q_scale })
    }

    pub fn scale_height(&self, h: f64) -> f64 {
        h / self.h_scale
    }

    pub fn unscale_height(&self, h: f64) -> f64 {
        h * self.h_scale
    }

    pub fn scale_flow(&self, q: f64) -> f64 {
        q / self.q_scale
    }

    pub fn unscale_flow(&self, q: f64) -> f64 {
        q * self.q_scale
    }
}

impl Default for ScalingConstants {
    fn default() -> Self {
        Self {
            h_scale: 0.2,
            q_scale: 1.0e-3,
        }
    }
}

/// Complete settler configuration shared by all subsystems.
///
/// Serializes to a human-readable TOML file; `SettlerConfig::default()` carries
/// the reference rig constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SettlerConfig {
    pub geometry: SettlerGeometry,
    pub properties: PhysicalProperties,
    pub dispersion: DispersionParams,
    pub bounds: VariableBounds,
    pub scaling: ScalingConstants,
    pub submodel: crate::mech::SubmodelSpec,
    pub twin: TwinParams,
    pub filter: FilterParams,
}

impl SettlerConfig {
    pub fn validate(&self) -> Result<()> {
        SettlerGeometry::new(self.geometry.length_l, self.geometry.radius_r)?;
        PhysicalProperties::new(
            self.properties.rho_heavy,
            self.properties.rho_light,
            self.properties.eta_hp,
            self.properties.gamma,
        )?;
        self.dispersion.validate()?;
        self.bounds.validate()?;
        ScalingConstants::new(self.scaling.h_scale, self.scaling.q_scale)?;
        self.submodel.validate()?;
        self.twin.validate()?;
        self.filter.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SettlerConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }
}

/// Parameters of the synthetic-twin trajectory generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwinParams {
    /// Heavy-phase height setpoint tracked by the bottom-outlet valve, meters.
    pub h_ref: f64,
    /// Proportional valve gain, m²/s (flow correction per meter of height error).
    pub valve_gain: f64,
}

impl TwinParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.h_ref.is_finite() && self.h_ref > 0.0) {
            return Err(Error::Config(format!("h_ref must be positive, got {}", self.h_ref)));
        }
        if !(self.valve_gain.is_finite() && self.valve_gain >= 0.0) {
            return Err(Error::Config(format!(
                "valve_gain must be >= 0, got {}",
                self.valve_gain
            )));
        }
        Ok(())
    }
}

impl Default for TwinParams {
    fn default() -> Self {
        Self {
            h_ref: 0.081,
            valve_gain: 5.0e-3,
        }
    }
}

/// Default noise covariances and tuning of the state-estimation filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    /// Initial state covariance diagonal, m².
    pub p0_diag: [f64; 2],
    /// Measurement noise variance per flow channel, in scaled flow units squared.
    pub r_diag: f64,
    /// Divisor applied to the ensemble-spread process noise.
    pub w_attenuation: f64,
    /// Number of uniformly sampled candidates for the initial-state search.
    pub init_search_samples: usize,
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if self.p0_diag.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("p0_diag entries must be >= 0".into()));
        }
        if !(self.r_diag.is_finite() && self.r_diag > 0.0) {
            return Err(Error::Config("r_diag must be positive".into()));
        }
        if !(self.w_attenuation.is_finite() && self.w_attenuation > 0.0) {
            return Err(Error::Config("w_attenuation must be positive".into()));
        }
        if self.init_search_samples == 0 {
            return Err(Error::Config("init_search_samples must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            p0_diag: [1.0e-4, 1.0e-4],
            r_diag: 2.5e-7,
            w_attenuation: 100.0,
            init_search_samples: 100,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn normalize_maps_bounds_to_unit_interval() {
        let iv = Interval::new(0.071, 0.091).unwrap();
        assert_relative_eq!(iv.normalize(0.071), -1.0);
        assert_relative_eq!(iv.normalize(0.091), 1.0);
        assert_relative_eq!(iv.normalize(0.081), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn normalize_rejects_degenerate_interval() {
        assert!(Interval::new(1.0, 1.0).is_err());
        assert!(Interval::new(2.0, 1.0).is_err());
    }

    #[test]
    fn scaling_reference_values() {
        let s = ScalingConstants::default();
        assert_relative_eq!(s.scale_height(0.2), 1.0);
        assert_relative_eq!(s.scale_flow(1.0e-3), 1.0);
        assert_relative_eq!(s.scale_height(0.0), 0.0);
        assert_relative_eq!(s.unscale_flow(s.scale_flow(3.3e-4)), 3.3e-4);
    }

    #[test]
    fn default_config_reproduces_rig_constants() {
        let cfg = SettlerConfig::default();
        assert_eq!(cfg.properties.rho_heavy, 996.0);
        assert_eq!(cfg.properties.rho_light, 825.0);
        assert_relative_eq!(cfg.properties.delta_rho(), 171.0);
        assert_relative_eq!(cfg.properties.eta_hp, 0.82e-3);
        assert_relative_eq!(cfg.properties.gamma, 8.2e-3);
        assert_eq!(cfg.geometry.length_l, 1.0);
        assert_eq!(cfg.geometry.radius_r, 0.1);
        assert_relative_eq!(cfg.geometry.height_sep(), 0.2);
        assert_eq!(cfg.dispersion.epsilon_dp, 0.9);
        assert_eq!(cfg.dispersion.epsilon_in, 0.5);
        assert_eq!(cfg.dispersion.sigma_selfsimilar, 0.32);
        assert_eq!(cfg.dispersion.n_swarm, 2.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn state_rejects_nan_and_overfull_vessel() {
        let g = SettlerGeometry::default();
        assert!(SettlerState::new(f64::NAN, 0.05, &g).is_err());
        assert!(SettlerState::new(0.15, 0.1, &g).is_err());
        assert!(SettlerState::new(0.08, 0.04, &g).is_ok());
        assert!(FlowMeasurement::new(1.0e-4, f64::INFINITY).is_err());
        assert!(ControlInput::new(-1.0e-4).is_err());
        assert!(InternalFlows::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = SettlerConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = SettlerConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn bounds_nesting_is_validated() {
        let mut bounds = VariableBounds::default();
        bounds.h_hp.interpolation = Interval { lb: 0.05, ub: 0.091 };
        assert!(bounds.validate().is_err());
    }

    proptest! {
        #[test]
        fn normalize_roundtrips(lb in -10.0f64..10.0, width in 1e-6f64..10.0, frac in 0.0f64..1.0) {
            let iv = Interval::new(lb, lb + width).unwrap();
            let x = lb + frac * width;
            let back = iv.denormalize(iv.normalize(x));
            prop_assert!((back - x).abs() <= 4.0 * f64::EPSILON * (1.0 + x.abs()));
        }
    }
}
