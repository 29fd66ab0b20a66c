//! Inverse-Dirichlet loss balancing.
//!
//! Loss-term weights are rebalanced from the spread of each term's parameter
//! gradient: every group receives (max_k std_k) / std_i, so the group with
//! the widest gradient distribution keeps weight one and the others are
//! boosted to match. The nested weights λ_g (algebraic within physics) and
//! λ_z (internal flows within data) are recovered as ratios so that each
//! group's effective weight follows the same rule.

use super::losses::{LossWeights, TermGradStds};

const WEIGHT_FLOOR: f64 = 1.0e-3;
const WEIGHT_CEIL: f64 = 1.0e6;
const SMOOTHING: f64 = 0.5;

fn clamp(w: f64) -> f64 {
    w.clamp(WEIGHT_FLOOR, WEIGHT_CEIL)
}

/// One balancing update: λ_i ← (max_k std_k)/std_i for the data, physics,
/// and algebraic weights, smoothed halfway against the previous value and
/// clamped. Terms with zero gradient spread keep their previous weight.
///
/// λ_z is deliberately left untouched. The internal-flow channels converge
/// quickly, and the inverse-spread rule would keep boosting them (measured
/// factors of 50–100), starving the measurable height channels inside the
/// same data bracket; the auxiliary channels keep their configured weight
/// instead. `_include_z` is retained for the call sites that know whether
/// those channels are active at all.
pub fn idw_update(prev: &LossWeights, stds: &TermGradStds, _include_z: bool) -> LossWeights {
    let groups = [stds.data_meas, stds.phys_ode, stds.phys_alg];
    let max_std = groups.iter().fold(0.0_f64, |m, s| m.max(*s));
    if max_std == 0.0 {
        return *prev;
    }

    let target = |std: f64, fallback: f64| -> f64 {
        if std > 0.0 {
            max_std / std
        } else {
            fallback
        }
    };
    let smooth = |prev_w: f64, t: f64| clamp(SMOOTHING * prev_w + (1.0 - SMOOTHING) * t);

    LossWeights {
        lambda_1: smooth(prev.lambda_1, target(stds.data_meas, prev.lambda_1)),
        lambda_2: smooth(prev.lambda_2, target(stds.phys_ode, prev.lambda_2)),
        lambda_g: smooth(prev.lambda_g, target(stds.phys_alg, prev.lambda_g)),
        lambda_z: prev.lambda_z,
    }
}

/// The raw inverse-spread rule without smoothing, for the balancing tests.
pub fn idw_targets(stds: &[f64]) -> Vec<f64> {
    let max_std = stds.iter().fold(0.0_f64, |m, s| m.max(*s));
    stds.iter()
        .map(|s| if *s > 0.0 { max_std / s } else { 1.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn equal_spreads_give_unit_weights() {
        let stds = TermGradStds {
            data_meas: 0.7,
            data_z: 0.7,
            phys_ode: 0.7,
            phys_alg: 0.7,
        };
        let w = idw_update(&LossWeights::default(), &stds, true);
        assert_relative_eq!(w.lambda_1, 1.0);
        assert_relative_eq!(w.lambda_2, 1.0);
        assert_relative_eq!(w.lambda_g, 1.0);
        assert_relative_eq!(w.lambda_z, 1.0);
    }

    #[test]
    fn auxiliary_channel_weight_is_held() {
        let stds = TermGradStds {
            data_meas: 1.0,
            data_z: 1.0e-4,
            phys_ode: 1.0,
            phys_alg: 1.0,
        };
        let mut w = LossWeights::default();
        for _ in 0..30 {
            w = idw_update(&w, &stds, true);
        }
        assert_relative_eq!(w.lambda_z, 1.0);
    }

    #[test]
    fn inverse_ratio_rule_without_smoothing() {
        assert_eq!(idw_targets(&[2.0, 1.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_spread_keeps_previous_weight() {
        let prev = LossWeights {
            lambda_1: 3.0,
            lambda_2: 5.0,
            lambda_g: 0.5,
            lambda_z: 2.0,
        };
        let stds = TermGradStds {
            data_meas: 0.0,
            data_z: 1.0,
            phys_ode: 1.0,
            phys_alg: 1.0,
        };
        let w = idw_update(&prev, &stds, true);
        // data group std is zero → λ1 held at its previous value
        assert_relative_eq!(w.lambda_1, 3.0);
        // the physics weights still move halfway toward their targets
        assert_relative_eq!(w.lambda_2, 0.5 * 5.0 + 0.5 * 1.0);
        assert_relative_eq!(w.lambda_g, 0.5 * 0.5 + 0.5 * 1.0);
        assert_relative_eq!(w.lambda_z, 2.0);
    }

    #[test]
    fn weights_stay_clamped_and_positive() {
        let stds = TermGradStds {
            data_meas: 1.0e12,
            data_z: 1.0e-12,
            phys_ode: 1.0,
            phys_alg: 1.0,
        };
        let mut w = LossWeights::default();
        for _ in 0..60 {
            w = idw_update(&w, &stds, true);
        }
        assert!(w.lambda_1 >= 1.0e-3 && w.lambda_1 <= 1.0e6);
        assert!(w.lambda_2 >= 1.0e-3 && w.lambda_2 <= 1.0e6);
        assert!(w.lambda_1.is_finite() && w.lambda_2.is_finite());
    }
}
