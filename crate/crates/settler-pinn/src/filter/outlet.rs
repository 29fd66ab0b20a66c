//! Mapping from the band-averaged dense-packed-zone height to the height at
//! the separator outlet, where flooding first appears.
//!
//! A small data-driven regression network (two hidden layers of 16 and 8
//! nodes, tanh, raw output head) trained with early stopping on a held-out
//! validation split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domain::{Interval, ScalingConstants, SettlerConfig};
use crate::error::{Error, Result};
use crate::nn::{DualTrace, MlpModel, OutputHead, OutputRole};
use crate::train::AdamState;

pub const OUTLET_MAX_EPOCHS: usize = 1000;
pub const OUTLET_PATIENCE: usize = 30;
const OUTLET_LR: f64 = 5.0e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutletTrainReport {
    pub epochs_run: usize,
    pub early_stopped: bool,
    /// Validation RMSE of the restored best parameters, meters.
    pub val_rmse_m: f64,
    pub n_train: usize,
    pub n_val: usize,
}

fn mse_and_grad(
    model: &MlpModel,
    rows: &[(f64, f64)],
    h_scale: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let mut trace = DualTrace::new(model);
    let mut sum = 0.0;
    let norm = 1.0 / rows.len() as f64;
    let mut grad = grad;
    for (x, target) in rows {
        model.eval_into(&[*x], None, &mut trace)?;
        let e = trace.outputs[0] - target / h_scale;
        sum += e * e;
        if let Some(g) = grad.as_deref_mut() {
            model.backprop_into(&trace, &[2.0 * e * norm], None, g)?;
        }
    }
    Ok(sum * norm)
}

/// Trains the average-to-outlet height map on paired series (meters).
/// Training runs full-batch Adam for up to [`OUTLET_MAX_EPOCHS`] epochs and
/// stops early once the validation error has not improved for
/// [`OUTLET_PATIENCE`] epochs, restoring the best-validation parameters.
pub fn outlet_dpz_train(
    pairs: &[(f64, f64)],
    val_split: f64,
    seed: u64,
    config: &SettlerConfig,
) -> Result<(MlpModel, OutletTrainReport)> {
    if pairs.len() < 2 {
        return Err(Error::Config(
            "outlet-height training needs at least two points".into(),
        ));
    }
    if !(0.0..1.0).contains(&val_split) {
        return Err(Error::Config("val_split must lie in [0, 1)".into()));
    }
    if pairs.len() < 50 {
        log::warn!(
            "outlet-height training with only {} points; expected at least 50",
            pairs.len()
        );
    }
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::Domain("outlet-height pairs must be finite".into()));
    }

    let lo = pairs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let pad = 1.0e-6 + 0.05 * (hi - lo).abs();
    let input_bounds = vec![Interval::new(lo - pad, hi + pad)?];

    let mut model = MlpModel::xavier_init(
        &[1, 16, 8, 1],
        input_bounds,
        OutputHead::Identity,
        vec![OutputRole::Height],
        ScalingConstants {
            h_scale: config.scaling.h_scale,
            q_scale: config.scaling.q_scale,
        },
        seed,
    )?;
    let h_scale = config.scaling.h_scale;
    {
        // start the output bias at the target mean so the optimizer only has
        // to learn the shape, not the offset
        let mean_target =
            pairs.iter().map(|p| p.1).sum::<f64>() / (pairs.len() as f64 * h_scale);
        let mut theta = model.params().to_vec();
        let last = theta.len() - 1;
        theta[last] = mean_target;
        model.set_params(&theta)?;
    }

    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f75_746c_6574);
    indices.shuffle(&mut rng);
    let n_val = ((pairs.len() as f64) * val_split).round() as usize;
    let (val_idx, train_idx) = indices.split_at(n_val);
    let train: Vec<(f64, f64)> = train_idx.iter().map(|&i| pairs[i]).collect();
    let val: Vec<(f64, f64)> = val_idx.iter().map(|&i| pairs[i]).collect();
    if train.is_empty() {
        return Err(Error::Config("validation split leaves no training data".into()));
    }

    let use_early_stop = !val.is_empty() && pairs.len() >= OUTLET_PATIENCE;
    if !use_early_stop {
        log::warn!("outlet-height training without early stopping (too few points or no validation split)");
    }

    let mut adam = AdamState::new(model.n_params());
    let mut grad = vec![0.0; model.n_params()];
    let mut theta = model.params().to_vec();
    let mut best_theta = theta.clone();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0usize;
    let mut epochs_run = 0usize;
    let mut early_stopped = false;

    for _epoch in 0..OUTLET_MAX_EPOCHS {
        epochs_run += 1;
        grad.iter_mut().for_each(|g| *g = 0.0);
        mse_and_grad(&model, &train, h_scale, Some(&mut grad))?;
        theta.copy_from_slice(model.params());
        adam.step(&mut theta, &grad, OUTLET_LR);
        model.set_params(&theta)?;

        if use_early_stop {
            let val_mse = mse_and_grad(&model, &val, h_scale, None)?;
            if val_mse < best_val {
                best_val = val_mse;
                best_theta.copy_from_slice(model.params());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= OUTLET_PATIENCE {
                    early_stopped = true;
                    break;
                }
            }
        } else {
            best_theta.copy_from_slice(model.params());
        }
    }
    model.set_params(&best_theta)?;

    let val_rmse_m = if val.is_empty() {
        mse_and_grad(&model, &train, h_scale, None)?.sqrt() * h_scale
    } else {
        mse_and_grad(&model, &val, h_scale, None)?.sqrt() * h_scale
    };
    Ok((
        model,
        OutletTrainReport {
            epochs_run,
            early_stopped,
            val_rmse_m,
            n_train: train.len(),
            n_val: val.len(),
        },
    ))
}

/// Pointwise prediction of the outlet height (meters) from the averaged
/// height series. The boolean flags mark inputs outside the training range.
pub fn outlet_dpz_predict(model: &MlpModel, avg_series: &[f64]) -> Result<(Vec<f64>, Vec<bool>)> {
    let bounds = model.input_bounds()[0];
    let h_scale = model.scaling().h_scale;
    let mut out = Vec::with_capacity(avg_series.len());
    let mut flags = Vec::with_capacity(avg_series.len());
    for &x in avg_series {
        let y = model.forward(&[x])?;
        out.push(y[0] * h_scale);
        flags.push(!bounds.contains(x));
    }
    Ok((out, flags))
}
