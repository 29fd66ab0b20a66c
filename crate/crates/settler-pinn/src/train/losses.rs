//! Loss assembly for the surrogate training objective.
//!
//! The total objective is λ₁·MSE_data + λ₂·MSE_physics + MSE_init. The data
//! term carries an inner weight λ_z on the immeasurable internal-flow
//! channels; the physics term carries an inner weight λ_g on the algebraic
//! volume-balance residual relative to the two height ODE residuals. All
//! quantities are in scaled units.

use crate::domain::SettlerConfig;
use crate::error::{Error, Result};
use crate::nn::dual::Dual;
use crate::nn::{DualTrace, MlpModel};

use super::{CollocationSet, TrainData};

/// Loss-term weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_g: f64,
    pub lambda_z: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_1: 1.0,
            lambda_2: 1.0,
            lambda_g: 1.0,
            lambda_z: 1.0,
        }
    }
}

/// Unweighted loss components; the composite applies λ₁ and λ₂ on top.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    /// MSE_data with λ_z already applied to the internal-flow channels.
    pub data: f64,
    /// MSE_physics with λ_g already applied to the algebraic residual.
    pub physics: f64,
    /// Initial-condition mismatch term.
    pub init: f64,
}

impl LossComponents {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.lambda_1 * self.data + w.lambda_2 * self.physics + self.init
    }
}

/// Scaled-unit constants entering the physics residual.
#[derive(Debug, Clone, Copy)]
pub struct PhysicsContext {
    pub q_scale: f64,
    pub h_scale: f64,
    pub two_r: f64,
    pub length_l: f64,
    pub eps_dp: f64,
}

impl PhysicsContext {
    pub fn new(config: &SettlerConfig) -> Self {
        Self {
            q_scale: config.scaling.q_scale,
            h_scale: config.scaling.h_scale,
            two_r: config.geometry.height_sep(),
            length_l: config.geometry.length_l,
            eps_dp: config.dispersion.epsilon_dp,
        }
    }
}

type D8 = Dual<8>;

/// (w_alg·r_alg² + w_ode·(r_hp² + r_dp²)) / 3 with gradients against the six
/// outputs (directions 0–5) and the two height time-derivatives (6–7).
struct PointResidual {
    loss: D8,
}

/// Physics residual of one collocation point, differentiated against the
/// network outputs with forward-mode duals. `y` holds the six scaled outputs
/// (h_HP, h_DP, q_bot, q_top, q_c, q_s); `yt` the scaled time-derivatives of
/// the two heights.
fn physics_point(
    ctx: &PhysicsContext,
    q_in_phys: f64,
    y: &[f64],
    yt: &[f64; 2],
    w_alg: f64,
    w_ode: f64,
) -> PointResidual {
    let y: Vec<D8> = (0..6).map(|j| D8::seed(y[j], j)).collect();
    let yt = [D8::seed(yt[0], 6), D8::seed(yt[1], 7)];
    let q_in = D8::constant(q_in_phys / ctx.q_scale);
    let eps = ctx.eps_dp;

    let r_alg = q_in - y[2] - y[3];

    let h_hp = y[0] * ctx.h_scale;
    let h_tot = (y[0] + y[1]) * ctx.h_scale;
    let area = |h: D8| {
        ((h * (ctx.two_r - h)).max_const(0.0).sqrt() * (2.0 * ctx.length_l)).max_const(1.0e-12)
    };
    let denom_hp = area(h_hp);
    let denom_dp = area(h_tot);

    let flow_to_rate = ctx.q_scale / ctx.h_scale;
    let n_hp = q_in - y[2] - y[5] / eps + y[4] * ((1.0 - eps) / eps);
    let f_hp = n_hp / denom_hp * flow_to_rate;
    let n_dp = q_in - y[2] - y[4];
    let f_dp = n_dp / denom_dp * flow_to_rate - f_hp;

    let r_hp = yt[0] - f_hp;
    let r_dp = yt[1] - f_dp;

    let loss = (r_alg * r_alg * w_alg + (r_hp * r_hp + r_dp * r_dp) * w_ode) / 3.0;
    PointResidual { loss }
}

/// Plain-value physics residuals of one point: (algebraic, heavy-phase ODE,
/// dense-packed-zone ODE), in scaled units.
pub fn physics_residuals(
    ctx: &PhysicsContext,
    q_in_phys: f64,
    y: &[f64],
    yt: &[f64; 2],
) -> (f64, f64, f64) {
    let q_in = q_in_phys / ctx.q_scale;
    let r_alg = q_in - y[2] - y[3];
    let eps = ctx.eps_dp;
    let area = |h: f64| (2.0 * ctx.length_l * (h * (ctx.two_r - h)).max(0.0).sqrt()).max(1.0e-12);
    let flow_to_rate = ctx.q_scale / ctx.h_scale;
    let f_hp = (q_in - y[2] - y[5] / eps + y[4] * (1.0 - eps) / eps) / area(y[0] * ctx.h_scale)
        * flow_to_rate;
    let f_dp =
        (q_in - y[2] - y[4]) / area((y[0] + y[1]) * ctx.h_scale) * flow_to_rate - f_hp;
    (r_alg, yt[0] - f_hp, yt[1] - f_dp)
}

/// Mean absolute volume-balance residual of the predicted outlet flows over
/// a set of fresh collocation points, in scaled flow units.
pub fn mean_abs_algebraic_residual(
    model: &MlpModel,
    ctx: &PhysicsContext,
    points: &[[f64; 4]],
) -> Result<f64> {
    if points.is_empty() {
        return Ok(0.0);
    }
    let leaf = |pts: &[[f64; 4]]| -> Result<f64> {
        let mut trace = DualTrace::new(model);
        let mut sum = 0.0;
        for p in pts {
            model.eval_into(p, None, &mut trace)?;
            sum += (p[3] / ctx.q_scale - trace.outputs[2] - trace.outputs[3]).abs();
        }
        Ok(sum)
    };
    let total = par_tree(points, LEAF_CHUNK, &leaf, &|a: Result<f64>, b: Result<f64>| {
        Ok(a? + b?)
    })?;
    Ok(total / points.len() as f64)
}

fn check_data_shape(model: &MlpModel, data: &TrainData, n_out: usize) -> Result<()> {
    if n_out != 4 && n_out != 6 {
        return Err(Error::Config(format!("n_out must be 4 or 6, got {n_out}")));
    }
    if n_out == 6 && model.n_outputs() != 6 {
        return Err(Error::Config(
            "n_out = 6 requires a model with internal-flow outputs".into(),
        ));
    }
    if n_out == 6 && data.rows.iter().any(|r| r.z_targets.is_none()) {
        return Err(Error::Config(
            "n_out = 6 requires internal-flow targets on every data row".into(),
        ));
    }
    Ok(())
}

/// Splits work in a fixed binary tree so that float reductions are
/// independent of the number of worker threads.
fn par_tree<T, A, L, M>(items: &[T], chunk: usize, leaf: &L, merge: &M) -> A
where
    T: Sync,
    A: Send,
    L: Fn(&[T]) -> A + Sync,
    M: Fn(A, A) -> A + Sync,
{
    if items.len() <= chunk {
        leaf(items)
    } else {
        let mid = items.len() / 2;
        let (a, b) = rayon::join(
            || par_tree(&items[..mid], chunk, leaf, merge),
            || par_tree(&items[mid..], chunk, leaf, merge),
        );
        merge(a, b)
    }
}

const LEAF_CHUNK: usize = 512;

struct Accum {
    grad: Vec<f64>,
    sum: f64,
    sum_b: f64,
}

impl Accum {
    fn zero(n: usize) -> Self {
        Self { grad: vec![0.0; n], sum: 0.0, sum_b: 0.0 }
    }

    fn merge(mut self, other: Accum) -> Accum {
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            *g += o;
        }
        self.sum += other.sum;
        self.sum_b += other.sum_b;
        self
    }
}

/// Mean squared data misfit (Eq. form: measurable channels plus λ_z-weighted
/// internal-flow channels, normalized by n_out·|D|).
pub fn loss_data(model: &MlpModel, data: &TrainData, n_out: usize, lambda_z: f64) -> Result<f64> {
    check_data_shape(model, data, n_out)?;
    if data.rows.is_empty() {
        return Ok(0.0);
    }
    let leaf = |rows: &[super::TrainRow]| -> Result<f64> {
        let mut trace = DualTrace::new(model);
        let mut sum = 0.0;
        for row in rows {
            model.eval_into(&row.input, None, &mut trace)?;
            let mut bracket = 0.0;
            for j in 0..4 {
                let e = trace.outputs[j] - row.targets[j];
                bracket += e * e;
            }
            if n_out == 6 {
                let z = row.z_targets.expect("checked above");
                for j in 0..2 {
                    let e = trace.outputs[4 + j] - z[j];
                    bracket += lambda_z * e * e;
                }
            }
            sum += bracket;
        }
        Ok(sum)
    };
    let total = par_tree(&data.rows, LEAF_CHUNK, &leaf, &|a: Result<f64>, b: Result<f64>| {
        Ok(a? + b?)
    })?;
    Ok(total / (n_out as f64 * data.rows.len() as f64))
}

/// Mean physics residual over the collocation set (λ_g-weighted algebraic
/// term plus the two ODE residual squares, divided by three).
pub fn loss_physics(
    model: &MlpModel,
    ctx: &PhysicsContext,
    physics_points: &[[f64; 4]],
    lambda_g: f64,
) -> Result<f64> {
    if physics_points.is_empty() {
        return Ok(0.0);
    }
    if model.n_outputs() != 6 {
        return Err(Error::Config(
            "physics loss requires the six-output surrogate".into(),
        ));
    }
    let leaf = |pts: &[[f64; 4]]| -> Result<f64> {
        let mut trace = DualTrace::new(model);
        let mut dir = vec![0.0; model.n_inputs()];
        dir[0] = 1.0;
        let mut sum = 0.0;
        for p in pts {
            model.eval_into(p, Some(&dir), &mut trace)?;
            let yt = [trace.d_outputs[0], trace.d_outputs[1]];
            let r = physics_point(ctx, p[3], &trace.outputs, &yt, lambda_g, 1.0);
            sum += r.loss.v;
        }
        Ok(sum)
    };
    let total = par_tree(physics_points, LEAF_CHUNK, &leaf, &|a: Result<f64>, b: Result<f64>| {
        Ok(a? + b?)
    })?;
    Ok(total / physics_points.len() as f64)
}

/// Initial-condition mismatch: mean squared error of the two predicted
/// heights at t = 0 against the supplied initial heights, normalized by
/// 2·|D_init|. Implemented as a sum of the two squared terms.
pub fn loss_init(model: &MlpModel, ctx: &PhysicsContext, init_points: &[[f64; 3]]) -> Result<f64> {
    if init_points.is_empty() {
        return Ok(0.0);
    }
    let leaf = |pts: &[[f64; 3]]| -> Result<f64> {
        let mut trace = DualTrace::new(model);
        let mut sum = 0.0;
        for p in pts {
            let input = [0.0, p[0], p[1], p[2]];
            model.eval_into(&input, None, &mut trace)?;
            let e0 = trace.outputs[0] - p[0] / ctx.h_scale;
            let e1 = trace.outputs[1] - p[1] / ctx.h_scale;
            sum += e0 * e0 + e1 * e1;
        }
        Ok(sum)
    };
    let total = par_tree(init_points, LEAF_CHUNK, &leaf, &|a: Result<f64>, b: Result<f64>| {
        Ok(a? + b?)
    })?;
    Ok(total / (2.0 * init_points.len() as f64))
}

/// Computes every loss component and the gradient of the composite objective
/// in one pass. `physics` is skipped when absent (data-driven baselines).
pub fn loss_and_grad(
    model: &MlpModel,
    ctx: &PhysicsContext,
    data: &TrainData,
    colloc: Option<&CollocationSet>,
    n_out: usize,
    weights: &LossWeights,
    grad: &mut [f64],
) -> Result<LossComponents> {
    check_data_shape(model, data, n_out)?;
    if grad.len() != model.n_params() {
        return Err(Error::Config("gradient buffer length mismatch".into()));
    }
    grad.iter_mut().for_each(|g| *g = 0.0);
    let n_params = model.n_params();
    let mut components = LossComponents::default();

    // data pass
    if !data.rows.is_empty() {
        let norm = 1.0 / (n_out as f64 * data.rows.len() as f64);
        let leaf = |rows: &[super::TrainRow]| -> Result<Accum> {
            let mut acc = Accum::zero(n_params);
            let mut trace = DualTrace::new(model);
            let mut gy = vec![0.0; model.n_outputs()];
            for row in rows {
                model.eval_into(&row.input, None, &mut trace)?;
                gy.iter_mut().for_each(|g| *g = 0.0);
                let mut bracket = 0.0;
                for j in 0..4 {
                    let e = trace.outputs[j] - row.targets[j];
                    bracket += e * e;
                    gy[j] = weights.lambda_1 * 2.0 * e * norm;
                }
                if n_out == 6 {
                    let z = row.z_targets.expect("checked above");
                    for j in 0..2 {
                        let e = trace.outputs[4 + j] - z[j];
                        bracket += weights.lambda_z * e * e;
                        gy[4 + j] = weights.lambda_1 * weights.lambda_z * 2.0 * e * norm;
                    }
                }
                acc.sum += bracket;
                model.backprop_into(&trace, &gy, None, &mut acc.grad)?;
            }
            Ok(acc)
        };
        let acc = par_tree(&data.rows, LEAF_CHUNK, &leaf, &|a: Result<Accum>, b: Result<Accum>| {
            Ok(a?.merge(b?))
        })?;
        components.data = acc.sum * norm;
        for (g, a) in grad.iter_mut().zip(&acc.grad) {
            *g += a;
        }
    }

    // physics pass
    if let Some(colloc) = colloc {
        if !colloc.physics.is_empty() {
            let norm = 1.0 / colloc.physics.len() as f64;
            let leaf = |pts: &[[f64; 4]]| -> Result<Accum> {
                let mut acc = Accum::zero(n_params);
                let mut trace = DualTrace::new(model);
                let mut dir = vec![0.0; model.n_inputs()];
                dir[0] = 1.0;
                let mut gy = vec![0.0; 6];
                let mut gyt = vec![0.0; 6];
                for p in pts {
                    model.eval_into(p, Some(&dir), &mut trace)?;
                    let yt = [trace.d_outputs[0], trace.d_outputs[1]];
                    let r =
                        physics_point(ctx, p[3], &trace.outputs, &yt, weights.lambda_g, 1.0);
                    acc.sum += r.loss.v;
                    let scale = weights.lambda_2 * norm;
                    for j in 0..6 {
                        gy[j] = r.loss.d[j] * scale;
                    }
                    gyt[0] = r.loss.d[6] * scale;
                    gyt[1] = r.loss.d[7] * scale;
                    gyt[2..].iter_mut().for_each(|g| *g = 0.0);
                    model.backprop_into(&trace, &gy, Some(&gyt), &mut acc.grad)?;
                }
                Ok(acc)
            };
            let acc =
                par_tree(&colloc.physics, LEAF_CHUNK, &leaf, &|a: Result<Accum>,
                                                               b: Result<Accum>| {
                    Ok(a?.merge(b?))
                })?;
            components.physics = acc.sum * norm;
            for (g, a) in grad.iter_mut().zip(&acc.grad) {
                *g += a;
            }
        }

        // init pass
        if !colloc.init.is_empty() {
            let norm = 1.0 / (2.0 * colloc.init.len() as f64);
            let leaf = |pts: &[[f64; 3]]| -> Result<Accum> {
                let mut acc = Accum::zero(n_params);
                let mut trace = DualTrace::new(model);
                let mut gy = vec![0.0; model.n_outputs()];
                for p in pts {
                    let input = [0.0, p[0], p[1], p[2]];
                    model.eval_into(&input, None, &mut trace)?;
                    gy.iter_mut().for_each(|g| *g = 0.0);
                    let e0 = trace.outputs[0] - p[0] / ctx.h_scale;
                    let e1 = trace.outputs[1] - p[1] / ctx.h_scale;
                    acc.sum += e0 * e0 + e1 * e1;
                    gy[0] = 2.0 * e0 * norm;
                    gy[1] = 2.0 * e1 * norm;
                    model.backprop_into(&trace, &gy, None, &mut acc.grad)?;
                }
                Ok(acc)
            };
            let acc = par_tree(&colloc.init, LEAF_CHUNK, &leaf, &|a: Result<Accum>,
                                                                  b: Result<Accum>| {
                Ok(a?.merge(b?))
            })?;
            components.init = acc.sum * norm;
            for (g, a) in grad.iter_mut().zip(&acc.grad) {
                *g += a;
            }
        }
    }

    Ok(components)
}

/// Standard deviations of the per-term parameter gradients, used by the
/// loss-balancing update. Terms: measurable data, internal-flow data,
/// ODE residuals, algebraic residual.
#[derive(Debug, Clone, Copy, Default)]
pub struct TermGradStds {
    pub data_meas: f64,
    pub data_z: f64,
    pub phys_ode: f64,
    pub phys_alg: f64,
}

fn grad_std(g: &[f64]) -> f64 {
    let n = g.len() as f64;
    let mean = g.iter().sum::<f64>() / n;
    let var = g.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// Gradients of the four unweighted loss groups, reduced to their entry-wise
/// standard deviations.
pub fn term_grad_stds(
    model: &MlpModel,
    ctx: &PhysicsContext,
    data: &TrainData,
    colloc: &CollocationSet,
    n_out: usize,
) -> Result<TermGradStds> {
    check_data_shape(model, data, n_out)?;
    let n_params = model.n_params();

    // data groups
    let (g_meas, g_z) = {
        let norm = if data.rows.is_empty() {
            0.0
        } else {
            1.0 / (n_out as f64 * data.rows.len() as f64)
        };
        let leaf = |rows: &[super::TrainRow]| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut meas = vec![0.0; n_params];
            let mut zg = vec![0.0; n_params];
            let mut trace = DualTrace::new(model);
            let mut gy = vec![0.0; model.n_outputs()];
            for row in rows {
                model.eval_into(&row.input, None, &mut trace)?;
                gy.iter_mut().for_each(|g| *g = 0.0);
                for j in 0..4 {
                    gy[j] = 2.0 * (trace.outputs[j] - row.targets[j]) * norm;
                }
                model.backprop_into(&trace, &gy, None, &mut meas)?;
                if n_out == 6 {
                    let z = row.z_targets.expect("checked above");
                    gy.iter_mut().for_each(|g| *g = 0.0);
                    for j in 0..2 {
                        gy[4 + j] = 2.0 * (trace.outputs[4 + j] - z[j]) * norm;
                    }
                    model.backprop_into(&trace, &gy, None, &mut zg)?;
                }
            }
            Ok((meas, zg))
        };
        par_tree(
            &data.rows,
            LEAF_CHUNK,
            &leaf,
            &|a: Result<(Vec<f64>, Vec<f64>)>, b| {
                let (ma, za) = a?;
                let (mb, zb) = b?;
                Ok((
                    ma.iter().zip(&mb).map(|(x, y)| x + y).collect(),
                    za.iter().zip(&zb).map(|(x, y)| x + y).collect(),
                ))
            },
        )?
    };

    // physics groups
    let (g_ode, g_alg) = {
        let norm = if colloc.physics.is_empty() {
            0.0
        } else {
            1.0 / colloc.physics.len() as f64
        };
        let leaf = |pts: &[[f64; 4]]| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut ode = vec![0.0; n_params];
            let mut alg = vec![0.0; n_params];
            let mut trace = DualTrace::new(model);
            let mut dir = vec![0.0; model.n_inputs()];
            dir[0] = 1.0;
            let mut gy = vec![0.0; 6];
            let mut gyt = vec![0.0; 6];
            for p in pts {
                model.eval_into(p, Some(&dir), &mut trace)?;
                let yt = [trace.d_outputs[0], trace.d_outputs[1]];
                // ODE-only group
                let r = physics_point(ctx, p[3], &trace.outputs, &yt, 0.0, 1.0);
                for j in 0..6 {
                    gy[j] = r.loss.d[j] * norm;
                }
                gyt.iter_mut().for_each(|g| *g = 0.0);
                gyt[0] = r.loss.d[6] * norm;
                gyt[1] = r.loss.d[7] * norm;
                model.backprop_into(&trace, &gy, Some(&gyt), &mut ode)?;
                // algebraic-only group
                let r = physics_point(ctx, p[3], &trace.outputs, &yt, 1.0, 0.0);
                for j in 0..6 {
                    gy[j] = r.loss.d[j] * norm;
                }
                gyt.iter_mut().for_each(|g| *g = 0.0);
                model.backprop_into(&trace, &gy, Some(&gyt), &mut alg)?;
            }
            Ok((ode, alg))
        };
        if model.n_outputs() == 6 {
            par_tree(
                &colloc.physics,
                LEAF_CHUNK,
                &leaf,
                &|a: Result<(Vec<f64>, Vec<f64>)>, b| {
                    let (oa, aa) = a?;
                    let (ob, ab) = b?;
                    Ok((
                        oa.iter().zip(&ob).map(|(x, y)| x + y).collect(),
                        aa.iter().zip(&ab).map(|(x, y)| x + y).collect(),
                    ))
                },
            )?
        } else {
            (vec![0.0; n_params], vec![0.0; n_params])
        }
    };

    Ok(TermGradStds {
        data_meas: grad_std(&g_meas),
        data_z: grad_std(&g_z),
        phys_ode: grad_std(&g_ode),
        phys_alg: grad_std(&g_alg),
    })
}
