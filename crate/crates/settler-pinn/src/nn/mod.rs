//! Dense feedforward networks with exact derivatives.
//!
//! A small MLP engine purpose-built for the surrogate models used here:
//! reverse mode over parameters, forward mode over inputs, and the mixed
//! forward-over-reverse pass needed to differentiate losses that contain
//! time derivatives of the network outputs.
//!
//! The input normalization map and the output scaling metadata are part of
//! the model record, so every consumer (trainer, simulator, filter) applies
//! the identical maps. Inputs are physical quantities (seconds, meters,
//! m³/s); outputs are in scaled, dimensionless units.

pub mod dual;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::domain::{Interval, ScalingConstants};
use crate::error::{Error, Result};

/// Magic string of the model container format.
pub const MODEL_MAGIC: &str = "settler-mlp";
/// Current container version.
pub const MODEL_VERSION: u32 = 1;

/// Output head of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OutputHead {
    /// Sigmoid squashed and affinely mapped into per-output ranges
    /// (scaled units). Keeps every output strictly inside its range,
    /// which in turn keeps the square-root arguments of the height
    /// balances positive during training.
    BoundedSigmoid { lo: Vec<f64>, hi: Vec<f64> },
    /// Raw affine output, used by the small regression networks.
    Identity,
}

/// What each output channel means, in scaled units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputRole {
    Height,
    OutletFlow,
    InternalFlow,
    Generic,
}

/// Stage tag recorded in serialized models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingStage {
    Initialized,
    Pretrained,
    Finetuned,
}

/// Dense feedforward network with tanh hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    /// Flat parameters: per layer, weight matrix (row-major out×in) then bias.
    theta: Vec<f64>,
    input_bounds: Vec<Interval>,
    head: OutputHead,
    roles: Vec<OutputRole>,
    scaling: ScalingConstants,
    seed: u64,
    stage: TrainingStage,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn affine_forward(
    w: &[f64],
    b: &[f64],
    a_prev: &[f64],
    da_prev: &[f64],
    z_out: &mut [f64],
    dz_out: &mut [f64],
    with_tangent: bool,
) {
    let n_prev = a_prev.len();
    for j in 0..b.len() {
        let row = &w[j * n_prev..(j + 1) * n_prev];
        let mut z = b[j];
        for i in 0..n_prev {
            z += row[i] * a_prev[i];
        }
        z_out[j] = z;
        if with_tangent {
            let mut dz = 0.0;
            for i in 0..n_prev {
                dz += row[i] * da_prev[i];
            }
            dz_out[j] = dz;
        } else {
            dz_out[j] = 0.0;
        }
    }
}

/// Converts pre-activations to tanh activations in place and propagates the
/// tangent: da = (1 − a²)·dz.
fn tanh_inplace(z_to_a: &mut [f64], dz: &[f64], da_out: &mut [f64], with_tangent: bool) {
    for j in 0..z_to_a.len() {
        let a = z_to_a[j].tanh();
        z_to_a[j] = a;
        da_out[j] = if with_tangent { (1.0 - a * a) * dz[j] } else { 0.0 };
    }
}

impl MlpModel {
    /// Xavier-normal initialization: weights drawn from
    /// N(0, 2 / (fan_in + fan_out)), biases zero, deterministic per seed.
    pub fn xavier_init(
        layer_dims: &[usize],
        input_bounds: Vec<Interval>,
        head: OutputHead,
        roles: Vec<OutputRole>,
        scaling: ScalingConstants,
        seed: u64,
    ) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "layer_dims must have >= 2 positive entries, got {layer_dims:?}"
            )));
        }
        let n_in = layer_dims[0];
        let n_out = *layer_dims.last().unwrap();
        if input_bounds.len() != n_in {
            return Err(Error::Config(format!(
                "{} input bounds for {} inputs",
                input_bounds.len(),
                n_in
            )));
        }
        if roles.len() != n_out {
            return Err(Error::Config(format!(
                "{} output roles for {} outputs",
                roles.len(),
                n_out
            )));
        }
        if let OutputHead::BoundedSigmoid { lo, hi } = &head {
            if lo.len() != n_out || hi.len() != n_out {
                return Err(Error::Config("output head range length mismatch".into()));
            }
            for (l, h) in lo.iter().zip(hi) {
                if !(l.is_finite() && h.is_finite() && l < h) {
                    return Err(Error::Config(format!(
                        "output range [{l}, {h}] must satisfy lo < hi"
                    )));
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(param_count(layer_dims));
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let normal = rand_distr::Normal::new(0.0, std)
                .map_err(|e| Error::Config(format!("xavier std: {e}")))?;
            for _ in 0..fan_in * fan_out {
                theta.push(normal.sample(&mut rng));
            }
            theta.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            theta,
            input_bounds,
            head,
            roles,
            scaling,
            seed,
            stage: TrainingStage::Initialized,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn n_inputs(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::Config(format!(
                "parameter vector length {} does not match model ({})",
                theta.len(),
                self.theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameters rejected".into()));
        }
        self.theta.copy_from_slice(theta);
        Ok(())
    }

    pub fn input_bounds(&self) -> &[Interval] {
        &self.input_bounds
    }

    pub fn head(&self) -> &OutputHead {
        &self.head
    }

    pub fn roles(&self) -> &[OutputRole] {
        &self.roles
    }

    pub fn scaling(&self) -> &ScalingConstants {
        &self.scaling
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stage(&self) -> TrainingStage {
        self.stage
    }

    pub fn set_stage(&mut self, stage: TrainingStage) {
        self.stage = stage;
    }

    fn layer_offset(&self, layer: usize) -> (usize, usize) {
        let mut off = 0;
        for l in 0..layer {
            off += self.layer_dims[l] * self.layer_dims[l + 1] + self.layer_dims[l + 1];
        }
        let w_len = self.layer_dims[layer] * self.layer_dims[layer + 1];
        (off, off + w_len)
    }

    /// Evaluates the network into a reusable trace. `tangent` seeds a
    /// forward-mode directional derivative along the given physical input
    /// direction; the normalization chain rule is applied internally.
    pub fn eval_into(
        &self,
        input: &[f64],
        tangent: Option<&[f64]>,
        trace: &mut DualTrace,
    ) -> Result<()> {
        let n_in = self.n_inputs();
        if input.len() != n_in {
            return Err(Error::Config(format!(
                "expected {} inputs, got {}",
                n_in,
                input.len()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite network input: {input:?}")));
        }
        if let Some(v) = tangent {
            if v.len() != n_in {
                return Err(Error::Config("tangent direction length mismatch".into()));
            }
        }
        trace.reset(self, tangent.is_some());

        for i in 0..n_in {
            trace.a0[i] = self.input_bounds[i].normalize(input[i]);
        }
        if let Some(v) = tangent {
            for i in 0..n_in {
                trace.da0[i] = v[i] * self.input_bounds[i].normalize_slope();
            }
        }

        let n_layers = self.layer_dims.len() - 1;
        let with_tangent = tangent.is_some();
        for l in 0..n_layers {
            let (w_off, b_off) = self.layer_offset(l);
            let (n_prev, n_cur) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let w = &self.theta[w_off..w_off + n_prev * n_cur];
            let b = &self.theta[b_off..b_off + n_cur];
            let last = l == n_layers - 1;
            if l == 0 && last {
                affine_forward(w, b, &trace.a0, &trace.da0, &mut trace.raw_out, &mut trace.d_raw_out, with_tangent);
            } else if l == 0 {
                let (h0, dh0, pt0) = (
                    &mut trace.hidden[0],
                    &mut trace.d_hidden[0],
                    &mut trace.pre_tangent[0],
                );
                affine_forward(w, b, &trace.a0, &trace.da0, h0, pt0, with_tangent);
                tanh_inplace(h0, pt0, dh0, with_tangent);
            } else if last {
                affine_forward(
                    w,
                    b,
                    &trace.hidden[l - 1],
                    &trace.d_hidden[l - 1],
                    &mut trace.raw_out,
                    &mut trace.d_raw_out,
                    with_tangent,
                );
            } else {
                let (prev, cur) = trace.hidden.split_at_mut(l);
                let (dprev, dcur) = trace.d_hidden.split_at_mut(l);
                let (_, ptcur) = trace.pre_tangent.split_at_mut(l);
                affine_forward(
                    w,
                    b,
                    &prev[l - 1],
                    &dprev[l - 1],
                    &mut cur[0],
                    &mut ptcur[0],
                    with_tangent,
                );
                tanh_inplace(&mut cur[0], &ptcur[0], &mut dcur[0], with_tangent);
            }
        }

        match &self.head {
            OutputHead::BoundedSigmoid { lo, hi } => {
                for j in 0..self.n_outputs() {
                    let s = sigmoid(trace.raw_out[j]);
                    trace.sig[j] = s;
                    trace.outputs[j] = lo[j] + (hi[j] - lo[j]) * s;
                    trace.d_outputs[j] = (hi[j] - lo[j]) * s * (1.0 - s) * trace.d_raw_out[j];
                }
            }
            OutputHead::Identity => {
                for j in 0..self.n_outputs() {
                    trace.outputs[j] = trace.raw_out[j];
                    trace.d_outputs[j] = trace.d_raw_out[j];
                }
            }
        }
        Ok(())
    }

    /// Plain forward evaluation; outputs in scaled units.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut trace = DualTrace::new(self);
        self.eval_into(input, None, &mut trace)?;
        Ok(trace.outputs.clone())
    }

    /// d(scaled outputs)/d(t in seconds) at the given input, exact.
    pub fn jvp_time(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut dir = vec![0.0; self.n_inputs()];
        dir[0] = 1.0;
        let mut trace = DualTrace::new(self);
        self.eval_into(input, Some(&dir), &mut trace)?;
        Ok(trace.d_outputs.clone())
    }

    /// Exact Jacobian of the selected scaled outputs with respect to the
    /// selected physical inputs, one forward-mode pass per column.
    pub fn input_jacobian(
        &self,
        input: &[f64],
        rows: &[usize],
        cols: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        let n_out = self.n_outputs();
        let n_in = self.n_inputs();
        if rows.iter().any(|&r| r >= n_out) || cols.iter().any(|&c| c >= n_in) {
            return Err(Error::Config("jacobian row/column index out of range".into()));
        }
        let mut jac = vec![vec![0.0; cols.len()]; rows.len()];
        let mut trace = DualTrace::new(self);
        for (cj, &c) in cols.iter().enumerate() {
            let mut dir = vec![0.0; n_in];
            dir[c] = 1.0;
            self.eval_into(input, Some(&dir), &mut trace)?;
            for (ri, &r) in rows.iter().enumerate() {
                jac[ri][cj] = trace.d_outputs[r];
            }
        }
        Ok(jac)
    }

    /// Reverse pass. Accumulates dL/dθ into `grad` given the cotangents of
    /// the outputs (`gy`) and, when the trace carries a tangent, of the
    /// output tangents (`gyt`, enabling gradients of derivative-containing
    /// losses). Returns dL/d(physical inputs).
    pub fn backprop_into(
        &self,
        trace: &DualTrace,
        gy: &[f64],
        gyt: Option<&[f64]>,
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        let n_out = self.n_outputs();
        if gy.len() != n_out {
            return Err(Error::Config("output cotangent length mismatch".into()));
        }
        if gyt.is_some() && !trace.has_tangent {
            return Err(Error::Config(
                "tangent cotangent supplied but the trace has no tangent".into(),
            ));
        }
        if grad.len() != self.theta.len() {
            return Err(Error::Config("gradient buffer length mismatch".into()));
        }

        let n_layers = self.layer_dims.len() - 1;
        let mut g_z = vec![0.0; n_out];
        let mut g_dz = vec![0.0; n_out];
        match &self.head {
            OutputHead::BoundedSigmoid { lo, hi } => {
                for j in 0..n_out {
                    let s = trace.sig[j];
                    let sp = (hi[j] - lo[j]) * s * (1.0 - s);
                    let spp = sp * (1.0 - 2.0 * s);
                    g_z[j] = gy[j] * sp;
                    if let Some(gt) = gyt {
                        g_z[j] += gt[j] * spp * trace.d_raw_out[j];
                        g_dz[j] = gt[j] * sp;
                    }
                }
            }
            OutputHead::Identity => {
                for j in 0..n_out {
                    g_z[j] = gy[j];
                    if let Some(gt) = gyt {
                        g_dz[j] = gt[j];
                    }
                }
            }
        }

        let with_tangent = gyt.is_some();
        for l in (0..n_layers).rev() {
            let (w_off, b_off) = self.layer_offset(l);
            let (n_prev, n_cur) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let w = &self.theta[w_off..w_off + n_prev * n_cur];
            let (a_prev, da_prev): (&[f64], &[f64]) = if l == 0 {
                (&trace.a0, &trace.da0)
            } else {
                (&trace.hidden[l - 1], &trace.d_hidden[l - 1])
            };

            let mut g_a_prev = vec![0.0; n_prev];
            let mut g_da_prev = vec![0.0; n_prev];
            for j in 0..n_cur {
                grad[b_off + j] += g_z[j];
                let row_off = w_off + j * n_prev;
                let row = &w[j * n_prev..(j + 1) * n_prev];
                for i in 0..n_prev {
                    grad[row_off + i] += g_z[j] * a_prev[i];
                    g_a_prev[i] += row[i] * g_z[j];
                }
                if with_tangent {
                    for i in 0..n_prev {
                        grad[row_off + i] += g_dz[j] * da_prev[i];
                        g_da_prev[i] += row[i] * g_dz[j];
                    }
                }
            }

            if l == 0 {
                let mut g_input = vec![0.0; n_prev];
                for i in 0..n_prev {
                    g_input[i] = g_a_prev[i] * self.input_bounds[i].normalize_slope();
                }
                return Ok(g_input);
            }

            // Pull the cotangents through the tanh of layer l-1.
            let a = &trace.hidden[l - 1];
            let dz = &trace.pre_tangent[l - 1];
            let mut new_g_z = vec![0.0; n_prev];
            let mut new_g_dz = vec![0.0; n_prev];
            for i in 0..n_prev {
                let act1 = 1.0 - a[i] * a[i];
                new_g_z[i] = g_a_prev[i] * act1;
                if with_tangent {
                    let act2 = -2.0 * a[i] * act1;
                    new_g_z[i] += g_da_prev[i] * act2 * dz[i];
                    new_g_dz[i] = g_da_prev[i] * act1;
                }
            }
            g_z = new_g_z;
            g_dz = new_g_dz;
        }
        unreachable!("loop returns at the input layer");
    }

    /// Serializes to the versioned, self-describing `.mlp` container
    /// (JSON; floating point survives round-trips bit-exactly).
    pub fn serialize(&self) -> Result<Vec<u8>> {
        let record = ModelRecord {
            magic: MODEL_MAGIC.to_string(),
            version: MODEL_VERSION,
            layer_dims: self.layer_dims.clone(),
            hidden_activation: "tanh".to_string(),
            head: self.head.clone(),
            roles: self.roles.clone(),
            input_bounds: self.input_bounds.clone(),
            scaling: self.scaling,
            seed: self.seed,
            stage: self.stage,
            theta: self.theta.clone(),
        };
        serde_json::to_vec(&record).map_err(|e| Error::ModelFormat(e.to_string()))
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let record: ModelRecord =
            serde_json::from_slice(bytes).map_err(|e| Error::ModelFormat(e.to_string()))?;
        if record.magic != MODEL_MAGIC {
            return Err(Error::ModelFormat(format!(
                "bad magic {:?}, expected {MODEL_MAGIC:?}",
                record.magic
            )));
        }
        if record.version != MODEL_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported container version {} (supported: {MODEL_VERSION})",
                record.version
            )));
        }
        if record.hidden_activation != "tanh" {
            return Err(Error::ModelFormat(format!(
                "unsupported hidden activation {:?}",
                record.hidden_activation
            )));
        }
        if record.theta.len() != param_count(&record.layer_dims) {
            return Err(Error::ModelFormat(format!(
                "parameter count {} does not match layer dims {:?}",
                record.theta.len(),
                record.layer_dims
            )));
        }
        if record.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::ModelFormat("non-finite parameters".into()));
        }
        let mut model = Self::xavier_init(
            &record.layer_dims,
            record.input_bounds,
            record.head,
            record.roles,
            record.scaling,
            record.seed,
        )?;
        model.theta = record.theta;
        model.stage = record.stage;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_atomic(path, &self.serialize()?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::deserialize(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    magic: String,
    version: u32,
    layer_dims: Vec<usize>,
    hidden_activation: String,
    head: OutputHead,
    roles: Vec<OutputRole>,
    input_bounds: Vec<Interval>,
    scaling: ScalingConstants,
    seed: u64,
    stage: TrainingStage,
    theta: Vec<f64>,
}

/// Reusable forward/tangent evaluation record. The derivative pass replays
/// exactly the graph this structure captured.
#[derive(Debug, Clone)]
pub struct DualTrace {
    a0: Vec<f64>,
    da0: Vec<f64>,
    hidden: Vec<Vec<f64>>,
    d_hidden: Vec<Vec<f64>>,
    pre_tangent: Vec<Vec<f64>>,
    raw_out: Vec<f64>,
    d_raw_out: Vec<f64>,
    sig: Vec<f64>,
    pub outputs: Vec<f64>,
    pub d_outputs: Vec<f64>,
    has_tangent: bool,
}

impl DualTrace {
    pub fn new(model: &MlpModel) -> Self {
        let dims = model.layer_dims();
        let n_hidden = dims.len() - 2;
        Self {
            a0: vec![0.0; dims[0]],
            da0: vec![0.0; dims[0]],
            hidden: (0..n_hidden).map(|l| vec![0.0; dims[l + 1]]).collect(),
            d_hidden: (0..n_hidden).map(|l| vec![0.0; dims[l + 1]]).collect(),
            pre_tangent: (0..n_hidden).map(|l| vec![0.0; dims[l + 1]]).collect(),
            raw_out: vec![0.0; *dims.last().unwrap()],
            d_raw_out: vec![0.0; *dims.last().unwrap()],
            sig: vec![0.0; *dims.last().unwrap()],
            outputs: vec![0.0; *dims.last().unwrap()],
            d_outputs: vec![0.0; *dims.last().unwrap()],
            has_tangent: false,
        }
    }

    fn reset(&mut self, model: &MlpModel, has_tangent: bool) {
        debug_assert_eq!(self.a0.len(), model.n_inputs());
        self.has_tangent = has_tangent;
        self.da0.iter_mut().for_each(|v| *v = 0.0);
        self.d_raw_out.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn has_tangent(&self) -> bool {
        self.has_tangent
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Interval;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn unit_bounds(n: usize) -> Vec<Interval> {
        (0..n).map(|_| Interval { lb: 0.0, ub: 1.0 }).collect()
    }

    fn small_model(seed: u64, head: OutputHead, dims: &[usize]) -> MlpModel {
        let out = *dims.last().unwrap();
        MlpModel::xavier_init(
            dims,
            unit_bounds(dims[0]),
            head,
            vec![OutputRole::Generic; out],
            ScalingConstants::default(),
            seed,
        )
        .unwrap()
    }

    fn unit_head(n: usize) -> OutputHead {
        OutputHead::BoundedSigmoid {
            lo: vec![0.0; n],
            hi: vec![1.0; n],
        }
    }

    #[test]
    fn xavier_is_deterministic_and_counts_params() {
        let dims = [4, 32, 32, 6];
        let a = small_model(9, unit_head(6), &dims);
        let b = small_model(9, unit_head(6), &dims);
        assert_eq!(a.params(), b.params());
        assert_eq!(a.n_params(), 1414);
        assert!(MlpModel::xavier_init(
            &[4],
            unit_bounds(4),
            OutputHead::Identity,
            vec![],
            ScalingConstants::default(),
            0
        )
        .is_err());
    }

    #[test]
    fn xavier_weights_have_near_zero_mean() {
        // ~1e5 weights across many seeds
        let mut sum = 0.0;
        let mut count = 0usize;
        for seed in 0..70 {
            let m = small_model(seed, unit_head(6), &[4, 32, 32, 6]);
            sum += m.params().iter().sum::<f64>();
            count += m.n_params();
        }
        assert!(count > 90_000);
        assert!((sum / count as f64).abs() < 0.01);
    }

    #[test]
    fn zero_weight_models_hit_head_fixed_points() {
        let mut m = small_model(1, unit_head(3), &[2, 8, 3]);
        m.set_params(&vec![0.0; m.n_params()]).unwrap();
        let y = m.forward(&[0.3, 0.7]).unwrap();
        for v in y {
            assert_relative_eq!(v, 0.5);
        }
        let dy = m.jvp_time(&[0.3, 0.7]).unwrap();
        assert!(dy.iter().all(|v| *v == 0.0));

        let mut m = small_model(1, OutputHead::Identity, &[2, 8, 3]);
        m.set_params(&vec![0.0; m.n_params()]).unwrap();
        let y = m.forward(&[0.3, 0.7]).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
        let jac = m.input_jacobian(&[0.3, 0.7], &[0, 1, 2], &[0, 1]).unwrap();
        assert!(jac.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_rejects_nan_input() {
        let m = small_model(1, unit_head(2), &[3, 8, 2]);
        assert!(m.forward(&[0.1, f64::NAN, 0.3]).is_err());
        assert!(m.forward(&[0.1, 0.2]).is_err());
    }

    #[test]
    fn sigmoid_head_outputs_stay_inside_ranges() {
        let head = OutputHead::BoundedSigmoid {
            lo: vec![0.3, -2.0],
            hi: vec![0.4, 5.0],
        };
        let m = small_model(11, head, &[3, 16, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let x = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let y = m.forward(&x).unwrap();
            assert!(y[0] > 0.3 && y[0] < 0.4 && y[0].is_finite());
            assert!(y[1] > -2.0 && y[1] < 5.0);
        }
    }

    #[test]
    fn jvp_time_matches_central_differences() {
        let m = small_model(21, unit_head(4), &[4, 16, 16, 4]);
        let x = [0.41, 0.62, 0.13, 0.87];
        let dy = m.jvp_time(&x).unwrap();
        let h = 1e-5;
        let mut xp = x;
        let mut xm = x;
        xp[0] += h;
        xm[0] -= h;
        let yp = m.forward(&xp).unwrap();
        let ym = m.forward(&xm).unwrap();
        for j in 0..4 {
            let fd = (yp[j] - ym[j]) / (2.0 * h);
            assert_relative_eq!(dy[j], fd, max_relative = 1e-5);
        }
    }

    #[test]
    fn jvp_time_is_zero_when_t_is_disconnected() {
        let mut m = small_model(3, unit_head(2), &[3, 6, 2]);
        let mut theta = m.params().to_vec();
        // zero the first-layer column that reads input 0
        let n_prev = 3;
        for j in 0..6 {
            theta[j * n_prev] = 0.0;
        }
        m.set_params(&theta).unwrap();
        let dy = m.jvp_time(&[0.5, 0.1, 0.9]).unwrap();
        assert!(dy.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn input_jacobian_matches_central_differences() {
        let m = small_model(33, unit_head(6), &[4, 32, 32, 6]);
        let x = [0.3, 0.55, 0.71, 0.2];
        let jac = m.input_jacobian(&x, &[0, 1], &[1, 2]).unwrap();
        let h = 1e-6;
        for (ci, col) in [1usize, 2].iter().enumerate() {
            let mut xp = x;
            let mut xm = x;
            xp[*col] += h;
            xm[*col] -= h;
            let yp = m.forward(&xp).unwrap();
            let ym = m.forward(&xm).unwrap();
            for (ri, row) in [0usize, 1].iter().enumerate() {
                let fd = (yp[*row] - ym[*row]) / (2.0 * h);
                assert_relative_eq!(jac[ri][ci], fd, max_relative = 1e-5, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn backprop_matches_finite_differences_including_tangent_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..5 {
            let m = small_model(100 + trial, unit_head(3), &[3, 10, 3]);
            let x = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let gy: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() - 0.5).collect();
            let gyt: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() - 0.5).collect();
            let dir = [1.0, 0.0, 0.0];

            let mut trace = DualTrace::new(&m);
            m.eval_into(&x, Some(&dir), &mut trace).unwrap();
            let mut grad = vec![0.0; m.n_params()];
            m.backprop_into(&trace, &gy, Some(&gyt), &mut grad).unwrap();

            // scalar objective: sum gy.y + gyt.(dy/dt)
            let objective = |model: &MlpModel| {
                let mut tr = DualTrace::new(model);
                model.eval_into(&x, Some(&dir), &mut tr).unwrap();
                let mut s = 0.0;
                for j in 0..3 {
                    s += gy[j] * tr.outputs[j] + gyt[j] * tr.d_outputs[j];
                }
                s
            };
            let h = 1e-6;
            let mut worst: f64 = 0.0;
            let mut m2 = m.clone();
            for k in (0..m.n_params()).step_by(7) {
                let mut theta = m.params().to_vec();
                let orig = theta[k];
                theta[k] = orig + h;
                m2.set_params(&theta).unwrap();
                let fp = objective(&m2);
                theta[k] = orig - h;
                m2.set_params(&theta).unwrap();
                let fm = objective(&m2);
                let fd = (fp - fm) / (2.0 * h);
                let denom = fd.abs().max(1e-6);
                worst = worst.max((grad[k] - fd).abs() / denom);
            }
            assert!(worst < 1e-5, "worst relative gradient error {worst}");
        }
    }

    #[test]
    fn jvp_vjp_adjoint_identity_holds() {
        let m = small_model(55, unit_head(5), &[4, 24, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = [0.2, 0.9, 0.4, 0.6];
        for _ in 0..20 {
            let v: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() - 0.5).collect();
            let w: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() - 0.5).collect();
            let mut trace = DualTrace::new(&m);
            m.eval_into(&x, Some(&v), &mut trace).unwrap();
            let jv: Vec<f64> = trace.d_outputs.clone();
            let mut grad = vec![0.0; m.n_params()];
            let jtw = m.backprop_into(&trace, &w, None, &mut grad).unwrap();
            let lhs: f64 = jv.iter().zip(&w).map(|(a, b)| a * b).sum();
            let rhs: f64 = v.iter().zip(&jtw).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "adjoint identity violated: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn serialization_roundtrips_bit_exactly() {
        let m = small_model(77, unit_head(6), &[4, 32, 32, 6]);
        let bytes = m.serialize().unwrap();
        let back = MlpModel::deserialize(&bytes).unwrap();
        assert_eq!(m, back);
        let x = [0.15, 0.25, 0.35, 0.45];
        assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());

        let truncated = &bytes[..bytes.len() / 2];
        assert!(matches!(
            MlpModel::deserialize(truncated),
            Err(Error::ModelFormat(_))
        ));

        let mut record: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        record["magic"] = serde_json::Value::String("other".into());
        assert!(MlpModel::deserialize(&serde_json::to_vec(&record).unwrap()).is_err());
        let mut record: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        record["theta"].as_array_mut().unwrap().pop();
        assert!(MlpModel::deserialize(&serde_json::to_vec(&record).unwrap()).is_err());
    }
}
