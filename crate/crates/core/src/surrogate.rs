//! Learned one-step model of the plant.
//!
//! The network maps z-scored `(params, state, action)` to the z-scored next
//! state. Gradients are available both for the weights (training) and for the
//! parameter inputs with the weights frozen (identification).

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, EpisodeSet, NormStats, TransitionRecord};
use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::mlp::{Activation, Adam, AdamConfig, Mlp, MlpRepr};
#[cfg(test)]
use crate::mlp::Dense;
use crate::plant::{Action, JointState, PhysParams};
use crate::seed;

/// Hidden width of the default surrogate.
pub const HIDDEN_WIDTH: usize = 128;

/// `[3 + 3N, 128, 128, 2N]`.
pub fn default_layer_dims(n_joints: usize) -> Vec<usize> {
    vec![datagen::input_dim(n_joints), HIDDEN_WIDTH, HIDDEN_WIDTH, datagen::output_dim(n_joints)]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Training stops once the epoch loss falls to this value.
    pub early_stop_loss: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 2000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            early_stop_loss: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("surrogate learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("invalid Adam hyper-parameters".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    /// The 100-epoch moving average stopped decreasing.
    Plateau,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean normalized squared error per epoch.
    pub loss_curve: Vec<f64>,
    pub stop: StopReason,
}

/// Network, normalization and provenance of a surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "CheckpointRepr", try_from = "CheckpointRepr")]
pub struct MlpCheckpoint {
    pub network: Mlp,
    pub norm_stats: NormStats,
    pub rng_seed: u64,
    pub training_meta: Option<TrainingMeta>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointRepr {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
    norm_stats: NormStats,
    rng_seed: u64,
    training_meta: Option<TrainingMeta>,
}

impl From<MlpCheckpoint> for CheckpointRepr {
    fn from(c: MlpCheckpoint) -> Self {
        let MlpRepr { layer_dims, weights, biases, activation } = c.network.into();
        Self {
            layer_dims,
            weights,
            biases,
            activation,
            norm_stats: c.norm_stats,
            rng_seed: c.rng_seed,
            training_meta: c.training_meta,
        }
    }
}

impl TryFrom<CheckpointRepr> for MlpCheckpoint {
    type Error = Error;

    fn try_from(r: CheckpointRepr) -> Result<Self> {
        let network = Mlp::try_from(MlpRepr {
            layer_dims: r.layer_dims,
            weights: r.weights,
            biases: r.biases,
            activation: r.activation,
        })?;
        let mut c = Self::new(network, r.norm_stats, r.rng_seed)?;
        c.training_meta = r.training_meta;
        Ok(c)
    }
}

impl MlpCheckpoint {
    pub fn new(network: Mlp, norm_stats: NormStats, rng_seed: u64) -> Result<Self> {
        let dims = network.dims();
        if dims.len() < 2 {
            return Err(Error::InvalidConfig("surrogate needs at least one layer".into()));
        }
        norm_stats.validate()?;
        let (input, output) = (dims[0], *dims.last().expect("non-empty"));
        if input < 3 || (input - 3) % 3 != 0 || output != 2 * ((input - 3) / 3) {
            return Err(Error::InvalidConfig(format!(
                "layer dims {dims:?} do not match a (params, state, action) -> state layout"
            )));
        }
        ensure_len("norm_stats", input + output, norm_stats.dim())?;
        Ok(Self { network, norm_stats, rng_seed, training_meta: None })
    }

    /// Freshly initialized network with identity normalization.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 4 {
            return Err(Error::InvalidConfig(format!(
                "surrogate needs at least three weight layers, got dims {layer_dims:?}"
            )));
        }
        let network = Mlp::init(layer_dims, seed)?;
        let dim = layer_dims[0] + layer_dims[layer_dims.len() - 1];
        Self::new(network, NormStats::identity(dim), seed)
    }

    /// Default-width network with statistics computed from `records`.
    pub fn for_records(records: &[TransitionRecord], seed: u64) -> Result<Self> {
        let first = records.first().ok_or(Error::Empty("dataset"))?;
        let mut ckpt = Self::init(&default_layer_dims(first.n_joints()), seed)?;
        ckpt.norm_stats = datagen::compute_norm_stats(records)?;
        Ok(ckpt)
    }

    pub fn n_joints(&self) -> usize {
        (self.network.input_dim() - 3) / 3
    }

    fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    fn normalize_inputs(&self, raw: &mut Array2<f64>) {
        for (j, mut col) in raw.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.norm_stats.mean[j], self.norm_stats.std[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
    }

    fn normalize_targets(&self, raw: &mut Array2<f64>) {
        let off = self.input_dim();
        for (j, mut col) in raw.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.norm_stats.mean[off + j], self.norm_stats.std[off + j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
    }

    fn denormalize_outputs(&self, z: &mut Array2<f64>) {
        let off = self.input_dim();
        for (j, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.norm_stats.mean[off + j], self.norm_stats.std[off + j]);
            col.mapv_inplace(|v| v * s + m);
        }
    }

    fn input_row(&self, params: &PhysParams, state: &JointState, action: &Action) -> Result<Array2<f64>> {
        let n = self.n_joints();
        state.check(n)?;
        action.check(n)?;
        ensure_finite("params", &params.to_array())?;
        let mut v = Vec::with_capacity(self.input_dim());
        datagen::write_input(params, state, action, &mut v);
        let mut row = Array2::from_shape_vec((1, v.len()), v).expect("row shape");
        self.normalize_inputs(&mut row);
        Ok(row)
    }

    /// Predicted next state.
    pub fn forward(&self, params: &PhysParams, state: &JointState, action: &Action) -> Result<JointState> {
        let row = self.input_row(params, state, action)?;
        let mut out = self.network.forward(row.view())?;
        self.denormalize_outputs(&mut out);
        let v = out.row(0).to_vec();
        ensure_finite("surrogate output", &v)?;
        Ok(JointState::from_slice(&v))
    }

    /// Raw-unit predictions for raw-unit input rows `params | q | qd | target`.
    pub fn predict_batch(&self, raw_inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut x = raw_inputs.to_owned();
        self.normalize_inputs(&mut x);
        let mut out = self.network.forward(x.view())?;
        self.denormalize_outputs(&mut out);
        Ok(out)
    }

    /// Exact gradient of `‖forward(..) − target‖²` with respect to `(f, p, d)`.
    pub fn grad_wrt_params(
        &self,
        params: &PhysParams,
        state: &JointState,
        action: &Action,
        target: &JointState,
    ) -> Result<[f64; 3]> {
        target.check(self.n_joints())?;
        let row = self.input_row(params, state, action)?;
        let cache = self.network.forward_cached(row.view())?;
        let mut pred = cache.output().clone();
        self.denormalize_outputs(&mut pred);
        let off = self.input_dim();
        let t = target.to_vec();
        let grad_out = Array2::from_shape_fn(pred.raw_dim(), |(_, j)| {
            2.0 * (pred[[0, j]] - t[j]) * self.norm_stats.std[off + j]
        });
        let g = self.network.backward(&cache, grad_out.view(), false);
        let grad = std::array::from_fn(|k| g.input[[0, k]] / self.norm_stats.std[k]);
        ensure_finite("parameter gradient", &grad)?;
        Ok(grad)
    }
}

fn to_matrices(model: &MlpCheckpoint, records: &[TransitionRecord]) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = model.n_joints();
    let (din, dout) = (datagen::input_dim(n), datagen::output_dim(n));
    let mut x = Array2::zeros((records.len(), din));
    let mut y = Array2::zeros((records.len(), dout));
    for (i, r) in records.iter().enumerate() {
        let flat = r.flatten();
        ensure_len("record", din + dout, flat.len())?;
        ensure_finite("record", &flat)?;
        x.row_mut(i).assign(&ndarray::aview1(&flat[..din]));
        y.row_mut(i).assign(&ndarray::aview1(&flat[din..]));
    }
    model.normalize_inputs(&mut x);
    model.normalize_targets(&mut y);
    Ok((x, y))
}

const SMOOTHING_WINDOW: usize = 100;

/// Mini-batch Adam on the normalized squared error.
pub fn train(model: &MlpCheckpoint, records: &[TransitionRecord], cfg: &TrainConfig) -> Result<(MlpCheckpoint, TrainReport)> {
    if records.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    cfg.validate()?;
    let (x, y) = to_matrices(model, records)?;
    let n = records.len();
    let batch = cfg.batch_size.min(n);

    let mut out = model.clone();
    let mut adam = Adam::new(out.network.param_count(), cfg.adam());
    let mut rng = seed::rng(cfg.seed, &[0x5452_4149_4E]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    // per-record errors, summed in record order so the epoch loss ignores the shuffle
    let mut row_err = vec![0.0; n];

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            let cache = out.network.forward_cached(xb.view())?;
            let diff = cache.output() - &yb;
            let rows = chunk.len() as f64;
            for (&i, r) in chunk.iter().zip(diff.rows()) {
                row_err[i] = r.iter().map(|d| d * d).sum::<f64>();
            }
            let grad_out = diff * (2.0 / rows);
            let grads = out.network.backward(&cache, grad_out.view(), true);
            adam.step_mlp(&mut out.network, &grads);
        }
        let loss = row_err.iter().sum::<f64>() / n as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        curve.push(loss);
        if loss <= cfg.early_stop_loss {
            stop = StopReason::EarlyStop;
            break;
        }
        if has_plateaued(&curve) {
            stop = StopReason::Plateau;
            break;
        }
    }

    out.training_meta = Some(TrainingMeta { epochs: curve.len(), final_loss: curve.last().copied().unwrap_or(f64::NAN) });
    Ok((out, TrainReport { loss_curve: curve, stop }))
}

/// True once the mean of the last window is no lower than the window before it.
fn has_plateaued(curve: &[f64]) -> bool {
    let w = SMOOTHING_WINDOW;
    if curve.len() < 2 * w {
        return false;
    }
    let recent: f64 = curve[curve.len() - w..].iter().sum();
    let before: f64 = curve[curve.len() - 2 * w..curve.len() - w].iter().sum();
    recent >= before
}

/// Mean squared next-state error on `records` in normalized output units.
pub fn dataset_loss(model: &MlpCheckpoint, records: &[TransitionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let (x, y) = to_matrices(model, records)?;
    let pred = model.network.forward(x.view())?;
    Ok((pred - y).iter().map(|d| d * d).sum::<f64>() / records.len() as f64)
}

/// Parameter loss over real transitions with the surrogate frozen:
/// mean over transitions of `‖M(params, S_{t-1}, a_{t-1}) − S_t‖²` in raw state units.
pub struct SurrogateObjective<'a> {
    model: &'a MlpCheckpoint,
    /// Normalized inputs with the parameter columns left for each query.
    base: Array2<f64>,
    targets: Array2<f64>,
}

impl<'a> SurrogateObjective<'a> {
    pub fn new(model: &'a MlpCheckpoint, episodes: &EpisodeSet) -> Result<Self> {
        let n = model.n_joints();
        episodes.check(n)?;
        let rows = episodes.transitions();
        let (din, dout) = (datagen::input_dim(n), datagen::output_dim(n));
        let mut base = Array2::zeros((rows, din));
        let mut targets = Array2::zeros((rows, dout));
        let mut i = 0;
        let zero = PhysParams::new(0.0, 0.0, 0.0);
        for ep in &episodes.episodes {
            for (t, a) in ep.actions.iter().enumerate() {
                let mut v = Vec::with_capacity(din);
                datagen::write_input(&zero, &ep.observed[t], a, &mut v);
                base.row_mut(i).assign(&ndarray::aview1(&v));
                targets.row_mut(i).assign(&ndarray::aview1(&ep.observed[t + 1].to_vec()));
                i += 1;
            }
        }
        model.normalize_inputs(&mut base);
        Ok(Self { model, base, targets })
    }

    pub fn transitions(&self) -> usize {
        self.targets.nrows()
    }

    fn inputs(&self, params: &PhysParams) -> Result<Array2<f64>> {
        ensure_finite("params", &params.to_array())?;
        let mut x = self.base.clone();
        let stats = &self.model.norm_stats;
        for (k, v) in params.to_array().iter().enumerate() {
            x.slice_mut(s![.., k]).fill(stats.normalize(k, *v));
        }
        Ok(x)
    }

    pub fn loss(&self, params: &PhysParams) -> Result<f64> {
        let x = self.inputs(params)?;
        let mut pred = self.model.network.forward(x.view())?;
        self.model.denormalize_outputs(&mut pred);
        let loss = (pred - &self.targets).iter().map(|d| d * d).sum::<f64>() / self.transitions() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("parameter loss"));
        }
        Ok(loss)
    }

    /// Loss and its gradient with respect to raw `(f, p, d)`.
    pub fn loss_and_grad(&self, params: &PhysParams) -> Result<(f64, [f64; 3])> {
        let x = self.inputs(params)?;
        let cache = self.model.network.forward_cached(x.view())?;
        let mut pred = cache.output().clone();
        self.model.denormalize_outputs(&mut pred);
        let diff = pred - &self.targets;
        let rows = self.transitions() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / rows;
        let off = self.model.input_dim();
        let stats = &self.model.norm_stats;
        let mut grad_out = diff * (2.0 / rows);
        for (j, mut col) in grad_out.axis_iter_mut(Axis(1)).enumerate() {
            col *= stats.std[off + j];
        }
        let g = self.model.network.backward(&cache, grad_out.view(), false);
        let grad: [f64; 3] = std::array::from_fn(|k| g.input.column(k).sum() / stats.std[k]);
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter loss"));
        }
        Ok((loss, grad))
    }
}
