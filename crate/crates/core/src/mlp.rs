//! Dense feed-forward network with tanh hidden layers, backpropagation and Adam.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

/// One affine layer; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MlpRepr", try_from = "MlpRepr")]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
}

/// Serialized form: row-major nested weight arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpRepr {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
}

impl From<Mlp> for MlpRepr {
    fn from(net: Mlp) -> Self {
        Self {
            layer_dims: net.dims(),
            weights: net.layers.iter().map(|l| l.weight.rows().into_iter().map(|r| r.to_vec()).collect()).collect(),
            biases: net.layers.iter().map(|l| l.bias.to_vec()).collect(),
            activation: net.activation,
        }
    }
}

impl TryFrom<MlpRepr> for Mlp {
    type Error = Error;

    fn try_from(r: MlpRepr) -> Result<Self> {
        if r.layer_dims.len() < 2 {
            return Err(Error::InvalidConfig("network needs at least input and output dims".into()));
        }
        let expect = |what, e: usize, g: usize| {
            if e == g {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { what, expected: e, got: g })
            }
        };
        expect("weight layers", r.layer_dims.len() - 1, r.weights.len())?;
        expect("bias layers", r.weights.len(), r.biases.len())?;
        let mut layers = Vec::with_capacity(r.weights.len());
        for (k, (w, b)) in r.weights.into_iter().zip(r.biases).enumerate() {
            let (rows, cols) = (r.layer_dims[k + 1], r.layer_dims[k]);
            expect("weight rows", rows, w.len())?;
            let mut flat = Vec::with_capacity(rows * cols);
            for row in w {
                expect("weight cols", cols, row.len())?;
                flat.extend(row);
            }
            let weight = Array2::from_shape_vec((rows, cols), flat).expect("shape checked");
            layers.push(Dense { weight, bias: b.into() });
        }
        Mlp::from_layers(layers, r.activation)
    }
}

/// Layer inputs recorded during a forward pass; the last entry is the output.
pub struct ForwardCache {
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Per-layer `(d weight, d bias)`; empty when weight gradients were not requested.
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
    pub input: Array2<f64>,
}

impl Gradients {
    /// Flattened in the same order as [`Mlp::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig("network needs at least input and output dims".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!("layer dims must be positive, got {dims:?}")));
        }
        let mut rng = seed::rng(seed, &[0x4D4C50]);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..=limit));
                Dense { weight, bias: Array1::zeros(fan_out) }
            })
            .collect();
        Ok(Self { layers, activation: Activation::Tanh })
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[1].weight.ncols() != pair[0].weight.nrows() {
                return Err(Error::DimensionMismatch {
                    what: "layer chain",
                    expected: pair[0].weight.nrows(),
                    got: pair[1].weight.ncols(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::DimensionMismatch { what: "bias", expected: l.weight.nrows(), got: l.bias.len() });
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("network weights"));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].weight.ncols()];
        d.extend(self.layers.iter().map(|l| l.weight.nrows()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.nrows()).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch { what: "flat params", expected: self.param_count(), got: flat.len() });
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch { what: "network input", expected: self.input_dim(), got: x.ncols() });
        }
        Ok(())
    }

    fn affine(layer: &Dense, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&layer.weight.t());
        z += &layer.bias;
        z
    }

    /// Row-wise forward pass.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut h = Self::affine(&self.layers[0], &x);
        if last > 0 {
            h.mapv_inplace(f64::tanh);
        }
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            h = Self::affine(layer, &h.view());
            if i < last {
                h.mapv_inplace(f64::tanh);
            }
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Self::affine(layer, &activations[i].view());
            if i < last {
                z.mapv_inplace(f64::tanh);
            }
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    /// Backpropagates `grad_out` (dL/d output, same shape as the output).
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>, want_weights: bool) -> Gradients {
        let n_layers = self.layers.len();
        let mut layer_grads = Vec::with_capacity(if want_weights { n_layers } else { 0 });
        let mut delta = grad_out.to_owned();
        for i in (0..n_layers).rev() {
            if i < n_layers - 1 {
                // through tanh: d/dz tanh(z) = 1 - a^2
                let a = &cache.activations[i + 1];
                delta.zip_mut_with(a, |d, &a| *d *= 1.0 - a * a);
            }
            let input = &cache.activations[i];
            if want_weights {
                let dw = delta.t().dot(input);
                let db = delta.sum_axis(Axis(0));
                layer_grads.push((dw, db));
            }
            delta = delta.dot(&self.layers[i].weight);
        }
        layer_grads.reverse();
        Gradients { layers: layer_grads, input: delta }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, cfg: AdamConfig) -> Self {
        Self { cfg, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
    }

    /// Applies one step to the network's weights and biases.
    pub fn step_mlp(&mut self, net: &mut Mlp, grads: &Gradients) {
        let mut flat = net.flat_params();
        self.step(&mut flat, &grads.flat());
        net.set_flat_params(&flat).expect("gradient layout matches network");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ones_chain() -> Mlp {
        let layer = || Dense { weight: array![[1.0]], bias: array![0.0] };
        Mlp::from_layers(vec![layer(), layer(), layer()], Activation::Tanh).unwrap()
    }

    #[test]
    fn init_shapes_and_bounds() {
        let net = Mlp::init(&[9, 128, 128, 4], 3).unwrap();
        let shapes: Vec<_> = net.layers().iter().map(|l| l.weight.dim()).collect();
        assert_eq!(shapes, vec![(128, 9), (128, 128), (4, 128)]);
        assert!(net.layers().iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
        let lim = (6.0f64 / 137.0).sqrt();
        assert!(net.layers()[0].weight.iter().all(|w| w.abs() <= lim));
        assert_eq!(net, Mlp::init(&[9, 128, 128, 4], 3).unwrap());
        assert_ne!(net, Mlp::init(&[9, 128, 128, 4], 4).unwrap());
        assert!(Mlp::init(&[9, 0, 4], 0).is_err());
    }

    #[test]
    fn nested_tanh_by_hand() {
        let net = ones_chain();
        assert_eq!(net.forward(array![[0.0]].view()).unwrap()[[0, 0]], 0.0);
        let y = net.forward(array![[1.0]].view()).unwrap()[[0, 0]];
        assert!((y - 1.0f64.tanh().tanh()).abs() < 1e-15);
        assert!((y - 0.642015).abs() < 5e-6);
    }

    #[test]
    fn cached_forward_matches_plain() {
        let net = Mlp::init(&[3, 5, 4, 2], 1).unwrap();
        let x = array![[0.1, -0.2, 0.3], [1.0, 0.5, -0.7]];
        assert_eq!(net.forward(x.view()).unwrap(), *net.forward_cached(x.view()).unwrap().output());
        assert!(net.forward(array![[0.0, 1.0]].view()).is_err());
    }

    #[test]
    fn flat_params_round_trip() {
        let mut net = Mlp::init(&[3, 4, 2], 1).unwrap();
        let flat = net.flat_params();
        let mut shifted = flat.clone();
        shifted[5] += 1.0;
        net.set_flat_params(&shifted).unwrap();
        assert_eq!(net.flat_params(), shifted);
        assert!(net.set_flat_params(&flat[1..]).is_err());
    }

    #[test]
    fn adam_zero_lr_is_noop_and_moves_against_gradient() {
        let mut p = vec![1.0, -2.0];
        Adam::new(2, AdamConfig { learning_rate: 0.0, ..Default::default() }).step(&mut p, &[3.0, -4.0]);
        assert_eq!(p, vec![1.0, -2.0]);
        Adam::new(2, AdamConfig::default()).step(&mut p, &[3.0, -4.0]);
        // first bias-corrected step has magnitude ~lr
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-2.0 + 1e-3)).abs() < 1e-9);
    }
}
