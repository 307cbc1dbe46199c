//! Dense multilayer perceptron with explicit forward caches and
//! hand-written backpropagation.
//!
//! Every layer computes `z = x Wᵀ + b` on a batch `x` (one sample per row);
//! hidden layers apply ReLU and the last layer applies the configured output
//! activation. Weights are stored `(out_dim, in_dim)` row-major.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{gemm, Matrix};
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HiddenActivation {
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OutputActivation {
    Identity,
    /// `scale * tanh(z)`, bounded in `(-scale, scale)`.
    TanhScaled(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Network parameters plus activation choices.
///
/// `version` is bumped by every mutating accessor so a [`ForwardCache`]
/// taken before a parameter change is detected as stale.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    hidden_activation: HiddenActivation,
    output_activation: OutputActivation,
    #[serde(skip)]
    version: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.hidden_activation == other.hidden_activation
            && self.output_activation == other.output_activation
    }
}

/// Activations recorded by a forward pass; consumed by backward.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    /// Input to each layer (`inputs[0]` is the network input).
    inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    preacts: Vec<Matrix>,
    output: Matrix,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn input(&self) -> &Matrix {
        &self.inputs[0]
    }

    pub fn batch_size(&self) -> usize {
        self.output.rows()
    }

    /// Which hidden units are active, layer by layer and row by row. Two
    /// inputs with the same pattern lie in the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let hidden = self.preacts.len().saturating_sub(1);
        self.preacts[..hidden]
            .iter()
            .flat_map(|z| z.as_slice().iter().map(|v| *v > 0.0))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Parameter gradients shaped like the owning [`Mlp`], plus the gradient
/// with respect to the network input when it was requested.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub input: Option<Matrix>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
            input: None,
        }
    }

    /// True when every tensor has the shape of the matching `mlp` tensor.
    pub fn matches(&self, mlp: &Mlp) -> bool {
        self.layers.len() == mlp.layers.len()
            && self.layers.iter().zip(&mlp.layers).all(|(g, l)| {
                g.weight.shape() == l.weight.shape() && g.bias.len() == l.bias.len()
            })
    }

    /// Accumulates parameter gradients; input gradients are not summed.
    pub fn add_assign(&mut self, other: &Gradients) -> Result<(), NnError> {
        if self.layers.len() != other.layers.len() {
            return Err(NnError::Shape("gradient layer counts differ".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.weight.shape() != b.weight.shape() || a.bias.len() != b.bias.len() {
                return Err(NnError::Shape("gradient layer shapes differ".into()));
            }
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
            l.bias.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Parameter gradients in the same order as [`Mlp::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub(crate) fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }
}

impl Mlp {
    pub fn new(
        layers: Vec<Layer>,
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
    ) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Shape("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(NnError::Shape(format!(
                    "layer {i}: bias length {} != output dim {}",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
            if l.bias.iter().any(|b| !b.is_finite()) {
                return Err(NnError::NonFinite(format!("layer {i} bias")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NnError::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        if let OutputActivation::TanhScaled(scale) = output_activation {
            if !(scale.is_finite() && scale > 0.0) {
                return Err(NnError::Shape(format!(
                    "tanh output scale must be positive, got {scale}"
                )));
            }
        }
        Ok(Self {
            layers,
            hidden_activation,
            output_activation,
            version: 0,
        })
    }

    /// Random network with layer widths `dims` (input first, output last).
    /// Weights and biases are uniform in `±1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        output_activation: OutputActivation,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NnError::Shape(format!("invalid layer widths {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                let bias = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
                Layer {
                    weight: Matrix::from_raw(fan_out, fan_in, weight),
                    bias,
                }
            })
            .collect();
        Self::new(layers, HiddenActivation::Relu, output_activation)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn hidden_activation(&self) -> HiddenActivation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Layer::out_dim));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<(), NnError> {
        if values.len() != self.num_params() {
            return Err(NnError::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        self.for_each_param_slice_mut(|slice| {
            slice.copy_from_slice(&values[offset..offset + slice.len()]);
            offset += slice.len();
        });
        Ok(())
    }

    /// Visits every parameter tensor mutably, in flat-parameter order.
    pub fn for_each_param_slice_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        self.version += 1;
        for l in &mut self.layers {
            f(l.weight.as_mut_slice());
            f(&mut l.bias);
        }
    }

    pub(crate) fn param_slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub(crate) fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.shape() == b.weight.shape() && a.bias.len() == b.bias.len()
            })
    }

    /// Batched forward pass. `input` holds one sample per row.
    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, ForwardCache), NnError> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = affine(layer, &x);
            let a = if i == last {
                self.apply_output(&z)
            } else {
                relu(&z)
            };
            inputs.push(x);
            preacts.push(z);
            x = a;
        }
        let cache = ForwardCache {
            version: self.version,
            inputs,
            preacts,
            output: x.clone(),
        };
        Ok((x, cache))
    }

    /// Forward pass without recording a cache.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix, NnError> {
        self.check_input(input)?;
        let last = self.layers.len() - 1;
        let mut x = affine(&self.layers[0], input);
        x = if last == 0 {
            self.apply_output(&x)
        } else {
            relu(&x)
        };
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            let z = affine(layer, &x);
            x = if i == last {
                self.apply_output(&z)
            } else {
                relu(&z)
            };
        }
        Ok(x)
    }

    /// Single-vector forward pass.
    pub fn forward_vec(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache), NnError> {
        let (out, cache) = self.forward(&Matrix::from_raw(1, input.len(), input.to_vec()))?;
        Ok((out.into_vec(), cache))
    }

    pub fn predict_vec(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self
            .predict(&Matrix::from_raw(1, input.len(), input.to_vec()))?
            .into_vec())
    }

    /// Backpropagates `upstream = dL/d(output)` and returns parameter and
    /// input gradients.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<Gradients, NnError> {
        self.backward_impl(cache, upstream, true)
    }

    /// Gradient with respect to the network input only; skips parameter
    /// gradient products.
    pub fn input_gradient(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<Matrix, NnError> {
        let grads = self.backward_impl(cache, upstream, false)?;
        Ok(grads.input.expect("input gradient is always produced"))
    }

    pub fn backward_vec(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Gradients, NnError> {
        self.backward(cache, &Matrix::from_raw(1, upstream.len(), upstream.to_vec()))
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        upstream: &Matrix,
        param_grads: bool,
    ) -> Result<Gradients, NnError> {
        if cache.version != self.version {
            return Err(NnError::StaleCache(format!(
                "cache from parameter version {}, network is at {}",
                cache.version, self.version
            )));
        }
        if cache.inputs.len() != self.layers.len()
            || cache
                .preacts
                .iter()
                .zip(&self.layers)
                .any(|(z, l)| z.cols() != l.out_dim())
        {
            return Err(NnError::StaleCache(
                "cache was produced by a different network".into(),
            ));
        }
        if upstream.shape() != cache.output.shape() {
            return Err(NnError::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.shape(),
                cache.output.shape()
            )));
        }

        let last = self.layers.len() - 1;
        let mut delta = self.output_delta(&cache.preacts[last], &cache.output, upstream);
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        let mut input_grad = None;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let x = &cache.inputs[i];
            if param_grads {
                let mut dw = Matrix::zeros(layer.out_dim(), layer.in_dim());
                gemm(&delta, true, x, false, &mut dw, 1.0, 0.0);
                let mut db = vec![0.0; layer.out_dim()];
                for r in 0..delta.rows() {
                    for (acc, v) in db.iter_mut().zip(delta.row(r)) {
                        *acc += v;
                    }
                }
                layer_grads.push(LayerGrad {
                    weight: dw,
                    bias: db,
                });
            }
            let mut dx = Matrix::zeros(delta.rows(), layer.in_dim());
            gemm(&delta, false, &layer.weight, false, &mut dx, 1.0, 0.0);
            if i == 0 {
                input_grad = Some(dx);
            } else {
                let z_prev = &cache.preacts[i - 1];
                for (g, z) in dx.as_mut_slice().iter_mut().zip(z_prev.as_slice()) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
                delta = dx;
            }
        }
        layer_grads.reverse();
        Ok(Gradients {
            layers: layer_grads,
            input: input_grad,
        })
    }

    fn check_input(&self, input: &Matrix) -> Result<(), NnError> {
        if input.cols() != self.input_dim() {
            return Err(NnError::Shape(format!(
                "input has {} features, network expects {}",
                input.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn apply_output(&self, z: &Matrix) -> Matrix {
        match self.output_activation {
            OutputActivation::Identity => z.clone(),
            OutputActivation::TanhScaled(scale) => Matrix::from_raw(
                z.rows(),
                z.cols(),
                z.as_slice().iter().map(|v| scale * v.tanh()).collect(),
            ),
        }
    }

    fn output_delta(&self, z: &Matrix, _output: &Matrix, upstream: &Matrix) -> Matrix {
        match self.output_activation {
            OutputActivation::Identity => upstream.clone(),
            OutputActivation::TanhScaled(scale) => Matrix::from_raw(
                z.rows(),
                z.cols(),
                z.as_slice()
                    .iter()
                    .zip(upstream.as_slice())
                    .map(|(zv, g)| {
                        let t = zv.tanh();
                        g * scale * (1.0 - t * t)
                    })
                    .collect(),
            ),
        }
    }
}

fn affine(layer: &Layer, x: &Matrix) -> Matrix {
    let mut z = Matrix::zeros(x.rows(), layer.out_dim());
    for r in 0..z.rows() {
        z.row_mut(r).copy_from_slice(&layer.bias);
    }
    gemm(x, false, &layer.weight, true, &mut z, 1.0, 1.0);
    z
}

fn relu(z: &Matrix) -> Matrix {
    Matrix::from_raw(
        z.rows(),
        z.cols(),
        z.as_slice().iter().map(|v| v.max(0.0)).collect(),
    )
}
