//! Dense feedforward networks with a hand-written backward pass.
//!
//! A network is a chain of affine layers `z = W a + b`. Hidden layers apply
//! ReLU; the output layer applies either nothing or `tanh`. Weights of layer
//! `i` are stored as a `(fan_out, fan_in)` matrix.
//!
//! Batched evaluation takes inputs as rows of a matrix, so one forward pass
//! over `n` samples is a sequence of `n x fan_in` by `fan_in x fan_out`
//! products. Gradients returned by [`NetworkParams::backward_batch`] are
//! summed over the batch.

mod optim;

pub use optim::{Adam, AdamConfig, Optimizer, OptimizerKind, RmsProp, Sgd};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    None,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_sizes: &[usize], output_dim: usize, output: OutputActivation) -> Self {
        Self {
            input_dim,
            hidden_sizes: hidden_sizes.to_vec(),
            output_dim,
            hidden_activation: HiddenActivation::Relu,
            output_activation: output,
        }
    }

    /// `(fan_in, fan_out)` for every layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut sizes = Vec::with_capacity(self.hidden_sizes.len() + 2);
        sizes.push(self.input_dim);
        sizes.extend_from_slice(&self.hidden_sizes);
        sizes.push(self.output_dim);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_sizes.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig(format!("network dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    spec: NetworkSpec,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Parameter-shaped gradient (or update) buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let dims = spec.layer_dims();
        Self {
            weights: dims.iter().map(|&(i, o)| Array2::zeros((o, i))).collect(),
            biases: dims.iter().map(|&(_, o)| Array1::zeros(o)).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
        self.biases.iter_mut().for_each(|b| *b *= factor);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    /// Flattened view in checkpoint order: per layer, weights row-major then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn l2_norm(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| w.iter().map(|x| x * x).sum::<f64>())
            .chain(self.biases.iter().map(|b| b.iter().map(|x| x * x).sum::<f64>()))
            .sum::<f64>()
            .sqrt()
    }

    fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

/// Activations recorded by a batched forward pass; `layers[0]` is the input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.layers.last().expect("cache always holds the input")
    }
}

impl NetworkParams {
    /// Uniform initialization in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        let mut weights = Vec::with_capacity(dims.len());
        let mut biases = Vec::with_capacity(dims.len());
        for &(fan_in, fan_out) in &dims {
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-bound..=bound)));
            biases.push(Array1::from_shape_fn(fan_out, |_| rng.gen_range(-bound..=bound)));
        }
        Ok(Self { spec, weights, biases })
    }

    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let g = Gradients::zeros(&spec);
        Ok(Self {
            spec,
            weights: g.weights,
            biases: g.biases,
        })
    }

    pub fn from_parts(spec: NetworkSpec, weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        check_dim("layer count", dims.len(), weights.len())?;
        check_dim("layer count", dims.len(), biases.len())?;
        for ((&(i, o), w), b) in dims.iter().zip(&weights).zip(&biases) {
            if w.dim() != (o, i) {
                return Err(Error::SpecMismatch(format!("weight shape {:?}, expected {:?}", w.dim(), (o, i))));
            }
            check_dim("bias length", o, b.len())?;
        }
        let params = Self { spec, weights, biases };
        if !params.all_finite() {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(params)
    }

    /// Inverse of [`NetworkParams::to_flat`].
    pub fn from_flat(spec: NetworkSpec, flat: &[f64]) -> Result<Self> {
        spec.validate()?;
        check_dim("flat parameters", spec.num_params(), flat.len())?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut at = 0;
        for (i, o) in spec.layer_dims() {
            weights.push(Array2::from_shape_vec((o, i), flat[at..at + o * i].to_vec()).expect("sized slice"));
            at += o * i;
            biases.push(Array1::from_vec(flat[at..at + o].to_vec()));
            at += o;
        }
        Self::from_parts(spec, weights, biases)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    /// Zero the final layer so the untrained network outputs `act(0)` everywhere.
    pub fn zero_output_layer(&mut self) {
        if let Some(w) = self.weights.last_mut() {
            w.fill(0.0);
        }
        if let Some(b) = self.biases.last_mut() {
            b.fill(0.0);
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        Gradients {
            weights: self.weights.clone(),
            biases: self.biases.clone(),
        }
        .to_flat()
    }

    fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    fn apply_output(&self, z: &mut Array2<f64>) {
        if self.spec.output_activation == OutputActivation::Tanh {
            z.mapv_inplace(f64::tanh);
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_dim("network input", self.spec.input_dim, input.len())?;
        let mut a = Array1::from_vec(input.to_vec());
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w.dot(&a) + b;
            if l < last {
                z.mapv_inplace(|x| x.max(0.0));
            } else if self.spec.output_activation == OutputActivation::Tanh {
                z.mapv_inplace(f64::tanh);
            }
            a = z;
        }
        Ok(a.to_vec())
    }

    /// Batched forward over the rows of `inputs`.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("network input", self.spec.input_dim, inputs.ncols())?;
        let last = self.weights.len() - 1;
        let mut a = self.affine(inputs, 0);
        for l in 1..=last {
            a.mapv_inplace(|x| x.max(0.0));
            a = self.affine(a.view(), l);
        }
        self.apply_output(&mut a);
        Ok(a)
    }

    /// Batched forward that keeps every layer's activations for [`Self::backward_batch`].
    pub fn forward_cached(&self, inputs: ArrayView2<f64>) -> Result<ForwardCache> {
        check_dim("network input", self.spec.input_dim, inputs.ncols())?;
        let last = self.weights.len() - 1;
        let mut layers = Vec::with_capacity(last + 2);
        layers.push(inputs.to_owned());
        for l in 0..=last {
            let mut z = self.affine(layers[l].view(), l);
            if l < last {
                z.mapv_inplace(|x| x.max(0.0));
            } else {
                self.apply_output(&mut z);
            }
            layers.push(z);
        }
        Ok(ForwardCache { layers })
    }

    fn affine(&self, a: ArrayView2<f64>, layer: usize) -> Array2<f64> {
        let mut z = a.dot(&self.weights[layer].t());
        z += &self.biases[layer];
        z
    }

    /// Reverse-mode pass for `sum_rows <upstream_row, output_row>`.
    ///
    /// Returns parameter gradients summed over the batch and the per-row input
    /// gradients.
    pub fn backward_batch(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(Error::DimensionMismatch {
                context: "upstream gradient",
                expected: out.len(),
                got: upstream.len(),
            });
        }
        let n_layers = self.weights.len();
        let mut delta = upstream.to_owned();
        if self.spec.output_activation == OutputActivation::Tanh {
            delta.zip_mut_with(out, |d, &y| *d *= 1.0 - y * y);
        }
        let mut grads = Gradients::zeros(&self.spec);
        for l in (0..n_layers).rev() {
            let a_in = &cache.layers[l];
            grads.weights[l] = delta.t().dot(a_in);
            grads.biases[l] = delta.sum_axis(Axis(0));
            let mut prev = delta.dot(&self.weights[l]);
            if l > 0 {
                prev.zip_mut_with(a_in, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = prev;
        }
        if !grads.all_finite() || !delta.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("gradient intermediate".into()));
        }
        Ok((grads, delta))
    }

    /// Gradients of `<upstream, forward(input)>` for a single input.
    pub fn gradients(&self, input: &[f64], upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        check_dim("network input", self.spec.input_dim, input.len())?;
        check_dim("upstream gradient", self.spec.output_dim, upstream.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("contiguous row");
        let cache = self.forward_cached(x)?;
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("contiguous row");
        let (g, dx) = self.backward_batch(&cache, up)?;
        Ok((g, dx.into_raw_vec_and_offset().0))
    }

    /// Apply one optimizer step; `grads` is the descent direction's gradient.
    pub fn apply_gradients<O: Optimizer + ?Sized>(&mut self, grads: &Gradients, opt: &mut O) -> Result<()> {
        check_dim("gradient layers", self.weights.len(), grads.weights.len())?;
        for (w, g) in self.weights.iter().zip(&grads.weights) {
            if w.dim() != g.dim() {
                return Err(Error::SpecMismatch(format!("gradient shape {:?} vs {:?}", g.dim(), w.dim())));
            }
        }
        opt.begin_step(self.num_params());
        let mut offset = 0;
        for l in 0..self.weights.len() {
            let p = self.weights[l].as_slice_mut().expect("standard layout");
            let g = grads.weights[l].as_slice().expect("standard layout");
            opt.update(offset, p, g);
            offset += p.len();
            let p = self.biases[l].as_slice_mut().expect("standard layout");
            let g = grads.biases[l].as_slice().expect("standard layout");
            opt.update(offset, p, g);
            offset += p.len();
        }
        Ok(())
    }

    /// `target <- (1 - tau) * target + tau * source`.
    pub fn soft_update(&mut self, source: &NetworkParams, tau: f64) -> Result<()> {
        if self.spec != source.spec {
            return Err(Error::SpecMismatch("soft update between different architectures".into()));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidConfig(format!("tau {tau} outside [0, 1]")));
        }
        for (t, s) in self.weights.iter_mut().zip(&source.weights) {
            t.zip_mut_with(s, |t, &s| *t = (1.0 - tau) * *t + tau * s);
        }
        for (t, s) in self.biases.iter_mut().zip(&source.biases) {
            t.zip_mut_with(s, |t, &s| *t = (1.0 - tau) * *t + tau * s);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> NetworkCheckpoint {
        NetworkCheckpoint {
            spec: self.spec.clone(),
            weights: self
                .weights
                .iter()
                .map(|w| w.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            biases: self.biases.iter().map(|b| b.to_vec()).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: NetworkCheckpoint) -> Result<Self> {
        let dims = ckpt.spec.layer_dims();
        check_dim("checkpoint layers", dims.len(), ckpt.weights.len())?;
        let mut weights = Vec::with_capacity(dims.len());
        for (&(fan_in, fan_out), rows) in dims.iter().zip(ckpt.weights) {
            check_dim("checkpoint weight rows", fan_out, rows.len())?;
            let mut flat = Vec::with_capacity(fan_in * fan_out);
            for row in rows {
                check_dim("checkpoint weight row", fan_in, row.len())?;
                flat.extend(row);
            }
            weights.push(Array2::from_shape_vec((fan_out, fan_in), flat).expect("checked shape"));
        }
        let biases = ckpt.biases.into_iter().map(Array1::from_vec).collect();
        Self::from_parts(ckpt.spec, weights, biases)
    }
}

impl Serialize for NetworkParams {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_checkpoint().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for NetworkParams {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let ckpt = NetworkCheckpoint::deserialize(deserializer)?;
        NetworkParams::from_checkpoint(ckpt).map_err(serde::de::Error::custom)
    }
}

/// On-disk form: spec fields plus row-major nested parameter arrays.
/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
}

/// Compare the gradients of `<upstream, net(input)>` with respect to every
/// parameter and every input coordinate against central differences of step `h`.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)` with `floor = 1e-6`, so
/// entries that are zero up to roundoff are judged on absolute error.
pub fn gradient_check(net: &NetworkParams, input: &[f64], upstream: &[f64], h: f64) -> Result<GradientCheck> {
    let (grads, dx) = net.gradients(input, upstream)?;
    let objective = |n: &NetworkParams, x: &[f64]| -> Result<f64> {
        Ok(n.forward(x)?.iter().zip(upstream).map(|(o, u)| o * u).sum())
    };
    let mut worst = GradientCheck {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
    };
    let mut record = |analytic: f64, numeric: f64| {
        let abs = (analytic - numeric).abs();
        worst.max_absolute_error = worst.max_absolute_error.max(abs);
        worst.max_relative_error = worst.max_relative_error.max(abs / analytic.abs().max(numeric.abs()).max(1e-6));
    };
    let flat = net.to_flat();
    for (i, analytic) in grads.to_flat().into_iter().enumerate() {
        let mut p = flat.clone();
        p[i] = flat[i] + h;
        let plus = objective(&NetworkParams::from_flat(net.spec.clone(), &p)?, input)?;
        p[i] = flat[i] - h;
        let minus = objective(&NetworkParams::from_flat(net.spec.clone(), &p)?, input)?;
        record(analytic, (plus - minus) / (2.0 * h));
    }
    let mut x = input.to_vec();
    for (i, &analytic) in dx.iter().enumerate() {
        x[i] = input[i] + h;
        let plus = objective(net, &x)?;
        x[i] = input[i] - h;
        let minus = objective(net, &x)?;
        x[i] = input[i];
        record(analytic, (plus - minus) / (2.0 * h));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub spec: NetworkSpec,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}
