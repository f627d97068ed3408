//! Feed-forward binary classifier with hand-written forward and backward
//! passes.
//!
//! Parameters live in one flat vector. Layer `l` occupies a row-major
//! `out x in` weight block followed by its `out` biases. The network emits a
//! single logit; everything before the last layer is the representation and
//! the last layer is the classifier head.

use std::fmt::Write as _;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_at_output(self, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Gradient with the same flat layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    dims: Vec<usize>,
    values: Vec<f64>,
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::validation(format!(
            "layer sizes {dims:?} need an input and an output size"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::validation(format!("layer sizes {dims:?} contain zero")));
    }
    if *dims.last().unwrap() != 1 {
        return Err(Error::validation(format!(
            "final layer size must be 1 (single logit), got {dims:?}"
        )));
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases, ReLU hidden layers and an identity
/// output layer.
pub fn init_mlp(dims: &[usize], seed: u64) -> Result<ModelParams> {
    check_dims(dims)?;
    let mut rng = seed::rng(seed);
    let mut params = Vec::with_capacity(param_count(dims));
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        params.extend((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)));
        params.extend(std::iter::repeat_n(0.0, fan_out));
    }
    let mut activations = vec![Activation::Relu; dims.len() - 2];
    activations.push(Activation::Identity);
    ModelParams::new(dims.to_vec(), activations, params)
}

pub(crate) struct Workspace {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl ModelParams {
    pub fn new(dims: Vec<usize>, activations: Vec<Activation>, params: Vec<f64>) -> Result<Self> {
        check_dims(&dims)?;
        if activations.len() != dims.len() - 1 {
            return Err(Error::validation(format!(
                "{} activations for {} layers",
                activations.len(),
                dims.len() - 1
            )));
        }
        if params.len() != param_count(&dims) {
            return Err(Error::validation(format!(
                "{} parameters for layer sizes {dims:?}, expected {}",
                params.len(),
                param_count(&dims)
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::validation("non-finite parameter"));
        }
        Ok(ModelParams {
            dims,
            activations,
            params,
        })
    }

    /// Builds a model from explicit `(weights, bias, activation)` layers.
    pub fn from_layers(n_in: usize, layers: Vec<(Vec<f64>, Vec<f64>, Activation)>) -> Result<Self> {
        let mut dims = vec![n_in];
        let mut activations = Vec::new();
        let mut params = Vec::new();
        for (w, b, act) in layers {
            let fan_in = *dims.last().unwrap();
            if w.len() != b.len() * fan_in {
                return Err(Error::validation(format!(
                    "layer {} has {} weights for {} inputs and {} outputs",
                    dims.len() - 1,
                    w.len(),
                    fan_in,
                    b.len()
                )));
            }
            dims.push(b.len());
            activations.push(act);
            params.extend(w);
            params.extend(b);
        }
        ModelParams::new(dims, activations, params)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn n_inputs(&self) -> usize {
        self.dims[0]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(weights, bias)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (start, n_in, n_out) = self.layer_offset(l);
        let w_end = start + n_in * n_out;
        (&self.params[start..w_end], &self.params[w_end..w_end + n_out])
    }

    fn layer_offset(&self, l: usize) -> (usize, usize, usize) {
        let start = param_count(&self.dims[..=l]);
        (start, self.dims[l], self.dims[l + 1])
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            dims: self.dims.clone(),
            values: vec![0.0; self.params.len()],
        }
    }

    pub(crate) fn workspace(&self) -> Workspace {
        let width = *self.dims.iter().max().unwrap();
        Workspace {
            acts: self.dims.iter().map(|&d| vec![0.0; d]).collect(),
            delta: Vec::with_capacity(width),
            delta_prev: Vec::with_capacity(width),
        }
    }

    fn check_input(&self, x: &[f64], n_features: usize) -> Result<usize> {
        if n_features != self.n_inputs() {
            return Err(Error::validation(format!(
                "input has {n_features} columns, model expects {}",
                self.n_inputs()
            )));
        }
        if x.len() % n_features != 0 {
            return Err(Error::validation("input length is not a multiple of the column count"));
        }
        Ok(x.len() / n_features)
    }

    pub(crate) fn forward_sample(&self, x: &[f64], ws: &mut Workspace) -> f64 {
        ws.acts[0].copy_from_slice(x);
        let mut offset = 0;
        for l in 0..self.activations.len() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let (before, after) = ws.acts.split_at_mut(l + 1);
            let input = &before[l];
            let out = &mut after[0];
            let act = self.activations[l];
            for (o, (row, &bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
                let pre = row.iter().zip(input).fold(bias, |acc, (wi, xi)| acc + wi * xi);
                *o = act.apply(pre);
            }
            offset += n_in * n_out + n_out;
        }
        ws.acts.last().unwrap()[0]
    }

    /// Input of the last layer for the sample last passed through
    /// [`forward_sample`](Self::forward_sample).
    pub(crate) fn head_input<'a>(&self, ws: &'a Workspace) -> &'a [f64] {
        &ws.acts[ws.acts.len() - 2]
    }

    /// Adds `coeff * d(logit)/d(theta)` for the sample last passed through
    /// [`forward_sample`](Self::forward_sample).
    pub(crate) fn backprop_sample(&self, coeff: f64, ws: &mut Workspace, grads: &mut [f64]) {
        ws.delta.clear();
        ws.delta.push(coeff);
        let mut end = self.params.len();
        for l in (0..self.activations.len()).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let start = end - n_in * n_out - n_out;
            let act = self.activations[l];
            let out = &ws.acts[l + 1];
            for (d, &o) in ws.delta.iter_mut().zip(out) {
                *d *= act.derivative_at_output(o);
            }
            let input = &ws.acts[l];
            let (gw, gb) = grads[start..end].split_at_mut(n_in * n_out);
            for ((grow, gbias), &d) in gw.chunks_exact_mut(n_in).zip(gb.iter_mut()).zip(&ws.delta) {
                if d == 0.0 {
                    continue;
                }
                *gbias += d;
                for (g, &xi) in grow.iter_mut().zip(input) {
                    *g += d * xi;
                }
            }
            if l > 0 {
                let w = &self.params[start..start + n_in * n_out];
                ws.delta_prev.clear();
                ws.delta_prev.resize(n_in, 0.0);
                for (row, &d) in w.chunks_exact(n_in).zip(&ws.delta) {
                    if d == 0.0 {
                        continue;
                    }
                    for (p, &wi) in ws.delta_prev.iter_mut().zip(row) {
                        *p += d * wi;
                    }
                }
                std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
            }
            end = start;
        }
    }

    /// Logits for a row-major batch.
    pub fn forward(&self, x: &[f64], n_features: usize) -> Result<Vec<f64>> {
        let n = self.check_input(x, n_features)?;
        let mut ws = self.workspace();
        Ok((0..n)
            .map(|i| self.forward_sample(&x[i * n_features..(i + 1) * n_features], &mut ws))
            .collect())
    }

    /// Logits for rows `idx` of a row-major matrix.
    pub fn forward_rows(&self, x: &[f64], n_features: usize, idx: &[usize]) -> Result<Vec<f64>> {
        self.check_input(x, n_features)?;
        let mut ws = self.workspace();
        Ok(idx
            .iter()
            .map(|&i| self.forward_sample(&x[i * n_features..(i + 1) * n_features], &mut ws))
            .collect())
    }

    /// Gradient of `sum_k coeff(k, z_k) * z_k` over rows `idx`, where the
    /// coefficient is treated as a constant. Both the weighted cross-entropy
    /// gradient and the IRM penalty gradient reduce to this form.
    pub fn logit_weighted_gradient<F>(
        &self,
        x: &[f64],
        n_features: usize,
        idx: &[usize],
        mut coeff: F,
    ) -> Result<Gradients>
    where
        F: FnMut(usize, f64) -> f64,
    {
        self.check_input(x, n_features)?;
        let mut grads = self.zero_gradients();
        let mut ws = self.workspace();
        for (k, &i) in idx.iter().enumerate() {
            let z = self.forward_sample(&x[i * n_features..(i + 1) * n_features], &mut ws);
            let c = coeff(k, z);
            if c != 0.0 {
                self.backprop_sample(c, &mut ws, &mut grads.values);
            }
        }
        Ok(grads)
    }

    /// Labels from logits: 1 iff the logit is strictly positive.
    pub fn predict(&self, x: &[f64], n_features: usize) -> Result<Vec<u8>> {
        Ok(self.forward(x, n_features)?.into_iter().map(|z| u8::from(z > 0.0)).collect())
    }

    /// Weighted cross-entropy and its gradient over a row-major batch.
    pub fn backward(
        &self,
        x: &[f64],
        n_features: usize,
        labels: &[u8],
        weights: &[f64],
    ) -> Result<(f64, Gradients)> {
        let n = self.check_input(x, n_features)?;
        check_lengths(n, labels.len(), weights.len())?;
        let scale = 1.0 / n as f64;
        let mut loss = 0.0;
        let idx: Vec<usize> = (0..n).collect();
        let grads = self.logit_weighted_gradient(x, n_features, &idx, |k, z| {
            let y = f64::from(labels[k]);
            loss += weights[k] * cross_entropy(z, labels[k]);
            weights[k] * (sigmoid(z) - y) * scale
        })?;
        Ok((loss * scale, grads))
    }

    /// Text checkpoint: dims and activations, then one line per weight row
    /// and one bias line per layer. Values use the shortest representation
    /// that parses back to the same bits.
    pub fn to_text(&self) -> String {
        let mut out = String::from("suffice-mlp 1\n");
        let dims: Vec<String> = self.dims.iter().map(ToString::to_string).collect();
        let acts: Vec<&str> = self.activations.iter().map(|a| a.name()).collect();
        writeln!(out, "dims {}", dims.join(" ")).unwrap();
        writeln!(out, "activations {}", acts.join(" ")).unwrap();
        for l in 0..self.activations.len() {
            let (w, b) = self.layer(l);
            for row in w.chunks_exact(self.dims[l]) {
                writeln!(out, "{}", join_floats(row)).unwrap();
            }
            writeln!(out, "{}", join_floats(b)).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::validation(format!("model checkpoint: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some("suffice-mlp 1") {
            return Err(bad("missing header"));
        }
        let dims: Vec<usize> = lines
            .next()
            .and_then(|l| l.strip_prefix("dims "))
            .ok_or_else(|| bad("missing dims line"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad dimension")))
            .collect::<Result<_>>()?;
        let activations: Vec<Activation> = lines
            .next()
            .and_then(|l| l.strip_prefix("activations "))
            .ok_or_else(|| bad("missing activations line"))?
            .split_whitespace()
            .map(|t| match t {
                "relu" => Ok(Activation::Relu),
                "identity" => Ok(Activation::Identity),
                _ => Err(bad("unknown activation")),
            })
            .collect::<Result<_>>()?;
        let mut params = Vec::new();
        for line in lines {
            for tok in line.split_whitespace() {
                params.push(tok.parse::<f64>().map_err(|_| bad("bad number"))?);
            }
        }
        ModelParams::new(dims, activations, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ModelParams::from_text(&std::fs::read_to_string(path)?)
    }
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

impl Gradients {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum()
    }
}

fn check_lengths(n: usize, labels: usize, weights: usize) -> Result<()> {
    if labels != n || weights != n {
        return Err(Error::validation(format!(
            "{n} samples, {labels} labels, {weights} weights"
        )));
    }
    Ok(())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy of `sigmoid(z)` against `y`.
pub fn cross_entropy(z: f64, y: u8) -> f64 {
    softplus(z) - f64::from(y) * z
}

/// `(1/n) sum_i w_i ce_i`.
pub fn weighted_ce_loss(logits: &[f64], labels: &[u8], weights: &[f64]) -> Result<f64> {
    let n = logits.len();
    check_lengths(n, labels.len(), weights.len())?;
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = logits
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((&z, &y), &w)| w * cross_entropy(z, y))
        .sum();
    Ok(total / n as f64)
}
