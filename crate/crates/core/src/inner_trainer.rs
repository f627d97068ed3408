//! Inner loop: weighted empirical risk minimization by mini-batch SGD with
//! heavy-ball momentum.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{partition_by_group, Dataset};
use crate::error::{Error, Result};
use crate::irm_risk::{risk_gradient, RiskConfig};
use crate::model::{cross_entropy, sigmoid, Gradients, ModelParams};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerConfig {
    /// Upper bound on passes over the selected samples.
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Stop once consecutive epoch losses differ by less than this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for InnerConfig {
    fn default() -> Self {
        InnerConfig {
            epochs: 100,
            lr: 0.1,
            momentum: 0.9,
            batch_size: 64,
            tol: 1e-5,
            seed: 0,
        }
    }
}

impl InnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("inner epochs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(format!("inner lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation(format!(
                "momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::validation("tol must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub model: ModelParams,
    pub epoch_losses: Vec<f64>,
    pub epochs_run: usize,
    pub converged: bool,
}

/// `v <- momentum * v + g; theta <- theta - lr * v`.
struct HeavyBall {
    lr: f64,
    momentum: f64,
    velocity: Vec<f64>,
}

impl HeavyBall {
    fn new(cfg: &InnerConfig, n_params: usize) -> Self {
        HeavyBall {
            lr: cfg.lr,
            momentum: cfg.momentum,
            velocity: vec![0.0; n_params],
        }
    }

    fn step(&mut self, model: &mut ModelParams, grads: &Gradients) {
        for ((p, v), &g) in model
            .params_mut()
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .zip(grads.values())
        {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }
}

/// Minimizes `(1/b) sum_i w_i ce_i` over mini-batches of the samples with
/// positive weight. Zero-weight samples never enter a batch, so a binary
/// weight vector trains exactly as the filtered dataset would.
pub fn train_weighted_erm(
    init: ModelParams,
    ds: &Dataset,
    weights: &[f64],
    cfg: &InnerConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if weights.len() != ds.len() {
        return Err(Error::validation(format!(
            "{} weights for {} samples",
            weights.len(),
            ds.len()
        )));
    }
    if let Some(i) = weights.iter().position(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::validation(format!("weight at {i} is negative or non-finite")));
    }
    let active: Vec<usize> = (0..ds.len()).filter(|&i| weights[i] > 0.0).collect();
    if active.is_empty() {
        return Err(Error::validation("empty selected set: every weight is zero"));
    }

    let mut model = init;
    let x = ds.features();
    let d = ds.n_features();
    let labels = ds.labels();
    let mut opt = HeavyBall::new(cfg, model.params().len());
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..active.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut epoch_losses = Vec::new();
    let mut converged = false;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&k| active[k]));
            let scale = 1.0 / batch.len() as f64;
            let grads = model.logit_weighted_gradient(x, d, &batch, |k, z| {
                let i = batch[k];
                total += weights[i] * cross_entropy(z, labels[i]);
                weights[i] * (sigmoid(z) - f64::from(labels[i])) * scale
            })?;
            opt.step(&mut model, &grads);
        }
        let loss = total / active.len() as f64;
        let plateau = epoch_losses
            .last()
            .is_some_and(|&prev: &f64| (prev - loss).abs() < cfg.tol);
        epoch_losses.push(loss);
        if !loss.is_finite() {
            return Err(Error::validation("inner training diverged (non-finite loss)"));
        }
        if plateau {
            converged = true;
            break;
        }
    }

    Ok(TrainReport {
        model,
        epochs_run: epoch_losses.len(),
        epoch_losses,
        converged,
    })
}

/// Mini-batches that each contain every group: each group's shuffled indices
/// are cut into the same number of contiguous chunks.
fn group_stratified_batches(
    members: &mut [Vec<usize>],
    n: usize,
    batch_size: usize,
    rng: &mut seed::Rng,
) -> Vec<Vec<usize>> {
    let smallest = members.iter().map(Vec::len).min().unwrap_or(0);
    let n_batches = n.div_ceil(batch_size).clamp(1, smallest.max(1));
    let mut batches = vec![Vec::with_capacity(batch_size); n_batches];
    for group in members.iter_mut() {
        group.shuffle(rng);
        let len = group.len();
        for (b, batch) in batches.iter_mut().enumerate() {
            batch.extend_from_slice(&group[b * len / n_batches..(b + 1) * len / n_batches]);
        }
    }
    batches
}

/// Baseline that trains the network directly on the outer risk
/// (`sum_e L_e + lambda * penalty`) instead of reweighting samples.
pub fn train_irm_regularized(
    init: ModelParams,
    ds: &Dataset,
    cfg: &InnerConfig,
    risk: &RiskConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    risk.validate()?;
    let mut model = init;
    let mut opt = HeavyBall::new(cfg, model.params().len());
    let mut rng = seed::rng(cfg.seed);
    let mut members = partition_by_group(ds);
    let mut epoch_losses = Vec::new();
    let mut converged = false;

    for _ in 0..cfg.epochs {
        let batches = group_stratified_batches(&mut members, ds.len(), cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for batch in &batches {
            let (value, grads) = risk_gradient(&model, ds, batch, risk)?;
            total += value.total;
            opt.step(&mut model, &grads);
        }
        let loss = total / batches.len() as f64;
        if !loss.is_finite() {
            return Err(Error::validation("IRM training diverged (non-finite risk)"));
        }
        let plateau = epoch_losses
            .last()
            .is_some_and(|&prev: &f64| (prev - loss).abs() < cfg.tol);
        epoch_losses.push(loss);
        if plateau {
            converged = true;
            break;
        }
    }

    Ok(TrainReport {
        model,
        epochs_run: epoch_losses.len(),
        epoch_losses,
        converged,
    })
}
