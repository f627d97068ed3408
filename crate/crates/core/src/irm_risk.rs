//! Outer risks over sensitive groups: per-environment losses plus either the
//! IRMv1 gradient penalty or the REx variance penalty.
//!
//! The IRMv1 penalty uses the dummy scalar classifier: every logit `z` is
//! scaled by `t`, and the penalty for environment `e` is the squared
//! derivative of its mean loss in `t` at `t = 1`,
//! `g_e = mean_e[(sigmoid(z_i) - y_i) * z_i]`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{cross_entropy, sigmoid, Gradients, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskVariant {
    #[serde(alias = "IRMv1")]
    Irmv1,
    #[serde(alias = "REx")]
    Rex,
}

/// How the IRMv1 penalty parameterizes the classifier it differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// Scalar multiplier on the logit.
    DummyScalar,
    /// Weights and bias of the final layer.
    LastLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskConfig {
    pub variant: RiskVariant,
    pub lambda: f64,
    /// Size of the outer mini-batch drawn each iteration.
    pub eval_batch: usize,
    pub penalty: PenaltyMode,
}

impl Default for RiskConfig {
    fn default() -> Self {
        RiskConfig {
            variant: RiskVariant::Irmv1,
            lambda: 1.0,
            eval_batch: 512,
            penalty: PenaltyMode::DummyScalar,
        }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::validation(format!("lambda {} must be non-negative", self.lambda)));
        }
        if self.eval_batch == 0 {
            return Err(Error::validation("eval_batch must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskValue {
    pub total: f64,
    pub env_losses: Vec<f64>,
    pub penalty: f64,
}

/// Per-group statistics of the rows in `idx`.
struct EnvStats {
    logits: Vec<f64>,
    counts: Vec<usize>,
    losses: Vec<f64>,
    /// Dummy-scalar derivative per environment.
    dummy_grads: Vec<f64>,
}

fn env_stats(model: &ModelParams, ds: &Dataset, idx: &[usize]) -> Result<EnvStats> {
    if idx.is_empty() {
        return Err(Error::validation("empty index set"));
    }
    let logits = model.forward_rows(ds.features(), ds.n_features(), idx)?;
    let g = ds.n_groups();
    let mut counts = vec![0usize; g];
    let mut losses = vec![0.0; g];
    let mut dummy_grads = vec![0.0; g];
    for (&i, &z) in idx.iter().zip(&logits) {
        let e = ds.groups()[i];
        let y = ds.labels()[i];
        counts[e] += 1;
        losses[e] += cross_entropy(z, y);
        dummy_grads[e] += (sigmoid(z) - f64::from(y)) * z;
    }
    if let Some(group) = counts.iter().position(|&c| c == 0) {
        return Err(Error::DegenerateBatch { group });
    }
    for e in 0..g {
        losses[e] /= counts[e] as f64;
        dummy_grads[e] /= counts[e] as f64;
    }
    Ok(EnvStats {
        logits,
        counts,
        losses,
        dummy_grads,
    })
}

/// Mean cross-entropy of each group over the rows in `idx`.
pub fn env_losses(model: &ModelParams, ds: &Dataset, idx: &[usize]) -> Result<Vec<f64>> {
    Ok(env_stats(model, ds, idx)?.losses)
}

/// `sum_e g_e^2` with the dummy scalar classifier.
pub fn irmv1_penalty(model: &ModelParams, ds: &Dataset, idx: &[usize]) -> Result<f64> {
    Ok(env_stats(model, ds, idx)?.dummy_grads.iter().map(|g| g * g).sum())
}

/// `sum_e ||d L_e / d(head weights, head bias)||^2`.
pub fn last_layer_penalty(model: &ModelParams, ds: &Dataset, idx: &[usize]) -> Result<f64> {
    let stats = env_stats(model, ds, idx)?;
    let width = model.dims()[model.dims().len() - 2];
    let mut grads = vec![vec![0.0; width + 1]; ds.n_groups()];
    let mut ws = model.workspace();
    for &i in idx {
        let z = model.forward_sample(ds.row(i), &mut ws);
        let e = ds.groups()[i];
        let r = (sigmoid(z) - f64::from(ds.labels()[i])) / stats.counts[e] as f64;
        let g = &mut grads[e];
        for (gj, &h) in g.iter_mut().zip(model.head_input(&ws)) {
            *gj += r * h;
        }
        g[width] += r;
    }
    Ok(grads.iter().flatten().map(|g| g * g).sum())
}

fn population_variance(values: &[f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64
}

/// Combines environment losses with the configured penalty.
pub fn compute_risk(model: &ModelParams, ds: &Dataset, idx: &[usize], cfg: &RiskConfig) -> Result<RiskValue> {
    let stats = env_stats(model, ds, idx)?;
    let penalty = match (cfg.variant, cfg.penalty) {
        (RiskVariant::Irmv1, PenaltyMode::DummyScalar) => stats.dummy_grads.iter().map(|g| g * g).sum(),
        (RiskVariant::Irmv1, PenaltyMode::LastLayer) => last_layer_penalty(model, ds, idx)?,
        (RiskVariant::Rex, _) => population_variance(&stats.losses),
    };
    Ok(risk_value(stats.losses, penalty, cfg.lambda))
}

/// Builds a [`RiskValue`] from precomputed environment losses.
pub fn risk_value(env_losses: Vec<f64>, penalty: f64, lambda: f64) -> RiskValue {
    let total = env_losses.iter().sum::<f64>() + lambda * penalty;
    RiskValue {
        total,
        env_losses,
        penalty,
    }
}

/// REx risk from environment losses alone.
pub fn rex_from_losses(env_losses: Vec<f64>, lambda: f64) -> RiskValue {
    let penalty = population_variance(&env_losses);
    risk_value(env_losses, penalty, lambda)
}

/// Risk and its exact gradient with respect to the model parameters.
///
/// The penalty depends on the parameters only through the logits, so the
/// gradient is a per-sample combination of logit gradients. The last-layer
/// penalty is not supported here.
pub fn risk_gradient(
    model: &ModelParams,
    ds: &Dataset,
    idx: &[usize],
    cfg: &RiskConfig,
) -> Result<(RiskValue, Gradients)> {
    if cfg.variant == RiskVariant::Irmv1 && cfg.penalty == PenaltyMode::LastLayer {
        return Err(Error::Config(
            "risk gradient is only available for the dummy-scalar IRMv1 penalty and REx".into(),
        ));
    }
    let stats = env_stats(model, ds, idx)?;
    let n_env = stats.losses.len() as f64;
    let mean_loss = stats.losses.iter().sum::<f64>() / n_env;

    let coeffs: Vec<f64> = idx
        .iter()
        .zip(&stats.logits)
        .map(|(&i, &z)| {
            let e = ds.groups()[i];
            let y = f64::from(ds.labels()[i]);
            let n_e = stats.counts[e] as f64;
            let p = sigmoid(z);
            match (cfg.variant, cfg.penalty) {
                (RiskVariant::Irmv1, PenaltyMode::DummyScalar) => {
                    let dg = p * (1.0 - p) * z + p - y;
                    ((p - y) + cfg.lambda * 2.0 * stats.dummy_grads[e] * dg) / n_e
                }
                (RiskVariant::Rex, _) => {
                    let dvar = 2.0 / n_env * (stats.losses[e] - mean_loss);
                    (1.0 + cfg.lambda * dvar) * (p - y) / n_e
                }
                (RiskVariant::Irmv1, PenaltyMode::LastLayer) => unreachable!(),
            }
        })
        .collect();

    let grads = model.logit_weighted_gradient(ds.features(), ds.n_features(), idx, |k, _| coeffs[k])?;
    let penalty = match cfg.variant {
        RiskVariant::Irmv1 => stats.dummy_grads.iter().map(|g| g * g).sum(),
        RiskVariant::Rex => population_variance(&stats.losses),
    };
    Ok((risk_value(stats.losses, penalty, cfg.lambda), grads))
}
