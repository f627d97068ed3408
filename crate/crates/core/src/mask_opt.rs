//! Outer loop: learning per-sample inclusion probabilities.
//!
//! Each training sample `i` is kept with probability `s_i`, independently.
//! The objective is the expected outer risk of the model trained on the
//! sampled subset. Its gradient is estimated without differentiating through
//! training: `R(m) * d ln p(m | s) / ds`, which is unbiased for the gradient
//! of `E_m[R(m)]`. After each step `s` is projected back onto
//! `{0 <= s_i <= 1, sum_i s_i <= K}`.
//!
//! Random streams derived from `OuterConfig::seed`: mask draws, outer
//! mini-batch draws and the final mask draw each own a stream. The production
//! evaluator derives one seed per iteration for the fresh inner model.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{largest_remainder, partition_by_group, Dataset};
use crate::error::{Error, Result};
use crate::inner_trainer::{train_weighted_erm, InnerConfig, TrainReport};
use crate::irm_risk::{compute_risk, RiskConfig};
use crate::model::init_mlp;
use crate::seed::{self, tags};

/// Per-sample inclusion probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation(format!(
                "probability {} at {i} outside [0, 1]",
                values[i]
            )));
        }
        Ok(ProbabilityVector(values))
    }

    pub fn uniform(n: usize, value: f64) -> Self {
        ProbabilityVector(vec![value; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Fraction of entries strictly inside `(lo, hi)`.
    pub fn fraction_between(&self, lo: f64, hi: f64) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().filter(|&&v| v > lo && v < hi).count() as f64 / self.0.len() as f64
    }
}

/// Binary inclusion vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask(Vec<bool>);

impl Mask {
    pub fn new(bits: Vec<bool>) -> Self {
        Mask(bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of selected samples.
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn selected(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn as_weights(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterOptimizer {
    ProjectedSgd,
    ProjectedAdam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuterConfig {
    /// Selection budget.
    #[serde(alias = "K")]
    pub k: usize,
    /// Number of outer iterations.
    #[serde(alias = "T")]
    pub iters: usize,
    pub optimizer: OuterOptimizer,
    pub lr: f64,
    pub cosine_schedule: bool,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    /// Probabilities are clamped into `[eps, 1 - eps]` before dividing.
    pub prob_clamp: f64,
    /// Subtract a moving average of past risks from the current risk.
    pub baseline: bool,
    pub seed: u64,
    /// Keep a copy of `s` every this many iterations.
    pub snapshot_every: usize,
}

impl Default for OuterConfig {
    fn default() -> Self {
        OuterConfig {
            k: 800,
            iters: 500,
            optimizer: OuterOptimizer::ProjectedAdam,
            lr: 2.5,
            cosine_schedule: true,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            prob_clamp: 1e-4,
            baseline: false,
            seed: 0,
            snapshot_every: 50,
        }
    }
}

/// Decay of the moving-average baseline.
const BASELINE_DECAY: f64 = 0.9;
/// Redraws allowed when a sampled mask selects nothing.
const MAX_EMPTY_REDRAWS: usize = 100;

impl OuterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::validation("selection budget K must be positive"));
        }
        if self.iters == 0 {
            return Err(Error::validation("outer iterations must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(format!("outer lr {} must be non-negative", self.lr)));
        }
        if !self.adam_betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::validation("adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::validation("adam_eps must be positive"));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return Err(Error::validation("prob_clamp must lie in (0, 0.5)"));
        }
        if self.snapshot_every == 0 {
            return Err(Error::validation("snapshot_every must be positive"));
        }
        Ok(())
    }

    /// Step size for zero-based step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.cosine_schedule {
            let frac = t as f64 / self.iters as f64;
            self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        } else {
            self.lr
        }
    }
}

/// Independent Bernoulli draw per coordinate.
pub fn sample_mask(s: &ProbabilityVector, rng: &mut seed::Rng) -> Mask {
    Mask(s.0.iter().map(|&p| rng.random::<f64>() < p).collect())
}

/// `d ln p(m | s) / d s_i = m_i / s_i - (1 - m_i) / (1 - s_i)`, with `s`
/// clamped into `[eps, 1 - eps]`.
pub fn log_prob_grad(s: &ProbabilityVector, m: &Mask, eps: f64) -> Vec<f64> {
    s.0.iter()
        .zip(&m.0)
        .map(|(&p, &bit)| {
            let p = p.clamp(eps, 1.0 - eps);
            if bit {
                1.0 / p
            } else {
                -1.0 / (1.0 - p)
            }
        })
        .collect()
}

const PROJECTION_TOL: f64 = 1e-10;
const PROJECTION_MAX_ITERS: usize = 200;

fn capped_sum(v: &[f64], mu: f64) -> f64 {
    v.iter().map(|x| (x - mu).clamp(0.0, 1.0)).sum()
}

/// Euclidean projection onto `{0 <= s_i <= 1, sum_i s_i <= budget}`.
///
/// If clipping to the box already meets the budget that is the answer.
/// Otherwise the budget constraint is active and the solution is
/// `clip(v - mu, 0, 1)` for the shift `mu > 0` that makes the sum equal the
/// budget; `mu` is found by bisection and then polished by solving the
/// linear equation on the final active set.
pub fn project_capped_box(v: &[f64], budget: usize) -> ProbabilityVector {
    project_capped_box_real(v, budget as f64)
}

pub fn project_capped_box_real(v: &[f64], budget: f64) -> ProbabilityVector {
    let clipped: Vec<f64> = v.iter().map(|x| x.clamp(0.0, 1.0)).collect();
    if clipped.iter().sum::<f64>() <= budget {
        return ProbabilityVector(clipped);
    }
    let mut lo = 0.0;
    let mut hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut mu = 0.5 * (lo + hi);
    for _ in 0..PROJECTION_MAX_ITERS {
        mu = 0.5 * (lo + hi);
        let sum = capped_sum(v, mu);
        if (sum - budget).abs() <= PROJECTION_TOL {
            break;
        }
        if sum > budget {
            lo = mu;
        } else {
            hi = mu;
        }
    }

    // sum = sum_{free} (v_i - mu) + #capped, linear in mu on a fixed active set
    let mut free_sum = 0.0;
    let mut free = 0usize;
    let mut capped = 0usize;
    for &x in v {
        let y = x - mu;
        if y >= 1.0 {
            capped += 1;
        } else if y > 0.0 {
            free_sum += x;
            free += 1;
        }
    }
    if free > 0 {
        let polished = (free_sum + capped as f64 - budget) / free as f64;
        if (capped_sum(v, polished) - budget).abs() <= (capped_sum(v, mu) - budget).abs() {
            mu = polished;
        }
    }
    ProbabilityVector(v.iter().map(|x| (x - mu).clamp(0.0, 1.0)).collect())
}

/// Optimizer state carried across outer steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OuterState {
    /// Completed steps.
    pub step: usize,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    baseline: Option<f64>,
}

impl OuterState {
    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }
}

/// One projected update of `s` from a single mask and its risk.
///
/// With the baseline enabled the first step uses the current risk as its
/// own baseline (a zero update); later steps subtract the moving average of
/// the risks seen before them.
pub fn outer_step(
    s: &ProbabilityVector,
    m: &Mask,
    risk: f64,
    cfg: &OuterConfig,
    state: &mut OuterState,
) -> ProbabilityVector {
    let centered = if cfg.baseline {
        let b = state.baseline.unwrap_or(risk);
        state.baseline = Some(BASELINE_DECAY * b + (1.0 - BASELINE_DECAY) * risk);
        risk - b
    } else {
        risk
    };
    let score = log_prob_grad(s, m, cfg.prob_clamp);
    let lr = cfg.lr_at(state.step);
    state.step += 1;

    let direction: Vec<f64> = match cfg.optimizer {
        OuterOptimizer::ProjectedSgd => score.iter().map(|sc| centered * sc).collect(),
        OuterOptimizer::ProjectedAdam => {
            let n = s.len();
            if state.adam_m.len() != n {
                state.adam_m = vec![0.0; n];
                state.adam_v = vec![0.0; n];
            }
            let [b1, b2] = cfg.adam_betas;
            let t = state.step as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            score
                .iter()
                .zip(state.adam_m.iter_mut().zip(state.adam_v.iter_mut()))
                .map(|(sc, (m1, m2))| {
                    let g = centered * sc;
                    *m1 = b1 * *m1 + (1.0 - b1) * g;
                    *m2 = b2 * *m2 + (1.0 - b2) * g * g;
                    (*m1 / c1) / ((*m2 / c2).sqrt() + cfg.adam_eps)
                })
                .collect()
        }
    };
    let moved: Vec<f64> = s.0.iter().zip(&direction).map(|(p, d)| p - lr * d).collect();
    project_capped_box(&moved, cfg.k)
}

/// Draws the output mask from `s`, keeping at most `k` samples (largest
/// `s` first, ties to the lower index) and at least one (the largest `s`).
pub fn finalize_mask(s: &ProbabilityVector, k: usize, rng: &mut seed::Rng) -> Mask {
    let mut mask = sample_mask(s, rng);
    let by_prob = |a: &usize, b: &usize| s.0[*b].total_cmp(&s.0[*a]).then(a.cmp(b));
    let count = mask.count();
    if count > k {
        let mut chosen = mask.selected();
        chosen.sort_by(by_prob);
        for &i in &chosen[k..] {
            mask.0[i] = false;
        }
    } else if count == 0 && !s.is_empty() {
        let best = (0..s.len()).min_by(by_prob).unwrap();
        mask.0[best] = true;
    }
    mask
}

/// Outer risk of the model trained on a masked training set.
pub trait RiskEvaluator {
    /// `batch` indexes the outer dataset; `iteration` is zero-based.
    fn risk(&mut self, mask: &Mask, batch: &[usize], iteration: usize) -> Result<f64>;
}

impl<F> RiskEvaluator for F
where
    F: FnMut(&Mask, &[usize], usize) -> Result<f64>,
{
    fn risk(&mut self, mask: &Mask, batch: &[usize], iteration: usize) -> Result<f64> {
        self(mask, batch, iteration)
    }
}

/// Trains a fresh model on the masked training set, then evaluates the
/// configured risk on the outer batch.
pub struct TrainedRisk<'a> {
    pub train: &'a Dataset,
    pub outer: &'a Dataset,
    pub inner: InnerConfig,
    pub risk: RiskConfig,
    pub dims: Vec<usize>,
    pub seed: u64,
}

impl TrainedRisk<'_> {
    /// Inner solve for `iteration`, seeded independently of other iterations.
    pub fn train(&self, mask: &Mask, iteration: usize) -> Result<TrainReport> {
        let it_seed = seed::derive(self.seed, iteration as u64);
        let init = init_mlp(&self.dims, seed::derive(it_seed, tags::INIT))?;
        let cfg = InnerConfig {
            seed: seed::derive(it_seed, tags::SHUFFLE),
            ..self.inner.clone()
        };
        train_weighted_erm(init, self.train, &mask.as_weights(), &cfg)
    }
}

impl RiskEvaluator for TrainedRisk<'_> {
    fn risk(&mut self, mask: &Mask, batch: &[usize], iteration: usize) -> Result<f64> {
        let report = self.train(mask, iteration)?;
        Ok(compute_risk(&report.model, self.outer, batch, &self.risk)?.total)
    }
}

/// Outer mini-batch containing at least one sample of every group, with the
/// rest allocated in proportion to group size. The whole dataset when `size`
/// is at least its length.
pub fn stratified_batch(ds: &Dataset, size: usize, rng: &mut seed::Rng) -> Result<Vec<usize>> {
    let groups = partition_by_group(ds);
    if size < groups.len() {
        return Err(Error::Config(format!(
            "outer batch of {size} cannot hold all {} groups",
            groups.len()
        )));
    }
    if size >= ds.len() {
        return Ok((0..ds.len()).collect());
    }
    let shares: Vec<f64> = groups.iter().map(|g| g.len() as f64 / ds.len() as f64).collect();
    let mut quota = largest_remainder(size, &shares);
    for g in 0..quota.len() {
        if quota[g] == 0 {
            let donor = (0..quota.len()).max_by_key(|&j| (quota[j], std::cmp::Reverse(j))).unwrap();
            quota[donor] -= 1;
            quota[g] = 1;
        }
    }
    let mut batch = Vec::with_capacity(size);
    for (members, &q) in groups.iter().zip(&quota) {
        batch.extend(index::sample(rng, members.len(), q).into_iter().map(|k| members[k]));
    }
    batch.sort_unstable();
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectResult {
    pub final_s: ProbabilityVector,
    pub final_mask: Mask,
    /// `(t, s^t)` snapshots, where `s^t` is what iteration `t` (one-based)
    /// sampled from; the last entry is `(T + 1, final_s)`.
    pub s_history: Vec<(usize, ProbabilityVector)>,
    pub risk_history: Vec<f64>,
    /// Per iteration, the share of the sampled mask in each (group, label)
    /// cell, ordered group-major.
    pub group_weight_history: Vec<Vec<f64>>,
    /// Fraction of `s^t` strictly inside (0.05, 0.95) for `t = 1..=T + 1`.
    pub polarization_history: Vec<f64>,
    pub mask_history: Vec<Mask>,
}

/// Share of the selected samples in each (group, label) cell, group-major.
pub fn cell_fractions(ds: &Dataset, mask: &Mask) -> Vec<f64> {
    let mut counts = vec![0usize; 2 * ds.n_groups()];
    for i in mask.selected() {
        counts[2 * ds.groups()[i] + usize::from(ds.labels()[i])] += 1;
    }
    let total = counts.iter().sum::<usize>().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

pub const POLARIZATION_BAND: (f64, f64) = (0.05, 0.95);

/// The outer loop: start from `s = K/n`, then per iteration sample a mask,
/// score it, and take one projected step; finally draw the output mask.
pub fn run_selection<E: RiskEvaluator + ?Sized>(
    train: &Dataset,
    outer: &Dataset,
    evaluator: &mut E,
    cfg: &OuterConfig,
    eval_batch: usize,
) -> Result<SelectResult> {
    cfg.validate()?;
    let n = train.len();
    if cfg.k > n {
        return Err(Error::validation(format!(
            "selection budget K = {} exceeds {n} training samples",
            cfg.k
        )));
    }
    if eval_batch < outer.n_groups() {
        return Err(Error::Config(format!(
            "outer batch of {eval_batch} cannot hold all {} groups",
            outer.n_groups()
        )));
    }

    let mut mask_rng = seed::rng(seed::derive(cfg.seed, tags::MASK));
    let mut batch_rng = seed::rng(seed::derive(cfg.seed, tags::OUTER_BATCH));
    let mut final_rng = seed::rng(seed::derive(cfg.seed, tags::FINALIZE));

    let mut s = ProbabilityVector::uniform(n, cfg.k as f64 / n as f64);
    let mut state = OuterState::default();
    let mut result = SelectResult {
        final_s: s.clone(),
        final_mask: Mask(vec![false; n]),
        s_history: Vec::new(),
        risk_history: Vec::with_capacity(cfg.iters),
        group_weight_history: Vec::with_capacity(cfg.iters),
        polarization_history: Vec::with_capacity(cfg.iters + 1),
        mask_history: Vec::with_capacity(cfg.iters),
    };

    for t in 0..cfg.iters {
        let iteration = t + 1;
        result
            .polarization_history
            .push(s.fraction_between(POLARIZATION_BAND.0, POLARIZATION_BAND.1));
        if iteration == 1 || iteration % cfg.snapshot_every == 0 {
            result.s_history.push((iteration, s.clone()));
        }
        let mut mask = sample_mask(&s, &mut mask_rng);
        let mut redraws = 0;
        while mask.count() == 0 {
            redraws += 1;
            if redraws > MAX_EMPTY_REDRAWS {
                return Err(Error::DegenerateProbabilities(format!(
                    "iteration {}: {MAX_EMPTY_REDRAWS} consecutive empty masks",
                    t + 1
                )));
            }
            mask = sample_mask(&s, &mut mask_rng);
        }
        let batch = stratified_batch(outer, eval_batch, &mut batch_rng)?;
        let risk = evaluator.risk(&mask, &batch, t)?;
        if !risk.is_finite() {
            return Err(Error::validation(format!("iteration {}: non-finite risk", t + 1)));
        }
        s = outer_step(&s, &mask, risk, cfg, &mut state);

        result.risk_history.push(risk);
        result.group_weight_history.push(cell_fractions(train, &mask));
        result.mask_history.push(mask);
    }
    result
        .polarization_history
        .push(s.fraction_between(POLARIZATION_BAND.0, POLARIZATION_BAND.1));
    result.s_history.push((cfg.iters + 1, s.clone()));

    result.final_mask = finalize_mask(&s, cfg.k, &mut final_rng);
    result.final_s = s;
    Ok(result)
}

/// Production selection: the outer risk comes from training a fresh model
/// on each sampled subset.
pub fn select_samples(
    train: &Dataset,
    outer: &Dataset,
    inner: &InnerConfig,
    cfg: &OuterConfig,
    risk: &RiskConfig,
    dims: &[usize],
) -> Result<SelectResult> {
    inner.validate()?;
    risk.validate()?;
    let mut evaluator = TrainedRisk {
        train,
        outer,
        inner: inner.clone(),
        risk: risk.clone(),
        dims: dims.to_vec(),
        seed: seed::derive(cfg.seed, tags::INNER),
    };
    run_selection(train, outer, &mut evaluator, cfg, risk.eval_batch)
}
