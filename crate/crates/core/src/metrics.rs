//! Group fairness and utility metrics on thresholded predictions.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn ppv(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn npv(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fn_)
    }

    pub fn tpr(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn positive_rate(&self) -> Option<f64> {
        ratio(self.tp + self.fp, self.total())
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Confusion counts per group id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupConfusion(Vec<Counts>);

impl GroupConfusion {
    pub fn from_counts(counts: Vec<Counts>) -> Self {
        GroupConfusion(counts)
    }

    pub fn groups(&self) -> &[Counts] {
        &self.0
    }

    pub fn n_groups(&self) -> usize {
        self.0.len()
    }

    fn get(&self, g: usize) -> Result<&Counts> {
        self.0
            .get(g)
            .ok_or_else(|| Error::validation(format!("group {g} out of range ({} groups)", self.0.len())))
    }
}

/// Counts per group; the number of groups is one past the largest id.
pub fn confusion_by_group(preds: &[u8], labels: &[u8], groups: &[usize]) -> Result<GroupConfusion> {
    if preds.len() != labels.len() || preds.len() != groups.len() {
        return Err(Error::validation(format!(
            "length mismatch: {} predictions, {} labels, {} groups",
            preds.len(),
            labels.len(),
            groups.len()
        )));
    }
    let n_groups = groups.iter().max().map_or(0, |g| g + 1);
    let mut counts = vec![Counts::default(); n_groups];
    for (i, ((&p, &y), &g)) in preds.iter().zip(labels).zip(groups).enumerate() {
        let c = &mut counts[g];
        match (p, y) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fn_ += 1,
            _ => return Err(Error::validation(format!("non-binary prediction or label at {i}"))),
        }
    }
    Ok(GroupConfusion(counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rate {
    Ppv,
    Npv,
    Tpr,
    Fpr,
    PositiveRate,
}

impl Rate {
    pub fn name(self) -> &'static str {
        match self {
            Rate::Ppv => "ppv",
            Rate::Npv => "npv",
            Rate::Tpr => "tpr",
            Rate::Fpr => "fpr",
            Rate::PositiveRate => "positive_rate",
        }
    }
}

/// A conditional rate with an empty conditioning set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct UndefinedCell {
    pub group: usize,
    pub rate: Rate,
}

/// A gap value together with the cells that had to be left out of it.
#[derive(Debug, Clone, PartialEq)]
pub struct Gap {
    pub value: f64,
    pub undefined: Vec<UndefinedCell>,
}

/// `1/2 (|PPV_0 - PPV_1| + |NPV_0 - NPV_1|)`. A term whose rate is undefined
/// in either group is dropped and flagged; the remaining term is still
/// halved.
pub fn sufficiency_gap(conf: &GroupConfusion, g0: usize, g1: usize) -> Result<Gap> {
    let (a, b) = (conf.get(g0)?, conf.get(g1)?);
    let mut value = 0.0;
    let mut undefined = Vec::new();
    let mut defined = 0;
    for (rate, f) in [(Rate::Ppv, Counts::ppv as fn(&Counts) -> Option<f64>), (Rate::Npv, Counts::npv)] {
        match (f(a), f(b)) {
            (Some(x), Some(y)) => {
                value += 0.5 * (x - y).abs();
                defined += 1;
            }
            (x, y) => {
                if x.is_none() {
                    undefined.push(UndefinedCell { group: g0, rate });
                }
                if y.is_none() {
                    undefined.push(UndefinedCell { group: g1, rate });
                }
            }
        }
    }
    if defined == 0 {
        return Err(Error::MetricUndefined(format!(
            "sufficiency gap between groups {g0} and {g1}: neither PPV nor NPV is defined in both"
        )));
    }
    Ok(Gap { value, undefined })
}

/// `|P_0(pred = 1) - P_1(pred = 1)|`.
pub fn dp_gap(conf: &GroupConfusion, g0: usize, g1: usize) -> Result<f64> {
    let (a, b) = (conf.get(g0)?, conf.get(g1)?);
    match (a.positive_rate(), b.positive_rate()) {
        (Some(x), Some(y)) => Ok((x - y).abs()),
        _ => Err(Error::MetricUndefined(format!(
            "demographic parity gap between groups {g0} and {g1}: empty group"
        ))),
    }
}

/// `1/2 (|TPR_0 - TPR_1| + |FPR_0 - FPR_1|)`.
pub fn eo_gap(conf: &GroupConfusion, g0: usize, g1: usize) -> Result<f64> {
    let (a, b) = (conf.get(g0)?, conf.get(g1)?);
    match (a.tpr(), b.tpr(), a.fpr(), b.fpr()) {
        (Some(t0), Some(t1), Some(f0), Some(f1)) => Ok(0.5 * ((t0 - t1).abs() + (f0 - f1).abs())),
        _ => Err(Error::MetricUndefined(format!(
            "equalized odds gap between groups {g0} and {g1}: a group lacks positive or negative labels"
        ))),
    }
}

fn pairs(subset: &[usize]) -> Vec<(usize, usize)> {
    let mut ids = subset.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut out = Vec::new();
    for (k, &a) in ids.iter().enumerate() {
        for &b in &ids[k + 1..] {
            out.push((a, b));
        }
    }
    out
}

/// Largest sufficiency gap over unordered pairs of `subset`; ties go to the
/// first pair in id order. Pairs with no defined term are skipped and their
/// cells flagged.
pub fn max_pairwise_suf_gap(conf: &GroupConfusion, subset: &[usize]) -> Result<(Gap, (usize, usize))> {
    let candidates = pairs(subset);
    if candidates.is_empty() {
        return Err(Error::validation("need at least two distinct groups"));
    }
    let mut best: Option<(Gap, (usize, usize))> = None;
    let mut skipped = Vec::new();
    for (a, b) in candidates {
        match sufficiency_gap(conf, a, b) {
            Ok(gap) => {
                if best.as_ref().is_none_or(|(g, _)| gap.value > g.value) {
                    best = Some((gap, (a, b)));
                }
            }
            Err(Error::MetricUndefined(_)) => {
                for g in [a, b] {
                    for rate in [Rate::Ppv, Rate::Npv] {
                        skipped.push(UndefinedCell { group: g, rate });
                    }
                }
            }
            Err(e) => return Err(e),
        }
    }
    match best {
        Some((mut gap, pair)) => {
            for cell in skipped {
                if !gap.undefined.contains(&cell) {
                    gap.undefined.push(cell);
                }
            }
            Ok((gap, pair))
        }
        None => Err(Error::MetricUndefined("sufficiency gap undefined for every pair".into())),
    }
}

fn max_pairwise(
    conf: &GroupConfusion,
    subset: &[usize],
    f: fn(&GroupConfusion, usize, usize) -> Result<f64>,
) -> Result<f64> {
    let mut best: Option<f64> = None;
    let mut last_err = None;
    for (a, b) in pairs(subset) {
        match f(conf, a, b) {
            Ok(v) => best = Some(best.map_or(v, |m| m.max(v))),
            Err(e @ Error::MetricUndefined(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::validation("need at least two distinct groups")))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRates {
    pub group: usize,
    pub counts: Counts,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub positive_rate: Option<f64>,
}

/// Metrics of one prediction vector. Gaps that cannot be computed are NaN
/// and listed in `undefined_cells`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub suf_gap: f64,
    /// Pair of groups the sufficiency gap refers to.
    pub suf_pair: (usize, usize),
    pub dp_gap: f64,
    pub eo_gap: f64,
    pub per_group: Vec<GroupRates>,
    pub undefined_cells: Vec<UndefinedCell>,
}

/// All metrics over `groups`. With `pair` set, gaps compare exactly that
/// pair; otherwise they are the maximum over all pairs.
pub fn evaluate(
    preds: &[u8],
    labels: &[u8],
    groups: &[usize],
    pair: Option<(usize, usize)>,
) -> Result<MetricReport> {
    let conf = confusion_by_group(preds, labels, groups)?;
    if preds.is_empty() {
        return Err(Error::validation("no samples to evaluate"));
    }
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    let accuracy = correct as f64 / preds.len() as f64;

    let subset: Vec<usize> = match pair {
        Some((a, b)) => {
            if a.max(b) >= conf.n_groups() {
                return Err(Error::validation(format!("group pair ({a}, {b}) out of range")));
            }
            vec![a, b]
        }
        None => (0..conf.n_groups()).filter(|&g| conf.0[g].total() > 0).collect(),
    };

    let per_group: Vec<GroupRates> = conf
        .0
        .iter()
        .enumerate()
        .map(|(group, c)| GroupRates {
            group,
            counts: *c,
            ppv: c.ppv(),
            npv: c.npv(),
            tpr: c.tpr(),
            fpr: c.fpr(),
            positive_rate: c.positive_rate(),
        })
        .collect();

    let mut undefined_cells = Vec::new();
    let flag = |cells: &mut Vec<UndefinedCell>, group, rate| {
        let cell = UndefinedCell { group, rate };
        if !cells.contains(&cell) {
            cells.push(cell);
        }
    };

    let (suf_gap, suf_pair) = match max_pairwise_suf_gap(&conf, &subset) {
        Ok((gap, p)) => {
            undefined_cells.extend(gap.undefined);
            (gap.value, p)
        }
        Err(Error::MetricUndefined(_)) => {
            for &g in &subset {
                flag(&mut undefined_cells, g, Rate::Ppv);
                flag(&mut undefined_cells, g, Rate::Npv);
            }
            (f64::NAN, (subset[0], *subset.get(1).unwrap_or(&subset[0])))
        }
        Err(e) => return Err(e),
    };
    let dp = match max_pairwise(&conf, &subset, dp_gap) {
        Ok(v) => v,
        Err(Error::MetricUndefined(_)) => {
            for &g in &subset {
                if conf.0[g].positive_rate().is_none() {
                    flag(&mut undefined_cells, g, Rate::PositiveRate);
                }
            }
            f64::NAN
        }
        Err(e) => return Err(e),
    };
    let eo = match max_pairwise(&conf, &subset, eo_gap) {
        Ok(v) => v,
        Err(Error::MetricUndefined(_)) => {
            for &g in &subset {
                if conf.0[g].tpr().is_none() {
                    flag(&mut undefined_cells, g, Rate::Tpr);
                }
                if conf.0[g].fpr().is_none() {
                    flag(&mut undefined_cells, g, Rate::Fpr);
                }
            }
            f64::NAN
        }
        Err(e) => return Err(e),
    };

    Ok(MetricReport {
        accuracy,
        suf_gap,
        suf_pair,
        dp_gap: dp,
        eo_gap: eo,
        per_group,
        undefined_cells,
    })
}
