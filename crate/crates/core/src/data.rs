//! Datasets: validated storage, CSV ingestion, the planted-bias synthetic
//! generator, symmetric label noise and deterministic splitting.
//!
//! Random streams: `gen_synthetic` seeds one generator from `cfg.seed` and
//! draws, per sample, the group, the label, the core coordinates and the
//! spurious coordinate in that order. `inject_label_noise` draws one uniform
//! per sample from its own seed. `split` shuffles with a generator seeded from
//! `spec.seed`, visiting strata in (group, label) order.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Feature matrix, binary labels and sensitive-group ids.
///
/// Features are stored row-major. The sensitive groups play the role of IRM
/// environments.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<u8>,
    groups: Vec<usize>,
    feature_names: Vec<String>,
    group_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<u8>,
        groups: Vec<usize>,
        feature_names: Vec<String>,
        group_names: Vec<String>,
    ) -> Result<Self> {
        let ds = Dataset {
            features,
            n_features,
            labels,
            groups,
            feature_names,
            group_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if n == 0 {
            return Err(Error::validation("dataset has no samples"));
        }
        if self.groups.len() != n {
            return Err(Error::validation(format!(
                "{} labels but {} group ids",
                n,
                self.groups.len()
            )));
        }
        if self.features.len() != n * self.n_features {
            return Err(Error::validation(format!(
                "feature matrix has {} values, expected {}x{}",
                self.features.len(),
                n,
                self.n_features
            )));
        }
        if self.feature_names.len() != self.n_features {
            return Err(Error::validation("feature name count differs from column count"));
        }
        if let Some(i) = self.labels.iter().position(|&y| y > 1) {
            return Err(Error::validation(format!("label at row {i} is not binary")));
        }
        let g = self.group_names.len();
        let mut seen = vec![false; g];
        for (i, &gid) in self.groups.iter().enumerate() {
            if gid >= g {
                return Err(Error::validation(format!(
                    "group id {gid} at row {i} out of range for {g} groups"
                )));
            }
            seen[gid] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::validation(format!(
                "group {missing} ({}) has no samples",
                self.group_names[missing]
            )));
        }
        if let Some(pos) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite feature at row {}, column {}",
                pos / self.n_features.max(1),
                pos % self.n_features.max(1)
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    /// Rows `idx`, in the given order. Fails if a group ends up empty.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(idx.len() * self.n_features);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        Dataset::new(
            features,
            self.n_features,
            idx.iter().map(|&i| self.labels[i]).collect(),
            idx.iter().map(|&i| self.groups[i]).collect(),
            self.feature_names.clone(),
            self.group_names.clone(),
        )
    }

    /// Same features and groups with replaced labels.
    pub fn with_labels(&self, labels: Vec<u8>) -> Result<Dataset> {
        Dataset::new(
            self.features.clone(),
            self.n_features,
            labels,
            self.groups.clone(),
            self.feature_names.clone(),
            self.group_names.clone(),
        )
    }
}

/// Column selection for [`load_csv_with`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvOptions {
    pub label_col: String,
    pub group_col: String,
    /// Feature columns to keep, in file order. All remaining columns when absent.
    #[serde(default)]
    pub columns: Option<Vec<String>>,
    /// Columns to one-hot encode. When absent, a column is categorical iff
    /// some cell fails to parse as a number.
    #[serde(default)]
    pub categorical: Option<Vec<String>>,
}

/// Loads a CSV with every non-label, non-group column used as a feature.
pub fn load_csv(path: impl AsRef<Path>, label_col: &str, group_col: &str) -> Result<Dataset> {
    load_csv_with(
        path,
        &CsvOptions {
            label_col: label_col.to_string(),
            group_col: group_col.to_string(),
            ..Default::default()
        },
    )
}

pub fn load_csv_with(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let rows: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    parse_table(&header, &rows, opts)
}

fn parse_table(header: &[String], rows: &[csv::StringRecord], opts: &CsvOptions) -> Result<Dataset> {
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let label_idx = find(&opts.label_col)?;
    let group_idx = find(&opts.group_col)?;

    let feature_cols: Vec<usize> = match &opts.columns {
        Some(cols) => {
            let mut idx = cols.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
            idx.sort_unstable();
            idx
        }
        None => (0..header.len()).filter(|&c| c != label_idx && c != group_idx).collect(),
    };
    if let Some(cats) = &opts.categorical {
        for c in cats {
            find(c)?;
        }
    }
    if rows.is_empty() {
        return Err(Error::validation("CSV has no data rows"));
    }

    let mut labels = Vec::with_capacity(rows.len());
    for (r, rec) in rows.iter().enumerate() {
        let cell = &rec[label_idx];
        let y = match cell.parse::<f64>() {
            Ok(v) if v == 0.0 => 0,
            Ok(v) if v == 1.0 => 1,
            _ => {
                return Err(Error::validation(format!(
                    "row {r}: label '{cell}' in column '{}' is not 0 or 1",
                    opts.label_col
                )))
            }
        };
        labels.push(y);
    }

    let distinct: BTreeSet<&str> = rows.iter().map(|rec| &rec[group_idx]).collect();
    let group_names: Vec<String> = distinct.iter().map(|s| s.to_string()).collect();
    let group_of: HashMap<&str, usize> = distinct.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let groups: Vec<usize> = rows.iter().map(|rec| group_of[&rec[group_idx]]).collect();

    let n = rows.len();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut feature_names = Vec::new();
    for &c in &feature_cols {
        let name = &header[c];
        for (r, rec) in rows.iter().enumerate() {
            if rec[c].is_empty() {
                return Err(Error::validation(format!("row {r}, column '{name}': empty cell")));
            }
        }
        let categorical = match &opts.categorical {
            Some(cats) => cats.iter().any(|k| k == name),
            None => rows.iter().any(|rec| rec[c].parse::<f64>().is_err()),
        };
        if categorical {
            let mut levels: Vec<&str> = Vec::new();
            for rec in rows {
                if !levels.contains(&&rec[c]) {
                    levels.push(&rec[c]);
                }
            }
            for level in levels {
                columns.push(rows.iter().map(|rec| f64::from(u8::from(&rec[c] == level))).collect());
                feature_names.push(format!("{name}={level}"));
            }
        } else {
            let mut values = Vec::with_capacity(n);
            for (r, rec) in rows.iter().enumerate() {
                match rec[c].parse::<f64>() {
                    Ok(v) if v.is_finite() => values.push(v),
                    _ => {
                        return Err(Error::validation(format!(
                            "row {r}, column '{name}': cannot parse '{}' as a number",
                            &rec[c]
                        )))
                    }
                }
            }
            standardize(&mut values);
            columns.push(values);
            feature_names.push(name.clone());
        }
    }

    let d = columns.len();
    let mut features = Vec::with_capacity(n * d);
    for i in 0..n {
        features.extend(columns.iter().map(|col| col[i]));
    }
    Dataset::new(features, d, labels, groups, feature_names, group_names)
}

/// In-place z-score with population standard deviation; constant columns
/// become all zeros.
fn standardize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for v in values.iter_mut() {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
}

/// Two-group generator whose spurious coordinate flips its correlation with
/// the label between groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    /// P(group = 1).
    pub pi: f64,
    /// P(Y = 1 | group) for groups 0 and 1.
    pub base_rates: [f64; 2],
    pub core_dim: usize,
    pub core_sep: f64,
    pub core_noise: f64,
    pub spurious_strength: f64,
    pub spurious_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 4000,
            pi: 0.5,
            base_rates: [0.3, 0.6],
            core_dim: 4,
            core_sep: 0.5,
            core_noise: 1.0,
            spurious_strength: 2.0,
            spurious_noise: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if self.n == 0 {
            return Err(Error::validation("synthetic n must be positive"));
        }
        if !open_unit(self.pi) {
            return Err(Error::validation(format!("pi = {} must lie in (0, 1)", self.pi)));
        }
        if !self.base_rates.iter().all(|&b| open_unit(b)) {
            return Err(Error::validation(format!(
                "base rates {:?} must lie in (0, 1)",
                self.base_rates
            )));
        }
        if self.core_dim == 0 {
            return Err(Error::validation("core_dim must be at least 1"));
        }
        if !(self.core_sep > 0.0 && self.core_sep.is_finite()) {
            return Err(Error::validation("core_sep must be positive"));
        }
        if !(self.core_noise > 0.0 && self.spurious_noise > 0.0) {
            return Err(Error::validation("noise scales must be positive"));
        }
        if !(self.spurious_strength >= 0.0 && self.spurious_strength.is_finite()) {
            return Err(Error::validation("spurious_strength must be non-negative"));
        }
        Ok(())
    }
}

pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed);
    let core = Normal::new(0.0, cfg.core_noise).expect("validated scale");
    let spurious = Normal::new(0.0, cfg.spurious_noise).expect("validated scale");
    let d = cfg.core_dim + 1;

    let mut features = Vec::with_capacity(cfg.n * d);
    let mut labels = Vec::with_capacity(cfg.n);
    let mut groups = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let a = usize::from(rng.random::<f64>() < cfg.pi);
        let y = u8::from(rng.random::<f64>() < cfg.base_rates[a]);
        let sign_y = 2.0 * f64::from(y) - 1.0;
        for _ in 0..cfg.core_dim {
            features.push(sign_y * cfg.core_sep + core.sample(&mut rng));
        }
        let sign_a = if a == 0 { 1.0 } else { -1.0 };
        features.push(sign_a * sign_y * cfg.spurious_strength + spurious.sample(&mut rng));
        labels.push(y);
        groups.push(a);
    }

    let mut feature_names: Vec<String> = (0..cfg.core_dim).map(|j| format!("core_{j}")).collect();
    feature_names.push("spurious".to_string());
    Dataset::new(
        features,
        d,
        labels,
        groups,
        feature_names,
        vec!["0".to_string(), "1".to_string()],
    )
}

/// Flips each label independently with probability `rho`.
pub fn inject_label_noise(ds: &Dataset, rho: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::validation(format!("noise ratio {rho} outside [0, 1]")));
    }
    let mut rng = seed::rng(seed);
    let labels = ds
        .labels()
        .iter()
        .map(|&y| if rng.random::<f64>() < rho { 1 - y } else { y })
        .collect();
    ds.with_labels(labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    #[serde(default)]
    pub stratified: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.7,
            val_frac: 0.1,
            test_frac: 0.2,
            stratified: true,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn fractions(&self) -> [f64; 3] {
        [self.train_frac, self.val_frac, self.test_frac]
    }

    pub fn validate(&self) -> Result<()> {
        let fracs = self.fractions();
        if !fracs.iter().all(|&f| f > 0.0 && f < 1.0) {
            return Err(Error::validation(format!("split fractions {fracs:?} must lie in (0, 1)")));
        }
        let sum: f64 = fracs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Splits `n` into parts proportional to `fracs` by largest remainder; ties
/// go to the earlier part.
pub fn largest_remainder(n: usize, fracs: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fracs.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fracs.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        sizes[k] += 1;
    }
    sizes
}

/// Train/validation/test index sets, each sorted ascending.
pub fn split_indices(ds: &Dataset, spec: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    spec.validate()?;
    let fracs = spec.fractions();
    let mut rng = seed::rng(spec.seed);
    let mut parts: [Vec<usize>; 3] = Default::default();

    let strata: Vec<Vec<usize>> = if spec.stratified {
        let mut cells = Vec::new();
        for (g, members) in partition_by_group(ds).into_iter().enumerate() {
            for y in 0..=1u8 {
                let cell: Vec<usize> = members.iter().copied().filter(|&i| ds.labels()[i] == y).collect();
                if cell.is_empty() {
                    return Err(Error::validation(format!(
                        "stratum (group {g}, label {y}) is empty"
                    )));
                }
                cells.push(cell);
            }
        }
        cells
    } else {
        vec![(0..ds.len()).collect()]
    };

    for mut stratum in strata {
        stratum.shuffle(&mut rng);
        let sizes = largest_remainder(stratum.len(), &fracs);
        let mut start = 0;
        for (part, size) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&stratum[start..start + size]);
            start += size;
        }
    }
    for part in parts.iter_mut() {
        part.sort_unstable();
    }
    Ok(parts)
}

/// Train, validation and test datasets.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let [train, val, test] = split_indices(ds, spec)?;
    Ok((ds.select(&train)?, ds.select(&val)?, ds.select(&test)?))
}

/// Indices of each group, ascending; position `g` holds group `g`.
pub fn partition_by_group(ds: &Dataset) -> Vec<Vec<usize>> {
    let mut parts = vec![Vec::new(); ds.n_groups()];
    for (i, &g) in ds.groups().iter().enumerate() {
        parts[g].push(i);
    }
    parts
}
