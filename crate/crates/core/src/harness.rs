//! Config-driven experiments: repetitions, sweeps and result files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use plotters::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, CsvOptions, Dataset, SplitSpec, SyntheticConfig};
use crate::error::{Error, Result};
use crate::inner_trainer::{train_irm_regularized, train_weighted_erm, InnerConfig};
use crate::irm_risk::RiskConfig;
use crate::mask_opt::{select_samples, OuterConfig, SelectResult};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{init_mlp, ModelParams};
use crate::seed::{self, tags};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Csv {
        path: PathBuf,
        #[serde(flatten)]
        options: CsvOptions,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(cfg) => data::gen_synthetic(cfg),
            DataSource::Csv { path, options } => data::load_csv_with(path, options),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    Irmv1Reg,
    Reweight,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Irmv1Reg => "irmv1_reg",
            Method::Reweight => "reweight",
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![16]
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitSpec,
    /// Hidden layer widths; input and output widths come from the data.
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub inner: InnerConfig,
    #[serde(default)]
    pub outer: OuterConfig,
    #[serde(default)]
    pub risk: RiskConfig,
    pub method: Method,
    #[serde(default)]
    pub noise_rho: f64,
    #[serde(default = "one")]
    pub repetitions: usize,
    #[serde(default)]
    pub base_seed: u64,
    pub output_dir: PathBuf,
    /// Compare exactly these two group ids instead of the worst pair.
    #[serde(default)]
    pub suf_pair: Option<(usize, usize)>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks everything that can be checked without training.
    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSource::Synthetic(cfg) => cfg.validate()?,
            DataSource::Csv { path, .. } => {
                if !path.is_file() {
                    return Err(Error::Config(format!("data file {} does not exist", path.display())));
                }
            }
        }
        self.split.validate()?;
        self.inner.validate()?;
        self.risk.validate()?;
        if self.method == Method::Reweight {
            self.outer.validate()?;
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::validation("hidden layer widths must be positive"));
        }
        if !(0.0..=1.0).contains(&self.noise_rho) {
            return Err(Error::validation(format!("noise_rho {} outside [0, 1]", self.noise_rho)));
        }
        if self.repetitions == 0 {
            return Err(Error::validation("repetitions must be at least 1"));
        }
        if let Some((a, b)) = self.suf_pair {
            if a == b {
                return Err(Error::validation("suf_pair needs two different groups"));
            }
        }
        Ok(())
    }

    pub fn model_dims(&self, n_features: usize) -> Vec<usize> {
        let mut dims = vec![n_features];
        dims.extend(&self.hidden_dims);
        dims.push(1);
        dims
    }

    /// Train split size, which does not depend on the split seed.
    pub fn train_size(&self, ds: &Dataset) -> Result<usize> {
        Ok(data::split_indices(ds, &self.split)?[0].len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionReport {
    pub rep: usize,
    pub seed: u64,
    pub metrics: MetricReport,
    pub wall_clock: f64,
    pub model: ModelParams,
    /// Size of the training set the final model saw.
    pub n_train: usize,
    pub selection: Option<SelectResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    /// Mean and standard error of the mean; the error is 0 for one value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        if values.len() < 2 {
            return MeanSe { mean, se: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        MeanSe {
            mean,
            se: (var / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub accuracy: MeanSe,
    pub suf_gap: MeanSe,
    pub dp_gap: MeanSe,
    pub eo_gap: MeanSe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub method: Method,
    pub reps: Vec<RepetitionReport>,
    pub summary: Summary,
    pub group_names: Vec<String>,
}

impl RunReport {
    fn new(method: Method, reps: Vec<RepetitionReport>, group_names: Vec<String>) -> Self {
        let col = |f: fn(&MetricReport) -> f64| MeanSe::of(&reps.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
        let summary = Summary {
            accuracy: col(|m| m.accuracy),
            suf_gap: col(|m| m.suf_gap),
            dp_gap: col(|m| m.dp_gap),
            eo_gap: col(|m| m.eo_gap),
        };
        RunReport {
            method,
            reps,
            summary,
            group_names,
        }
    }
}

fn run_repetition(cfg: &ExperimentConfig, ds: &Dataset, rep: usize) -> Result<RepetitionReport> {
    let start = Instant::now();
    let rep_seed = cfg.base_seed.wrapping_add(rep as u64);
    let split = SplitSpec {
        seed: seed::derive(rep_seed, tags::SPLIT),
        ..cfg.split.clone()
    };
    let (mut train, _val, test) = data::split(ds, &split)?;
    if cfg.noise_rho > 0.0 {
        train = data::inject_label_noise(&train, cfg.noise_rho, seed::derive(rep_seed, tags::NOISE))?;
    }
    let dims = cfg.model_dims(ds.n_features());
    let inner = InnerConfig {
        seed: seed::derive(rep_seed, tags::SHUFFLE),
        ..cfg.inner.clone()
    };
    let init = init_mlp(&dims, seed::derive(rep_seed, tags::INIT))?;

    let (report, selection, n_train) = match cfg.method {
        Method::Erm => (train_weighted_erm(init, &train, &vec![1.0; train.len()], &inner)?, None, train.len()),
        Method::Irmv1Reg => (train_irm_regularized(init, &train, &inner, &cfg.risk)?, None, train.len()),
        Method::Reweight => {
            let outer = OuterConfig {
                seed: seed::derive(rep_seed, tags::SELECT),
                ..cfg.outer.clone()
            };
            let sel = select_samples(&train, &train, &cfg.inner, &outer, &cfg.risk, &dims)?;
            let weights = sel.final_mask.as_weights();
            let init = init_mlp(&dims, seed::derive(rep_seed, tags::FINAL_TRAIN))?;
            let n_sel = sel.final_mask.count();
            (train_weighted_erm(init, &train, &weights, &inner)?, Some(sel), n_sel)
        }
    };

    let preds = report.model.predict(test.features(), test.n_features())?;
    let metrics = evaluate(&preds, test.labels(), test.groups(), cfg.suf_pair)?;
    Ok(RepetitionReport {
        rep,
        seed: rep_seed,
        metrics,
        wall_clock: start.elapsed().as_secs_f64(),
        model: report.model,
        n_train,
        selection,
    })
}

/// Parallelism from `SUFFICE_THREADS`; serial when unset.
fn thread_count() -> Result<usize> {
    match std::env::var("SUFFICE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("SUFFICE_THREADS={v} is not a positive integer"))),
    }
}

fn run_on(cfg: &ExperimentConfig, ds: &Dataset) -> Result<RunReport> {
    if let Some((a, b)) = cfg.suf_pair {
        if a.max(b) >= ds.n_groups() {
            return Err(Error::validation(format!(
                "suf_pair ({a}, {b}) out of range for {} groups",
                ds.n_groups()
            )));
        }
    }
    let threads = thread_count()?;
    let one = |rep| run_repetition(cfg, ds, rep).map_err(|e| Error::Repetition { rep, source: Box::new(e) });
    let reps: Vec<RepetitionReport> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| (0..cfg.repetitions).into_par_iter().map(one).collect::<Result<_>>())?
    } else {
        (0..cfg.repetitions).map(one).collect::<Result<_>>()?
    };
    Ok(RunReport::new(cfg.method, reps, ds.group_names().to_vec()))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let ds = cfg.data.load()?;
    run_on(cfg, &ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "K")]
    K,
    #[serde(rename = "noise_rho")]
    NoiseRho,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::K => "K",
            SweepParam::NoiseRho => "noise_rho",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "K" | "k" => Ok(SweepParam::K),
            "noise_rho" | "rho" => Ok(SweepParam::NoiseRho),
            _ => Err(Error::validation(format!("unknown sweep parameter {s:?}; expected K or noise_rho"))),
        }
    }
}

fn apply(cfg: &ExperimentConfig, param: SweepParam, value: f64) -> ExperimentConfig {
    let mut out = cfg.clone();
    match param {
        SweepParam::K => out.outer.k = value as usize,
        SweepParam::NoiseRho => out.noise_rho = value,
    }
    out
}

/// One run per value, all sharing `base_seed`. Every value is checked before
/// anything is trained.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Vec<RunReport>> {
    if values.is_empty() {
        return Err(Error::validation("sweep needs at least one value"));
    }
    cfg.validate()?;
    let ds = cfg.data.load()?;
    let n_train = cfg.train_size(&ds)?;
    for &v in values {
        match param {
            SweepParam::K => {
                if !(v >= 1.0 && v.fract() == 0.0) {
                    return Err(Error::validation(format!("K = {v} is not a positive integer")));
                }
                if v as usize > n_train {
                    return Err(Error::validation(format!("K = {v} exceeds {n_train} training samples")));
                }
            }
            SweepParam::NoiseRho => {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::validation(format!("noise_rho {v} outside [0, 1]")));
                }
            }
        }
        apply(cfg, param, v).validate()?;
    }
    values.iter().map(|&v| run_on(&apply(cfg, param, v), &ds)).collect()
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?)
}

/// Writes the result files for one run (`sweep = None`) or a sweep, whose
/// reports pair up with `values`.
pub fn emit_results(reports: &[RunReport], dir: &Path, sweep: Option<(SweepParam, &[f64])>) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::validation("no reports to write"));
    }
    if let Some((_, values)) = sweep {
        if values.len() != reports.len() {
            return Err(Error::validation("one sweep value per report required"));
        }
    }
    fs::create_dir_all(dir)?;
    let key_header: Vec<&str> = match sweep {
        Some(_) => vec!["param", "value", "method"],
        None => vec!["method"],
    };
    let key = |i: usize, r: &RunReport| -> Vec<String> {
        match sweep {
            Some((p, values)) => vec![p.name().into(), format!("{}", values[i]), r.method.name().into()],
            None => vec![r.method.name().into()],
        }
    };

    let mut metrics = writer(&dir.join("metrics.csv"))?;
    let mut timing = writer(&dir.join("timing.csv"))?;
    let mut undefined = writer(&dir.join("undefined_cells.csv"))?;
    let header = |extra: &[&str]| -> Vec<String> {
        key_header.iter().chain(extra).map(|s| s.to_string()).collect()
    };
    metrics.write_record(header(&["rep", "seed", "n_train", "accuracy", "suf_gap", "dp_gap", "eo_gap"]))?;
    timing.write_record(header(&["rep", "seed", "wall_clock"]))?;
    undefined.write_record(header(&["rep", "group", "rate"]))?;
    for (i, run) in reports.iter().enumerate() {
        for r in &run.reps {
            let m = &r.metrics;
            let mut row = key(i, run);
            row.extend([
                r.rep.to_string(),
                r.seed.to_string(),
                r.n_train.to_string(),
                f6(m.accuracy),
                f6(m.suf_gap),
                f6(m.dp_gap),
                f6(m.eo_gap),
            ]);
            metrics.write_record(&row)?;
            let mut row = key(i, run);
            row.extend([r.rep.to_string(), r.seed.to_string(), format!("{:.3}", r.wall_clock)]);
            timing.write_record(&row)?;
            for cell in &m.undefined_cells {
                let mut row = key(i, run);
                row.extend([r.rep.to_string(), run.group_names[cell.group].clone(), cell.rate.name().into()]);
                undefined.write_record(&row)?;
            }
        }
    }
    metrics.flush()?;
    timing.flush()?;
    undefined.flush()?;

    let mut summary = writer(&dir.join("summary.csv"))?;
    summary.write_record(header(&[
        "repetitions",
        "accuracy_mean",
        "accuracy_se",
        "suf_gap_mean",
        "suf_gap_se",
        "dp_gap_mean",
        "dp_gap_se",
        "eo_gap_mean",
        "eo_gap_se",
    ]))?;
    for (i, run) in reports.iter().enumerate() {
        let s = &run.summary;
        let mut row = key(i, run);
        row.push(run.reps.len().to_string());
        for m in [s.accuracy, s.suf_gap, s.dp_gap, s.eo_gap] {
            row.extend([f6(m.mean), f6(m.se)]);
        }
        summary.write_record(&row)?;
    }
    summary.flush()?;

    if reports.iter().any(|r| r.method == Method::Reweight) {
        let mut polar = writer(&dir.join("s_polarization.csv"))?;
        let mut weights = writer(&dir.join("group_weights.csv"))?;
        polar.write_record(header(&["rep", "iteration", "fraction_between"]))?;
        weights.write_record(header(&["rep", "iteration", "group", "label", "weight"]))?;
        for (i, run) in reports.iter().enumerate() {
            for r in &run.reps {
                let Some(sel) = &r.selection else { continue };
                for (t, frac) in sel.polarization_history.iter().enumerate() {
                    let mut row = key(i, run);
                    row.extend([r.rep.to_string(), (t + 1).to_string(), f6(*frac)]);
                    polar.write_record(&row)?;
                }
                for (t, cells) in sel.group_weight_history.iter().enumerate() {
                    for (c, w) in cells.iter().enumerate() {
                        let mut row = key(i, run);
                        row.extend([
                            r.rep.to_string(),
                            (t + 1).to_string(),
                            run.group_names[c / 2].clone(),
                            (c % 2).to_string(),
                            format!("{w:.9}"),
                        ]);
                        weights.write_record(&row)?;
                    }
                }
            }
        }
        polar.flush()?;
        weights.flush()?;
    }

    let models = dir.join("models");
    fs::create_dir_all(&models)?;
    for (i, run) in reports.iter().enumerate() {
        for r in &run.reps {
            let name = match sweep {
                Some((p, values)) => format!("{}_{}={}_rep{}.txt", run.method.name(), p.name(), values[i], r.rep),
                None => format!("{}_rep{}.txt", run.method.name(), r.rep),
            };
            r.model.save(models.join(name))?;
        }
    }

    if let Some((param, values)) = sweep {
        let path = dir.join(format!("sweep_{}.svg", param.name()));
        plot_sweep(&path, param, values, reports)?;
    }
    Ok(())
}

fn plot_error(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(format!("plot: {e}")))
}

/// Accuracy and sufficiency gap against the swept value, each with a band of
/// one standard error.
fn plot_sweep(path: &Path, param: SweepParam, values: &[f64], reports: &[RunReport]) -> Result<()> {
    let (x0, x1) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let pad = if x1 > x0 { 0.0 } else { 0.5 };
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} sweep ({})", param.name(), reports[0].method.name()), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((x0 - pad)..(x1 + pad), 0.0..1.0)
        .map_err(plot_error)?;
    chart
        .configure_mesh()
        .x_desc(param.name())
        .y_desc("mean over repetitions")
        .draw()
        .map_err(plot_error)?;

    let series: [(&str, fn(&Summary) -> MeanSe, RGBColor); 2] = [
        ("accuracy", |s| s.accuracy, BLUE),
        ("suf_gap", |s| s.suf_gap, RED),
    ];
    for (name, pick, color) in series {
        let pts: Vec<(f64, MeanSe)> = values.iter().zip(reports).map(|(&v, r)| (v, pick(&r.summary))).collect();
        let mut band: Vec<(f64, f64)> = pts.iter().map(|(x, m)| (*x, m.mean + m.se)).collect();
        band.extend(pts.iter().rev().map(|(x, m)| (*x, m.mean - m.se)));
        chart
            .draw_series(std::iter::once(Polygon::new(band, color.mix(0.2).filled())))
            .map_err(plot_error)?;
        chart
            .draw_series(LineSeries::new(pts.iter().map(|(x, m)| (*x, m.mean)), color.stroke_width(2)))
            .map_err(plot_error)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_error)?;
    root.present().map_err(plot_error)?;
    Ok(())
}

/// Human-readable summary lines for the terminal.
pub fn format_summary(reports: &[RunReport], sweep: Option<(SweepParam, &[f64])>) -> String {
    let mut out = String::new();
    for (i, r) in reports.iter().enumerate() {
        let s = &r.summary;
        if let Some((p, values)) = sweep {
            let _ = write!(out, "{}={} ", p.name(), values[i]);
        }
        let _ = writeln!(
            out,
            "{}: reps={} accuracy={:.4}±{:.4} suf_gap={:.4}±{:.4} dp_gap={:.4}±{:.4} eo_gap={:.4}±{:.4}",
            r.method.name(),
            r.reps.len(),
            s.accuracy.mean,
            s.accuracy.se,
            s.suf_gap.mean,
            s.suf_gap.se,
            s.dp_gap.mean,
            s.dp_gap.se,
            s.eo_gap.mean,
            s.eo_gap.se
        );
    }
    out
}
