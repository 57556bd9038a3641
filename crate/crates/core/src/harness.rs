//! Experiment orchestration: spec files, dataset IO, sweeps, artifacts and the
//! verification battery.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::algorithms::{
    self, run_dpsvrg, run_dspg, run_inexact_prox_svrg, run_reference, AlgoError, ConsensusPolicy, ErrorTrace,
    InexactErrors, MetricsRecord, NullSink, RunConfig, StepSchedule,
};
use crate::linalg;
use crate::objective::{AnalysisConstants, CompositeObjective, Dataset, LossKind, ObjectiveError, Scope};
use crate::par;
use crate::proximal::{self, ProxFunction, Regularizer};
use crate::topology::{self, make_schedule, MixingSchedule, TopologyError, TopologyFamily};

/// Environment variable that overrides a spec's output directory root.
pub const OUTPUT_ROOT_ENV: &str = "DPSVRG_OUTPUT_ROOT";

pub const SUMMARY_SCHEMA: u32 = 1;

/// Step-size slack used for the analysis constants.
pub const DEFAULT_DELTA: f64 = 0.9;

pub const DEFAULT_REFERENCE_TOL: f64 = 1e-10;

/// Gaps at or below this are treated as converged to machine precision and
/// left out of the contraction-factor fit.
pub const GAP_FIT_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Whether the error comes from the user's configuration, input files or
    /// paths rather than from a run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HarnessError::ConfigLine { .. }
                | HarnessError::Config(_)
                | HarnessError::Parse { .. }
                | HarnessError::Io { .. }
                | HarnessError::Algo(AlgoError::Config { .. })
                | HarnessError::Objective(_)
                | HarnessError::Topology(_)
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// key = value configs

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys are errors.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, (usize, String)>, HarnessError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| HarnessError::ConfigLine {
            line: i + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(HarnessError::ConfigLine {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        if out.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
            return Err(HarnessError::ConfigLine {
                line: i + 1,
                msg: format!("duplicate key `{k}`"),
            });
        }
    }
    Ok(out)
}

struct Fields {
    map: BTreeMap<String, (usize, String)>,
}

impl Fields {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn required<T: FromStr>(&mut self, key: &str) -> Result<T, HarnessError>
    where
        T::Err: fmt::Display,
    {
        match self.take(key) {
            Some((line, v)) => v.parse().map_err(|e| HarnessError::ConfigLine {
                line,
                msg: format!("`{key}`: cannot parse `{v}`: {e}"),
            }),
            None => Err(HarnessError::Config(format!("missing required key `{key}`"))),
        }
    }

    fn optional<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, HarnessError>
    where
        T::Err: fmt::Display,
    {
        match self.take(key) {
            Some((line, v)) => v.parse().map(Some).map_err(|e| HarnessError::ConfigLine {
                line,
                msg: format!("`{key}`: cannot parse `{v}`: {e}"),
            }),
            None => Ok(None),
        }
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>, HarnessError>
    where
        T::Err: fmt::Display,
    {
        match self.take(key) {
            Some((line, v)) => v
                .split(',')
                .map(|p| p.trim())
                .filter(|p| !p.is_empty())
                .map(|p| {
                    p.parse().map_err(|e| HarnessError::ConfigLine {
                        line,
                        msg: format!("`{key}`: cannot parse `{p}`: {e}"),
                    })
                })
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
            None => Ok(None),
        }
    }

    fn finish(self) -> Result<(), HarnessError> {
        if let Some((k, (line, _))) = self.map.into_iter().next() {
            return Err(HarnessError::ConfigLine {
                line,
                msg: format!("unknown key `{k}`"),
            });
        }
        Ok(())
    }
}

/// Reads every [`RunConfig`] field; all are required.
fn run_config_from(f: &mut Fields) -> Result<RunConfig, HarnessError> {
    let cfg = RunConfig {
        alpha: f.required("alpha")?,
        lambda: f.required("lambda")?,
        beta: f.required("beta")?,
        n0: f.required("n0")?,
        outer_rounds: f.required("outer_rounds")?,
        nodes: f.required("nodes")?,
        batch_size: f.required("batch_size")?,
        consensus: f.required::<ConsensusPolicy>("consensus")?,
        seed: f.required("seed")?,
        record_errors: f.required("record_errors")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a standalone run config: exactly the [`RunConfig`] fields.
pub fn parse_run_config(text: &str) -> Result<RunConfig, HarnessError> {
    let mut f = Fields { map: parse_kv(text)? };
    let cfg = run_config_from(&mut f)?;
    f.finish()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// datasets

/// Parameters of [`synth_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub sparsity: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthSpec),
    Csv(PathBuf),
    Libsvm(PathBuf),
}

/// A synthetic binary classification set: standard normal features, a
/// planted weight vector with `sparsity` nonzeros of magnitude in
/// `[1, 2]/√sparsity`, and labels drawn from the
/// logistic model with Gaussian logit noise of scale `noise`. Also returns the
/// planted weights.
pub fn synth_with_truth(spec: SynthSpec, m: usize) -> Result<(Dataset, Vec<f64>), HarnessError> {
    if spec.n == 0 || spec.d == 0 {
        return Err(HarnessError::Config("synthetic data needs n > 0 and d > 0".into()));
    }
    if spec.sparsity > spec.d {
        return Err(HarnessError::Config(format!(
            "sparsity {} exceeds dimension {}",
            spec.sparsity, spec.d
        )));
    }
    if !(spec.noise >= 0.0) {
        return Err(HarnessError::Config("noise must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut support: Vec<usize> = (0..spec.d).collect();
    for i in 0..spec.sparsity {
        let j = rng.random_range(i..spec.d);
        support.swap(i, j);
    }
    let mut w = vec![0.0; spec.d];
    let unit = 1.0 / (spec.sparsity.max(1) as f64).sqrt();
    for &j in &support[..spec.sparsity] {
        let mag: f64 = unit * rng.random_range(1.0..2.0);
        w[j] = if rng.random_bool(0.5) { mag } else { -mag };
    }
    let mut features = Vec::with_capacity(spec.n * spec.d);
    let mut labels = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let row: Vec<f64> = (0..spec.d).map(|_| rng.sample(StandardNormal)).collect();
        let xi: f64 = rng.sample(StandardNormal);
        let logit = linalg::dot(&row, &w) + spec.noise * xi;
        let p = 1.0 / (1.0 + (-logit).exp());
        labels.push(f64::from(rng.random::<f64>() < p));
        features.extend(row);
    }
    Ok((Dataset::from_flat(features, spec.d, labels, m)?, w))
}

pub fn synth_dataset(spec: SynthSpec, m: usize) -> Result<Dataset, HarnessError> {
    synth_with_truth(spec, m).map(|(d, _)| d)
}

fn parse_num(path: &Path, line: usize, tok: &str) -> Result<f64, HarnessError> {
    let v: f64 = tok.trim().parse().map_err(|_| HarnessError::Parse {
        path: path.display().to_string(),
        line,
        msg: format!("not a number: `{tok}`"),
    })?;
    if !v.is_finite() {
        return Err(HarnessError::Parse {
            path: path.display().to_string(),
            line,
            msg: format!("non-finite value `{tok}`"),
        });
    }
    Ok(v)
}

/// Dense CSV: one sample per line, label first. Blank lines are skipped.
pub fn parse_csv(text: &str, path: &Path, m: usize) -> Result<Dataset, HarnessError> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .map(|t| parse_num(path, i + 1, t))
            .collect::<Result<Vec<_>, _>>()?;
        if vals.len() < 2 {
            return Err(HarnessError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "need a label and at least one feature".into(),
            });
        }
        match width {
            None => width = Some(vals.len()),
            Some(w) if w != vals.len() => {
                return Err(HarnessError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("expected {w} columns, found {}", vals.len()),
                })
            }
            _ => {}
        }
        labels.push(vals[0]);
        rows.push(vals[1..].to_vec());
    }
    if rows.is_empty() {
        return Err(HarnessError::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "empty file".into(),
        });
    }
    Ok(Dataset::from_rows(rows, labels, m)?)
}

/// Sparse `label idx:value …` lines with 1-based indices. The dimension is
/// the largest index seen unless `dim` is given.
pub fn parse_libsvm(text: &str, path: &Path, m: usize, dim: Option<usize>) -> Result<Dataset, HarnessError> {
    let err = |line: usize, msg: String| HarnessError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut sparse: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut max_idx = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let label = parse_num(path, i + 1, toks.next().unwrap_or(""))?;
        let mut entries = Vec::new();
        let mut last = 0;
        for tok in toks {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(i + 1, format!("expected `index:value`, got `{tok}`")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| err(i + 1, format!("bad feature index `{idx}`")))?;
            if idx == 0 {
                return Err(err(i + 1, "feature indices are 1-based".into()));
            }
            if idx <= last {
                return Err(err(i + 1, format!("indices must increase (`{idx}` after `{last}`)")));
            }
            last = idx;
            max_idx = max_idx.max(idx);
            entries.push((idx - 1, parse_num(path, i + 1, val)?));
        }
        labels.push(label);
        sparse.push(entries);
    }
    if sparse.is_empty() {
        return Err(err(0, "empty file".into()));
    }
    let d = match dim {
        Some(d) if d < max_idx => return Err(err(0, format!("index {max_idx} exceeds dimension {d}"))),
        Some(d) => d,
        None => max_idx,
    };
    let rows = sparse
        .into_iter()
        .map(|entries| {
            let mut r = vec![0.0; d];
            for (j, v) in entries {
                r[j] = v;
            }
            r
        })
        .collect();
    Ok(Dataset::from_rows(rows, labels, m)?)
}

pub fn load_dataset(source: &DataSource, m: usize) -> Result<Dataset, HarnessError> {
    match source {
        DataSource::Synthetic(spec) => synth_dataset(*spec, m),
        DataSource::Csv(p) => parse_csv(&fs::read_to_string(p).map_err(io_err(p))?, p, m),
        DataSource::Libsvm(p) => parse_libsvm(&fs::read_to_string(p).map_err(io_err(p))?, p, m, None),
    }
}

pub fn dataset_to_csv(ds: &Dataset) -> String {
    let mut s = String::new();
    for i in 0..ds.n() {
        s.push_str(&ds.label(i).to_string());
        for v in ds.row(i) {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    s
}

pub fn dataset_to_libsvm(ds: &Dataset) -> String {
    let mut s = String::new();
    for i in 0..ds.n() {
        s.push_str(&ds.label(i).to_string());
        for (j, v) in ds.row(i).iter().enumerate() {
            if *v != 0.0 {
                s.push_str(&format!(" {}:{}", j + 1, v));
            }
        }
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// experiment specs

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Reference,
    Dpsvrg,
    Dspg,
    Inexact,
}

impl FromStr for Algo {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reference" => Ok(Algo::Reference),
            "dpsvrg" => Ok(Algo::Dpsvrg),
            "dspg" => Ok(Algo::Dspg),
            "inexact" => Ok(Algo::Inexact),
            other => Err(format!("unknown algorithm `{other}`")),
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Reference => "reference",
            Algo::Dpsvrg => "dpsvrg",
            Algo::Dspg => "dspg",
            Algo::Inexact => "inexact",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleSpec {
    pub b: usize,
    pub eta: f64,
    pub family: TopologyFamily,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub source: DataSource,
    pub loss: LossKind,
    pub max_norm_scale: bool,
    pub run: RunConfig,
    pub schedule: ScheduleSpec,
    pub algorithms: Vec<Algo>,
    pub dspg_step: StepSchedule,
    pub lambdas: Vec<f64>,
    pub bs: Vec<usize>,
    pub output_dir: PathBuf,
    pub reference_tol: f64,
}

impl FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logistic" => Ok(LossKind::Logistic),
            "least_squares" | "least-squares" => Ok(LossKind::LeastSquares),
            other => Err(format!("unknown loss `{other}`")),
        }
    }
}

impl ExperimentSpec {
    /// Parses a spec. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let mut f = Fields { map: parse_kv(text)? };
        let name: String = f.required("name")?;
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(HarnessError::Config(format!("`name` must be a plain file name, got `{name}`")));
        }
        let data: String = f.required("data")?;
        let format: Option<String> = f.optional("data_format")?;
        let source = if data == "synthetic" {
            DataSource::Synthetic(SynthSpec {
                n: f.required("synth_n")?,
                d: f.required("synth_d")?,
                sparsity: f.required("synth_sparsity")?,
                noise: f.required("synth_noise")?,
                seed: f.required("synth_seed")?,
            })
        } else {
            let path = base.join(&data);
            let fmt = format.unwrap_or_else(|| {
                if data.ends_with(".csv") {
                    "csv".into()
                } else {
                    "libsvm".into()
                }
            });
            match fmt.as_str() {
                "csv" => DataSource::Csv(path),
                "libsvm" => DataSource::Libsvm(path),
                other => return Err(HarnessError::Config(format!("unknown data_format `{other}`"))),
            }
        };
        let loss = f.optional("loss")?.unwrap_or(LossKind::Logistic);
        let max_norm_scale = f.optional("max_norm_scale")?.unwrap_or(false);
        let run = run_config_from(&mut f)?;
        let schedule = ScheduleSpec {
            b: f.required("topology_b")?,
            eta: f.required("topology_eta")?,
            family: f.required("topology")?,
            seed: f.required("topology_seed")?,
        };
        let mut algorithms: Vec<Algo> = f.list("algorithms")?.unwrap_or_default();
        algorithms.sort();
        algorithms.dedup();
        if algorithms.is_empty() {
            return Err(HarnessError::Config("`algorithms` must list at least one algorithm".into()));
        }
        let dspg_step = f.optional("dspg_step")?.unwrap_or(StepSchedule::Constant);
        let lambdas = f.list("lambda_sweep")?.unwrap_or_else(|| vec![run.lambda]);
        let bs = f.list("b_sweep")?.unwrap_or_else(|| vec![schedule.b]);
        if lambdas.is_empty() || bs.is_empty() {
            return Err(HarnessError::Config("sweeps must not be empty".into()));
        }
        if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0)) {
            return Err(HarnessError::Config(format!("`lambda_sweep` value {l} is negative")));
        }
        if bs.contains(&0) {
            return Err(HarnessError::Config("`b_sweep` values must be at least 1".into()));
        }
        let output_dir = base.join(f.optional::<String>("output_dir")?.unwrap_or_else(|| "out".into()));
        let reference_tol = f.optional("reference_tol")?.unwrap_or(DEFAULT_REFERENCE_TOL);
        f.finish()?;
        Ok(ExperimentSpec {
            name,
            source,
            loss,
            max_norm_scale,
            run,
            schedule,
            algorithms,
            dspg_step,
            lambdas,
            bs,
            output_dir,
            reference_tol,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Output directory after applying [`OUTPUT_ROOT_ENV`].
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root).join(&self.name),
            _ => self.output_dir.clone(),
        }
    }

    pub fn load(&self) -> Result<CompositeObjective, HarnessError> {
        let mut ds = load_dataset(&self.source, self.run.nodes)?;
        if self.loss == LossKind::Logistic {
            ds = ds.binarize_pm1();
        }
        if self.max_norm_scale {
            ds = ds.max_norm_scaled();
        }
        Ok(CompositeObjective::new(
            self.loss,
            Arc::new(ds),
            Regularizer::l1(self.run.lambda),
        )?)
    }
}

// ---------------------------------------------------------------------------
// summaries

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceInfo {
    pub lambda: f64,
    pub f_star: f64,
    pub nonzeros: usize,
    pub iterations: usize,
    pub grad_map_norm: f64,
    pub x_star: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Constants {
    pub lambda: f64,
    pub b: usize,
    pub l: f64,
    pub radius: f64,
    pub g_f: f64,
    pub g_h: f64,
    pub m_bound: f64,
    pub eta: f64,
    pub b0: usize,
    pub gamma: f64,
    pub ln_gamma: f64,
    pub big_gamma: f64,
    pub ln_big_gamma: f64,
    pub delta: f64,
    pub rho: f64,
    pub theta: f64,
    pub step_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub algo: String,
    pub lambda: f64,
    pub b: usize,
    pub csv: String,
    pub final_gap: f64,
    pub min_gap: f64,
    pub rho_hat: Option<f64>,
    pub comm_rounds: u64,
    pub epoch_passes: f64,
    pub replay_deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub schema: u32,
    pub name: String,
    pub n: usize,
    pub d: usize,
    pub nodes: usize,
    pub spec: ExperimentSpec,
    pub references: Vec<ReferenceInfo>,
    pub constants: Vec<Constants>,
    pub runs: Vec<RunSummary>,
}

/// `exp` of the least-squares slope of `ln gap` against `s` over outer-round
/// snapshot rows with `s ≥ from_round` and gap above [`GAP_FIT_FLOOR`].
pub fn fit_rho(rows: &[MetricsRecord], snapshot_tag: &str, from_round: usize) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.algo == snapshot_tag && r.s >= from_round && r.gap > GAP_FIT_FLOOR)
        .map(|r| (r.s as f64, r.gap.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Some((sxy / sxx).exp())
}

fn nonzeros(x: &[f64]) -> usize {
    x.iter().filter(|v| **v != 0.0).count()
}

/// Analysis and consensus constants for one sweep point.
pub fn constants_for(
    obj: &CompositeObjective,
    schedule: &MixingSchedule,
    cfg: &RunConfig,
    radius: f64,
) -> Constants {
    let l = obj.smoothness_l();
    let bc = obj.bound_constants(radius);
    let cc = schedule.constants();
    let ac = AnalysisConstants::new(cfg.alpha, l, DEFAULT_DELTA, cfg.beta, cfg.n0);
    Constants {
        lambda: obj.reg.lambda,
        b: schedule.b(),
        l,
        radius,
        g_f: bc.g_f,
        g_h: bc.g_h,
        m_bound: bc.m_bound,
        eta: schedule.eta(),
        b0: cc.b0,
        gamma: cc.gamma(),
        ln_gamma: cc.ln_gamma(),
        big_gamma: cc.big_gamma(),
        ln_big_gamma: cc.ln_big_gamma(),
        delta: DEFAULT_DELTA,
        rho: ac.rho,
        theta: ac.theta,
        step_limit: ac.step_limit(),
    }
}

fn lambda_tag(l: f64) -> String {
    format!("{l}")
}

struct PointResult {
    runs: Vec<RunSummary>,
    files: Vec<(String, String)>,
    constants: Constants,
}

/// Runs every requested algorithm for every sweep point, writes one CSV per
/// (algorithm, λ, b) and `summary.json` into `out_dir`.
pub fn run_experiment_in(spec: &ExperimentSpec, out_dir: &Path) -> Result<Summary, HarnessError> {
    let base = spec.load()?;
    let m = spec.run.nodes;
    let references: Vec<ReferenceInfo> = spec
        .lambdas
        .iter()
        .map(|&lambda| {
            let obj = base.with_regularizer(Regularizer::l1(lambda));
            let sol = run_reference(&obj, spec.reference_tol)?;
            Ok(ReferenceInfo {
                lambda,
                f_star: sol.f_star,
                nonzeros: nonzeros(&sol.x),
                iterations: sol.iterations,
                grad_map_norm: sol.grad_map_norm,
                x_star: sol.x,
            })
        })
        .collect::<Result<_, HarnessError>>()?;
    let schedules: Vec<MixingSchedule> = spec
        .bs
        .iter()
        .map(|&b| make_schedule(m, b, spec.schedule.eta, spec.schedule.family, spec.schedule.seed))
        .collect::<Result<_, _>>()?;

    let points: Vec<(usize, usize)> = (0..spec.lambdas.len())
        .flat_map(|li| (0..spec.bs.len()).map(move |bi| (li, bi)))
        .collect();
    let results = par::map_indexed(points.len(), |p| -> Result<PointResult, HarnessError> {
        let (li, bi) = points[p];
        let lambda = spec.lambdas[li];
        let reference = &references[li];
        let schedule = &schedules[bi];
        let b = spec.bs[bi];
        let cfg = RunConfig {
            lambda,
            ..spec.run.clone()
        };
        let obj = base.with_regularizer(Regularizer::l1(lambda));
        let f_star = reference.f_star;
        let mut runs = Vec::new();
        let mut files = Vec::new();
        let tag = format!("lambda{}-b{b}", lambda_tag(lambda));
        let mut trace: Option<ErrorTrace> = None;
        let mut radius = linalg::norm(&reference.x_star);
        for algo in &spec.algorithms {
            let mut rows: Vec<MetricsRecord> = Vec::new();
            let (comm, passes, rho_hat, dev) = match algo {
                Algo::Reference => continue,
                Algo::Dpsvrg => {
                    let out = run_dpsvrg(&obj, schedule, &cfg, f_star, &mut rows)?;
                    for x in out.x.iter().chain(&out.x_tilde) {
                        radius = radius.max(linalg::norm(x));
                    }
                    trace = out.trace;
                    (out.comm_rounds, out.epoch_passes, fit_rho(&rows, "dpsvrg-snapshot", 2), None)
                }
                Algo::Dspg => {
                    let out = run_dspg(&obj, schedule, &cfg, spec.dspg_step, f_star, &mut rows)?;
                    let passes = rows.last().map_or(0.0, |r| r.epoch_passes);
                    (out.iterations as u64, passes, None, None)
                }
                Algo::Inexact => {
                    let errors = match &trace {
                        Some(tr) => InexactErrors::Replay(tr),
                        None => InexactErrors::Zero,
                    };
                    let out = run_inexact_prox_svrg(&obj, &cfg, errors, f_star, &mut rows)?;
                    let dev = trace.as_ref().map(|tr| algorithms::replay_deviation(tr, &out));
                    let passes = rows.last().map_or(0.0, |r| r.epoch_passes);
                    (0, passes, None, dev)
                }
            };
            let csv_name = format!("{algo}-{tag}.csv");
            let inner: Vec<&MetricsRecord> = rows.iter().filter(|r| r.algo == algo.to_string()).collect();
            runs.push(RunSummary {
                algo: algo.to_string(),
                lambda,
                b,
                csv: csv_name.clone(),
                final_gap: inner.last().map_or(f64::NAN, |r| r.gap),
                min_gap: inner.iter().map(|r| r.gap).fold(f64::INFINITY, f64::min),
                rho_hat,
                comm_rounds: comm,
                epoch_passes: passes,
                replay_deviation: dev,
            });
            files.push((csv_name, algorithms::to_csv(&rows)));
        }
        let constants = constants_for(&obj, schedule, &cfg, 2.0 * radius.max(1.0));
        Ok(PointResult {
            runs,
            files,
            constants,
        })
    });

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut runs = Vec::new();
    let mut constants = Vec::new();
    for r in results {
        let r = r?;
        for (name, body) in r.files {
            let path = out_dir.join(name);
            fs::write(&path, body).map_err(io_err(&path))?;
        }
        runs.extend(r.runs);
        constants.push(r.constants);
    }
    let summary = Summary {
        schema: SUMMARY_SCHEMA,
        name: spec.name.clone(),
        n: base.data.n(),
        d: base.d(),
        nodes: m,
        spec: spec.clone(),
        references,
        constants,
        runs,
    };
    let path = out_dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(io_err(&path))?;
    Ok(summary)
}

/// [`run_experiment_in`] at [`ExperimentSpec::resolved_output_dir`].
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Summary, HarnessError> {
    run_experiment_in(spec, &spec.resolved_output_dir())
}

// ---------------------------------------------------------------------------
// verification battery

/// Outcome of one check. On failure `detail` names the violated inequality
/// with both sides.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub trials: usize,
    pub violations: usize,
    /// Largest `lhs − rhs` seen (≤ 0 when every trial passed).
    pub worst_margin: f64,
    pub detail: String,
    pub seconds: f64,
}

struct Tally {
    name: String,
    trials: usize,
    violations: usize,
    worst: f64,
    first: Option<String>,
    start: Instant,
}

impl Tally {
    fn new(name: &str) -> Self {
        Tally {
            name: name.into(),
            trials: 0,
            violations: 0,
            worst: f64::NEG_INFINITY,
            first: None,
            start: Instant::now(),
        }
    }

    /// Records `lhs ≤ rhs` for a trial described by `what`.
    fn le(&mut self, what: &str, lhs: f64, rhs: f64) {
        self.trials += 1;
        let margin = lhs - rhs;
        if margin.is_nan() || margin > self.worst {
            self.worst = margin;
        }
        if !(lhs <= rhs) {
            self.violations += 1;
            if self.first.is_none() {
                self.first = Some(format!("{what}: {lhs:e} <= {rhs:e} violated"));
            }
        }
    }

    fn done(self) -> CheckResult {
        let passed = self.violations == 0 && self.trials > 0;
        CheckResult {
            detail: self.first.unwrap_or_else(|| {
                if self.trials == 0 {
                    "no trials ran".into()
                } else {
                    format!("{} trials, worst margin {:e}", self.trials, self.worst)
                }
            }),
            name: self.name,
            passed,
            trials: self.trials,
            violations: self.violations,
            worst_margin: self.worst,
            seconds: self.start.elapsed().as_secs_f64(),
        }
    }
}

/// A candidate ℓ1 prox `(z, α, λ) ↦ y`, injectable for fault tests.
pub type L1Prox<'a> = &'a (dyn Fn(&[f64], f64, f64) -> Vec<f64> + Sync);

pub fn exact_l1_prox(z: &[f64], alpha: f64, lambda: f64) -> Vec<f64> {
    Regularizer::l1(lambda).prox(z, alpha)
}

struct ProxTrial {
    z: Vec<f64>,
    z2: Vec<f64>,
    x: Vec<f64>,
    alpha: f64,
    lambda: f64,
}

fn prox_trials(trials: usize, seed: u64) -> Vec<ProxTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|_| {
            let d = rng.random_range(1..=10);
            let mut v = |s: f64| -> Vec<f64> { (0..d).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect() };
            let (z, z2, x) = (v(1.0), v(1.0), v(2.0));
            ProxTrial {
                z,
                z2,
                x,
                alpha: rng.random_range(0.001..1.0),
                lambda: rng.random_range(0.0..1.5),
            }
        })
        .collect()
}

/// `(z − y)/α ∈ ∂h(y)` for `y = prox(z)`.
pub fn check_prox_membership(prox: L1Prox<'_>, trials: usize, slack: f64, seed: u64) -> CheckResult {
    let mut t = Tally::new("prox_subgradient_membership");
    for tr in prox_trials(trials, seed) {
        let h = Regularizer::l1(tr.lambda);
        let y = prox(&tr.z, tr.alpha, tr.lambda);
        let g: Vec<f64> = tr.z.iter().zip(&y).map(|(z, y)| (z - y) / tr.alpha).collect();
        // Distance from g to ∂h(y), coordinatewise.
        let dist = g
            .iter()
            .zip(&y)
            .map(|(&gj, &yj)| {
                if yj != 0.0 {
                    (gj - tr.lambda * yj.signum()).abs()
                } else {
                    (gj.abs() - tr.lambda).max(0.0)
                }
            })
            .fold(0.0, f64::max);
        debug_assert_eq!(dist <= slack, h.is_subgradient(&y, &g, slack));
        t.le("dist((z-y)/alpha, subdiff h(y))", dist, slack);
    }
    t.done()
}

/// `⟨z − y, x − y⟩/α ≤ h(x) − h(y)`.
pub fn check_prox_second_theorem(prox: L1Prox<'_>, trials: usize, slack: f64, seed: u64) -> CheckResult {
    let mut t = Tally::new("prox_second_theorem");
    for tr in prox_trials(trials, seed) {
        let h = Regularizer::l1(tr.lambda);
        let y = prox(&tr.z, tr.alpha, tr.lambda);
        let lhs = linalg::dot(&linalg::sub(&tr.z, &y), &linalg::sub(&tr.x, &y)) / tr.alpha;
        t.le("<z-y, x-y>/alpha <= h(x) - h(y)", lhs, h.value(&tr.x) - h.value(&y) + slack);
    }
    t.done()
}

/// `‖prox(z1) − prox(z2)‖ ≤ ‖z1 − z2‖`.
pub fn check_prox_nonexpansive(prox: L1Prox<'_>, trials: usize, slack: f64, seed: u64) -> CheckResult {
    let mut t = Tally::new("prox_nonexpansive");
    for tr in prox_trials(trials, seed) {
        let a = prox(&tr.z, tr.alpha, tr.lambda);
        let b = prox(&tr.z2, tr.alpha, tr.lambda);
        t.le("|prox z1 - prox z2| <= |z1 - z2|", linalg::dist(&a, &b), linalg::dist(&tr.z, &tr.z2) + slack);
    }
    t.done()
}

/// `‖prox_ε(z1) − prox_ε(z2)‖ ≤ ‖z1 − z2‖ + 3√(2αε)`.
pub fn check_inexact_nonexpansive(trials: usize, slack: f64, seed: u64) -> CheckResult {
    let mut t = Tally::new("inexact_prox_nonexpansive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    for (i, tr) in prox_trials(trials, seed).into_iter().enumerate() {
        let h = Regularizer::l1(tr.lambda);
        let eps = 10f64.powf(rng.random_range(-8.0..0.0));
        let a = proximal::prox_inexact(&h, &tr.z, tr.alpha, eps, 2 * i as u64).expect("valid step");
        let b = proximal::prox_inexact(&h, &tr.z2, tr.alpha, eps, 2 * i as u64 + 1).expect("valid step");
        let rhs = linalg::dist(&tr.z, &tr.z2) + 3.0 * (2.0 * tr.alpha * eps).sqrt() + slack;
        t.le("|prox_eps z1 - prox_eps z2| <= |z1 - z2| + 3 sqrt(2 alpha eps)", linalg::dist(&a.point, &b.point), rhs);
        t.le("achieved eps <= target", a.achieved_eps.max(b.achieved_eps), eps);
    }
    t.done()
}

/// Closed-form ℓ1 prox against the numeric minimizer.
pub fn check_prox_numeric(trials: usize, tol: f64, seed: u64) -> CheckResult {
    let mut t = Tally::new("prox_numeric_agreement");
    for tr in prox_trials(trials, seed) {
        let h = Regularizer::l1(tr.lambda);
        let exact = proximal::prox_l1(&tr.z, tr.alpha, tr.lambda).expect("valid step");
        match proximal::prox_numeric(&h, &tr.z, tr.alpha, 1e-10) {
            Ok(num) => t.le("|prox_l1 - prox_numeric|", linalg::dist(&exact, &num), tol),
            Err(e) => {
                t.le(&format!("prox_numeric failed: {e}"), f64::INFINITY, tol);
            }
        }
    }
    t.done()
}

/// `max_ij |φ_ij(l, l+s) − 1/m| ≤ Γγ^s` for random-matching schedules,
/// every start offset in one period and every span up to `max_span`.
pub fn check_lemma1(schedules: usize, nodes: &[usize], windows: &[usize], max_span: usize, seed: u64) -> CheckResult {
    let mut t = Tally::new("consensus_bound");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..schedules {
        let m = nodes[rng.random_range(0..nodes.len())];
        let b = windows[rng.random_range(0..windows.len())];
        let sched = make_schedule(m, b, 1.0 / (4.0 * m as f64), TopologyFamily::RandomMatching, rng.random())
            .expect("generated schedule is valid");
        let cc = sched.constants();
        for l in 0..sched.period() {
            for (span, p) in topology::phi_sequence(&sched, l, max_span).iter().enumerate() {
                t.le(
                    &format!("m={m} b={b} l={l} span={span}: max|phi - 1/m| <= Gamma gamma^span"),
                    p.max_deviation_from_average(),
                    cc.bound(span),
                );
            }
        }
    }
    t.done()
}

fn synth_objective(n: usize, d: usize, m: usize, lambda: f64, seed: u64) -> CompositeObjective {
    let ds = synth_dataset(
        SynthSpec {
            n,
            d,
            sparsity: d.div_ceil(3),
            noise: 0.1,
            seed,
        },
        m,
    )
    .expect("valid synthetic spec");
    CompositeObjective::new(LossKind::Logistic, Arc::new(ds), Regularizer::l1(lambda)).expect("binary labels")
}

/// Exhaustive `E‖v − ∇f(x)‖² ≤ 4L(F(x) − F*) + 4L(F(x̃) − F*) + slack` at every
/// iterate of a one-node run.
pub fn check_lemma4(n: usize, d: usize, outer_rounds: usize, slack: f64, seed: u64) -> CheckResult {
    let mut t = Tally::new("variance_bound");
    let obj = synth_objective(n, d, 1, 0.01, seed);
    let cfg = RunConfig {
        outer_rounds,
        record_errors: true,
        seed,
        ..RunConfig::defaults(1)
    };
    let obj = obj.with_regularizer(cfg.regularizer());
    let reference = match run_reference(&obj, DEFAULT_REFERENCE_TOL) {
        Ok(r) => r,
        Err(e) => {
            t.le(&format!("reference solver: {e}"), f64::INFINITY, 0.0);
            return t.done();
        }
    };
    let sched = MixingSchedule::single_node();
    let out = run_dpsvrg(&obj, &sched, &cfg, reference.f_star, &mut NullSink).expect("valid config");
    let trace = out.trace.expect("errors recorded");
    let l = obj.smoothness_l();
    for (idx, step) in trace.steps.iter().enumerate() {
        let x = trace.prev_xbar(idx).expect("history");
        let xt = &trace.snapshots[step.s - 1];
        let var = obj.vr_variance(x, xt);
        let rhs = 4.0 * l * (obj.objective_value(x) - reference.f_star) + 4.0 * l * (obj.objective_value(xt) - reference.f_star);
        t.le(&format!("(k={}, s={}) E|v - grad f|^2 <= 4L gap(x) + 4L gap(x~)", step.k, step.s), var, rhs + slack);
    }
    t.done()
}

/// Exhaustive mean of the SVRG estimator against the full gradient.
pub fn check_unbiased(seed: u64, tol: f64) -> CheckResult {
    let mut t = Tally::new("estimator_unbiased");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for loss in [LossKind::Logistic, LossKind::LeastSquares] {
        let mut obj = synth_objective(40, 6, 4, 0.01, seed);
        if loss == LossKind::LeastSquares {
            obj = CompositeObjective::new(loss, obj.data.clone(), obj.reg).expect("any labels");
        }
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let xt: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            for node in 0..4 {
                let snap = obj.full_grad(&xt, Scope::Node(node)).expect("node exists");
                let samples = obj.data.partition().node(node);
                let vs: Vec<Vec<f64>> = samples
                    .iter()
                    .map(|&l| obj.vr_grad(&x, &xt, &snap, l).expect("sample exists"))
                    .collect();
                let full = obj.full_grad(&x, Scope::Node(node)).expect("node exists");
                t.le("|mean_l v_l - grad f_i(x)|", linalg::dist(&linalg::mean(&vs), &full), tol);
            }
        }
    }
    t.done()
}

/// Analytic gradients against central differences (step `1e-5`).
pub fn check_gradients(probes: usize, tol: f64, seed: u64) -> CheckResult {
    let mut t = Tally::new("gradient_finite_difference");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for loss in [LossKind::Logistic, LossKind::LeastSquares] {
        let mut obj = synth_objective(30, 5, 1, 0.0, seed);
        if loss == LossKind::LeastSquares {
            obj = CompositeObjective::new(loss, obj.data.clone(), obj.reg).expect("any labels");
        }
        for _ in 0..probes {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let i = rng.random_range(0..30);
            let g = obj.sample_grad(&x, i).expect("sample exists");
            let h = 1e-5;
            let fd: Vec<f64> = (0..5)
                .map(|j| {
                    let mut a = x.clone();
                    let mut b = x.clone();
                    a[j] += h;
                    b[j] -= h;
                    (obj.sample_loss(&a, i) - obj.sample_loss(&b, i)) / (2.0 * h)
                })
                .collect();
            t.le(
                &format!("{loss:?} relative |grad - fd|"),
                linalg::dist(&g, &fd) / (1.0 + linalg::norm(&fd)),
                tol,
            );
        }
    }
    t.done()
}

/// How the equivalence check feeds errors into the replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayErrors {
    Recorded,
    /// Fault injection: `e ≡ 0`, `ε ≡ 0`.
    Zeroed,
}

/// Setup of the equivalence check.
#[derive(Debug, Clone)]
pub struct EquivalenceSetup {
    pub m: usize,
    pub b: usize,
    pub family: TopologyFamily,
    pub n: usize,
    pub d: usize,
    pub cfg: RunConfig,
}

impl EquivalenceSetup {
    /// Four-node ring-split (`b = 2`), `n = 128`, `d = 10`, four outer rounds.
    pub fn standard() -> Self {
        EquivalenceSetup {
            m: 4,
            b: 2,
            family: TopologyFamily::RingSplit,
            n: 128,
            d: 10,
            cfg: RunConfig {
                outer_rounds: 4,
                record_errors: true,
                seed: 1,
                ..RunConfig::defaults(4)
            },
        }
    }
}

/// Replays a DPSVRG trace through inexact Prox-SVRG and bounds the largest
/// relative deviation by `tol`.
pub fn check_equivalence(setup: &EquivalenceSetup, errors: ReplayErrors, tol: f64) -> CheckResult {
    let mut t = Tally::new("centralized_equivalence");
    let obj = synth_objective(setup.n, setup.d, setup.m, setup.cfg.lambda, setup.cfg.seed);
    let sched = make_schedule(setup.m, setup.b, 1.0 / (4.0 * setup.m as f64), setup.family, setup.cfg.seed)
        .expect("valid schedule");
    let cfg = RunConfig {
        record_errors: true,
        ..setup.cfg.clone()
    };
    let out = run_dpsvrg(&obj, &sched, &cfg, 0.0, &mut NullSink).expect("valid config");
    let mut trace = out.trace.expect("errors recorded");
    if errors == ReplayErrors::Zeroed {
        for st in &mut trace.steps {
            st.e.iter_mut().for_each(|v| *v = 0.0);
            st.eps = 0.0;
        }
    }
    let rep = run_inexact_prox_svrg(&obj, &cfg, InexactErrors::Replay(&trace), 0.0, &mut NullSink).expect("matching grid");
    t.le(
        "max (k,s) relative deviation |replay - average|",
        algorithms::replay_deviation(&trace, &rep),
        tol,
    );
    t.done()
}

/// The summability bounds and the q-norm bound on a recorded run.
pub fn check_error_sum_bounds(obj: &CompositeObjective, schedule: &MixingSchedule, cfg: &RunConfig, trace: &ErrorTrace) -> CheckResult {
    let mut t = Tally::new("error_sums_bounded");
    match algorithms::check_error_sums(obj, schedule, cfg, trace) {
        Ok(rounds) => {
            for r in rounds {
                t.le(&format!("s={} sum |e| finite", r.s), if r.sum_e.is_finite() { 0.0 } else { 1.0 }, 0.0);
                t.le(&format!("s={} sum |e| <= bound", r.s), r.sum_e, r.bound_e);
                t.le(&format!("s={} sum sqrt(eps) <= bound", r.s), r.sum_sqrt_eps, r.bound_sqrt_eps);
                t.le(&format!("s={} sum_i |q_i| <= C0 + C1 k + C2 s", r.s), r.worst_q_margin, 0.0);
            }
        }
        Err(e) => t.le(&format!("bound evaluation failed: {e}"), f64::INFINITY, 0.0),
    }
    t.done()
}

/// The scaled convergence study: data, schedule and config.
#[derive(Debug, Clone)]
pub struct ConvergenceSetup {
    pub synth: SynthSpec,
    pub nodes: usize,
    pub b: usize,
    pub family: TopologyFamily,
    pub cfg: RunConfig,
}

impl ConvergenceSetup {
    /// `n = 1024`, `d = 20`, eight nodes, `α = λ = 0.01`, twelve outer rounds
    /// on a ring split over `b = 3` matrices.
    pub fn standard() -> Self {
        ConvergenceSetup {
            synth: SynthSpec {
                n: 1024,
                d: 20,
                sparsity: 5,
                noise: 0.1,
                seed: 2024,
            },
            nodes: 8,
            b: 3,
            family: TopologyFamily::RingSplit,
            cfg: RunConfig {
                outer_rounds: 12,
                record_errors: true,
                seed: 11,
                ..RunConfig::defaults(8)
            },
        }
    }

    pub fn objective(&self) -> CompositeObjective {
        let ds = synth_dataset(self.synth, self.nodes).expect("valid synthetic spec");
        CompositeObjective::new(LossKind::Logistic, Arc::new(ds), self.cfg.regularizer()).expect("binary labels")
    }

    pub fn schedule(&self, b: usize) -> MixingSchedule {
        make_schedule(self.nodes, b, 0.1, self.family, self.cfg.seed).expect("valid schedule")
    }
}

/// Curves of one DPSVRG/DSPG pair.
#[derive(Debug, Clone)]
pub struct PairRun {
    pub dpsvrg: Vec<MetricsRecord>,
    pub dspg: Vec<MetricsRecord>,
    pub trace: Option<ErrorTrace>,
}

impl PairRun {
    pub fn dpsvrg_final_gap(&self) -> f64 {
        self.dpsvrg
            .iter()
            .rev()
            .find(|r| r.algo == "dpsvrg")
            .map_or(f64::NAN, |r| r.gap)
    }

    /// Smallest DSPG gap over the last quarter of its iterations.
    pub fn dspg_plateau(&self) -> f64 {
        let tail = self.dspg.len() - self.dspg.len() / 4;
        self.dspg[tail..].iter().map(|r| r.gap).fold(f64::INFINITY, f64::min)
    }

    pub fn rho_hat(&self) -> Option<f64> {
        fit_rho(&self.dpsvrg, "dpsvrg-snapshot", 2)
    }

    /// Snapshot gaps by round.
    pub fn snapshot_gaps(&self) -> Vec<f64> {
        self.dpsvrg
            .iter()
            .filter(|r| r.algo == "dpsvrg-snapshot")
            .map(|r| r.gap)
            .collect()
    }
}

pub fn run_pair(obj: &CompositeObjective, schedule: &MixingSchedule, cfg: &RunConfig, f_star: f64) -> Result<PairRun, AlgoError> {
    let mut dpsvrg = Vec::new();
    let out = run_dpsvrg(obj, schedule, cfg, f_star, &mut dpsvrg)?;
    let mut dspg = Vec::new();
    run_dspg(obj, schedule, cfg, StepSchedule::Constant, f_star, &mut dspg)?;
    Ok(PairRun {
        dpsvrg,
        dspg,
        trace: out.trace,
    })
}

/// Machine-readable outcome of [`verify_suite`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub level: String,
    pub passed: bool,
    pub seconds: f64,
    pub checks: Vec<CheckResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyLevel {
    Fast,
    Full,
}

impl FromStr for VerifyLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fast" => Ok(VerifyLevel::Fast),
            "full" => Ok(VerifyLevel::Full),
            other => Err(format!("unknown level `{other}` (expected fast or full)")),
        }
    }
}

fn simple_check(name: &str, what: &str, lhs: f64, rhs: f64) -> CheckResult {
    let mut t = Tally::new(name);
    t.le(what, lhs, rhs);
    t.done()
}

/// Runs the invariant battery. `fast` stays at `m ≤ 4`, `d ≤ 10`, `n ≤ 64`;
/// `full` adds the desk-scale convergence, b-sweep and determinism studies.
pub fn verify_suite(level: VerifyLevel) -> VerifyReport {
    let start = Instant::now();
    let prox: L1Prox<'_> = &exact_l1_prox;
    let mut checks = vec![
        check_lemma1(8, &[3, 4], &[1, 3], 100, 1),
        check_prox_membership(prox, 1000, 1e-10, 2),
        check_prox_second_theorem(prox, 1000, 1e-10, 3),
        check_prox_nonexpansive(prox, 1000, 1e-10, 4),
        check_inexact_nonexpansive(1000, 1e-10, 5),
        check_prox_numeric(100, 1e-8, 6),
        check_lemma4(64, 8, 3, 1e-8, 7),
        check_unbiased(8, 1e-12),
        check_gradients(100, 1e-6, 9),
    ];
    let small = EquivalenceSetup {
        n: 64,
        cfg: RunConfig {
            outer_rounds: 3,
            ..EquivalenceSetup::standard().cfg
        },
        ..EquivalenceSetup::standard()
    };
    checks.push(check_equivalence(&small, ReplayErrors::Recorded, 1e-8));
    {
        let obj = synth_objective(small.n, small.d, small.m, small.cfg.lambda, 10);
        let sched = make_schedule(small.m, small.b, 0.1, small.family, 10).expect("valid schedule");
        let out = run_dpsvrg(&obj, &sched, &small.cfg, 0.0, &mut NullSink).expect("valid config");
        checks.push(check_error_sum_bounds(&obj, &sched, &small.cfg, out.trace.as_ref().expect("recorded")));
    }
    if level == VerifyLevel::Full {
        checks.push(check_lemma1(20, &[3, 4, 5, 6, 7, 8], &[1, 3, 7], 100, 11));
        checks.push(check_equivalence(&EquivalenceSetup::standard(), ReplayErrors::Recorded, 1e-8));
        let setup = ConvergenceSetup::standard();
        let obj = setup.objective();
        match run_reference(&obj, DEFAULT_REFERENCE_TOL) {
            Ok(reference) => {
                let mut finals = Vec::new();
                let mut plateaus = Vec::new();
                for b in [3, 7, 50] {
                    let sched = setup.schedule(b);
                    match run_pair(&obj, &sched, &setup.cfg, reference.f_star) {
                        Ok(pair) => {
                            if b == setup.b {
                                checks.push(simple_check(
                                    "dpsvrg_linear_rate",
                                    "fitted per-round factor rho_hat < 1",
                                    pair.rho_hat().unwrap_or(f64::INFINITY),
                                    1.0 - f64::EPSILON,
                                ));
                                checks.push(simple_check(
                                    "dspg_plateau",
                                    "10 x dpsvrg final gap <= dspg plateau",
                                    10.0 * pair.dpsvrg_final_gap(),
                                    pair.dspg_plateau(),
                                ));
                                if let Some(tr) = &pair.trace {
                                    checks.push(check_error_sum_bounds(&obj, &sched, &setup.cfg, tr));
                                }
                            }
                            finals.push(pair.dpsvrg_final_gap());
                            plateaus.push(pair.dspg_plateau());
                        }
                        Err(e) => checks.push(simple_check("b_sweep", &format!("run failed: {e}"), 1.0, 0.0)),
                    }
                }
                if finals.len() == 3 {
                    let (lo, hi) = finals.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &g| (a.min(g), b.max(g)));
                    checks.push(simple_check("b_sweep_dpsvrg_spread", "max/min dpsvrg final gap < 2", hi / lo, 2.0 - f64::EPSILON));
                    let monotone = plateaus.windows(2).all(|w| w[0] < w[1]);
                    checks.push(simple_check(
                        "b_sweep_dspg_monotone",
                        &format!("dspg plateaus increase with b: {plateaus:?}"),
                        if monotone { 0.0 } else { 1.0 },
                        0.0,
                    ));
                }
                let det = |threads: usize| {
                    par::with_threads(threads, || {
                        let sched = setup.schedule(setup.b);
                        let cfg = RunConfig {
                            record_errors: false,
                            ..setup.cfg.clone()
                        };
                        let mut rows = Vec::new();
                        run_dpsvrg(&obj, &sched, &cfg, reference.f_star, &mut rows).map(|_| algorithms::to_csv(&rows))
                    })
                };
                let same = matches!((det(1), det(4)), (Ok(a), Ok(b)) if a == b);
                checks.push(simple_check(
                    "determinism",
                    "csv bytes differ between 1 and 4 threads",
                    if same { 0.0 } else { 1.0 },
                    0.0,
                ));
            }
            Err(e) => checks.push(simple_check("reference", &format!("reference solver: {e}"), 1.0, 0.0)),
        }
    }
    VerifyReport {
        level: match level {
            VerifyLevel::Fast => "fast".into(),
            VerifyLevel::Full => "full".into(),
        },
        passed: checks.iter().all(|c| c.passed),
        seconds: start.elapsed().as_secs_f64(),
        checks,
    }
}
