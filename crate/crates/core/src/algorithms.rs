//! Solvers: DPSVRG, the centralized inexact Prox-SVRG it is equivalent to,
//! the DSPG baseline and a full-gradient reference solver.
//!
//! All randomness is drawn from one ChaCha stream per node, keyed by
//! `(seed, node)`, so a run is bit-identical for every thread count.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::objective::{CompositeObjective, ObjectiveError, Scope};
use crate::par;
use crate::proximal::{self, ProxError, ProxFunction, Regularizer};
use crate::topology::{ConsensusConstants, MixingSchedule, TopologyError};

/// Upper limit on a single inner loop, to catch runaway `β^s n_0`.
pub const MAX_INNER: usize = 1 << 26;

/// Slack when deciding whether a recorded point is an ε-prox of the replayed
/// input.
pub const REPLAY_EPS_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error("invalid config field `{field}`: {msg}")]
    Config { field: &'static str, msg: String },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Prox(#[from] ProxError),
    #[error("error trace does not match the run grid: {0}")]
    TraceMismatch(String),
    #[error("reference solver stopped after {iters} iterations with gradient-mapping norm {last:e} > {tol:e}")]
    ReferenceCap { iters: usize, last: f64, tol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusPolicy {
    /// `k` gossip rounds at inner step `k`.
    Multi,
    /// One gossip round per inner step.
    Single,
}

impl FromStr for ConsensusPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multi" => Ok(ConsensusPolicy::Multi),
            "single" => Ok(ConsensusPolicy::Single),
            other => Err(format!("unknown consensus policy `{other}` (expected multi or single)")),
        }
    }
}

impl fmt::Display for ConsensusPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConsensusPolicy::Multi => "multi",
            ConsensusPolicy::Single => "single",
        })
    }
}

/// DSPG step rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant,
    /// `α / √t` at iteration `t ≥ 1`.
    InvSqrt,
}

impl StepSchedule {
    pub fn step(self, alpha: f64, t: usize) -> f64 {
        match self {
            StepSchedule::Constant => alpha,
            StepSchedule::InvSqrt => alpha / (t.max(1) as f64).sqrt(),
        }
    }
}

impl FromStr for StepSchedule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(StepSchedule::Constant),
            "inv-sqrt" | "inv_sqrt" => Ok(StepSchedule::InvSqrt),
            other => Err(format!("unknown step schedule `{other}` (expected constant or inv-sqrt)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub beta: f64,
    pub n0: usize,
    pub outer_rounds: usize,
    pub nodes: usize,
    pub batch_size: usize,
    pub consensus: ConsensusPolicy,
    pub seed: u64,
    pub record_errors: bool,
}

impl RunConfig {
    /// `α = λ = 0.01`, `β = 2`, `n_0 = 4`, four outer rounds, batch 1.
    pub fn defaults(nodes: usize) -> Self {
        RunConfig {
            alpha: 0.01,
            lambda: 0.01,
            beta: 2.0,
            n0: 4,
            outer_rounds: 4,
            nodes,
            batch_size: 1,
            consensus: ConsensusPolicy::Multi,
            seed: 0,
            record_errors: false,
        }
    }

    pub fn validate(&self) -> Result<(), AlgoError> {
        let bad = |field, msg: &str| Err(AlgoError::Config { field, msg: msg.into() });
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha", "must be positive and finite");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be nonnegative and finite");
        }
        if !(self.beta > 1.0 && self.beta.is_finite()) {
            return bad("beta", "must exceed 1");
        }
        if self.n0 == 0 {
            return bad("n0", "must be at least 1");
        }
        if self.outer_rounds == 0 {
            return bad("outer_rounds", "must be at least 1");
        }
        if self.nodes == 0 {
            return bad("nodes", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        let last = (self.beta.powi(self.outer_rounds as i32) * self.n0 as f64).ceil();
        if !(last <= MAX_INNER as f64) {
            return bad("outer_rounds", "inner loop length beta^S * n0 is too large");
        }
        Ok(())
    }

    /// `K_s = ⌈β^s n_0⌉`, `s ≥ 1`.
    pub fn inner_len(&self, s: usize) -> usize {
        (self.beta.powi(s as i32) * self.n0 as f64).ceil() as usize
    }

    /// `Σ_{s ≤ S} K_s`.
    pub fn total_inner(&self) -> usize {
        (1..=self.outer_rounds).map(|s| self.inner_len(s)).sum()
    }

    pub fn regularizer(&self) -> Regularizer {
        Regularizer::l1(self.lambda)
    }

    fn check_against(&self, obj: &CompositeObjective) -> Result<(), AlgoError> {
        self.validate()?;
        if obj.nodes() != self.nodes {
            return Err(AlgoError::Config {
                field: "nodes",
                msg: format!("config has {} nodes but the dataset is split over {}", self.nodes, obj.nodes()),
            });
        }
        Ok(())
    }

    fn check_schedule(&self, schedule: &MixingSchedule) -> Result<(), AlgoError> {
        if schedule.m() != self.nodes {
            return Err(AlgoError::Config {
                field: "nodes",
                msg: format!("config has {} nodes but the schedule has {}", self.nodes, schedule.m()),
            });
        }
        Ok(())
    }
}

/// The sampling stream of node `node`.
pub fn node_rng(seed: u64, node: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(node as u64);
    rng
}

/// Draws `batch` global sample indices from node `node`'s block.
pub fn draw_samples(obj: &CompositeObjective, node: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let block = obj.data.partition().node(node);
    (0..batch).map(|_| block[rng.random_range(0..block.len())]).collect()
}

/// `out += (1/|batch|) Σ_l [∇f^l(x) − ∇f^l(y)]`.
fn add_batch_difference(obj: &CompositeObjective, x: &[f64], y: &[f64], batch: &[usize], weight: f64, out: &mut [f64]) {
    let w = weight / batch.len() as f64;
    for &l in batch {
        obj.add_sample_grad(x, l, w, out);
        obj.add_sample_grad(y, l, -w, out);
    }
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub algo: String,
    pub s: usize,
    pub k: usize,
    pub epoch_passes: f64,
    pub comm_rounds: u64,
    pub gap: f64,
    pub loss: f64,
    pub consensus_residual: f64,
    pub sum_e: f64,
    pub sum_sqrt_eps: f64,
}

pub const CSV_HEADER: &str = "algo,s,k,epoch_passes,comm_rounds,gap,loss,consensus_residual,sum_e,sum_sqrt_eps";

impl MetricsRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:e},{},{:e},{:e},{:e},{:e},{:e}",
            self.algo,
            self.s,
            self.k,
            self.epoch_passes,
            self.comm_rounds,
            self.gap,
            self.loss,
            self.consensus_residual,
            self.sum_e,
            self.sum_sqrt_eps
        )
    }
}

/// Consumer of metrics rows, fed from a single producer.
pub trait MetricsSink {
    fn record(&mut self, rec: MetricsRecord);
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, rec: MetricsRecord) {
        self.push(rec);
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _rec: MetricsRecord) {}
}

/// Streams rows as CSV; the first IO error is kept and later rows are dropped.
pub struct CsvSink<W: Write> {
    out: W,
    error: Option<io::Error>,
}

impl<W: Write> CsvSink<W> {
    pub fn new(mut out: W) -> Self {
        let error = writeln!(out, "{CSV_HEADER}").err();
        CsvSink { out, error }
    }

    pub fn finish(mut self) -> io::Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: Write> MetricsSink for CsvSink<W> {
    fn record(&mut self, rec: MetricsRecord) {
        if self.error.is_none() {
            self.error = writeln!(self.out, "{}", rec.csv_line()).err();
        }
    }
}

/// Renders records as a CSV document.
pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Per-node state of a DPSVRG run.
#[derive(Debug, Clone)]
pub struct NodeState {
    /// `x_i^(k,s)`
    pub x: Vec<f64>,
    /// `x̃_i^(s−1)`
    pub x_tilde: Vec<f64>,
    /// `∇f_i(x̃_i^(s−1))`
    pub snapshot_full: Vec<f64>,
    pub inner_sum: Vec<f64>,
    pub q: Vec<f64>,
    pub q_hat: Vec<f64>,
    rng: ChaCha8Rng,
}

/// Gradient and proximal errors of one inner step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub s: usize,
    pub k: usize,
    /// Global sample indices drawn by each node.
    pub samples: Vec<Vec<usize>>,
    pub e: Vec<f64>,
    pub eps: f64,
    /// `x̄^(k,s)`
    pub xbar: Vec<f64>,
    /// `q̄^(k,s)`
    pub qbar: Vec<f64>,
    /// `Σ_i ‖q_i^(k,s)‖`
    pub q_norm_sum: f64,
    /// `max_i ‖x_i^(k,s) − x̄^(k,s)‖`
    pub consensus_dev: f64,
}

/// All per-step errors of a run plus the snapshots they refer to.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorTrace {
    pub steps: Vec<StepTrace>,
    /// Centralized snapshots `x̃^s = (1/m) Σ_i x̃_i^s`, `s = 0..=S`.
    pub snapshots: Vec<Vec<f64>>,
    /// Largest norm of any local iterate, snapshot or average seen.
    pub max_iterate_norm: f64,
}

impl ErrorTrace {
    /// Steps of outer round `s`.
    pub fn round(&self, s: usize) -> impl Iterator<Item = &StepTrace> {
        self.steps.iter().filter(move |t| t.s == s)
    }

    /// `x̄^(k−1,s)` for step index `idx` (the warm start for `k = 1`).
    pub fn prev_xbar(&self, idx: usize) -> Option<&[f64]> {
        if idx == 0 {
            self.snapshots.first().map(Vec::as_slice)
        } else {
            self.steps.get(idx - 1).map(|t| t.xbar.as_slice())
        }
    }

    /// `(Σ_k ‖e^(k,s)‖, Σ_k √ε^(k,s))` for round `s`.
    pub fn round_sums(&self, s: usize) -> (f64, f64) {
        self.round(s)
            .fold((0.0, 0.0), |(a, b), t| (a + linalg::norm(&t.e), b + t.eps.sqrt()))
    }
}

/// What a single DPSVRG inner step needs to build its Theorem-1 errors.
pub struct StepInternals<'a> {
    /// `x_i^(k−1,s)` per node.
    pub x_prev: &'a [Vec<f64>],
    /// `x_i^(k,s)` per node.
    pub x_new: &'a [Vec<f64>],
    /// `q_i^(k,s)` per node.
    pub q: &'a [Vec<f64>],
    /// `x̃_i^(s−1)` per node.
    pub x_tilde_nodes: &'a [Vec<f64>],
    /// `∇f_i(x̃_i^(s−1))` per node.
    pub full_at_local: &'a [Vec<f64>],
    /// `∇f_i(x̃^(s−1))` per node, at the centralized snapshot.
    pub full_at_global: &'a [Vec<f64>],
    /// `x̃^(s−1)`
    pub x_tilde: &'a [f64],
    pub samples: &'a [Vec<usize>],
}

/// Gradient error, proximal error, `x̄` and `q̄` of one step.
pub struct StepErrors {
    pub e: Vec<f64>,
    pub eps: f64,
    pub xbar: Vec<f64>,
    pub qbar: Vec<f64>,
}

/// Builds `e^(k,s)` from its three per-node terms and `ε^(k,s)` from the
/// linearized prox gap at `x̄`.
pub fn construct_errors<H: ProxFunction + ?Sized>(
    obj: &CompositeObjective,
    h: &H,
    alpha: f64,
    st: &StepInternals<'_>,
) -> StepErrors {
    let m = st.x_prev.len();
    let d = obj.d();
    let xbar_prev = linalg::mean(st.x_prev);
    let terms = par::map_indexed(m, |i| {
        let mut t = vec![0.0; d];
        add_batch_difference(obj, &st.x_prev[i], &xbar_prev, &st.samples[i], 1.0, &mut t);
        add_batch_difference(obj, st.x_tilde, &st.x_tilde_nodes[i], &st.samples[i], 1.0, &mut t);
        for ((tj, a), b) in t.iter_mut().zip(&st.full_at_local[i]).zip(&st.full_at_global[i]) {
            *tj += a - b;
        }
        t
    });
    let e = linalg::mean(&terms);
    let xbar = linalg::mean(st.x_new);
    let qbar = linalg::mean(st.q);
    let eps = proximal::linearized_epsilon(h, &xbar, &qbar, alpha);
    StepErrors { e, eps, xbar, qbar }
}

/// Report of one inner step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub s: usize,
    pub k: usize,
    pub xbar: Vec<f64>,
    pub consensus_dev: f64,
    pub q_norm_sum: f64,
    pub errors: Option<(Vec<f64>, f64)>,
}

/// Algorithm 1 as an explicit state machine. [`run_dpsvrg`] drives it; tests
/// can step it by hand and inspect [`NodeState`]s.
pub struct Dpsvrg<'a> {
    obj: CompositeObjective,
    schedule: &'a MixingSchedule,
    cfg: RunConfig,
    nodes: Vec<NodeState>,
    s: usize,
    k: usize,
    /// Next unused schedule step.
    t: usize,
    comm_rounds: u64,
    grad_evals: u64,
    /// `x̃^(s−1)` and `∇f_i` there; only maintained when recording errors.
    x_tilde_global: Vec<f64>,
    full_at_global: Vec<Vec<f64>>,
    last_samples: Vec<Vec<usize>>,
}

impl<'a> Dpsvrg<'a> {
    pub fn new(obj: &CompositeObjective, schedule: &'a MixingSchedule, cfg: &RunConfig) -> Result<Self, AlgoError> {
        cfg.check_against(obj)?;
        cfg.check_schedule(schedule)?;
        let d = obj.d();
        let nodes = (0..cfg.nodes)
            .map(|i| NodeState {
                x: vec![0.0; d],
                x_tilde: vec![0.0; d],
                snapshot_full: vec![0.0; d],
                inner_sum: vec![0.0; d],
                q: vec![0.0; d],
                q_hat: vec![0.0; d],
                rng: node_rng(cfg.seed, i),
            })
            .collect();
        Ok(Dpsvrg {
            obj: obj.with_regularizer(cfg.regularizer()),
            schedule,
            cfg: cfg.clone(),
            nodes,
            s: 0,
            k: 0,
            t: 0,
            comm_rounds: 0,
            grad_evals: 0,
            x_tilde_global: vec![0.0; d],
            full_at_global: Vec::new(),
            last_samples: vec![Vec::new(); cfg.nodes],
        })
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn round(&self) -> usize {
        self.s
    }

    pub fn inner_step_index(&self) -> usize {
        self.k
    }

    pub fn schedule_position(&self) -> usize {
        self.t
    }

    pub fn comm_rounds(&self) -> u64 {
        self.comm_rounds
    }

    pub fn epoch_passes(&self) -> f64 {
        self.grad_evals as f64 / self.obj.data.n() as f64
    }

    pub fn last_samples(&self) -> &[Vec<usize>] {
        &self.last_samples
    }

    pub fn xbar(&self) -> Vec<f64> {
        linalg::mean(&self.nodes.iter().map(|n| n.x.clone()).collect::<Vec<_>>())
    }

    pub fn x_tilde_mean(&self) -> Vec<f64> {
        linalg::mean(&self.nodes.iter().map(|n| n.x_tilde.clone()).collect::<Vec<_>>())
    }

    /// Starts outer round `s + 1`: snapshot full gradients (line 5).
    pub fn begin_round(&mut self) -> Result<(), AlgoError> {
        self.s += 1;
        self.k = 0;
        let obj = &self.obj;
        let grads = par::map_indexed(self.nodes.len(), |i| obj.full_grad(&self.nodes[i].x_tilde, Scope::Node(i)));
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.snapshot_full = g?;
            node.inner_sum.iter_mut().for_each(|v| *v = 0.0);
        }
        self.grad_evals += obj.data.n() as u64;
        if self.cfg.record_errors {
            self.x_tilde_global = self.x_tilde_mean();
            let xt = &self.x_tilde_global;
            self.full_at_global = par::map_indexed(self.nodes.len(), |i| obj.full_grad(xt, Scope::Node(i)))
                .into_iter()
                .collect::<Result<_, _>>()?;
        }
        Ok(())
    }

    /// One inner iteration (lines 7–11).
    pub fn inner_step(&mut self) -> Result<StepReport, AlgoError> {
        self.k += 1;
        let alpha = self.cfg.alpha;
        let batch = self.cfg.batch_size;
        let record = self.cfg.record_errors;
        let x_prev: Vec<Vec<f64>> = if record {
            self.nodes.iter().map(|n| n.x.clone()).collect()
        } else {
            Vec::new()
        };

        let obj = &self.obj;
        let mut samples = vec![Vec::new(); self.nodes.len()];
        {
            let mut pairs: Vec<(&mut NodeState, &mut Vec<usize>)> = self.nodes.iter_mut().zip(samples.iter_mut()).collect();
            par::for_each_mut(&mut pairs, |i, (node, drawn)| {
                **drawn = draw_samples(obj, i, batch, &mut node.rng);
                let mut v = node.snapshot_full.clone();
                add_batch_difference(obj, &node.x, &node.x_tilde, drawn, 1.0, &mut v);
                node.q = node.x.iter().zip(&v).map(|(x, g)| x - alpha * g).collect();
            });
        }
        self.grad_evals += (2 * batch * self.nodes.len()) as u64;

        let rounds = match self.cfg.consensus {
            ConsensusPolicy::Multi => self.k,
            ConsensusPolicy::Single => 1,
        };
        let phi = self.schedule.window_product(self.t, rounds);
        self.t += rounds;
        self.comm_rounds += rounds as u64;
        let qs: Vec<Vec<f64>> = self.nodes.iter().map(|n| n.q.clone()).collect();
        let q_hat = phi.apply(&qs)?;

        let reg = obj.reg;
        let mut with_q: Vec<(&mut NodeState, Vec<f64>)> = self.nodes.iter_mut().zip(q_hat).collect();
        par::for_each_mut(&mut with_q, |_, (node, qh)| {
            node.x = reg.prox(qh, alpha);
            node.q_hat = std::mem::take(qh);
            linalg::axpy(1.0, &node.x, &mut node.inner_sum);
        });

        let x_new: Vec<Vec<f64>> = self.nodes.iter().map(|n| n.x.clone()).collect();
        let q_norm_sum = qs.iter().map(|q| linalg::norm(q)).sum();
        let errors = if record {
            let x_tilde_nodes: Vec<Vec<f64>> = self.nodes.iter().map(|n| n.x_tilde.clone()).collect();
            let full_at_local: Vec<Vec<f64>> = self.nodes.iter().map(|n| n.snapshot_full.clone()).collect();
            let st = StepInternals {
                x_prev: &x_prev,
                x_new: &x_new,
                q: &qs,
                x_tilde_nodes: &x_tilde_nodes,
                full_at_local: &full_at_local,
                full_at_global: &self.full_at_global,
                x_tilde: &self.x_tilde_global,
                samples: &samples,
            };
            let se = construct_errors(obj, &reg, alpha, &st);
            Some((se.e, se.eps))
        } else {
            None
        };
        let xbar = linalg::mean(&x_new);
        let consensus_dev = x_new.iter().map(|x| linalg::dist(x, &xbar)).fold(0.0, f64::max);
        self.last_samples = samples;
        Ok(StepReport {
            s: self.s,
            k: self.k,
            xbar,
            consensus_dev,
            q_norm_sum,
            errors,
        })
    }

    /// Closes the round: `x̃_i^s` is the mean of the round's iterates (line 13).
    /// The iterate itself carries over as the warm start (line 14).
    pub fn end_round(&mut self) {
        let inv = 1.0 / self.k.max(1) as f64;
        for node in &mut self.nodes {
            node.x_tilde = node.inner_sum.iter().map(|v| v * inv).collect();
        }
    }
}

/// Result of [`run_dpsvrg`].
#[derive(Debug, Clone)]
pub struct DpsvrgOutput {
    /// Final `x̃_i^S` per node.
    pub x_tilde: Vec<Vec<f64>>,
    /// Final `x_i^(K_S,S)` per node.
    pub x: Vec<Vec<f64>>,
    /// `x̃^s` averaged over nodes, `s = 0..=S`.
    pub snapshot_means: Vec<Vec<f64>>,
    pub comm_rounds: u64,
    pub epoch_passes: f64,
    pub trace: Option<ErrorTrace>,
}

/// Runs Algorithm 1 from `x_init = 0`. Emits one `dpsvrg` row per inner step at
/// the node average and one `dpsvrg-snapshot` row per outer round (plus the
/// starting point) at the averaged snapshot.
pub fn run_dpsvrg(
    obj: &CompositeObjective,
    schedule: &MixingSchedule,
    cfg: &RunConfig,
    f_star: f64,
    sink: &mut dyn MetricsSink,
) -> Result<DpsvrgOutput, AlgoError> {
    let mut st = Dpsvrg::new(obj, schedule, cfg)?;
    let fobj = st.obj.clone();
    let mut trace = cfg.record_errors.then(ErrorTrace::default);
    let mut snapshot_means = vec![st.x_tilde_mean()];
    let snapshot_row = |st: &Dpsvrg<'_>, s: usize, k: usize, xt: &[f64]| {
        let loss = fobj.objective_value(xt);
        let residual = st.nodes.iter().map(|n| linalg::dist(&n.x_tilde, xt)).fold(0.0, f64::max);
        MetricsRecord {
            algo: "dpsvrg-snapshot".into(),
            s,
            k,
            epoch_passes: st.epoch_passes(),
            comm_rounds: st.comm_rounds,
            gap: loss - f_star,
            loss,
            consensus_residual: residual,
            sum_e: 0.0,
            sum_sqrt_eps: 0.0,
        }
    };
    sink.record(snapshot_row(&st, 0, 0, &snapshot_means[0]));
    if let Some(tr) = trace.as_mut() {
        tr.snapshots.push(snapshot_means[0].clone());
    }
    for s in 1..=cfg.outer_rounds {
        st.begin_round()?;
        let ks = cfg.inner_len(s);
        let (mut sum_e, mut sum_sqrt_eps) = (0.0, 0.0);
        for _ in 0..ks {
            let rep = st.inner_step()?;
            if let (Some(tr), Some((e, eps))) = (trace.as_mut(), rep.errors) {
                sum_e += linalg::norm(&e);
                sum_sqrt_eps += eps.sqrt();
                let local_max = st.nodes.iter().map(|n| linalg::norm(&n.x)).fold(0.0, f64::max);
                tr.max_iterate_norm = tr.max_iterate_norm.max(local_max);
                tr.steps.push(StepTrace {
                    s,
                    k: rep.k,
                    samples: st.last_samples.clone(),
                    e,
                    eps,
                    xbar: rep.xbar.clone(),
                    qbar: linalg::mean(&st.nodes.iter().map(|n| n.q.clone()).collect::<Vec<_>>()),
                    q_norm_sum: rep.q_norm_sum,
                    consensus_dev: rep.consensus_dev,
                });
            }
            let loss = fobj.objective_value(&rep.xbar);
            sink.record(MetricsRecord {
                algo: "dpsvrg".into(),
                s,
                k: rep.k,
                epoch_passes: st.epoch_passes(),
                comm_rounds: st.comm_rounds,
                gap: loss - f_star,
                loss,
                consensus_residual: rep.consensus_dev,
                sum_e,
                sum_sqrt_eps,
            });
        }
        st.end_round();
        let xt = st.x_tilde_mean();
        sink.record(snapshot_row(&st, s, ks, &xt));
        if let Some(tr) = trace.as_mut() {
            let snap_max = st.nodes.iter().map(|n| linalg::norm(&n.x_tilde)).fold(0.0, f64::max);
            tr.max_iterate_norm = tr.max_iterate_norm.max(snap_max);
            tr.snapshots.push(xt.clone());
        }
        snapshot_means.push(xt);
    }
    Ok(DpsvrgOutput {
        x_tilde: st.nodes.iter().map(|n| n.x_tilde.clone()).collect(),
        x: st.nodes.iter().map(|n| n.x.clone()).collect(),
        snapshot_means,
        comm_rounds: st.comm_rounds,
        epoch_passes: st.epoch_passes(),
        trace,
    })
}

/// Error model of [`run_inexact_prox_svrg`].
#[derive(Debug, Clone, Copy)]
pub enum InexactErrors<'a> {
    /// `e ≡ 0`, exact prox: plain Prox-SVRG.
    Zero,
    /// Replays a DPSVRG trace: its samples, `e^(k,s)` and `ε^(k,s)`. The
    /// inexact prox returns the recorded `x̄^(k,s)` whenever that point is an
    /// ε-prox of the replayed input.
    Replay(&'a ErrorTrace),
    /// `e = e0 ρ^k u` with `u` a seeded random unit vector, and an
    /// `ε = eps0 ρ^k` inexact prox.
    Decaying { e0: f64, eps0: f64, rate: f64 },
}

/// Result of [`run_inexact_prox_svrg`].
#[derive(Debug, Clone)]
pub struct InexactOutput {
    pub x: Vec<f64>,
    pub x_tilde: Vec<f64>,
    /// `x^(k,s)` for every inner step in order.
    pub iterates: Vec<Vec<f64>>,
    /// `q^(k,s)` for every inner step in order.
    pub q: Vec<Vec<f64>>,
    /// Steps where the recorded point was rejected and the exact prox used.
    pub replay_fallbacks: usize,
}

/// Algorithm 2 over the network objective with `l_in` one batch per node.
pub fn run_inexact_prox_svrg(
    obj: &CompositeObjective,
    cfg: &RunConfig,
    errors: InexactErrors<'_>,
    f_star: f64,
    sink: &mut dyn MetricsSink,
) -> Result<InexactOutput, AlgoError> {
    cfg.check_against(obj)?;
    let obj = obj.with_regularizer(cfg.regularizer());
    let reg = obj.reg;
    let m = cfg.nodes;
    let d = obj.d();
    let alpha = cfg.alpha;
    if let InexactErrors::Replay(tr) = errors {
        let expected = cfg.total_inner();
        if tr.steps.len() != expected {
            return Err(AlgoError::TraceMismatch(format!(
                "{} steps recorded, config needs {expected}",
                tr.steps.len()
            )));
        }
        let mut idx = 0;
        for s in 1..=cfg.outer_rounds {
            for k in 1..=cfg.inner_len(s) {
                let st = &tr.steps[idx];
                if st.s != s || st.k != k || st.samples.len() != m || st.e.len() != d {
                    return Err(AlgoError::TraceMismatch(format!("step {idx} is ({}, {}), expected ({s}, {k})", st.s, st.k)));
                }
                idx += 1;
            }
        }
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..m).map(|i| node_rng(cfg.seed, i)).collect();
    let mut noise_rng = node_rng(cfg.seed, m);
    let mut x = vec![0.0; d];
    let mut x_tilde = vec![0.0; d];
    let mut iterates = Vec::with_capacity(cfg.total_inner());
    let mut qs = Vec::with_capacity(cfg.total_inner());
    let mut fallbacks = 0;
    let mut grad_evals: u64 = 0;
    let n = obj.data.n() as f64;
    let mut idx = 0;
    let record = |sink: &mut dyn MetricsSink, s, k, x: &[f64], evals: u64| {
        let loss = obj.objective_value(x);
        sink.record(MetricsRecord {
            algo: "inexact".into(),
            s,
            k,
            epoch_passes: evals as f64 / n,
            comm_rounds: 0,
            gap: loss - f_star,
            loss,
            consensus_residual: 0.0,
            sum_e: 0.0,
            sum_sqrt_eps: 0.0,
        });
    };
    for s in 1..=cfg.outer_rounds {
        let full = obj.full_grad(&x_tilde, Scope::All)?;
        grad_evals += obj.data.n() as u64;
        let ks = cfg.inner_len(s);
        let mut inner_sum = vec![0.0; d];
        for k in 1..=ks {
            let samples: Vec<Vec<usize>> = match errors {
                InexactErrors::Replay(tr) => tr.steps[idx].samples.clone(),
                _ => (0..m).map(|i| draw_samples(&obj, i, cfg.batch_size, &mut rngs[i])).collect(),
            };
            let mut v = full.clone();
            for batch in &samples {
                add_batch_difference(&obj, &x, &x_tilde, batch, 1.0 / m as f64, &mut v);
            }
            grad_evals += (2 * cfg.batch_size * m) as u64;
            let (e, eps) = match errors {
                InexactErrors::Zero => (None, 0.0),
                InexactErrors::Replay(tr) => (Some(tr.steps[idx].e.clone()), tr.steps[idx].eps),
                InexactErrors::Decaying { e0, eps0, rate } => {
                    let scale = e0 * rate.powi(k as i32);
                    let mut u: Vec<f64> = (0..d).map(|_| noise_rng.sample(StandardNormal)).collect();
                    let nu = linalg::norm(&u);
                    u.iter_mut().for_each(|c| *c *= scale / nu);
                    (Some(u), eps0 * rate.powi(k as i32))
                }
            };
            if let Some(e) = &e {
                linalg::axpy(1.0, e, &mut v);
            }
            let q: Vec<f64> = x.iter().zip(&v).map(|(xi, vi)| xi - alpha * vi).collect();
            x = match errors {
                InexactErrors::Zero => reg.prox(&q, alpha),
                InexactErrors::Replay(tr) => {
                    let target = &tr.steps[idx].xbar;
                    if proximal::epsilon_of(&reg, target, &q, alpha) <= eps + REPLAY_EPS_SLACK {
                        target.clone()
                    } else {
                        fallbacks += 1;
                        reg.prox(&q, alpha)
                    }
                }
                InexactErrors::Decaying { .. } => {
                    proximal::prox_inexact(&reg, &q, alpha, eps, cfg.seed ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?
                        .point
                }
            };
            linalg::axpy(1.0, &x, &mut inner_sum);
            record(sink, s, k, &x, grad_evals);
            iterates.push(x.clone());
            qs.push(q);
            idx += 1;
        }
        x_tilde = inner_sum.iter().map(|v| v / ks as f64).collect();
    }
    Ok(InexactOutput {
        x,
        x_tilde,
        iterates,
        q: qs,
        replay_fallbacks: fallbacks,
    })
}

/// `max_(k,s) max(‖q − q̄‖, ‖x − x̄‖) / (1 + ‖x̄‖)` between a replay and the
/// DPSVRG trace it replayed.
pub fn replay_deviation(trace: &ErrorTrace, replay: &InexactOutput) -> f64 {
    trace
        .steps
        .iter()
        .zip(replay.iterates.iter().zip(&replay.q))
        .map(|(t, (x, q))| {
            let dev = linalg::dist(x, &t.xbar).max(linalg::dist(q, &t.qbar));
            dev / (1.0 + linalg::norm(&t.xbar))
        })
        .fold(0.0, f64::max)
}

/// Result of [`run_dspg`].
#[derive(Debug, Clone)]
pub struct DspgOutput {
    pub x: Vec<Vec<f64>>,
    pub iterations: usize,
}

/// DSPG baseline: per iteration, a stochastic gradient step, one gossip round
/// and a prox at every node. Runs `Σ_s K_s` iterations so it spends the same
/// number of inner steps as DPSVRG; rows carry the DPSVRG `(s, k)` grid.
pub fn run_dspg(
    obj: &CompositeObjective,
    schedule: &MixingSchedule,
    cfg: &RunConfig,
    step: StepSchedule,
    f_star: f64,
    sink: &mut dyn MetricsSink,
) -> Result<DspgOutput, AlgoError> {
    cfg.check_against(obj)?;
    cfg.check_schedule(schedule)?;
    let obj = obj.with_regularizer(cfg.regularizer());
    let reg = obj.reg;
    let m = cfg.nodes;
    let d = obj.d();
    let batch = cfg.batch_size;
    let mut nodes: Vec<(Vec<f64>, ChaCha8Rng)> = (0..m).map(|i| (vec![0.0; d], node_rng(cfg.seed, i))).collect();
    let mut t = 0usize;
    let mut grad_evals: u64 = 0;
    let n = obj.data.n() as f64;
    for s in 1..=cfg.outer_rounds {
        for k in 1..=cfg.inner_len(s) {
            t += 1;
            let a = step.step(cfg.alpha, t);
            let ob = &obj;
            par::for_each_mut(&mut nodes, |i, (x, rng)| {
                let drawn = draw_samples(ob, i, batch, rng);
                let mut g = vec![0.0; d];
                for &l in &drawn {
                    ob.add_sample_grad(x, l, 1.0 / batch as f64, &mut g);
                }
                linalg::axpy(-a, &g, x);
            });
            grad_evals += (batch * m) as u64;
            let qs: Vec<Vec<f64>> = nodes.iter().map(|(x, _)| x.clone()).collect();
            let q_hat = schedule.matrix(t - 1).apply(&qs)?;
            par::for_each_mut(&mut nodes, |i, node| {
                node.0 = reg.prox(&q_hat[i], a);
            });
            let xs: Vec<Vec<f64>> = nodes.iter().map(|(x, _)| x.clone()).collect();
            let xbar = linalg::mean(&xs);
            let loss = obj.objective_value(&xbar);
            sink.record(MetricsRecord {
                algo: "dspg".into(),
                s,
                k,
                epoch_passes: grad_evals as f64 / n,
                comm_rounds: t as u64,
                gap: loss - f_star,
                loss,
                consensus_residual: linalg::max_deviation(&xs),
                sum_e: 0.0,
                sum_sqrt_eps: 0.0,
            });
        }
    }
    Ok(DspgOutput {
        x: nodes.into_iter().map(|(x, _)| x).collect(),
        iterations: t,
    })
}

/// Output of [`run_reference`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceSolution {
    pub x: Vec<f64>,
    pub f_star: f64,
    pub iterations: usize,
    pub grad_map_norm: f64,
}

pub const REFERENCE_MAX_ITERS: usize = 200_000;

/// `‖(x − prox_h^α(x − α∇f(x)))/α‖`
pub fn gradient_mapping_norm(obj: &CompositeObjective, x: &[f64], alpha: f64) -> Result<f64, AlgoError> {
    let g = obj.full_grad(x, Scope::All)?;
    let z: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - alpha * gi).collect();
    let p = obj.reg.prox(&z, alpha);
    Ok(linalg::dist(x, &p) / alpha)
}

/// Accelerated proximal gradient at step `1/L` with gradient-based
/// restarts, run on `obj` (including its regularizer) until the gradient
/// mapping at step `1/L` is at most `tol`.
pub fn run_reference(obj: &CompositeObjective, tol: f64) -> Result<ReferenceSolution, AlgoError> {
    if !(tol > 0.0) {
        return Err(AlgoError::Config {
            field: "tol",
            msg: "must be positive".into(),
        });
    }
    let d = obj.d();
    let l = obj.smoothness_l();
    let step = if l > 0.0 { 1.0 / l } else { 1.0 };
    let reg = obj.reg;
    let mut x = vec![0.0; d];
    let mut y = x.clone();
    let mut theta = 1.0f64;
    let mut last = f64::INFINITY;
    for it in 0..REFERENCE_MAX_ITERS {
        if it % 10 == 0 {
            last = gradient_mapping_norm(obj, &x, step)?;
            if last <= tol {
                return Ok(ReferenceSolution {
                    f_star: obj.objective_value(&x),
                    x,
                    iterations: it,
                    grad_map_norm: last,
                });
            }
        }
        let gy = obj.full_grad(&y, Scope::All)?;
        let z: Vec<f64> = y.iter().zip(&gy).map(|(yi, gi)| yi - step * gi).collect();
        let x_new = reg.prox(&z, step);
        // Gradient-based restart: objective differences near the optimum are
        // below rounding, so function values cannot drive it.
        let restart = linalg::dot(&linalg::sub(&y, &x_new), &linalg::sub(&x_new, &x)) > 0.0;
        if restart {
            theta = 1.0;
            y = x_new.clone();
        } else {
            let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
            let mom = (theta - 1.0) / theta_next;
            y = x_new.iter().zip(&x).map(|(a, b)| a + mom * (a - b)).collect();
            theta = theta_next;
        }
        x = x_new;
    }
    Err(AlgoError::ReferenceCap {
        iters: REFERENCE_MAX_ITERS,
        last,
        tol,
    })
}

/// Constants of the bound `Σ_i ‖q_i^(k,s)‖ ≤ C_0 + C_1 k + C_2 s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QBoundConstants {
    pub c0: f64,
    pub c1: f64,
    /// `α m n_0 (G_v + G_h)`; the round-`s` constant is `c2_base · β^s`.
    pub c2_base: f64,
    pub beta: f64,
}

impl QBoundConstants {
    /// `g_v` bounds every estimator norm `‖v_i‖`, `g_h` every subgradient.
    pub fn new(cfg: &RunConfig, c0: f64, g_v: f64, g_h: f64) -> Self {
        let m = cfg.nodes as f64;
        QBoundConstants {
            c0,
            c1: cfg.alpha * m * (g_v + g_h),
            c2_base: cfg.alpha * m * cfg.n0 as f64 * (g_v + g_h),
            beta: cfg.beta,
        }
    }

    pub fn c2(&self, s: usize) -> f64 {
        self.c2_base * self.beta.powi(s as i32)
    }

    pub fn q_bound(&self, k: usize, s: usize) -> f64 {
        self.c0 + self.c1 * k as f64 + self.c2(s) * s as f64
    }
}

/// One outer round of the summability check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundBoundCheck {
    pub s: usize,
    pub sum_e: f64,
    pub bound_e: f64,
    pub sum_sqrt_eps: f64,
    pub bound_sqrt_eps: f64,
    /// `max_k (Σ_i ‖q_i^(k,s)‖ − (C_0 + C_1 k + C_2 s))`; `≤ 0` when the
    /// q-norm bound holds at every step.
    pub worst_q_margin: f64,
}

impl RoundBoundCheck {
    pub fn holds(&self) -> bool {
        self.sum_e.is_finite()
            && self.sum_sqrt_eps.is_finite()
            && self.sum_e <= self.bound_e
            && self.sum_sqrt_eps <= self.bound_sqrt_eps
            && self.worst_q_margin <= 0.0
    }
}

/// `Σ_k ‖e‖` bound:
/// `2LΓ(D_0²(C_0 − C_1 + C_2 s) + C_1 D_1²) + 4LΓ(D_0²(C_0 + C_2(s−1)) + C_1 D_1²)`.
pub fn sum_e_bound(cc: &ConsensusConstants, qb: &QBoundConstants, l: f64, s: usize) -> f64 {
    let big = cc.big_gamma();
    let (d0, d1) = (cc.d0(), cc.d1());
    let c2 = qb.c2(s);
    let first = d0 * d0 * (qb.c0 - qb.c1 + c2 * s as f64).max(0.0) + qb.c1 * d1 * d1;
    let second = d0 * d0 * (qb.c0 + c2 * (s as f64 - 1.0)) + qb.c1 * d1 * d1;
    2.0 * l * big * first + 4.0 * l * big * second
}

/// `Σ_k √ε` bound:
/// `(Γ/2α)(D_0(C_0 + C_2 s) + C_1 D_1) + √(2G_hΓ)(D_0 √(C_0 + C_2 s) + √C_1 D_1)`.
pub fn sum_sqrt_eps_bound(cc: &ConsensusConstants, qb: &QBoundConstants, alpha: f64, g_h: f64, s: usize) -> f64 {
    let big = cc.big_gamma();
    let (d0, d1) = (cc.d0(), cc.d1());
    let base = qb.c0 + qb.c2(s) * s as f64;
    big / (2.0 * alpha) * (d0 * base + qb.c1 * d1) + (2.0 * g_h * big).sqrt() * (d0 * base.sqrt() + qb.c1.sqrt() * d1)
}

/// Evaluates both summability bounds and the q-norm bound on a recorded run.
/// `G_f` is taken on the ball holding every recorded iterate, and the
/// estimator bound is `3 G_f`.
pub fn check_error_sums(
    obj: &CompositeObjective,
    schedule: &MixingSchedule,
    cfg: &RunConfig,
    trace: &ErrorTrace,
) -> Result<Vec<RoundBoundCheck>, AlgoError> {
    let first = trace
        .steps
        .first()
        .ok_or_else(|| AlgoError::TraceMismatch("empty trace".into()))?;
    let obj = obj.with_regularizer(cfg.regularizer());
    let bc = obj.bound_constants(trace.max_iterate_norm.max(1e-12));
    let qb = QBoundConstants::new(cfg, first.q_norm_sum, 3.0 * bc.g_f, bc.g_h);
    let cc = schedule.constants();
    let l = obj.smoothness_l();
    Ok((1..=cfg.outer_rounds)
        .map(|s| {
            let (sum_e, sum_sqrt_eps) = trace.round_sums(s);
            let worst_q_margin = trace
                .round(s)
                .map(|t| t.q_norm_sum - qb.q_bound(t.k, s))
                .fold(f64::NEG_INFINITY, f64::max);
            RoundBoundCheck {
                s,
                sum_e,
                bound_e: sum_e_bound(&cc, &qb, l, s),
                sum_sqrt_eps,
                bound_sqrt_eps: sum_sqrt_eps_bound(&cc, &qb, cfg.alpha, bc.g_h, s),
                worst_q_margin,
            }
        })
        .collect())
}
