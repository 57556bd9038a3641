//! Composite objectives `F = f + h` over a partitioned dataset.
//!
//! The network objective is the node average `F(x) = (1/m) Σ_i F_i(x)` with
//! `F_i` the mean loss over node `i`'s samples plus `h`. Under the equal split
//! used everywhere in this crate that is the same as the pooled mean.

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::linalg;
use crate::par;
use crate::proximal::{ProxFunction, Regularizer};

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("sample index {index} out of range (n = {n})")]
    SampleOutOfRange { index: usize, n: usize },
    #[error("node {node} out of range (m = {m})")]
    NodeOutOfRange { node: usize, m: usize },
    #[error("node {0} holds no samples")]
    EmptyNode(usize),
    #[error("dataset is empty")]
    Empty,
    #[error("feature rows have inconsistent lengths: row {row} has {got}, expected {expected}")]
    Ragged { row: usize, expected: usize, got: usize },
    #[error("{labels} labels for {rows} rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("logistic loss needs labels in {{0,1}}, found {0}")]
    NonBinaryLabel(f64),
    #[error("cannot split {n} samples over {m} nodes")]
    BadPartition { n: usize, m: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Assignment of samples to nodes: contiguous blocks whose sizes differ by at
/// most one.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    members: Vec<Vec<usize>>,
}

impl Partition {
    pub fn equal(n: usize, m: usize) -> Result<Self, ObjectiveError> {
        if m == 0 || n < m {
            return Err(ObjectiveError::BadPartition { n, m });
        }
        let base = n / m;
        let extra = n % m;
        let mut start = 0;
        let members = (0..m)
            .map(|i| {
                let len = base + usize::from(i < extra);
                let block: Vec<usize> = (start..start + len).collect();
                start += len;
                block
            })
            .collect();
        Ok(Partition { members })
    }

    pub fn nodes(&self) -> usize {
        self.members.len()
    }

    pub fn node(&self, i: usize) -> &[usize] {
        &self.members[i]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Owner of every sample.
    pub fn owners(&self, n: usize) -> Vec<usize> {
        let mut owner = vec![usize::MAX; n];
        for (i, block) in self.members.iter().enumerate() {
            for &s in block {
                owner[s] = i;
            }
        }
        owner
    }
}

/// Immutable feature matrix (row-major), labels and node partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    d: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
    partition: Partition,
}

impl Dataset {
    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Vec<f64>, m: usize) -> Result<Self, ObjectiveError> {
        if rows.is_empty() {
            return Err(ObjectiveError::Empty);
        }
        if rows.len() != labels.len() {
            return Err(ObjectiveError::LabelCount {
                labels: labels.len(),
                rows: rows.len(),
            });
        }
        let d = rows[0].len();
        let mut features = Vec::with_capacity(rows.len() * d);
        for (row, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(ObjectiveError::Ragged {
                    row,
                    expected: d,
                    got: r.len(),
                });
            }
            features.extend_from_slice(r);
        }
        Self::from_flat(features, d, labels, m)
    }

    pub fn from_flat(features: Vec<f64>, d: usize, labels: Vec<f64>, m: usize) -> Result<Self, ObjectiveError> {
        let n = labels.len();
        if n == 0 {
            return Err(ObjectiveError::Empty);
        }
        if features.len() != n * d {
            return Err(ObjectiveError::LabelCount {
                labels: n,
                rows: features.len() / d.max(1),
            });
        }
        Ok(Dataset {
            n,
            d,
            features,
            labels,
            partition: Partition::equal(n, m)?,
        })
    }

    /// Same data split over `m` nodes.
    pub fn with_nodes(&self, m: usize) -> Result<Self, ObjectiveError> {
        Ok(Dataset {
            partition: Partition::equal(self.n, m)?,
            ..self.clone()
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn nodes(&self) -> usize {
        self.partition.nodes()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    /// Maps `{-1, +1}` labels to `{0, 1}`; other labels are left alone.
    pub fn binarize_pm1(mut self) -> Self {
        if self.labels.iter().all(|&b| b == -1.0 || b == 1.0) {
            for b in &mut self.labels {
                *b = if *b > 0.0 { 1.0 } else { 0.0 };
            }
        }
        self
    }

    /// Divides every row by the largest row norm.
    pub fn max_norm_scaled(mut self) -> Self {
        let max = (0..self.n).map(|i| linalg::norm(self.row(i))).fold(0.0, f64::max);
        if max > 0.0 {
            self.features.iter_mut().for_each(|v| *v /= max);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `log(1 + e^⟨d,x⟩) − b⟨d,x⟩` with `b ∈ {0,1}`.
    Logistic,
    /// `(⟨a,x⟩ − b)²`
    LeastSquares,
}

/// Which samples a full gradient averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Node(usize),
    /// The network objective (mean over nodes).
    All,
}

/// `G_f`, `G_h` and the estimator bound `M = 2 G_f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundConstants {
    pub g_f: f64,
    pub g_h: f64,
    pub m_bound: f64,
}

/// Step-size analysis constants for a given `α`, `L` and slack `δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalysisConstants {
    pub alpha: f64,
    pub l: f64,
    pub delta: f64,
    pub beta: f64,
    pub n0: usize,
    /// `ρ = 8αL / (1 − 4αL)`
    pub rho: f64,
    /// `θ = 2α − 8α²L`
    pub theta: f64,
}

impl AnalysisConstants {
    pub fn new(alpha: f64, l: f64, delta: f64, beta: f64, n0: usize) -> Self {
        AnalysisConstants {
            alpha,
            l,
            delta,
            beta,
            n0,
            rho: 8.0 * alpha * l / (1.0 - 4.0 * alpha * l),
            theta: 2.0 * alpha - 8.0 * alpha * alpha * l,
        }
    }

    /// Largest admissible step: `α < δ / (L(4δ + 8))`.
    pub fn step_limit(&self) -> f64 {
        self.delta / (self.l * (4.0 * self.delta + 8.0))
    }

    pub fn step_ok(&self) -> bool {
        self.alpha < self.step_limit()
    }

    /// Both conditions of the linear-rate theorem: admissible step and `ρβ ≥ 2`.
    pub fn linear_rate_ok(&self) -> bool {
        self.step_ok() && self.rho * self.beta >= 2.0
    }
}

/// Smooth loss over a dataset plus a regularizer.
#[derive(Debug, Clone)]
pub struct CompositeObjective {
    pub loss: LossKind,
    pub data: Arc<Dataset>,
    pub reg: Regularizer,
}

const VALUE_CHUNK: usize = 256;

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

impl CompositeObjective {
    pub fn new(loss: LossKind, data: Arc<Dataset>, reg: Regularizer) -> Result<Self, ObjectiveError> {
        if loss == LossKind::Logistic {
            if let Some(&b) = data.labels().iter().find(|&&b| b != 0.0 && b != 1.0) {
                return Err(ObjectiveError::NonBinaryLabel(b));
            }
        }
        Ok(CompositeObjective { loss, data, reg })
    }

    pub fn d(&self) -> usize {
        self.data.d()
    }

    pub fn nodes(&self) -> usize {
        self.data.nodes()
    }

    /// Same objective with another regularizer.
    pub fn with_regularizer(&self, reg: Regularizer) -> Self {
        CompositeObjective {
            reg,
            ..self.clone()
        }
    }

    #[inline]
    fn residual(&self, x: &[f64], idx: usize) -> f64 {
        let t = linalg::dot(self.data.row(idx), x);
        let b = self.data.label(idx);
        match self.loss {
            LossKind::Logistic => sigmoid(t) - b,
            LossKind::LeastSquares => 2.0 * (t - b),
        }
    }

    /// `out += scale · ∇f^idx(x)` without bounds checks beyond debug asserts.
    #[inline]
    pub fn add_sample_grad(&self, x: &[f64], idx: usize, scale: f64, out: &mut [f64]) {
        let r = self.residual(x, idx);
        linalg::axpy(scale * r, self.data.row(idx), out);
    }

    pub fn sample_loss(&self, x: &[f64], idx: usize) -> f64 {
        let t = linalg::dot(self.data.row(idx), x);
        let b = self.data.label(idx);
        match self.loss {
            LossKind::Logistic => softplus(t) - b * t,
            LossKind::LeastSquares => (t - b) * (t - b),
        }
    }

    /// Gradient of the loss of sample `idx` (global index).
    pub fn sample_grad(&self, x: &[f64], idx: usize) -> Result<Vec<f64>, ObjectiveError> {
        if idx >= self.data.n() {
            return Err(ObjectiveError::SampleOutOfRange {
                index: idx,
                n: self.data.n(),
            });
        }
        self.check_dim(x)?;
        let mut g = vec![0.0; self.d()];
        self.add_sample_grad(x, idx, 1.0, &mut g);
        Ok(g)
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), ObjectiveError> {
        if x.len() != self.d() {
            return Err(ObjectiveError::Dimension {
                expected: self.d(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn node_samples(&self, node: usize) -> Result<&[usize], ObjectiveError> {
        let m = self.nodes();
        if node >= m {
            return Err(ObjectiveError::NodeOutOfRange { node, m });
        }
        let s = self.data.partition().node(node);
        if s.is_empty() {
            return Err(ObjectiveError::EmptyNode(node));
        }
        Ok(s)
    }

    /// Mean gradient over node `i`'s samples, computed sequentially.
    pub fn node_full_grad(&self, x: &[f64], node: usize) -> Result<Vec<f64>, ObjectiveError> {
        let samples = self.node_samples(node)?;
        let mut g = vec![0.0; self.d()];
        let inv = 1.0 / samples.len() as f64;
        for &s in samples {
            self.add_sample_grad(x, s, 1.0, &mut g);
        }
        g.iter_mut().for_each(|v| *v *= inv);
        Ok(g)
    }

    /// Full gradient of a node's mean loss, or of the network objective.
    pub fn full_grad(&self, x: &[f64], scope: Scope) -> Result<Vec<f64>, ObjectiveError> {
        self.check_dim(x)?;
        match scope {
            Scope::Node(i) => self.node_full_grad(x, i),
            Scope::All => {
                let m = self.nodes();
                let per_node = par::map_indexed(m, |i| self.node_full_grad(x, i));
                let mut g = vec![0.0; self.d()];
                for node in per_node {
                    let node = node?;
                    linalg::axpy(1.0 / m as f64, &node, &mut g);
                }
                Ok(g)
            }
        }
    }

    /// SVRG estimator `∇f^l(x) − ∇f^l(x̃) + ∇f(x̃)`; `snapshot_full` is the
    /// caller's full gradient at `x̃`.
    pub fn vr_grad(
        &self,
        x: &[f64],
        x_tilde: &[f64],
        snapshot_full: &[f64],
        sample: usize,
    ) -> Result<Vec<f64>, ObjectiveError> {
        if sample >= self.data.n() {
            return Err(ObjectiveError::SampleOutOfRange {
                index: sample,
                n: self.data.n(),
            });
        }
        let mut v = snapshot_full.to_vec();
        let coef = self.residual(x, sample) - self.residual(x_tilde, sample);
        linalg::axpy(coef, self.data.row(sample), &mut v);
        Ok(v)
    }

    /// Mean smooth loss of one node.
    pub fn node_smooth_value(&self, x: &[f64], node: usize) -> f64 {
        let samples = self.data.partition().node(node);
        let total = par::chunked_sum(samples.len(), VALUE_CHUNK, |k| self.sample_loss(x, samples[k]));
        total / samples.len() as f64
    }

    /// Network smooth loss `(1/m) Σ_i f_i(x)`.
    pub fn smooth_value(&self, x: &[f64]) -> f64 {
        let m = self.nodes();
        let parts = par::map_indexed(m, |i| {
            let samples = self.data.partition().node(i);
            samples.iter().map(|&s| self.sample_loss(x, s)).sum::<f64>() / samples.len() as f64
        });
        parts.into_iter().sum::<f64>() / m as f64
    }

    /// `F(x) = f(x) + h(x)`.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.smooth_value(x) + self.reg.value(x)
    }

    /// `F(x) − f_star`, reported raw (may be slightly negative).
    pub fn optimality_gap(&self, x: &[f64], f_star: f64) -> f64 {
        self.objective_value(x) - f_star
    }

    /// Per-sample Lipschitz constant of the gradient.
    pub fn smoothness_l(&self) -> f64 {
        let max_sq = (0..self.data.n())
            .map(|i| linalg::norm_sq(self.data.row(i)))
            .fold(0.0, f64::max);
        match self.loss {
            LossKind::Logistic => max_sq / 4.0,
            LossKind::LeastSquares => 2.0 * max_sq,
        }
    }

    /// Gradient and subgradient bounds on the ball of radius `radius`.
    pub fn bound_constants(&self, radius: f64) -> BoundConstants {
        let g_f = (0..self.data.n())
            .map(|i| {
                let a = linalg::norm(self.data.row(i));
                match self.loss {
                    // |σ(t) − b| ≤ σ(R‖d‖) for b ∈ {0,1}, |t| ≤ R‖d‖.
                    LossKind::Logistic => a * sigmoid(radius * a),
                    LossKind::LeastSquares => 2.0 * a * (a * radius + self.data.label(i).abs()),
                }
            })
            .fold(0.0, f64::max);
        BoundConstants {
            g_f,
            g_h: self.reg.g_h(self.d()),
            m_bound: 2.0 * g_f,
        }
    }

    /// Exhaustive `E‖v − ∇f(x)‖²` of the network SVRG estimator, where each
    /// node draws one sample uniformly and independently:
    /// `(1/m²) Σ_i (1/n_i) Σ_l ‖δ_l − E δ‖²`, `δ_l = ∇f_i^l(x) − ∇f_i^l(x̃)`.
    pub fn vr_variance(&self, x: &[f64], x_tilde: &[f64]) -> f64 {
        let m = self.nodes();
        let d = self.d();
        let per_node = par::map_indexed(m, |i| {
            let samples = self.data.partition().node(i);
            let deltas: Vec<Vec<f64>> = samples
                .iter()
                .map(|&s| {
                    let mut g = vec![0.0; d];
                    self.add_sample_grad(x, s, 1.0, &mut g);
                    self.add_sample_grad(x_tilde, s, -1.0, &mut g);
                    g
                })
                .collect();
            let mean = linalg::mean(&deltas);
            deltas.iter().map(|g| linalg::dist(g, &mean).powi(2)).sum::<f64>() / samples.len() as f64
        });
        per_node.into_iter().sum::<f64>() / (m * m) as f64
    }
}
