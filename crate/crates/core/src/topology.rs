//! Time-varying communication graphs and their mixing matrices.
//!
//! A [`MixingSchedule`] is a finite list of doubly stochastic matrices read as
//! an infinite periodic stream: step `t` uses matrix `t mod period`. Every
//! window of `b` consecutive steps has a connected union graph, which is what
//! drives the geometric consensus bound `|φ_ij(l,g) − 1/m| ≤ Γ γ^(g−l)`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row and column sums must match 1 to this tolerance.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Number of b-windows generated per period by the `random-matching` family.
pub const RANDOM_MATCHING_WINDOWS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("need at least two nodes, got {0}")]
    TooFewNodes(usize),
    #[error("connectivity window b must be at least 1")]
    ZeroWindow,
    #[error("weight floor eta={eta} infeasible for m={m}: need 0 < eta <= 1/m")]
    InfeasibleEta { m: usize, eta: f64 },
    #[error("realized minimum weight {realized} is below the requested floor {requested}")]
    FloorViolated { requested: f64, realized: f64 },
    #[error("matrix is not {m}x{m}: got {len} entries")]
    Shape { m: usize, len: usize },
    #[error("negative or non-finite entry {value} at ({row},{col})")]
    BadEntry { row: usize, col: usize, value: f64 },
    #[error("{kind} {index} sums to {sum}, expected 1")]
    NotStochastic {
        kind: &'static str,
        index: usize,
        sum: f64,
    },
    #[error("zero pattern is not symmetric at ({0},{1})")]
    Asymmetric(usize, usize),
    #[error("diagonal entry {0} is not positive")]
    ZeroDiagonal(usize),
    #[error("window {window} (steps {start}..{end}) has a disconnected union graph")]
    Disconnected {
        window: usize,
        start: usize,
        end: usize,
    },
    #[error("span start {l} is after span end {g}")]
    BadSpan { l: usize, g: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("multi-consensus needs at least one round")]
    NoRounds,
    #[error("unknown topology family `{0}`")]
    UnknownFamily(String),
    #[error("schedule text, line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Nonnegative doubly stochastic m×m matrix with a symmetric zero pattern and
/// positive diagonal, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    m: usize,
    entries: Vec<f64>,
}

impl MixingMatrix {
    /// Validates and wraps a row-major matrix.
    pub fn from_rows(m: usize, entries: Vec<f64>) -> Result<Self, TopologyError> {
        if entries.len() != m * m {
            return Err(TopologyError::Shape {
                m,
                len: entries.len(),
            });
        }
        let w = MixingMatrix { m, entries };
        w.validate()?;
        Ok(w)
    }

    fn validate(&self) -> Result<(), TopologyError> {
        let m = self.m;
        for i in 0..m {
            for j in 0..m {
                let v = self.get(i, j);
                if !v.is_finite() || v < 0.0 {
                    return Err(TopologyError::BadEntry {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
                if (v > 0.0) != (self.get(j, i) > 0.0) {
                    return Err(TopologyError::Asymmetric(i, j));
                }
            }
            if self.get(i, i) <= 0.0 {
                return Err(TopologyError::ZeroDiagonal(i));
            }
        }
        check_doubly_stochastic(m, &self.entries)
    }

    pub fn identity(m: usize) -> Self {
        let mut entries = vec![0.0; m * m];
        for i in 0..m {
            entries[i * m + i] = 1.0;
        }
        MixingMatrix { m, entries }
    }

    /// All entries `1/m`: one application averages exactly.
    pub fn uniform(m: usize) -> Self {
        MixingMatrix {
            m,
            entries: vec![1.0 / m as f64; m * m],
        }
    }

    /// Metropolis-Hastings weights `1/(1+max(deg_i,deg_j))` on the given
    /// undirected edges, remainder on the diagonal. Duplicate edges and
    /// self-loops are ignored.
    pub fn metropolis(m: usize, edges: &[(usize, usize)]) -> Self {
        let set = normalize_edges(edges);
        let mut deg = vec![0usize; m];
        for &(a, b) in &set {
            deg[a] += 1;
            deg[b] += 1;
        }
        let mut entries = vec![0.0; m * m];
        for &(a, b) in &set {
            let w = 1.0 / (1 + deg[a].max(deg[b])) as f64;
            entries[a * m + b] = w;
            entries[b * m + a] = w;
        }
        for i in 0..m {
            let off: f64 = (0..m).filter(|&j| j != i).map(|j| entries[i * m + j]).sum();
            entries[i * m + i] = 1.0 - off;
        }
        MixingMatrix { m, entries }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.m + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Smallest strictly positive entry.
    pub fn min_positive(&self) -> f64 {
        self.entries
            .iter()
            .copied()
            .filter(|&v| v > 0.0)
            .fold(f64::INFINITY, f64::min)
    }

    /// Off-diagonal support as undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.m {
            for j in (i + 1)..self.m {
                if self.get(i, j) > 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Applies the matrix to one vector per node.
    pub fn apply(&self, params: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, TopologyError> {
        apply_dense(self.m, &self.entries, params)
    }
}

/// The ordered product `Φ(l,g) = W^g ⋯ W^l`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedMatrix {
    m: usize,
    entries: Vec<f64>,
    span: (usize, usize),
}

impl AggregatedMatrix {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn span(&self) -> (usize, usize) {
        self.span
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.m + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// `max_ij |φ_ij − 1/m|`.
    pub fn max_deviation_from_average(&self) -> f64 {
        let avg = 1.0 / self.m as f64;
        self.entries
            .iter()
            .fold(0.0, |acc, v| f64::max(acc, (v - avg).abs()))
    }

    /// Row/column sums within [`STOCHASTIC_TOL`] and entries in `[0, 1]`.
    pub fn is_doubly_stochastic(&self) -> bool {
        self.entries
            .iter()
            .all(|&v| (-STOCHASTIC_TOL..=1.0 + STOCHASTIC_TOL).contains(&v))
            && check_doubly_stochastic(self.m, &self.entries).is_ok()
    }

    pub fn apply(&self, params: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, TopologyError> {
        apply_dense(self.m, &self.entries, params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyFamily {
    /// Ring edges `e_i = (i, i+1)` assigned to slot `i mod b`.
    RingSplit,
    /// Random partial matchings per slot, completed so each window connects.
    RandomMatching,
    /// One fixed ring, repeated.
    Static,
    /// One fixed complete graph (uniform `1/m` weights), repeated.
    Complete,
}

impl TopologyFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            TopologyFamily::RingSplit => "ring-split",
            TopologyFamily::RandomMatching => "random-matching",
            TopologyFamily::Static => "static",
            TopologyFamily::Complete => "complete",
        }
    }
}

impl fmt::Display for TopologyFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TopologyFamily {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ring-split" => Ok(TopologyFamily::RingSplit),
            "random-matching" => Ok(TopologyFamily::RandomMatching),
            "static" => Ok(TopologyFamily::Static),
            "complete" => Ok(TopologyFamily::Complete),
            other => Err(TopologyError::UnknownFamily(other.to_string())),
        }
    }
}

/// Constants of the consensus bound for node count `m`, window `b` and
/// weight floor `η`: `b_0 = (m−1)b`, `γ = 1 − η^b_0`, `Γ = 2(1 + η^−b_0)`.
///
/// `η^b_0` underflows quickly, so the constants are kept in log form and
/// [`gamma`](Self::gamma) may round to exactly 1.0 in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConsensusConstants {
    pub b0: usize,
    /// `ln η`
    ln_eta: f64,
}

impl ConsensusConstants {
    pub fn new(m: usize, b: usize, eta: f64) -> Self {
        ConsensusConstants {
            b0: (m - 1) * b,
            ln_eta: eta.ln(),
        }
    }

    /// `η^b_0`, possibly 0 after underflow.
    pub fn eta_pow_b0(&self) -> f64 {
        (self.b0 as f64 * self.ln_eta).exp()
    }

    pub fn ln_gamma(&self) -> f64 {
        (-self.eta_pow_b0()).ln_1p()
    }

    pub fn gamma(&self) -> f64 {
        1.0 - self.eta_pow_b0()
    }

    /// `ln Γ = ln 2 + b_0·(−ln η) + ln(1 + η^b_0)`
    pub fn ln_big_gamma(&self) -> f64 {
        std::f64::consts::LN_2 - self.b0 as f64 * self.ln_eta + self.eta_pow_b0().ln_1p()
    }

    pub fn big_gamma(&self) -> f64 {
        self.ln_big_gamma().exp()
    }

    /// `Γ γ^span`; `+inf` when it overflows.
    pub fn bound(&self, span: usize) -> f64 {
        (self.ln_big_gamma() + span as f64 * self.ln_gamma()).exp()
    }

    /// `1 − √γ`, computed without cancellation.
    fn one_minus_sqrt_gamma(&self) -> f64 {
        -(0.5 * self.ln_gamma()).exp_m1()
    }

    /// A constant `D_0 ≥ Σ_{k≥1} γ^(k/2)` (the geometric sum itself).
    pub fn d0(&self) -> f64 {
        let r = (0.5 * self.ln_gamma()).exp();
        r / self.one_minus_sqrt_gamma()
    }

    /// A constant `D_1 ≥ Σ_{k≥1} √k γ^(k/2)`; uses `√k ≤ (k/c + c)/2`
    /// optimised over `c`, which gives `r/(1−r)^(3/2)` with `r = √γ`.
    pub fn d1(&self) -> f64 {
        let r = (0.5 * self.ln_gamma()).exp();
        r / self.one_minus_sqrt_gamma().powf(1.5)
    }
}

/// A periodic stream of mixing matrices with b-connectivity metadata.
#[derive(Debug, Clone)]
pub struct MixingSchedule {
    m: usize,
    b: usize,
    eta: f64,
    family: TopologyFamily,
    seed: u64,
    matrices: Vec<MixingMatrix>,
    /// `cycles[o]` = product of one full period starting at offset `o`.
    cycles: Vec<Vec<f64>>,
}

/// Builds a schedule for `family` and checks every invariant.
///
/// `eta` is a requested floor; the stored η is the realized minimum positive
/// entry across the period, which is never smaller for Metropolis weights.
pub fn make_schedule(
    m: usize,
    b: usize,
    eta: f64,
    family: TopologyFamily,
    seed: u64,
) -> Result<MixingSchedule, TopologyError> {
    if m < 2 {
        return Err(TopologyError::TooFewNodes(m));
    }
    if b == 0 {
        return Err(TopologyError::ZeroWindow);
    }
    if !(eta > 0.0 && eta * m as f64 <= 1.0 + 1e-12) {
        return Err(TopologyError::InfeasibleEta { m, eta });
    }
    let matrices = match family {
        TopologyFamily::RingSplit => ring_split(m, b),
        TopologyFamily::RandomMatching => random_matching(m, b, seed),
        TopologyFamily::Static => vec![MixingMatrix::metropolis(m, &ring_edges(m))],
        TopologyFamily::Complete => vec![MixingMatrix::uniform(m)],
    };
    let schedule = MixingSchedule::from_parts(m, b, f64::NAN, family, seed, matrices)?;
    if schedule.eta < eta * (1.0 - 1e-12) {
        return Err(TopologyError::FloorViolated {
            requested: eta,
            realized: schedule.eta,
        });
    }
    Ok(schedule)
}

impl MixingSchedule {
    /// Assembles a schedule from explicit matrices. A NaN `eta` means "use the
    /// realized minimum positive entry".
    pub fn from_parts(
        m: usize,
        b: usize,
        eta: f64,
        family: TopologyFamily,
        seed: u64,
        matrices: Vec<MixingMatrix>,
    ) -> Result<Self, TopologyError> {
        if m < 2 {
            return Err(TopologyError::TooFewNodes(m));
        }
        if b == 0 {
            return Err(TopologyError::ZeroWindow);
        }
        for w in &matrices {
            if w.m != m {
                return Err(TopologyError::Dimension {
                    expected: m,
                    got: w.m,
                });
            }
            w.validate()?;
        }
        let realized = matrices
            .iter()
            .map(MixingMatrix::min_positive)
            .fold(f64::INFINITY, f64::min);
        let eta = if eta.is_nan() { realized } else { eta };
        let cycles = (0..matrices.len())
            .map(|o| {
                let mut acc = identity_entries(m);
                for t in 0..matrices.len() {
                    let w = &matrices[(o + t) % matrices.len()];
                    acc = matmul(m, &w.entries, &acc);
                }
                acc
            })
            .collect();
        let schedule = MixingSchedule {
            m,
            b,
            eta,
            family,
            seed,
            matrices,
            cycles,
        };
        schedule.check_b_connected()?;
        Ok(schedule)
    }

    /// The trivial one-node stream `W = [1]`; consensus is the identity.
    pub fn single_node() -> Self {
        MixingSchedule {
            m: 1,
            b: 1,
            eta: 1.0,
            family: TopologyFamily::Static,
            seed: 0,
            matrices: vec![MixingMatrix::identity(1)],
            cycles: vec![vec![1.0]],
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn b(&self) -> usize {
        self.b
    }

    /// Weight floor used for the consensus constants.
    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn family(&self) -> TopologyFamily {
        self.family
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn period(&self) -> usize {
        self.matrices.len()
    }

    pub fn matrices(&self) -> &[MixingMatrix] {
        &self.matrices
    }

    /// Matrix used at global communication step `t`.
    pub fn matrix(&self, t: usize) -> &MixingMatrix {
        &self.matrices[t % self.matrices.len()]
    }

    pub fn constants(&self) -> ConsensusConstants {
        ConsensusConstants::new(self.m, self.b, self.eta)
    }

    /// Verifies that every b-window of the periodic stream has a connected
    /// union graph (windows repeat after `lcm(period, b)` steps).
    pub fn check_b_connected(&self) -> Result<(), TopologyError> {
        let p = self.matrices.len();
        let horizon = lcm(p, self.b);
        for window in 0..horizon / self.b {
            let start = window * self.b;
            let end = start + self.b;
            let mut uf = UnionFind::new(self.m);
            for t in start..end {
                for (a, c) in self.matrix(t).edges() {
                    uf.union(a, c);
                }
            }
            if uf.components() != 1 {
                return Err(TopologyError::Disconnected { window, start, end });
            }
        }
        Ok(())
    }

    /// Product of the `rounds` matrices starting at step `start`, i.e.
    /// `Φ(start, start+rounds−1)`, computed with cached period products and
    /// repeated squaring. Agrees with [`phi`] up to rounding.
    pub fn window_product(&self, start: usize, rounds: usize) -> AggregatedMatrix {
        assert!(rounds >= 1, "empty window");
        let m = self.m;
        let p = self.matrices.len();
        let o = start % p;
        let (q, r) = (rounds / p, rounds % p);
        let mut acc = identity_entries(m);
        if q > 0 {
            acc = matpow(m, &self.cycles[o], q);
        }
        for t in 0..r {
            acc = matmul(m, &self.matrices[(o + t) % p].entries, &acc);
        }
        AggregatedMatrix {
            m,
            entries: acc,
            span: (start, start + rounds - 1),
        }
    }

    /// Text form: header `m b eta family seed`, then one blank-line separated
    /// block of rows per matrix, entries with 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{} {} {:.16e} {} {}\n",
            self.m, self.b, self.eta, self.family, self.seed
        );
        for w in &self.matrices {
            out.push('\n');
            for i in 0..self.m {
                let row: Vec<String> = (0..self.m).map(|j| format!("{:.16e}", w.get(i, j))).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TopologyError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, header) = lines.next().ok_or(TopologyError::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(TopologyError::Parse {
                line: hline,
                msg: format!("header needs 5 fields `m b eta family seed`, got {}", fields.len()),
            });
        }
        let perr = |msg: String| TopologyError::Parse { line: hline, msg };
        let m: usize = fields[0].parse().map_err(|e| perr(format!("m: {e}")))?;
        let b: usize = fields[1].parse().map_err(|e| perr(format!("b: {e}")))?;
        let eta: f64 = fields[2].parse().map_err(|e| perr(format!("eta: {e}")))?;
        let family: TopologyFamily = fields[3].parse()?;
        let seed: u64 = fields[4].parse().map_err(|e| perr(format!("seed: {e}")))?;

        let mut matrices = Vec::new();
        let mut current = Vec::with_capacity(m * m);
        for (line, row) in lines {
            let vals = row
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| TopologyError::Parse {
                    line,
                    msg: e.to_string(),
                })?;
            if vals.len() != m {
                return Err(TopologyError::Parse {
                    line,
                    msg: format!("expected {m} entries, got {}", vals.len()),
                });
            }
            current.extend(vals);
            if current.len() == m * m {
                matrices.push(MixingMatrix::from_rows(m, std::mem::take(&mut current))?);
            }
        }
        if !current.is_empty() || matrices.is_empty() {
            return Err(TopologyError::Parse {
                line: text.lines().count(),
                msg: "incomplete or missing matrix block".into(),
            });
        }
        MixingSchedule::from_parts(m, b, eta, family, seed, matrices)
    }
}

/// `Φ(l,g) = W^g W^(g−1) ⋯ W^l`, multiplied factor by factor.
pub fn phi(schedule: &MixingSchedule, l: usize, g: usize) -> Result<AggregatedMatrix, TopologyError> {
    if l > g {
        return Err(TopologyError::BadSpan { l, g });
    }
    let m = schedule.m;
    let mut acc = schedule.matrix(l).entries.clone();
    for t in (l + 1)..=g {
        acc = matmul(m, &schedule.matrix(t).entries, &acc);
    }
    Ok(AggregatedMatrix {
        m,
        entries: acc,
        span: (l, g),
    })
}

/// `Φ(l, l), Φ(l, l+1), …, Φ(l, l+max_span)`, built incrementally.
pub fn phi_sequence(schedule: &MixingSchedule, l: usize, max_span: usize) -> Vec<AggregatedMatrix> {
    let m = schedule.m;
    let mut out = Vec::with_capacity(max_span + 1);
    let mut acc = schedule.matrix(l).entries.clone();
    for g in l..=l + max_span {
        if g > l {
            acc = matmul(m, &schedule.matrix(g).entries, &acc);
        }
        out.push(AggregatedMatrix {
            m,
            entries: acc.clone(),
            span: (l, g),
        });
    }
    out
}

/// `Γ γ^span` with the schedule's constants.
pub fn consensus_bound(schedule: &MixingSchedule, span: usize) -> f64 {
    schedule.constants().bound(span)
}

/// One gossip step: `out_i = Σ_j w_ij in_j`.
pub fn gossip_once(params: &[Vec<f64>], w: &MixingMatrix) -> Result<Vec<Vec<f64>>, TopologyError> {
    w.apply(params)
}

/// `rounds` consecutive gossip steps using schedule matrices
/// `start, start+1, …`. Returns the new vectors and the next free step.
pub fn multi_consensus(
    params: &[Vec<f64>],
    schedule: &MixingSchedule,
    start: usize,
    rounds: usize,
) -> Result<(Vec<Vec<f64>>, usize), TopologyError> {
    if rounds == 0 {
        return Err(TopologyError::NoRounds);
    }
    let mut cur = gossip_once(params, schedule.matrix(start))?;
    for t in (start + 1)..(start + rounds) {
        cur = gossip_once(&cur, schedule.matrix(t))?;
    }
    Ok((cur, start + rounds))
}

fn ring_edges(m: usize) -> Vec<(usize, usize)> {
    if m == 2 {
        return vec![(0, 1)];
    }
    (0..m).map(|i| (i, (i + 1) % m)).collect()
}

fn ring_split(m: usize, b: usize) -> Vec<MixingMatrix> {
    let ring = ring_edges(m);
    (0..b)
        .map(|slot| {
            let edges: Vec<_> = ring
                .iter()
                .enumerate()
                .filter(|(i, _)| i % b == slot)
                .map(|(_, &e)| e)
                .collect();
            MixingMatrix::metropolis(m, &edges)
        })
        .collect()
}

fn random_matching(m: usize, b: usize, seed: u64) -> Vec<MixingMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(b * RANDOM_MATCHING_WINDOWS);
    let mut nodes: Vec<usize> = (0..m).collect();
    for _ in 0..RANDOM_MATCHING_WINDOWS {
        let mut slots: Vec<BTreeSet<(usize, usize)>> = vec![BTreeSet::new(); b];
        for slot in slots.iter_mut() {
            nodes.shuffle(&mut rng);
            for pair in nodes.chunks_exact(2) {
                if rng.random_bool(0.5) {
                    slot.insert(ordered(pair[0], pair[1]));
                }
            }
        }
        // Join components of the window union until it is connected.
        loop {
            let mut uf = UnionFind::new(m);
            for slot in &slots {
                for &(a, c) in slot {
                    uf.union(a, c);
                }
            }
            if uf.components() == 1 {
                break;
            }
            let root0 = uf.find(0);
            let other: Vec<usize> = (0..m).filter(|&v| uf.find(v) != root0).collect();
            let inside: Vec<usize> = (0..m).filter(|&v| uf.find(v) == root0).collect();
            let a = inside[rng.random_range(0..inside.len())];
            let c = other[rng.random_range(0..other.len())];
            let slot = rng.random_range(0..b);
            slots[slot].insert(ordered(a, c));
        }
        for slot in slots {
            let edges: Vec<_> = slot.into_iter().collect();
            out.push(MixingMatrix::metropolis(m, &edges));
        }
    }
    out
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn normalize_edges(edges: &[(usize, usize)]) -> BTreeSet<(usize, usize)> {
    edges
        .iter()
        .filter(|(a, b)| a != b)
        .map(|&(a, b)| ordered(a, b))
        .collect()
}

fn check_doubly_stochastic(m: usize, entries: &[f64]) -> Result<(), TopologyError> {
    for i in 0..m {
        let row: f64 = entries[i * m..(i + 1) * m].iter().sum();
        if (row - 1.0).abs() > STOCHASTIC_TOL {
            return Err(TopologyError::NotStochastic {
                kind: "row",
                index: i,
                sum: row,
            });
        }
        let col: f64 = (0..m).map(|r| entries[r * m + i]).sum();
        if (col - 1.0).abs() > STOCHASTIC_TOL {
            return Err(TopologyError::NotStochastic {
                kind: "column",
                index: i,
                sum: col,
            });
        }
    }
    Ok(())
}

fn apply_dense(m: usize, entries: &[f64], params: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, TopologyError> {
    if params.len() != m {
        return Err(TopologyError::Dimension {
            expected: m,
            got: params.len(),
        });
    }
    let d = params[0].len();
    if let Some(bad) = params.iter().find(|p| p.len() != d) {
        return Err(TopologyError::Dimension {
            expected: d,
            got: bad.len(),
        });
    }
    Ok((0..m)
        .map(|i| {
            let mut out = vec![0.0; d];
            for (j, p) in params.iter().enumerate() {
                let w = entries[i * m + j];
                if w != 0.0 {
                    for (o, v) in out.iter_mut().zip(p) {
                        *o += w * v;
                    }
                }
            }
            out
        })
        .collect())
}

fn identity_entries(m: usize) -> Vec<f64> {
    MixingMatrix::identity(m).entries
}

/// Row-major `a · b`.
fn matmul(m: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for k in 0..m {
            let aik = a[i * m + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i * m + j] += aik * b[k * m + j];
            }
        }
    }
    out
}

fn matpow(m: usize, base: &[f64], mut exp: usize) -> Vec<f64> {
    let mut result = identity_entries(m);
    let mut sq = base.to_vec();
    while exp > 0 {
        if exp & 1 == 1 {
            result = matmul(m, &sq, &result);
        }
        exp >>= 1;
        if exp > 0 {
            sq = matmul(m, &sq, &sq);
        }
    }
    result
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }

    fn components(&mut self) -> usize {
        (0..self.parent.len()).filter(|&v| self.find(v) == v).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn two_nodes_unique_matrix() {
        let s = make_schedule(2, 1, 0.5, TopologyFamily::Static, 0).unwrap();
        assert_eq!(s.period(), 1);
        assert_eq!(s.matrix(0).entries(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn static_ring_eight_nodes() {
        let s = make_schedule(8, 1, 0.1, TopologyFamily::Static, 7).unwrap();
        assert_eq!(s.period(), 1);
        let w = s.matrix(0);
        for i in 0..8 {
            assert_close(w.get(i, i), 1.0 / 3.0, 1e-15);
            assert_close(w.get(i, (i + 1) % 8), 1.0 / 3.0, 1e-15);
            assert_eq!(w.get(i, (i + 4) % 8), 0.0);
        }
        assert!((s.eta() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ring_split_b50_slots_disconnected_union_connected() {
        let s = make_schedule(8, 50, 0.1, TopologyFamily::RingSplit, 0).unwrap();
        assert_eq!(s.period(), 50);
        for w in s.matrices() {
            let mut uf = UnionFind::new(8);
            for (a, b) in w.edges() {
                uf.union(a, b);
            }
            assert!(uf.components() > 1);
        }
        assert!(s.check_b_connected().is_ok());
        // Empty slots are the identity.
        assert_eq!(s.matrix(49), &MixingMatrix::identity(8));
    }

    #[test]
    fn parameter_validation() {
        assert_eq!(
            make_schedule(1, 1, 0.5, TopologyFamily::Static, 0).unwrap_err(),
            TopologyError::TooFewNodes(1)
        );
        assert!(matches!(
            make_schedule(4, 1, 0.3, TopologyFamily::Static, 0),
            Err(TopologyError::InfeasibleEta { .. })
        ));
        assert!(matches!(
            make_schedule(4, 1, 0.0, TopologyFamily::Static, 0),
            Err(TopologyError::InfeasibleEta { .. })
        ));
        assert_eq!(
            make_schedule(4, 0, 0.1, TopologyFamily::Static, 0).unwrap_err(),
            TopologyError::ZeroWindow
        );
    }

    #[test]
    fn rejects_non_stochastic_and_asymmetric() {
        assert!(matches!(
            MixingMatrix::from_rows(2, vec![0.6, 0.5, 0.4, 0.5]),
            Err(TopologyError::NotStochastic { .. })
        ));
        assert!(matches!(
            MixingMatrix::from_rows(2, vec![1.0, 0.0, 0.0, 0.0]),
            Err(TopologyError::ZeroDiagonal(1))
        ));
        let asym = vec![0.5, 0.5, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 1.0];
        assert!(MixingMatrix::from_rows(3, asym).is_ok());
        let asym = vec![0.5, 0.5, 0.0, 0.25, 0.5, 0.25, 0.25, 0.0, 0.75];
        assert!(matches!(
            MixingMatrix::from_rows(3, asym),
            Err(TopologyError::Asymmetric(..))
        ));
    }

    #[test]
    fn phi_single_factor_and_bad_span() {
        let s = make_schedule(5, 3, 0.1, TopologyFamily::RingSplit, 0).unwrap();
        let p = phi(&s, 4, 4).unwrap();
        assert_eq!(p.entries(), s.matrix(4).entries());
        assert_eq!(phi(&s, 3, 2).unwrap_err(), TopologyError::BadSpan { l: 3, g: 2 });
    }

    #[test]
    fn phi_of_uniform_is_uniform() {
        let s = make_schedule(6, 1, 0.1, TopologyFamily::Complete, 0).unwrap();
        let p = phi(&s, 0, 17).unwrap();
        for &v in p.entries() {
            assert_close(v, 1.0 / 6.0, 1e-15);
        }
    }

    #[test]
    fn phi_m4_ring_split_span_20_matches_hand_product() {
        let s = make_schedule(4, 2, 0.1, TopologyFamily::RingSplit, 0).unwrap();
        // Independent oracle: explicit 4x4 products written out with arrays.
        let to_arr = |w: &MixingMatrix| {
            let mut a = [[0.0f64; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    a[i][j] = w.get(i, j);
                }
            }
            a
        };
        let mut acc = to_arr(s.matrix(0));
        for t in 1..=20 {
            let w = to_arr(s.matrix(t));
            let mut next = [[0.0f64; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    for k in 0..4 {
                        next[i][j] += w[i][k] * acc[k][j];
                    }
                }
            }
            acc = next;
        }
        let p = phi(&s, 0, 20).unwrap();
        let mut dev: f64 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                assert_close(p.get(i, j), acc[i][j], 1e-14);
                dev = dev.max((acc[i][j] - 0.25).abs());
            }
        }
        assert_close(p.max_deviation_from_average(), dev, 1e-14);
        assert!(dev <= consensus_bound(&s, 20));
    }

    #[test]
    fn constants_paper_values() {
        let c = ConsensusConstants::new(8, 1, 0.1);
        assert_eq!(c.b0, 7);
        assert_close(c.gamma(), 1.0 - 1e-7, 1e-15);
        assert_close(c.big_gamma() / (2.0 * (1.0 + 1e7)), 1.0, 1e-12);
        assert_close(c.bound(0), c.big_gamma(), 1e-6 * c.big_gamma());
    }

    #[test]
    fn bound_monotone_in_span() {
        let s = make_schedule(5, 3, 0.1, TopologyFamily::RandomMatching, 3).unwrap();
        let mut prev = f64::INFINITY;
        for span in 0..200 {
            let b = consensus_bound(&s, span);
            assert!(b <= prev);
            prev = b;
        }
    }

    #[test]
    fn d_constants_dominate_series() {
        for &(m, b, eta) in &[(3usize, 1usize, 0.3f64), (4, 1, 0.25), (3, 2, 0.33)] {
            let c = ConsensusConstants::new(m, b, eta);
            let r = c.gamma().sqrt();
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for k in 1..2_000_000u64 {
                let rk = r.powf(k as f64);
                s0 += rk;
                s1 += (k as f64).sqrt() * rk;
                s2 += rk * rk;
                s3 += k as f64 * rk * rk;
                if rk < 1e-300 {
                    break;
                }
            }
            assert!(c.d0() >= s0 * (1.0 - 1e-9));
            assert!(c.d1() >= s1 * (1.0 - 1e-9));
            assert!(c.d0().powi(2) >= s2);
            assert!(c.d1().powi(2) >= s3);
        }
    }

    #[test]
    fn gossip_identity_and_uniform() {
        let p = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.0]];
        assert_eq!(gossip_once(&p, &MixingMatrix::identity(3)).unwrap(), p);
        let out = gossip_once(&p, &MixingMatrix::uniform(3)).unwrap();
        for o in &out {
            assert_close(o[0], 1.5, 1e-15);
            assert_close(o[1], 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn gossip_three_node_ring_by_hand() {
        // Metropolis on the triangle: every degree is 2, weights 1/3 everywhere.
        let w = MixingMatrix::metropolis(3, &ring_edges(3));
        let e = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let out = gossip_once(&e, &w).unwrap();
        for o in &out {
            for &v in o {
                assert_close(v, 1.0 / 3.0, 1e-15);
            }
        }
        // A path 0-1-2 has degrees (1,2,1): weights 1/3 on both edges,
        // diagonal (2/3, 1/3, 2/3).
        let w = MixingMatrix::metropolis(3, &[(0, 1), (1, 2)]);
        let out = gossip_once(&e, &w).unwrap();
        let expected = [[2.0 / 3.0, 1.0 / 3.0, 0.0], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], [0.0, 1.0 / 3.0, 2.0 / 3.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_close(out[i][j], expected[i][j], 1e-15);
            }
        }
    }

    #[test]
    fn gossip_dimension_mismatch() {
        let w = MixingMatrix::identity(2);
        assert!(gossip_once(&[vec![1.0]], &w).is_err());
        assert!(gossip_once(&[vec![1.0], vec![1.0, 2.0]], &w).is_err());
    }

    #[test]
    fn multi_consensus_matches_steps_and_phi() {
        let s = make_schedule(4, 2, 0.1, TopologyFamily::RingSplit, 0).unwrap();
        let p = vec![vec![1.0, -2.0], vec![0.0, 4.0], vec![3.0, 3.0], vec![-1.0, 0.5]];
        let (one, next) = multi_consensus(&p, &s, 5, 1).unwrap();
        assert_eq!(next, 6);
        assert_eq!(one, gossip_once(&p, s.matrix(5)).unwrap());

        let (ten, next) = multi_consensus(&p, &s, 0, 10).unwrap();
        assert_eq!(next, 10);
        let via_phi = phi(&s, 0, 9).unwrap().apply(&p).unwrap();
        let mean = crate::linalg::mean(&p);
        let total: f64 = p.iter().map(|v| crate::linalg::norm(v)).sum();
        for (a, b) in ten.iter().zip(&via_phi) {
            assert!(crate::linalg::dist(a, b) < 1e-13);
            assert!(crate::linalg::dist(a, &mean) <= consensus_bound(&s, 10) * total);
        }
        assert_eq!(multi_consensus(&p, &s, 0, 0).unwrap_err(), TopologyError::NoRounds);
    }

    #[test]
    fn consensus_fixed_point() {
        let s = make_schedule(5, 3, 0.1, TopologyFamily::RandomMatching, 1).unwrap();
        let p = vec![vec![0.25, -3.0]; 5];
        let (out, _) = multi_consensus(&p, &s, 2, 7).unwrap();
        for o in out {
            assert_close(o[0], 0.25, 1e-15);
            assert_close(o[1], -3.0, 1e-15);
        }
    }

    #[test]
    fn window_product_agrees_with_phi() {
        for family in [TopologyFamily::RingSplit, TopologyFamily::RandomMatching] {
            let s = make_schedule(6, 3, 0.1, family, 11).unwrap();
            for &(start, rounds) in &[(0usize, 1usize), (2, 5), (7, 40), (13, 131)] {
                let fast = s.window_product(start, rounds);
                let slow = phi(&s, start, start + rounds - 1).unwrap();
                assert_eq!(fast.span(), slow.span());
                for (a, b) in fast.entries().iter().zip(slow.entries()) {
                    assert_close(*a, *b, 1e-13);
                }
            }
        }
    }

    #[test]
    fn phi_sequence_matches_phi() {
        let s = make_schedule(5, 2, 0.1, TopologyFamily::RandomMatching, 4).unwrap();
        let seq = phi_sequence(&s, 3, 12);
        assert_eq!(seq.len(), 13);
        for (span, p) in seq.iter().enumerate() {
            assert_eq!(p, &phi(&s, 3, 3 + span).unwrap());
        }
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let s = make_schedule(5, 2, 0.1, TopologyFamily::RandomMatching, 42).unwrap();
        let text = s.to_text();
        let back = MixingSchedule::from_text(&text).unwrap();
        assert_eq!(back.m(), 5);
        assert_eq!(back.b(), 2);
        assert_eq!(back.family(), TopologyFamily::RandomMatching);
        assert_eq!(back.seed(), 42);
        assert_eq!(back.eta().to_bits(), s.eta().to_bits());
        assert_eq!(back.matrices(), s.matrices());
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn text_parse_errors() {
        assert!(matches!(MixingSchedule::from_text(""), Err(TopologyError::Parse { .. })));
        assert!(matches!(
            MixingSchedule::from_text("2 1 0.5 static\n"),
            Err(TopologyError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            MixingSchedule::from_text("2 1 0.5 static 0\n0.5 0.5\n0.5\n"),
            Err(TopologyError::Parse { line: 3, .. })
        ));
        assert!(matches!(
            MixingSchedule::from_text("2 1 0.5 torus 0\n0.5 0.5\n0.5 0.5\n"),
            Err(TopologyError::UnknownFamily(_))
        ));
        // A disconnected single-matrix schedule fails b-connectivity.
        assert!(matches!(
            MixingSchedule::from_text("2 1 1 static 0\n1 0\n0 1\n"),
            Err(TopologyError::Disconnected { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn generated_schedules_are_valid(
            m in 2usize..9,
            b in 1usize..8,
            seed in any::<u64>(),
            fam in 0usize..4,
        ) {
            let family = [TopologyFamily::RingSplit, TopologyFamily::RandomMatching,
                          TopologyFamily::Static, TopologyFamily::Complete][fam];
            let s = make_schedule(m, b, 1.0 / m as f64, family, seed).unwrap();
            prop_assert!(s.check_b_connected().is_ok());
            for w in s.matrices() {
                prop_assert!(MixingMatrix::from_rows(m, w.entries().to_vec()).is_ok());
                prop_assert!(w.min_positive() >= s.eta());
            }
            let c = s.constants();
            prop_assert!(c.big_gamma().is_finite() || c.ln_big_gamma().is_finite());
            prop_assert!(c.ln_gamma() <= 0.0);
            let p = phi(&s, seed as usize % 7, seed as usize % 7 + 2 * b).unwrap();
            prop_assert!(p.is_doubly_stochastic());
        }

        #[test]
        fn gossip_preserves_mean_and_contracts(
            seed in any::<u64>(),
            m in 2usize..8,
            vals in proptest::collection::vec(-100.0f64..100.0, 8 * 3),
        ) {
            let s = make_schedule(m, 2, 0.1f64.min(1.0 / m as f64), TopologyFamily::RandomMatching, seed).unwrap();
            let p: Vec<Vec<f64>> = (0..m).map(|i| vals[i * 3..i * 3 + 3].to_vec()).collect();
            let before = crate::linalg::mean(&p);
            let out = gossip_once(&p, s.matrix(0)).unwrap();
            let after = crate::linalg::mean(&out);
            let tol = 1e-12 * crate::linalg::norm(&before) + 1e-12;
            prop_assert!(crate::linalg::dist(&before, &after) <= tol);
            prop_assert!(crate::linalg::max_deviation(&out) <= crate::linalg::max_deviation(&p) * (1.0 + 1e-12) + 1e-12);
            // Composed window product contracts as well.
            let win = s.window_product(0, s.b()).apply(&p).unwrap();
            prop_assert!(crate::linalg::max_deviation(&win) <= crate::linalg::max_deviation(&p) * (1.0 + 1e-12) + 1e-12);
        }
    }
}
