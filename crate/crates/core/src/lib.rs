//! Decentralized stochastic proximal gradient descent with variance reduction
//! (DPSVRG) over time-varying networks.
//!
//! The crate is split along the simulator's layers:
//!
//! * [`topology`]: b-connected schedules of doubly stochastic mixing matrices,
//!   aggregated products and gossip.
//! * [`proximal`]: exact and inexact proximal operators plus their error measure.
//! * [`objective`]: composite logistic / least-squares objectives, the SVRG
//!   estimator and the smoothness and bound constants.
//! * [`algorithms`]: DPSVRG, the centralized inexact Prox-SVRG it reduces to,
//!   the DSPG baseline and the reference solver.
//! * [`harness`]: dataset IO, experiment orchestration and the verification
//!   battery behind the `dpsvrg` CLI.
//!
//! Per-node work inside one iteration runs on rayon when the `parallel`
//! feature is enabled (the default) and sequentially otherwise. Results are
//! bit-identical in both modes.

// Negated comparisons reject NaN inputs on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod harness;

pub mod linalg;
pub mod objective;
pub mod par;
pub mod proximal;
pub mod topology;

pub use algorithms::{
    run_dpsvrg, run_dspg, run_inexact_prox_svrg, run_reference, ConsensusPolicy, DpsvrgOutput,
    ErrorTrace, InexactErrors, MetricsRecord, MetricsSink, ReferenceSolution, RunConfig,
    StepSchedule,
};
pub use objective::{CompositeObjective, Dataset, LossKind};
pub use proximal::{Regularizer, RegularizerKind};
pub use topology::{MixingMatrix, MixingSchedule, TopologyFamily};
