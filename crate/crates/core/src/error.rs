use thiserror::Error;

use crate::tree::BrwTree;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid law: {0}")]
    InvalidLaw(String),
    #[error("offspring law is not supercritical (mean child count {mean})")]
    NonSupercritical { mean: f64 },
    #[error("boundary normalization did not converge after {iterations} iterations (residual {residual:e})")]
    NoBoundarySolution { iterations: usize, residual: f64 },
    #[error("diagnostic method {method} is not supported for this law")]
    MethodUnsupported { method: &'static str },
    #[error("law is not boundary-normalized (m0 = {m0}, m1 = {m1})")]
    NotBoundaryNormalized { m0: f64, m1: f64 },

    #[error("generation {generation} would hold {population} particles, above the cap of {cap}")]
    CapExceeded {
        generation: usize,
        population: usize,
        cap: usize,
        partial: Box<BrwTree>,
    },
    #[error("generation {requested} is outside the grown depth {depth}")]
    DepthOutOfRange { requested: usize, depth: usize },
    #[error("invalid node (generation {generation}, index {index})")]
    InvalidNode { generation: usize, index: usize },
    #[error("insufficient depth: node at generation {generation} needs {needed} levels, tree has {depth}")]
    InsufficientDepth {
        generation: usize,
        needed: usize,
        depth: usize,
    },
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("renewal method {method} does not apply to this walk: {reason}")]
    MethodMismatch { method: &'static str, reason: String },
    #[error("renewal argument {0} outside the table domain")]
    RenewalDomainExceeded(f64),
    #[error("state {state} lies below the barrier {barrier}")]
    StateBelowBarrier { state: f64, barrier: f64 },
    #[error("ladder height sampling hit the step cap on every replica")]
    HorizonExceeded,
    #[error("domain error: {0}")]
    DomainError(String),

    #[error("spine moved below the barrier: {position} < {barrier}")]
    BarrierViolated { position: f64, barrier: f64 },
    #[error("rejection budget exhausted after {0} proposals")]
    RejectionBudgetExceeded(usize),
    #[error("window [{start}, {end}] is outside the spine of depth {depth}")]
    WindowOutOfRange {
        start: usize,
        end: usize,
        depth: usize,
    },

    #[error("paths have depth {depth}, at least {required} is needed")]
    DepthTooShallow { depth: usize, required: usize },
    #[error("nonpositive mass in replica {replica} at n = {n}")]
    NonpositiveMass { replica: usize, n: usize },

    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("{failed} of {total} replicas failed; first failure: {first}")]
    WorkerFailure {
        failed: usize,
        total: usize,
        first: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
