use serde::{Deserialize, Serialize};

/// One traced iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    /// Fixed-point residual `‖ω^{k+1} − ω^k‖` in the solver's metric.
    pub fp_residual_phi: f64,
    pub kkt_residual: f64,
    pub max_constraint_violation: f64,
    pub wall_ns: u64,
}

/// Solver settings and step sizes a run actually used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub algorithm: String,
    pub max_iters: usize,
    pub residual_tol: f64,
    pub kkt_tol: f64,
    pub trace_every: usize,
    pub alphas: Vec<f64>,
    pub gamma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Fixed-point residual fell below `residual_tol`.
    pub converged: bool,
    /// Final KKT residual is at most `kkt_tol`.
    pub kkt_met: bool,
    pub iterations: usize,
    pub final_fp_residual: f64,
    pub final_kkt_residual: f64,
    pub trace: Vec<TraceRow>,
    pub config_echo: ConfigEcho,
    /// Iterate pairs validated against the forward-backward inclusion.
    pub inclusion_checks: usize,
    pub inclusion_failures: usize,
    pub wall_ns: u64,
}
