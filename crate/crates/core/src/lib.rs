//! Mean-payoff zero-sum stochastic games through their Shapley operators.
//!
//! The crate evaluates Shapley operators (monotone, additively homogeneous
//! self-maps of `R^n`), solves the ergodic equation `g + T(u) = λ·1 + u`,
//! probes ergodicity through slice spaces, scans perturbations for multiple
//! biases, extracts and simulates stationary strategies, and solves the
//! discrete p-Laplacian Dirichlet problem.

pub mod bias;
pub mod error;
pub mod ergodicity;
pub mod game;
pub mod operator;
pub mod plaplace;
pub mod quotient;
pub mod seeds;
pub mod sim;
pub mod solvers;

pub use bias::{
    bias_set_probe, scan_plane, summarize_scan, uniqueness_verdict, write_scan_csv, BiasProbe,
    ScanResult, ScanSpec, ScanSummary, Uniqueness,
};
pub use ergodicity::{
    boolean_ray_witness, ergodicity_verdict, ergodicity_verdict_with, residual_seminorm,
    slice_escape_search, slice_membership, ErgodicityReport, SliceQuery, Verdict, VerdictOptions,
    Witness,
};
pub use error::{Error, Result};
pub use game::{GameSpec, MaxOption, MinAction, Selection, StateSpec};
pub use operator::{builtin_operator, Builtin, Provenance, ShapleyOperator};
pub use plaplace::{
    apply_plaplacian, dirichlet_solve, energy, energy_gradient, DirichletConfig, DirichletError,
    DirichletSolution, PLaplacianProblem,
};
pub use quotient::{canonical_rep, hilbert_seminorm, QuotientPoint};
pub use solvers::{
    ergodic_residual, mean_payoff_estimate, solve_ergodic, value_iteration, ErgodicSolution,
    MeanPayoff, NotConverged, SolveConfig, SolveError, StopReason, ValueTrace,
};
pub use sim::{extract_strategies, induced_chain, simulate, SimReport, StationaryStrategyPair};
