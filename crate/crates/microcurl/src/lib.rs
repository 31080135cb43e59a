//! Quasistatic solver and verification laboratory for the microcurl model of
//! gradient plasticity.
//!
//! The crate implements four rate-independent plasticity variants
//! (single-crystal / polycrystal crossed with isotropic / linear kinematic
//! hardening) plus the relaxed micromorphic elastic model, on a structured
//! grid with mimetic one-sided difference operators. On top of the solver
//! sits a verification layer that estimates coercivity constants, Korn-type
//! constants, norm-equivalence ratios, penalty-limit gaps and uniqueness
//! discrepancies, and cross-checks every local return map against a
//! brute-force minimization oracle.
//!
//! Modules:
//! - [`tensor3`]: pointwise 3x3 tensor algebra, isotropic elasticity, slip systems
//! - [`grid_fields`]: structured-grid fields and the discrete grad/curl/div complex
//! - [`materials`]: free energies, stresses, yield functions, return maps
//! - [`solver`]: incremental alternating minimization of the coupled system
//! - [`verify`]: numerical certification of the model's analytical structure
//! - [`cli_io`]: config parsing, scenario library, CSV/JSON writers, CLI

pub mod cli_io;
pub mod grid_fields;
pub mod materials;
pub mod solver;
pub mod tensor3;
pub mod verify;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// validation -> 1, solver failure -> 2, verification failure -> 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid parameters, config contents, or precondition violations.
    #[error("validation error: {0}")]
    Validation(String),

    /// Config file rejected; each entry carries a 1-based line number.
    #[error("config error:\n{}", format_config_issues(.0))]
    Config(Vec<ConfigIssue>),

    /// A linear solve did not reach its tolerance.
    #[error("{context}: CG did not converge within {iters} iterations (relative residual {residual:.3e})")]
    CgNonConvergence {
        context: &'static str,
        iters: usize,
        residual: f64,
    },

    /// The per-point plastic solve did not reach its fixed point.
    #[error("local return map did not converge at node ({0}, {1}, {2}): last slip change {3:.3e}", .node[0], .node[1], .node[2], .residual)]
    LocalNonConvergence { node: [usize; 3], residual: f64 },

    /// A quasistatic step failed to converge and the run was configured to abort.
    #[error("solver failure: {0}")]
    Solver(String),

    /// A verification assertion did not hold.
    #[error("verification failure: {0}")]
    Verification(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One rejected config line.
#[derive(Debug, Clone)]
pub struct ConfigIssue {
    pub line: usize,
    pub message: String,
}

fn format_config_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  line {}: {}", i.line, i.message))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Error {
    /// Process exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Config(_) => 1,
            Error::CgNonConvergence { .. }
            | Error::LocalNonConvergence { .. }
            | Error::Solver(_)
            | Error::Io { .. } => 2,
            Error::Verification(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
