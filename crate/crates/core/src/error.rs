use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("cannot parse polynomial '{src}': {msg}")]
    Parse { src: String, msg: String },
    #[error("invalid model field `{field}`: {msg}")]
    Field { field: String, msg: String },
}

impl ModelError {
    pub fn field(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Self::Field { field: field.into(), msg: msg.into() }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("density {h:?} lies outside the clamp box [0, {h_max}]^q")]
    OutsideBox { h: Vec<f64>, h_max: f64 },
    #[error("trajectory left the clamp box at t = {t}")]
    LeftBox { t: f64 },
    #[error("ODE step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("Newton iteration did not converge in {iters} iterations (|theta| = {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },
    #[error("Newton iteration hit a singular Jacobian at h = {h:?}; no isolated equilibrium")]
    SingularJacobian { h: Vec<f64> },
    #[error("equilibrium {h:?} has a nonpositive component")]
    NonPositive { h: Vec<f64> },
    #[error("0 is not a simple eigenvalue of A(h_eq): |lambda| sorted = {moduli:?}")]
    ZeroNotSimple { moduli: Vec<f64> },
    #[error("matrix {which} is not stable: max Re(lambda) = {max_re:e}")]
    Unstable { which: &'static str, max_re: f64 },
    #[error("left null vector of A(h_eq) is not strictly positive: {v:?}")]
    NotPositiveVector { v: Vec<f64> },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LambdaError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("Jacobian at h_eq is not diagonalizable with a usable eigenbasis (condition {cond:e}); unsupported in v1")]
    NotDiagonalizable { cond: f64 },
    #[error("degree-{k} system is numerically singular (condition {cond:e})")]
    Singular { k: usize, cond: f64 },
    #[error("no radius with PDE residual below {tol:e} was found")]
    NoTrustRadius { tol: f64 },
    #[error("U_eq membership undetermined: flow from {h:?} did not enter the trust ball by T_max = {t_max}")]
    Undetermined { h: Vec<f64>, t_max: f64 },
    #[error("Lambda({h:?}) = {value:?} violates {what}")]
    Invariant { h: Vec<f64>, value: Vec<f64>, what: &'static str },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("population explosion: |h|_1 = {norm} exceeds H_max = {h_max} at t = {t}")]
    Explosion { t: f64, norm: f64, h_max: f64 },
    #[error("invalid simulation setup: {0}")]
    Setup(String),
    #[error("operation requires a finite-set spatial domain")]
    NeedsFiniteSet,
}
