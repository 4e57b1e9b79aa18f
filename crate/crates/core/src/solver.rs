//! Constrained dominant sets via replicator dynamics.
//!
//! The payoff matrix is `B = A − αÎ_P + shift·J`. Subtracting `α` on the
//! diagonal of the unconstrained nodes forces every local maximizer to touch
//! the constraint set once `α` exceeds the largest eigenvalue of the
//! unconstrained block. The constant shift keeps `B` nonnegative, which the
//! multiplicative update needs; on the simplex it only adds a constant to the
//! objective.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::affinity::{principal_submatrix, spectral_radius, AffinityMatrix};
use crate::error::{Error, Result};
use crate::parallel::Execution;

/// Tolerance on `Σx = 1` accepted by [`SimplexVector::new`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Nonnegative vector summing to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty simplex vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "simplex entry {i} = {} is negative or non-finite",
                values[i]
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidArgument(format!("entries sum to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// Normalizes a nonnegative vector with positive mass onto the simplex.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        if !(sum > 0.0) || values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "cannot normalize vector onto the simplex".into(),
            ));
        }
        Ok(Self(values.into_iter().map(|v| v / sum).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Solver parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdsConfig {
    /// Relative and absolute margin by which `α` exceeds `λ_max`.
    pub alpha_margin: f64,
    /// L1 displacement below which the dynamics count as converged.
    pub tol: f64,
    pub max_iter: usize,
    /// Support threshold on membership scores.
    pub theta: f64,
    pub spectral_tol: f64,
    pub spectral_max_iter: usize,
    pub execution: Execution,
}

impl Default for CdsConfig {
    fn default() -> Self {
        Self {
            alpha_margin: 0.05,
            tol: 1e-7,
            max_iter: 10_000,
            theta: 1e-5,
            spectral_tol: 1e-10,
            spectral_max_iter: 100_000,
            execution: Execution::default(),
        }
    }
}

/// Shifted, penalized payoff matrix together with the parameters that built it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModifiedMatrix {
    payoff: DMatrix<f64>,
    pub alpha: f64,
    pub shift: f64,
    pub constraint: Vec<usize>,
}

impl ModifiedMatrix {
    /// Wraps an arbitrary nonnegative symmetric payoff with no penalty or shift.
    pub fn from_payoff(payoff: DMatrix<f64>) -> Result<Self> {
        if !payoff.is_square() {
            return Err(Error::InvalidArgument("payoff must be square".into()));
        }
        if payoff.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "payoff entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            payoff,
            alpha: 0.0,
            shift: 0.0,
            constraint: Vec::new(),
        })
    }

    /// The plain dominant-set program `x'Ax`: no constraint, `α = 0`.
    pub fn unconstrained(a: &AffinityMatrix) -> Self {
        Self {
            payoff: a.matrix().clone(),
            alpha: 0.0,
            shift: 0.0,
            constraint: Vec::new(),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.payoff
    }

    pub fn n(&self) -> usize {
        self.payoff.nrows()
    }

    fn product(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n];
        // Column-major storage: accumulate contiguous columns so the inner loop vectorizes.
        for (col, &xj) in self.payoff.as_slice().chunks_exact(n).zip(x) {
            if xj == 0.0 {
                continue;
            }
            for (o, b) in out.iter_mut().zip(col) {
                *o += b * xj;
            }
        }
        out
    }

    /// `x'Bx` for any vector.
    pub fn quadratic(&self, x: &[f64]) -> f64 {
        dot(x, &self.product(x))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Builds `B = A − αÎ_P + α·J` with `α = λ_max(A_{V∖P})·(1 + margin) + margin`.
pub fn build_modified_matrix(
    a: &AffinityMatrix,
    constraint: &[usize],
    config: &CdsConfig,
) -> Result<ModifiedMatrix> {
    let n = a.n();
    if constraint.is_empty() {
        return Err(Error::InvalidArgument("constraint set is empty".into()));
    }
    if let Some(&index) = constraint.iter().find(|&&p| p >= n) {
        return Err(Error::IndexOutOfRange { index, n });
    }
    if !(config.alpha_margin > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha margin must be positive, got {}",
            config.alpha_margin
        )));
    }
    let mut in_p = vec![false; n];
    for &p in constraint {
        in_p[p] = true;
    }
    if in_p.iter().all(|&b| b) {
        return Err(Error::InvalidArgument(
            "constraint covers every node, nothing left to rank".into(),
        ));
    }
    let rest = principal_submatrix(a.matrix(), constraint)?;
    let lambda = spectral_radius(&rest, config.spectral_tol, config.spectral_max_iter)?;
    let alpha = lambda * (1.0 + config.alpha_margin) + config.alpha_margin;
    let shift = alpha;

    let mut payoff = a.matrix().add_scalar(shift);
    for i in 0..n {
        if !in_p[i] {
            payoff[(i, i)] -= alpha;
        }
    }
    let mut constraint = constraint.to_vec();
    constraint.sort_unstable();
    constraint.dedup();
    Ok(ModifiedMatrix {
        payoff,
        alpha,
        shift,
        constraint,
    })
}

/// One replicator update on an arbitrary (not necessarily normalized) vector.
///
/// Returns `(y, q)` with `y_i = x_i (Bx)_i / q` and `q = x'Bx`.
pub fn replicator_map(b: &ModifiedMatrix, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let bx = b.product(x);
    let q = dot(x, &bx);
    if !(q > 0.0) {
        return Err(Error::DegeneratePayoff(q));
    }
    Ok((x.iter().zip(&bx).map(|(xi, bi)| xi * bi / q).collect(), q))
}

/// One replicator step, renormalized onto the simplex.
pub fn replicator_step(b: &ModifiedMatrix, x: &SimplexVector) -> Result<SimplexVector> {
    check_len(b, x)?;
    let (y, _) = replicator_map(b, x.as_slice())?;
    Ok(renormalize(y))
}

fn renormalize(mut y: Vec<f64>) -> SimplexVector {
    let s: f64 = y.iter().sum();
    for v in &mut y {
        *v /= s;
    }
    SimplexVector(y)
}

fn check_len(b: &ModifiedMatrix, x: &SimplexVector) -> Result<()> {
    if x.len() != b.n() {
        return Err(Error::ShapeMismatch {
            what: "membership vector length".into(),
            expected: b.n().to_string(),
            found: x.len().to_string(),
        });
    }
    Ok(())
}

/// Converged (or exhausted) replicator run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdsResult {
    pub membership: SimplexVector,
    pub support: Vec<usize>,
    pub alpha: f64,
    pub iterations: usize,
    /// `x'Bx` including the shift.
    pub objective: f64,
    /// `x'(A − αÎ_P)x`, the objective without the shift.
    pub penalized_objective: f64,
    pub converged: bool,
}

/// Iterates [`replicator_step`] until the L1 displacement drops below `tol`.
pub fn run_replicator(
    b: &ModifiedMatrix,
    x0: &SimplexVector,
    tol: f64,
    max_iter: usize,
    theta: f64,
) -> Result<CdsResult> {
    check_len(b, x0)?;
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::InvalidArgument(
            "tolerance must be positive and max_iter at least 1".into(),
        ));
    }
    let mut x = x0.clone();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        let y = replicator_step(b, &x)?;
        iterations += 1;
        let moved: f64 = y.0.iter().zip(&x.0).map(|(a, c)| (a - c).abs()).sum();
        x = y;
        if moved < tol {
            converged = true;
            break;
        }
    }
    let objective = b.quadratic(x.as_slice());
    Ok(CdsResult {
        support: extract_support(&x, theta),
        membership: x,
        alpha: b.alpha,
        iterations,
        objective,
        penalized_objective: objective - b.shift,
        converged,
    })
}

/// Indices whose membership exceeds `theta`.
pub fn extract_support(x: &SimplexVector, theta: f64) -> Vec<usize> {
    x.as_slice()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > theta)
        .map(|(i, _)| i)
        .collect()
}

/// Constrained dominant set containing `constraint`, started from the uniform vector.
///
/// When the constraint has no edges to the rest of the graph every unit of
/// outside mass strictly lowers the objective, yet the dynamics only shed it
/// like `1/t`. That case starts from the uniform vector on the constraint.
pub fn solve_cds(a: &AffinityMatrix, constraint: &[usize], config: &CdsConfig) -> Result<CdsResult> {
    let b = build_modified_matrix(a, constraint, config)?;
    let n = a.n();
    let cut_off = b.constraint.iter().all(|&p| {
        (0..n).all(|j| b.constraint.binary_search(&j).is_ok() || a.get(p, j) == 0.0)
    });
    let x0 = if cut_off {
        let mut x = vec![0.0; n];
        for &p in &b.constraint {
            x[p] = 1.0;
        }
        SimplexVector::normalized(x)?
    } else {
        SimplexVector::uniform(n)
    };
    run_replicator(&b, &x0, config.tol, config.max_iter, config.theta)
}

/// Analytic Jacobian of the replicator map at `x`, assuming `B` symmetric.
pub fn replicator_jacobian(b: &ModifiedMatrix, x: &[f64]) -> Result<DMatrix<f64>> {
    if x.len() != b.n() {
        return Err(Error::ShapeMismatch {
            what: "point length".into(),
            expected: b.n().to_string(),
            found: x.len().to_string(),
        });
    }
    let bx = DVector::from_vec(b.product(x));
    let q = dot(x, bx.as_slice());
    if !(q > 0.0) {
        return Err(Error::DegeneratePayoff(q));
    }
    let n = b.n();
    let m = b.matrix();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let diag = if i == j { bx[i] / q } else { 0.0 };
        diag + x[i] * m[(i, j)] / q - 2.0 * x[i] * bx[i] * bx[j] / (q * q)
    }))
}
