//! Affinity graphs built from embedding features.
//!
//! Every [`AffinityMatrix`] is dense, symmetric, nonnegative and has a zero
//! diagonal. Those three invariants are checked on construction and relied
//! upon by the solver.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One embedding vector with its identity and an optional camera label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub id: String,
    pub camera: Option<u32>,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(id: impl Into<String>, camera: Option<u32>, values: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            camera,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Inner product, negative values clamped to zero.
    #[default]
    Dot,
    /// Cosine similarity remapped from `[-1, 1]` to `[0, 1]`.
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dot" => Ok(Metric::Dot),
            "cosine" | "cos" => Ok(Metric::Cosine),
            other => Err(Error::InvalidArgument(format!("unknown metric `{other}`"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Dot => "dot",
            Metric::Cosine => "cosine",
        })
    }
}

/// Symmetric, nonnegative edge weights with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    weights: DMatrix<f64>,
}

impl AffinityMatrix {
    /// Validates `weights` against the affinity invariants.
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        if !weights.is_square() {
            return Err(Error::InvalidAffinity(format!(
                "matrix is {}x{}, not square",
                weights.nrows(),
                weights.ncols()
            )));
        }
        let n = weights.nrows();
        for i in 0..n {
            if weights[(i, i)] != 0.0 {
                return Err(Error::InvalidAffinity(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let w = weights[(i, j)];
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::InvalidAffinity(format!(
                        "entry ({i},{j}) = {w} is not a finite nonnegative weight"
                    )));
                }
                if w != weights[(j, i)] {
                    return Err(Error::InvalidAffinity(format!("asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { weights })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::DimensionMismatch {
                index: i,
                expected: n,
                found: r.len(),
            });
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            weights: DMatrix::zeros(n, n),
        }
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.weights.row(i).iter().copied().collect()
    }

    /// Divides every entry by the largest one. The zero matrix is returned unchanged.
    pub fn normalized_by_max(&self) -> Self {
        let max = self.weights.max();
        if max > 0.0 {
            Self {
                weights: &self.weights / max,
            }
        } else {
            self.clone()
        }
    }

    /// Induced subgraph on `members`, kept in the given order.
    pub fn induced(&self, members: &[usize]) -> Result<Self> {
        let n = self.n();
        if let Some(&bad) = members.iter().find(|&&m| m >= n) {
            return Err(Error::IndexOutOfRange { index: bad, n });
        }
        let k = members.len();
        Ok(Self {
            weights: DMatrix::from_fn(k, k, |i, j| self.weights[(members[i], members[j])]),
        })
    }
}

/// Pairwise affinities of `features` under `metric`.
pub fn build_affinity(features: &[FeatureVector], metric: Metric) -> Result<AffinityMatrix> {
    if features.len() < 2 {
        return Err(Error::TooFew {
            needed: 2,
            found: features.len(),
        });
    }
    let d = features[0].dim();
    for (i, f) in features.iter().enumerate() {
        if f.dim() != d {
            return Err(Error::DimensionMismatch {
                index: i,
                expected: d,
                found: f.dim(),
            });
        }
        if f.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
    }
    let norms: Vec<f64> = match metric {
        Metric::Dot => vec![1.0; features.len()],
        Metric::Cosine => {
            let norms: Vec<f64> = features.iter().map(FeatureVector::norm).collect();
            if let Some(i) = norms.iter().position(|&n| n == 0.0) {
                return Err(Error::ZeroNorm { index: i });
            }
            norms
        }
    };

    let n = features.len();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let raw = features[i].dot(&features[j]);
            let v = match metric {
                Metric::Dot => raw.max(0.0),
                Metric::Cosine => {
                    let c = (raw / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                    (1.0 + c) / 2.0
                }
            };
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    Ok(AffinityMatrix { weights: w })
}

/// Rows and columns of `a` not listed in `exclude`, in their original order.
pub fn principal_submatrix(a: &DMatrix<f64>, exclude: &[usize]) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut dropped = vec![false; n];
    for &e in exclude {
        if e >= n {
            return Err(Error::IndexOutOfRange { index: e, n });
        }
        dropped[e] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !dropped[i]).collect();
    if keep.is_empty() {
        return Err(Error::ExcludesAll);
    }
    let k = keep.len();
    Ok(DMatrix::from_fn(k, k, |i, j| a[(keep[i], keep[j])]))
}

/// Largest eigenvalue of a symmetric nonnegative matrix by power iteration.
///
/// Iterates on `M + cI` with `c` half the largest row sum so that a `-λ_max`
/// eigenvalue (bipartite structure) cannot stall the iteration. The start
/// vector is the normalized all-ones vector. Convergence is declared once the
/// residual `‖Mv − λv‖` drops below `tol · max(1, λ)`.
pub fn spectral_radius(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::InvalidArgument("spectral_radius needs a square matrix".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let max_row_sum = m
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    if max_row_sum == 0.0 {
        return Ok(0.0);
    }
    let shift = 0.5 * max_row_sum;

    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut estimate = 0.0;
    for _ in 0..max_iter {
        let mv = m * &v;
        estimate = v.dot(&mv);
        let residual = (&mv - &v * estimate).norm();
        if residual <= tol * estimate.abs().max(1.0) {
            return Ok(estimate);
        }
        let next = mv + &v * shift;
        let norm = next.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = next / norm;
    }
    Err(Error::NotConverged {
        estimate,
        iterations: max_iter,
    })
}

/// A node together with its nearest neighbours and the induced subgraph.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    /// Original indices, ascending. Position in this list is the local index.
    pub members: Vec<usize>,
    pub affinity: AffinityMatrix,
}

impl Neighborhood {
    pub fn local_index(&self, original: usize) -> Option<usize> {
        self.members.binary_search(&original).ok()
    }
}

/// `node` plus its `k` highest-affinity neighbours. Ties go to the lower index.
pub fn knn_subgraph(a: &AffinityMatrix, node: usize, k: usize) -> Result<Neighborhood> {
    let n = a.n();
    if node >= n {
        return Err(Error::IndexOutOfRange { index: node, n });
    }
    if k < 1 || k > n - 1 {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside [1, {}]",
            n - 1
        )));
    }
    let mut others: Vec<usize> = (0..n).filter(|&j| j != node).collect();
    others.sort_by(|&x, &y| a.get(node, y).total_cmp(&a.get(node, x)).then(x.cmp(&y)));
    let mut members: Vec<usize> = others[..k].to_vec();
    members.push(node);
    members.sort_unstable();
    let affinity = a.induced(&members)?;
    Ok(Neighborhood { members, affinity })
}
