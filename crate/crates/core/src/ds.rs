//! Dominant-set definitions evaluated directly from the relative weights,
//! plus exhaustive oracles used to check the solver on small graphs.
//!
//! Everything here is exponential in the subset size and guarded by hard
//! limits: [`MAX_WEIGHT_SUBSET`] for a single recursive weight and
//! [`MAX_ENUMERATION_NODES`] / [`MAX_QP_NODES`] for the enumerations.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::affinity::AffinityMatrix;
use crate::error::{Error, Result};
use crate::solver::SimplexVector;

pub const MAX_WEIGHT_SUBSET: usize = 20;
pub const MAX_ENUMERATION_NODES: usize = 12;
pub const MAX_QP_NODES: usize = 10;

/// Sorted, duplicate-free set of node indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeSubset(Vec<usize>);

impl NodeSubset {
    pub fn new(mut members: Vec<usize>) -> Self {
        members.sort_unstable();
        members.dedup();
        Self(members)
    }

    pub fn members(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    fn check_range(&self, n: usize) -> Result<()> {
        match self.0.iter().find(|&&m| m >= n) {
            Some(&index) => Err(Error::IndexOutOfRange { index, n }),
            None => Ok(()),
        }
    }
}

impl From<&[usize]> for NodeSubset {
    fn from(v: &[usize]) -> Self {
        Self::new(v.to_vec())
    }
}

/// Similarity of `j` to `i` relative to the average similarity of `i` inside `s`.
pub fn phi(a: &AffinityMatrix, s: &NodeSubset, i: usize, j: usize) -> Result<f64> {
    s.check_range(a.n())?;
    if !s.contains(i) {
        return Err(Error::Membership {
            node: i,
            reason: "must belong to S",
        });
    }
    if s.contains(j) {
        return Err(Error::Membership {
            node: j,
            reason: "must lie outside S",
        });
    }
    if j >= a.n() {
        return Err(Error::IndexOutOfRange { index: j, n: a.n() });
    }
    Ok(phi_unchecked(a, s.members(), i, j))
}

fn phi_unchecked(a: &AffinityMatrix, s: &[usize], i: usize, j: usize) -> f64 {
    let mean: f64 = s.iter().map(|&k| a.get(i, k)).sum::<f64>() / s.len() as f64;
    a.get(i, j) - mean
}

/// Memoized recursive weights over subsets of a fixed universe of nodes.
///
/// Subsets are bitmasks over positions in `universe`, so the table stays
/// valid across every query that only touches those nodes.
struct WeightTable<'a> {
    a: &'a AffinityMatrix,
    universe: Vec<usize>,
    memo: HashMap<(u32, u8), f64>,
}

impl<'a> WeightTable<'a> {
    fn new(a: &'a AffinityMatrix, universe: Vec<usize>) -> Self {
        debug_assert!(universe.len() <= 32);
        Self {
            a,
            universe,
            memo: HashMap::new(),
        }
    }

    fn node(&self, pos: u8) -> usize {
        self.universe[pos as usize]
    }

    /// `w_S(i)` with `S` given as a mask and `i` as a position in the universe.
    fn weight(&mut self, mask: u32, i: u8) -> f64 {
        debug_assert!(mask & (1 << i) != 0);
        let size = mask.count_ones();
        if size == 1 {
            return 1.0;
        }
        if size == 2 {
            let other = (mask & !(1 << i)).trailing_zeros() as u8;
            return self.a.get(self.node(i), self.node(other));
        }
        if let Some(&w) = self.memo.get(&(mask, i)) {
            return w;
        }
        let rest = mask & !(1 << i);
        let rest_nodes = self.nodes_of(rest);
        let target = self.node(i);
        let mut total = 0.0;
        for j in positions(rest) {
            let phi = phi_unchecked(self.a, &rest_nodes, self.node(j), target);
            if phi != 0.0 {
                total += phi * self.weight(rest, j);
            }
        }
        self.memo.insert((mask, i), total);
        total
    }

    fn nodes_of(&self, mask: u32) -> Vec<usize> {
        positions(mask).map(|p| self.node(p)).collect()
    }

    /// Joining weight `w_{S∪{j}}(j)` for a node `j` outside `S`, computed from
    /// the internal weights of `S` alone.
    fn joining_weight(&mut self, mask: u32, outside: usize) -> f64 {
        let nodes = self.nodes_of(mask);
        if nodes.len() == 1 {
            return self.a.get(nodes[0], outside);
        }
        positions(mask)
            .map(|k| phi_unchecked(self.a, &nodes, self.node(k), outside) * self.weight(mask, k))
            .sum()
    }
}

fn positions(mask: u32) -> impl Iterator<Item = u8> {
    (0..32u8).filter(move |&p| mask & (1 << p) != 0)
}

/// Recursive weight `w_S(i)`: 1 for singletons, the edge weight for pairs,
/// and the φ-weighted sum over `S \ {i}` otherwise.
pub fn relative_weight(a: &AffinityMatrix, s: &NodeSubset, i: usize) -> Result<f64> {
    s.check_range(a.n())?;
    if s.len() > MAX_WEIGHT_SUBSET {
        return Err(Error::OracleScale {
            size: s.len(),
            limit: MAX_WEIGHT_SUBSET,
        });
    }
    let Some(pos) = s.members().iter().position(|&m| m == i) else {
        return Err(Error::Membership {
            node: i,
            reason: "must belong to S",
        });
    };
    let mut table = WeightTable::new(a, s.members().to_vec());
    Ok(table.weight(full_mask(s.len()), pos as u8))
}

fn full_mask(len: usize) -> u32 {
    if len == 32 {
        u32::MAX
    } else {
        (1u32 << len) - 1
    }
}

/// All internal weights of `s`, in member order.
pub fn internal_weights(a: &AffinityMatrix, s: &NodeSubset) -> Result<Vec<f64>> {
    s.check_range(a.n())?;
    if s.len() > MAX_WEIGHT_SUBSET {
        return Err(Error::OracleScale {
            size: s.len(),
            limit: MAX_WEIGHT_SUBSET,
        });
    }
    let mut table = WeightTable::new(a, s.members().to_vec());
    let mask = full_mask(s.len());
    Ok((0..s.len() as u8).map(|p| table.weight(mask, p)).collect())
}

/// Characteristic vector of `s`: `x_i = w_S(i) / Σ_j w_S(j)` on `s`, zero elsewhere.
pub fn characteristic_vector(a: &AffinityMatrix, s: &NodeSubset) -> Result<Vec<f64>> {
    let w = internal_weights(a, s)?;
    let total: f64 = w.iter().sum();
    if total == 0.0 {
        return Err(Error::InvalidArgument(
            "subset has zero total weight".into(),
        ));
    }
    let mut x = vec![0.0; a.n()];
    for (&m, wi) in s.members().iter().zip(&w) {
        x[m] = wi / total;
    }
    Ok(x)
}

/// Positive internal weights and negative joining weights for every outsider.
pub fn is_dominant_set(a: &AffinityMatrix, s: &NodeSubset) -> Result<bool> {
    if s.is_empty() {
        return Err(Error::InvalidArgument("empty subset".into()));
    }
    s.check_range(a.n())?;
    if s.len() + 1 > MAX_WEIGHT_SUBSET {
        return Err(Error::OracleScale {
            size: s.len() + 1,
            limit: MAX_WEIGHT_SUBSET,
        });
    }
    let mut table = WeightTable::new(a, s.members().to_vec());
    Ok(dominant_in(&mut table, full_mask(s.len())))
}

fn dominant_in(table: &mut WeightTable<'_>, mask: u32) -> bool {
    if positions(mask).any(|p| table.weight(mask, p) <= 0.0) {
        return false;
    }
    let inside = table.nodes_of(mask);
    (0..table.a.n())
        .filter(|j| !inside.contains(j))
        .all(|j| table.joining_weight(mask, j) < 0.0)
}

/// Every dominant set of a graph with at most [`MAX_ENUMERATION_NODES`] nodes,
/// ordered by descending mean internal weight, then lexicographically.
pub fn brute_force_dominant_sets(a: &AffinityMatrix) -> Result<Vec<NodeSubset>> {
    let n = a.n();
    if n > MAX_ENUMERATION_NODES {
        return Err(Error::OracleScale {
            size: n,
            limit: MAX_ENUMERATION_NODES,
        });
    }
    let mut table = WeightTable::new(a, (0..n).collect());
    let mut found: Vec<(f64, NodeSubset)> = Vec::new();
    for mask in 1..(1u32 << n) {
        if dominant_in(&mut table, mask) {
            let size = mask.count_ones() as f64;
            let coherence = positions(mask).map(|p| table.weight(mask, p)).sum::<f64>() / size;
            found.push((coherence, NodeSubset::new(table.nodes_of(mask))));
        }
    }
    found.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| x.1.cmp(&y.1)));
    Ok(found.into_iter().map(|(_, s)| s).collect())
}

/// Local maximizers of `x'(A − αÎ_P)x` over the simplex, found by checking the
/// first- and second-order conditions on every candidate support.
#[derive(Debug, Clone)]
pub struct QpMaximizers {
    pub maximizers: Vec<SimplexVector>,
    /// Supports whose restricted KKT system was singular.
    pub singular_supports: Vec<NodeSubset>,
}

const KKT_TOL: f64 = 1e-10;

pub fn brute_force_qp_maximizers(
    a: &AffinityMatrix,
    constraint: &[usize],
    alpha: f64,
) -> Result<QpMaximizers> {
    let n = a.n();
    if n > MAX_QP_NODES {
        return Err(Error::OracleScale {
            size: n,
            limit: MAX_QP_NODES,
        });
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
    }
    if let Some(&index) = constraint.iter().find(|&&p| p >= n) {
        return Err(Error::IndexOutOfRange { index, n });
    }
    let mut b = a.matrix().clone();
    for i in 0..n {
        if !constraint.contains(&i) {
            b[(i, i)] -= alpha;
        }
    }

    let mut maximizers = Vec::new();
    let mut singular_supports = Vec::new();
    for mask in 1..(1u32 << n) {
        let support: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        match kkt_point(&b, &support) {
            None => singular_supports.push(NodeSubset::new(support)),
            Some(x) => {
                if is_local_max(&b, &support, &x) {
                    maximizers.push(SimplexVector::new(x)?);
                }
            }
        }
    }
    Ok(QpMaximizers {
        maximizers,
        singular_supports,
    })
}

/// Solves `B_σσ x_σ = λ1`, `1'x_σ = 1` and scatters `x_σ` into a full-length vector.
fn kkt_point(b: &DMatrix<f64>, support: &[usize]) -> Option<Vec<f64>> {
    let s = support.len();
    let mut system = DMatrix::zeros(s + 1, s + 1);
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            system[(r, c)] = b[(i, j)];
        }
        system[(r, s)] = -1.0;
        system[(s, r)] = 1.0;
    }
    let mut rhs = DVector::zeros(s + 1);
    rhs[s] = 1.0;
    let sol = system.clone().lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    // Near-singular systems come back with large residuals; treat them as singular.
    if (&system * &sol - &rhs).amax() > 1e-8 {
        return None;
    }
    let mut x = vec![0.0; b.nrows()];
    for (r, &i) in support.iter().enumerate() {
        x[i] = sol[r];
    }
    Some(x)
}

fn is_local_max(b: &DMatrix<f64>, support: &[usize], x: &[f64]) -> bool {
    if support.iter().any(|&i| x[i] <= KKT_TOL) {
        return false;
    }
    let bx = b * DVector::from_column_slice(x);
    let value: f64 = x.iter().zip(bx.iter()).map(|(a, b)| a * b).sum();
    let n = b.nrows();
    if (0..n)
        .filter(|j| !support.contains(j))
        .any(|j| bx[j] > value + KKT_TOL)
    {
        return false;
    }
    let s = support.len();
    if s == 1 {
        return true;
    }
    // Tangent basis e_k − e_last of {v : Σv = 0} restricted to the support.
    let last = support[s - 1];
    let reduced = DMatrix::from_fn(s - 1, s - 1, |r, c| {
        let (i, j) = (support[r], support[c]);
        b[(i, j)] - b[(i, last)] - b[(last, j)] + b[(last, last)]
    });
    let eig = SymmetricEigen::new(reduced);
    eig.eigenvalues.max() <= KKT_TOL
}
