//! Probe-by-probe constrained clustering, score fusion and ranking.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::affinity::{knn_subgraph, AffinityMatrix, FeatureVector};
use crate::error::{Error, Result};
use crate::parallel::map_indices;
use crate::solver::{solve_cds, CdsConfig, CdsResult, SimplexVector};

/// Stacked memberships: row `i` is the solution with probe `i` as constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipMatrix {
    rows: DMatrix<f64>,
    /// Probes whose dynamics hit `max_iter` before converging.
    pub unconverged: Vec<usize>,
}

impl MembershipMatrix {
    pub fn from_rows(rows: Vec<SimplexVector>) -> Result<Self> {
        let m = rows.len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
            return Err(Error::ShapeMismatch {
                what: format!("membership row {i}"),
                expected: m.to_string(),
                found: r.len().to_string(),
            });
        }
        Ok(Self {
            rows: DMatrix::from_fn(m, m, |i, j| rows[i].as_slice()[j]),
            unconverged: Vec::new(),
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn m(&self) -> usize {
        self.rows.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[(i, j)]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.rows.row(i).iter().copied().collect()
    }
}

fn collect_rows(
    outcomes: Vec<Result<CdsResult>>,
) -> Result<(Vec<SimplexVector>, Vec<usize>)> {
    let mut failed = Vec::new();
    let mut first = None;
    let mut rows = Vec::with_capacity(outcomes.len());
    let mut unconverged = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(r) => {
                if !r.converged {
                    unconverged.push(i);
                }
                rows.push(r.membership);
            }
            Err(e) => {
                failed.push(i);
                first.get_or_insert(e);
            }
        }
    }
    match first {
        Some(e) => Err(Error::ProbeFailures {
            probes: failed,
            first: Box::new(e),
        }),
        None => Ok((rows, unconverged)),
    }
}

/// Solves one constrained problem per node and stacks the memberships.
pub fn cds_similarity_matrix(a: &AffinityMatrix, config: &CdsConfig) -> Result<MembershipMatrix> {
    let m = a.n();
    if m < 2 {
        return Err(Error::TooFew { needed: 2, found: m });
    }
    let outcomes = map_indices(m, config.execution, |i| solve_cds(a, &[i], config));
    let (rows, unconverged) = collect_rows(outcomes)?;
    let mut y = MembershipMatrix::from_rows(rows)?;
    y.unconverged = unconverged;
    Ok(y)
}

/// Similarity and dissimilarity rows from an external verification model.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationScores {
    pub similarity: DMatrix<f64>,
    pub dissimilarity: DMatrix<f64>,
}

impl VerificationScores {
    pub fn new(similarity: DMatrix<f64>, dissimilarity: DMatrix<f64>) -> Result<Self> {
        if similarity.shape() != dissimilarity.shape() {
            return Err(Error::ShapeMismatch {
                what: "dissimilarity scores".into(),
                expected: format!("{:?}", similarity.shape()),
                found: format!("{:?}", dissimilarity.shape()),
            });
        }
        if similarity.iter().chain(dissimilarity.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("verification scores must be finite".into()));
        }
        Ok(Self {
            similarity,
            dissimilarity,
        })
    }

    /// All-ones similarity, all-zeros dissimilarity: fusion reduces to CDS alone.
    pub fn uniform(m: usize) -> Self {
        Self {
            similarity: DMatrix::from_element(m, m, 1.0),
            dissimilarity: DMatrix::zeros(m, m),
        }
    }

    pub fn m(&self) -> usize {
        self.similarity.nrows()
    }
}

pub const DEFAULT_BETA: f64 = 0.9;
pub const DEFAULT_DELTA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct FusedScores {
    pub similarity: DMatrix<f64>,
    pub dissimilarity: DMatrix<f64>,
    pub beta: f64,
    pub delta: f64,
    /// Entries where `δ − Y` went negative; they are carried through as is.
    pub negative_offsets: usize,
    pub warnings: Vec<String>,
}

/// Elementwise fusion `F_s = βY ⊙ (1−β)S'`, `F_d = β(δ−Y) ⊙ (1−β)D'`.
pub fn fuse(
    y: &DMatrix<f64>,
    scores: &VerificationScores,
    beta: f64,
    delta: f64,
) -> Result<FusedScores> {
    if y.shape() != scores.similarity.shape() {
        return Err(Error::ShapeMismatch {
            what: "verification scores".into(),
            expected: format!("{:?}", y.shape()),
            found: format!("{:?}", scores.similarity.shape()),
        });
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta must lie in [0, 1], got {beta}")));
    }
    let mut warnings = Vec::new();
    if beta == 0.0 || beta == 1.0 {
        warnings.push(format!("beta = {beta} zeroes every fused score"));
    }
    let y_d = y.map(|v| delta - v);
    let negative_offsets = y_d.iter().filter(|&&v| v < 0.0).count();
    if negative_offsets > 0 {
        warnings.push(format!("{negative_offsets} entries of delta - Y are negative"));
    }
    let similarity = y
        .map(|v| beta * v)
        .component_mul(&scores.similarity.map(|v| (1.0 - beta) * v));
    let dissimilarity = y_d
        .map(|v| beta * v)
        .component_mul(&scores.dissimilarity.map(|v| (1.0 - beta) * v));
    Ok(FusedScores {
        similarity,
        dissimilarity,
        beta,
        delta,
        negative_offsets,
        warnings,
    })
}

/// Gallery order for one probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub probe: usize,
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Sorts the entries not flagged in `excluded` by descending score,
/// breaking ties by ascending index.
pub fn rank_gallery(scores: &[f64], probe: usize, excluded: &[bool]) -> Result<RankedList> {
    if excluded.len() != scores.len() {
        return Err(Error::ShapeMismatch {
            what: "ranking mask".into(),
            expected: scores.len().to_string(),
            found: excluded.len().to_string(),
        });
    }
    if probe >= scores.len() {
        return Err(Error::IndexOutOfRange {
            index: probe,
            n: scores.len(),
        });
    }
    if !excluded[probe] {
        return Err(Error::InvalidArgument(format!(
            "mask must exclude probe {probe}"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| !excluded[i]).collect();
    if order.is_empty() {
        return Err(Error::InvalidArgument("every gallery entry is masked".into()));
    }
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let scores = order.iter().map(|&i| scores[i]).collect();
    Ok(RankedList {
        probe,
        order,
        scores,
    })
}

/// Ranks everything except the probe itself.
pub fn rank_excluding_probe(scores: &[f64], probe: usize) -> Result<RankedList> {
    let mut excluded = vec![false; scores.len()];
    if probe < excluded.len() {
        excluded[probe] = true;
    }
    rank_gallery(scores, probe, &excluded)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionConfig {
    pub cds: CdsConfig,
    /// Neighbourhood size for the pre-clustering step.
    pub k: usize,
    /// Number of extra constraints promoted from the pre-cluster.
    pub expanders: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub ranking: RankedList,
    pub result: CdsResult,
    /// Original indices promoted to constraints, strongest first.
    pub expanders: Vec<usize>,
    /// True when the pre-cluster held only the probe and the plain
    /// single-constraint solution was used instead.
    pub fell_back: bool,
}

/// Pre-clusters the probe's k-NN neighbourhood, promotes its strongest
/// members to constraints and re-solves on the full graph.
pub fn constraint_expansion(
    a: &AffinityMatrix,
    probe: usize,
    config: &ExpansionConfig,
) -> Result<Expansion> {
    let n = a.n();
    if config.k < 2 || config.k + 1 > n {
        return Err(Error::InvalidArgument(format!(
            "expansion k = {} outside [2, {}]",
            config.k,
            n.saturating_sub(1)
        )));
    }
    if config.expanders == 0 {
        return Err(Error::InvalidArgument("need at least one expander".into()));
    }
    let hood = knn_subgraph(a, probe, config.k)?;
    let local_probe = hood
        .local_index(probe)
        .expect("neighbourhood always contains its query node");
    // A probe with no affinity to its neighbourhood forms a cluster on its own.
    let isolated = hood.affinity.row(local_probe).iter().all(|&w| w == 0.0);
    if isolated {
        let result = solve_cds(a, &[probe], &config.cds)?;
        let ranking = rank_excluding_probe(result.membership.as_slice(), probe)?;
        return Ok(Expansion {
            ranking,
            result,
            expanders: Vec::new(),
            fell_back: true,
        });
    }
    let local = solve_cds(&hood.affinity, &[local_probe], &config.cds)?;

    let mut candidates: Vec<usize> = local
        .support
        .iter()
        .copied()
        .filter(|&i| i != local_probe)
        .collect();
    let x = local.membership.as_slice();
    candidates.sort_by(|&p, &q| x[q].total_cmp(&x[p]).then(p.cmp(&q)));
    let expanders: Vec<usize> = candidates
        .into_iter()
        .take(config.expanders)
        .map(|i| hood.members[i])
        .collect();

    let (result, fell_back) = if expanders.is_empty() {
        (solve_cds(a, &[probe], &config.cds)?, true)
    } else {
        let mut constraint = vec![probe];
        constraint.extend(&expanders);
        if constraint.len() >= n {
            (solve_cds(a, &[probe], &config.cds)?, true)
        } else {
            (solve_cds(a, &constraint, &config.cds)?, false)
        }
    };
    let ranking = rank_excluding_probe(result.membership.as_slice(), probe)?;
    Ok(Expansion {
        ranking,
        result,
        expanders,
        fell_back,
    })
}

/// Expansion memberships for every probe, stacked like [`cds_similarity_matrix`].
pub fn expanded_similarity_matrix(
    a: &AffinityMatrix,
    config: &ExpansionConfig,
) -> Result<(MembershipMatrix, Vec<Expansion>)> {
    let outcomes = map_indices(a.n(), config.cds.execution, |i| {
        constraint_expansion(a, i, config)
    });
    let mut failed = Vec::new();
    let mut first = None;
    let mut expansions = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(e) => expansions.push(e),
            Err(e) => {
                failed.push(i);
                first.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first {
        return Err(Error::ProbeFailures {
            probes: failed,
            first: Box::new(e),
        });
    }
    let mut y = MembershipMatrix::from_rows(
        expansions.iter().map(|e| e.result.membership.clone()).collect(),
    )?;
    y.unconverged = expansions
        .iter()
        .enumerate()
        .filter(|(_, e)| !e.result.converged)
        .map(|(i, _)| i)
        .collect();
    Ok((y, expansions))
}

/// Joins two feature vectors of the same item end to end.
pub fn concat_features(first: &FeatureVector, second: &FeatureVector) -> Result<FeatureVector> {
    if first.id != second.id || first.camera != second.camera {
        return Err(Error::InvalidArgument(format!(
            "label mismatch: ({}, {:?}) vs ({}, {:?})",
            first.id, first.camera, second.id, second.camera
        )));
    }
    let mut values = first.values.clone();
    values.extend_from_slice(&second.values);
    Ok(FeatureVector::new(first.id.clone(), first.camera, values))
}
