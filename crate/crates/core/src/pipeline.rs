//! End-to-end flows shared by the command line and the test suites.

use std::io::Write;

use serde::Serialize;

use crate::affinity::{build_affinity, AffinityMatrix, Metric};
use crate::config::RunConfig;
use crate::dataset::GalleryIndex;
use crate::error::{Error, Result};
use crate::eval::{evaluate_rankings, Metrics};
use crate::rerank::{
    cds_similarity_matrix, expanded_similarity_matrix, fuse, rank_excluding_probe, FusedScores,
    MembershipMatrix, RankedList, VerificationScores,
};
use crate::solver::{solve_cds, CdsResult};

pub fn affinity_for(index: &GalleryIndex, config: &RunConfig) -> Result<AffinityMatrix> {
    let a = build_affinity(&index.items, config.metric)?;
    Ok(if config.normalize {
        a.normalized_by_max()
    } else {
        a
    })
}

/// Per-probe membership rows; with `expand`, each row comes from constraint expansion.
pub fn membership_for(
    a: &AffinityMatrix,
    config: &RunConfig,
    expand: bool,
) -> Result<(MembershipMatrix, usize)> {
    if expand {
        let (y, expansions) = expanded_similarity_matrix(a, &config.expansion()?)?;
        let fallbacks = expansions.iter().filter(|e| e.fell_back).count();
        Ok((y, fallbacks))
    } else {
        Ok((cds_similarity_matrix(a, &config.cds())?, 0))
    }
}

#[derive(Debug, Clone)]
pub struct RerankOutput {
    pub rankings: Vec<RankedList>,
    pub membership: MembershipMatrix,
    pub fused: FusedScores,
    pub fallbacks: usize,
}

impl RerankOutput {
    /// Human-readable notes for stderr.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut notes = self.fused.warnings.clone();
        if !self.membership.unconverged.is_empty() {
            notes.push(format!(
                "{} probes hit max_iter before converging",
                self.membership.unconverged.len()
            ));
        }
        if self.fallbacks > 0 {
            notes.push(format!(
                "{} probes fell back to single-constraint ranking",
                self.fallbacks
            ));
        }
        notes
    }
}

/// Rankings from the rows of a fused similarity matrix.
pub fn rank_rows(fused: &FusedScores, probes: &[usize]) -> Result<Vec<RankedList>> {
    probes
        .iter()
        .map(|&p| {
            let row: Vec<f64> = fused.similarity.row(p).iter().copied().collect();
            rank_excluding_probe(&row, p)
        })
        .collect()
}

pub fn rerank_with_affinity(
    index: &GalleryIndex,
    a: &AffinityMatrix,
    scores: Option<&VerificationScores>,
    config: &RunConfig,
    expand: bool,
) -> Result<RerankOutput> {
    config.validate()?;
    let m = index.len();
    let uniform;
    let scores = match scores {
        Some(s) => {
            if s.m() != m {
                return Err(Error::ShapeMismatch {
                    what: "verification scores".into(),
                    expected: format!("{m}x{m}"),
                    found: format!("{}x{}", s.similarity.nrows(), s.similarity.ncols()),
                });
            }
            s
        }
        None => {
            uniform = VerificationScores::uniform(m);
            &uniform
        }
    };
    let (membership, fallbacks) = membership_for(a, config, expand)?;
    let fused = fuse(membership.matrix(), scores, config.beta, config.delta)?;
    let rankings = rank_rows(&fused, &index.probes())?;
    Ok(RerankOutput {
        rankings,
        membership,
        fused,
        fallbacks,
    })
}

/// Builds the affinity, solves every probe, fuses with `scores` (uniform
/// when absent) and ranks.
pub fn rerank(
    index: &GalleryIndex,
    scores: Option<&VerificationScores>,
    config: &RunConfig,
    expand: bool,
) -> Result<RerankOutput> {
    let a = affinity_for(index, config)?;
    rerank_with_affinity(index, &a, scores, config, expand)
}

/// Rankings by raw pairwise similarity, no clustering.
pub fn baseline_rankings(index: &GalleryIndex, metric: Metric) -> Result<Vec<RankedList>> {
    let a = build_affinity(&index.items, metric)?;
    index
        .probes()
        .iter()
        .map(|&p| rank_excluding_probe(&a.row(p), p))
        .collect()
}

/// Rankings by the rows of a verification similarity matrix alone.
pub fn verification_rankings(
    index: &GalleryIndex,
    scores: &VerificationScores,
) -> Result<Vec<RankedList>> {
    index
        .probes()
        .iter()
        .map(|&p| {
            let row: Vec<f64> = scores.similarity.row(p).iter().copied().collect();
            rank_excluding_probe(&row, p)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterReport {
    pub probe_id: String,
    pub probe_index: usize,
    #[serde(flatten)]
    pub result: CdsResult,
}

/// One constrained cluster per requested probe id.
pub fn cluster_probes(
    index: &GalleryIndex,
    probe_ids: &[String],
    config: &RunConfig,
) -> Result<Vec<ClusterReport>> {
    config.validate()?;
    let positions = probe_ids
        .iter()
        .map(|id| {
            index
                .position(id)
                .ok_or_else(|| Error::InvalidArgument(format!("probe id `{id}` not found")))
        })
        .collect::<Result<Vec<_>>>()?;
    let a = affinity_for(index, config)?;
    let cds = config.cds();
    positions
        .into_iter()
        .zip(probe_ids)
        .map(|(p, id)| {
            Ok(ClusterReport {
                probe_id: id.clone(),
                probe_index: p,
                result: solve_cds(&a, &[p], &cds)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Beta,
    Delta,
    AlphaMargin,
    KExpand,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Beta => "beta",
            SweepParam::Delta => "delta",
            SweepParam::AlphaMargin => "alpha_margin",
            SweepParam::KExpand => "k_expand",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepParam::Beta),
            "delta" => Ok(SweepParam::Delta),
            "alpha_margin" => Ok(SweepParam::AlphaMargin),
            "k_expand" | "k" => Ok(SweepParam::KExpand),
            other => Err(Error::InvalidArgument(format!("cannot sweep `{other}`"))),
        }
    }
}

/// Parses `start:end:step` (inclusive) or a comma-separated list.
pub fn parse_range(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("bad range `{text}`"));
    if text.contains(':') {
        let parts: Vec<f64> = text
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [start, end, step] = parts[..] else {
            return Err(bad());
        };
        if !(step > 0.0) || end < start {
            return Err(bad());
        }
        let count = ((end - start) / step + 1e-9).floor() as usize + 1;
        Ok((0..count)
            .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
            .collect())
    } else {
        text.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub metrics: Metrics,
}

/// Evaluates mAP for each parameter value. Memberships are reused across
/// values that only change the fusion.
pub fn sweep(
    index: &GalleryIndex,
    scores: Option<&VerificationScores>,
    config: &RunConfig,
    expand: bool,
    param: SweepParam,
    values: &[f64],
    max_rank: usize,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty sweep range".into()));
    }
    let a = affinity_for(index, config)?;
    let m = index.len();
    let uniform = VerificationScores::uniform(m);
    let scores = scores.unwrap_or(&uniform);
    if scores.m() != m {
        return Err(Error::ShapeMismatch {
            what: "verification scores".into(),
            expected: format!("{m}x{m}"),
            found: format!("{}x{}", scores.m(), scores.m()),
        });
    }
    let probes = index.probes();
    let shared = match param {
        SweepParam::Beta | SweepParam::Delta => Some(membership_for(&a, config, expand)?.0),
        _ => None,
    };
    values
        .iter()
        .map(|&value| {
            let mut cfg = config.clone();
            match param {
                SweepParam::Beta => cfg.beta = value,
                SweepParam::Delta => cfg.delta = value,
                SweepParam::AlphaMargin => cfg.alpha_margin = value,
                SweepParam::KExpand => {
                    if value < 0.0 || value.fract() != 0.0 {
                        return Err(Error::InvalidArgument(format!("k_expand {value} is not an integer")));
                    }
                    cfg.k_expand = Some(value as usize);
                }
            }
            cfg.validate()?;
            let y = match &shared {
                Some(y) => y.clone(),
                None => membership_for(&a, &cfg, expand || param == SweepParam::KExpand)?.0,
            };
            let fused = fuse(y.matrix(), scores, cfg.beta, cfg.delta)?;
            let rankings = rank_rows(&fused, &probes)?;
            Ok(SweepRow {
                value,
                metrics: evaluate_rankings(&rankings, index, max_rank)?,
            })
        })
        .collect()
}

pub fn write_sweep_csv(out: &mut impl Write, param: SweepParam, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(out, "{},mAP", param.name())?;
    for r in rows {
        writeln!(out, "{},{}", r.value, r.metrics.map)?;
    }
    Ok(())
}
