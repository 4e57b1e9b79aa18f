//! Retrieval metrics under the single-query protocol.

use serde::{Deserialize, Serialize};

use crate::affinity::FeatureVector;
use crate::dataset::GalleryIndex;
use crate::error::{Error, Result};
use crate::rerank::RankedList;

/// One query's ranking together with per-item relevance and validity.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryJudgment {
    pub probe: usize,
    pub ranked_gallery: Vec<usize>,
    pub relevant: Vec<bool>,
    pub valid: Vec<bool>,
}

impl QueryJudgment {
    fn relevant_total(&self) -> usize {
        self.relevant
            .iter()
            .zip(&self.valid)
            .filter(|(r, v)| **r && **v)
            .count()
    }

    /// 1-based ranks, among valid items, at which relevant items appear.
    fn hit_ranks(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranked_gallery
            .iter()
            .filter(|&&g| self.valid[g])
            .enumerate()
            .filter(|(_, &g)| self.relevant[g])
            .map(|(pos, _)| pos + 1)
    }
}

/// Gallery items that count for `probe`: drops the probe itself and any item
/// sharing both identity and camera with it. Unlabelled cameras never match.
pub fn single_query_filter(
    probe: &FeatureVector,
    probe_index: Option<usize>,
    gallery: &GalleryIndex,
) -> Vec<bool> {
    gallery
        .items
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if Some(i) == probe_index {
                return false;
            }
            match (probe.camera, g.camera) {
                (Some(pc), Some(gc)) => !(pc == gc && probe.id == g.id),
                _ => true,
            }
        })
        .collect()
}

/// Judgment for probe `ranking.probe` where probe and gallery are the same collection.
pub fn judge(ranking: &RankedList, index: &GalleryIndex) -> Result<QueryJudgment> {
    let n = index.len();
    if ranking.probe >= n {
        return Err(Error::IndexOutOfRange {
            index: ranking.probe,
            n,
        });
    }
    if let Some(&g) = ranking.order.iter().find(|&&g| g >= n) {
        return Err(Error::IndexOutOfRange { index: g, n });
    }
    let probe = &index.items[ranking.probe];
    Ok(QueryJudgment {
        probe: ranking.probe,
        ranked_gallery: ranking.order.clone(),
        relevant: index.items.iter().map(|g| g.id == probe.id).collect(),
        valid: single_query_filter(probe, Some(ranking.probe), index),
    })
}

/// Mean over hit positions of precision-at-hit, divided by the number of
/// valid relevant items.
pub fn average_precision(j: &QueryJudgment) -> Result<f64> {
    let total = j.relevant_total();
    if total == 0 {
        return Err(Error::UndefinedAp { probe: j.probe });
    }
    let sum: f64 = j
        .hit_ranks()
        .enumerate()
        .map(|(k, rank)| (k + 1) as f64 / rank as f64)
        .sum();
    Ok(sum / total as f64)
}

/// Mean of the defined APs and the number of queries left out.
pub fn mean_ap(judgments: &[QueryJudgment]) -> Result<(f64, usize)> {
    let aps: Vec<f64> = judgments
        .iter()
        .filter_map(|j| average_precision(j).ok())
        .collect();
    if aps.is_empty() {
        return Err(Error::NoDefinedQueries);
    }
    let excluded = judgments.len() - aps.len();
    Ok((aps.iter().sum::<f64>() / aps.len() as f64, excluded))
}

/// `curve[r]`: fraction of scorable queries whose first hit is at rank ≤ r + 1.
pub fn cmc(judgments: &[QueryJudgment], max_rank: usize) -> Result<Vec<f64>> {
    if max_rank == 0 {
        return Err(Error::InvalidArgument("max_rank must be at least 1".into()));
    }
    let mut counts = vec![0usize; max_rank];
    let mut scored = 0usize;
    for j in judgments {
        if j.relevant_total() == 0 {
            continue;
        }
        scored += 1;
        if let Some(first) = j.hit_ranks().next() {
            if first <= max_rank {
                counts[first - 1] += 1;
            }
        }
    }
    if scored == 0 {
        return Err(Error::NoDefinedQueries);
    }
    let mut acc = 0usize;
    Ok(counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / scored as f64
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "CMC")]
    pub cmc: Vec<f64>,
    pub queries: usize,
    pub excluded: usize,
}

pub fn evaluate(judgments: &[QueryJudgment], max_rank: usize) -> Result<Metrics> {
    let (map, excluded) = mean_ap(judgments)?;
    Ok(Metrics {
        map,
        cmc: cmc(judgments, max_rank)?,
        queries: judgments.len(),
        excluded,
    })
}

/// Judges every ranking against the labels in `index` and summarizes.
pub fn evaluate_rankings(
    rankings: &[RankedList],
    index: &GalleryIndex,
    max_rank: usize,
) -> Result<Metrics> {
    let judgments = rankings
        .iter()
        .map(|r| judge(r, index))
        .collect::<Result<Vec<_>>>()?;
    evaluate(&judgments, max_rank)
}
