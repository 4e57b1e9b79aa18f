//! Labelled feature collections, identity-balanced batches and synthetic data.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::affinity::FeatureVector;
use crate::error::{Error, Result};
use crate::rerank::VerificationScores;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Probe,
    Gallery,
}

/// Feature vectors with identity/camera labels and a probe/gallery role each.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    pub items: Vec<FeatureVector>,
    pub roles: Vec<Role>,
}

impl GalleryIndex {
    /// Validates labels and dimensions. Every item starts as gallery.
    pub fn new(items: Vec<FeatureVector>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = items[0].dim();
        for (i, f) in items.iter().enumerate() {
            if f.id.is_empty() {
                return Err(Error::InvalidArgument(format!("item {i} has an empty id")));
            }
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
        let roles = vec![Role::Gallery; items.len()];
        Ok(Self { items, roles })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.items[0].dim()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|f| f.id == id)
    }

    /// Indices tagged as probes; every index when none are tagged.
    pub fn probes(&self) -> Vec<usize> {
        let tagged: Vec<usize> = (0..self.len())
            .filter(|&i| self.roles[i] == Role::Probe)
            .collect();
        if tagged.is_empty() {
            (0..self.len()).collect()
        } else {
            tagged
        }
    }

    /// Identities in order of first appearance with their item indices.
    pub fn identities(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, f) in self.items.iter().enumerate() {
            groups
                .entry(f.id.as_str())
                .or_insert_with(|| {
                    order.push(f.id.clone());
                    Vec::new()
                })
                .push(i);
        }
        order
            .into_iter()
            .map(|id| {
                let members = groups.remove(id.as_str()).unwrap_or_default();
                (id, members)
            })
            .collect()
    }
}

/// `k` identities with `omega` images each, grouped by identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub members: Vec<FeatureVector>,
    /// Index of each member in the source collection.
    pub source: Vec<usize>,
    pub k: usize,
    pub omega: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// True when the batch has a single identity and so no negative pairs.
    pub fn lacks_negatives(&self) -> bool {
        self.k < 2
    }
}

/// Seeded, identity-balanced sample of `k·omega` items.
pub fn build_batch(index: &GalleryIndex, k: usize, omega: usize, seed: u64) -> Result<Batch> {
    if k == 0 || omega == 0 {
        return Err(Error::InvalidArgument("k and omega must be positive".into()));
    }
    let mut eligible: Vec<Vec<usize>> = index
        .identities()
        .into_iter()
        .map(|(_, members)| members)
        .filter(|m| m.len() >= omega)
        .collect();
    if eligible.len() < k {
        return Err(Error::Insufficient(format!(
            "need {k} identities with at least {omega} images, found {} (short by {})",
            eligible.len(),
            k - eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let mut members = Vec::with_capacity(k * omega);
    let mut source = Vec::with_capacity(k * omega);
    for mut group in eligible.into_iter().take(k) {
        group.shuffle(&mut rng);
        for &i in group.iter().take(omega) {
            members.push(index.items[i].clone());
            source.push(i);
        }
    }
    Ok(Batch {
        members,
        source,
        k,
        omega,
    })
}

/// Binary same-identity matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetMatrix(pub DMatrix<u8>);

impl TargetMatrix {
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.0[(i, j)]
    }
}

pub fn build_target_matrix(batch: &Batch) -> TargetMatrix {
    target_matrix_of(&batch.members)
}

pub fn target_matrix_of(items: &[FeatureVector]) -> TargetMatrix {
    let m = items.len();
    TargetMatrix(DMatrix::from_fn(m, m, |i, j| u8::from(items[i].id == items[j].id)))
}

/// Unit-norm synthetic embeddings: one random centroid per identity, each
/// image a Gaussian perturbation of it, renormalized. Cameras alternate 0, 1
/// within an identity.
pub fn synth_generate(
    num_ids: usize,
    per_id: usize,
    dim: usize,
    intra_noise: f64,
    seed: u64,
) -> Result<GalleryIndex> {
    if num_ids < 2 || per_id < 2 || dim < 2 {
        return Err(Error::InvalidArgument(
            "synthetic data needs num_ids, per_id and dim all >= 2".into(),
        ));
    }
    if !(intra_noise >= 0.0) {
        return Err(Error::InvalidArgument("intra_noise must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(num_ids * per_id);
    for id in 0..num_ids {
        let centroid = unit(random_gaussian(&mut rng, dim));
        for j in 0..per_id {
            let mut v = centroid.clone();
            if intra_noise > 0.0 {
                for (x, e) in v.iter_mut().zip(random_gaussian(&mut rng, dim)) {
                    *x += intra_noise * e;
                }
            }
            items.push(FeatureVector::new(
                format!("{id}"),
                Some((j % 2) as u32),
                unit(v),
            ));
        }
    }
    GalleryIndex::new(items)
}

fn random_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Noisy stand-in for a pairwise verification model: the similarity is a
/// logistic of `signal·[same id] + N(0, noise²)` centred at zero, and the
/// dissimilarity is its complement.
pub fn synth_scores(
    index: &GalleryIndex,
    signal: f64,
    noise: f64,
    seed: u64,
) -> Result<VerificationScores> {
    if !(noise >= 0.0) || !signal.is_finite() {
        return Err(Error::InvalidArgument("noise must be >= 0 and signal finite".into()));
    }
    let m = index.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut s = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let same = index.items[i].id == index.items[j].id;
            let eps = if noise > 0.0 { gauss.sample(&mut rng) } else { 0.0 };
            let logit = if same { signal } else { 0.0 } - signal / 2.0 + eps;
            let v = 1.0 / (1.0 + (-logit).exp());
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    let d = s.map(|v| 1.0 - v);
    VerificationScores::new(s, d)
}
