//! Visual coreference: incremental character matching across an image
//! sequence.
//!
//! Detections of the first image with any surviving detections each seed a
//! chain. Every later image is matched against all chains built so far with
//! a thresholded maximum-weight assignment; matched detections extend their
//! chain and the rest open new ones. Because each image contributes at most
//! one detection per chain, a chain never holds two members of one image.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{solve_with_threshold, AssignmentError, ScoreMatrix};
use crate::model::{Detection, DetectionRef, ImageSequence, VisualChain};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VisualError {
    #[error("detection {0} has no embedding")]
    MissingEmbedding(DetectionRef),
    #[error("detection {0} has a zero-norm embedding")]
    ZeroNorm(DetectionRef),
    #[error("embedding lengths differ between {0} and {1}")]
    DimensionMismatch(DetectionRef, DetectionRef),
    #[error("no pairwise score for ({0}, {1})")]
    MissingPair(DetectionRef, DetectionRef),
    #[error("chain member {0} is not a known detection")]
    UnknownMember(DetectionRef),
    #[error("detection {detection} refers to image {index} but the sequence has {count}")]
    ImageOutOfRange {
        detection: DetectionRef,
        index: usize,
        count: usize,
    },
    #[error("threshold must not be NaN")]
    NanThreshold,
    #[error("non-finite similarity for detection {0}")]
    NonFiniteScore(DetectionRef),
}

/// Which detections count as story characters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterPolicy {
    pub person_label: String,
    /// Kept detections score strictly above this.
    pub min_confidence: f64,
    /// Kept detections cover at least this fraction of the image.
    pub min_area_fraction: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            person_label: "person".to_string(),
            min_confidence: 0.9,
            min_area_fraction: 0.10,
        }
    }
}

impl FilterPolicy {
    pub fn keeps(&self, d: &Detection) -> bool {
        d.label.eq_ignore_ascii_case(&self.person_label)
            && d.confidence > self.min_confidence
            && d.area_fraction >= self.min_area_fraction
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.min_confidence) && (0.0..=1.0).contains(&self.min_area_fraction)
    }
}

/// Keeps person detections that are confident and large enough, in input order.
pub fn filter_detections(detections: &[Detection], policy: &FilterPolicy) -> Vec<Detection> {
    detections.iter().filter(|d| policy.keeps(d)).cloned().collect()
}

/// How detection-vs-member similarities are pooled into one chain score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
    /// Similarity to the most recent member only.
    Last,
}

/// Precomputed pairwise similarities, e.g. from a yes/no visual matcher.
/// Lookups are symmetric.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairwiseTable {
    scores: HashMap<(DetectionRef, DetectionRef), f64>,
}

impl PairwiseTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, a: DetectionRef, b: DetectionRef, score: f64) {
        self.scores.insert(Self::key(a, b), score);
    }

    pub fn get(&self, a: &DetectionRef, b: &DetectionRef) -> Option<f64> {
        self.scores.get(&Self::key(a.clone(), b.clone())).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Entries in a stable order, each pair reported once.
    pub fn entries(&self) -> Vec<(&DetectionRef, &DetectionRef, f64)> {
        let mut out: Vec<_> = self.scores.iter().map(|((a, b), s)| (a, b, *s)).collect();
        out.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        out
    }

    fn key(a: DetectionRef, b: DetectionRef) -> (DetectionRef, DetectionRef) {
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    }
}

impl FromIterator<(DetectionRef, DetectionRef, f64)> for PairwiseTable {
    fn from_iter<T: IntoIterator<Item = (DetectionRef, DetectionRef, f64)>>(iter: T) -> Self {
        let mut t = Self::new();
        for (a, b, s) in iter {
            t.insert(a, b, s);
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SimilaritySource {
    /// Cosine similarity of detection embeddings, mapped to `[0, 1]` as
    /// `(1 + cos) / 2`.
    EmbeddingCosine,
    PairwiseTable(PairwiseTable),
}

/// Similarity of two detections in `[0, 1]` (for well-formed inputs).
pub fn pair_similarity(
    a: &Detection,
    b: &Detection,
    source: &SimilaritySource,
) -> Result<f64, VisualError> {
    match source {
        SimilaritySource::EmbeddingCosine => {
            let ea = a
                .embedding
                .as_ref()
                .ok_or_else(|| VisualError::MissingEmbedding(a.reference()))?;
            let eb = b
                .embedding
                .as_ref()
                .ok_or_else(|| VisualError::MissingEmbedding(b.reference()))?;
            if ea.len() != eb.len() {
                return Err(VisualError::DimensionMismatch(a.reference(), b.reference()));
            }
            let na = ea.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = eb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 {
                return Err(VisualError::ZeroNorm(a.reference()));
            }
            if nb == 0.0 {
                return Err(VisualError::ZeroNorm(b.reference()));
            }
            let dot: f64 = ea.iter().zip(eb).map(|(x, y)| x * y).sum();
            let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
            Ok((1.0 + cos) / 2.0)
        }
        SimilaritySource::PairwiseTable(table) => table
            .get(&a.reference(), &b.reference())
            .ok_or_else(|| VisualError::MissingPair(a.reference(), b.reference())),
    }
}

/// Resolves chain members back to their detections.
pub type DetectionIndex<'a> = HashMap<DetectionRef, &'a Detection>;

pub fn index_detections(detections: &[Detection]) -> DetectionIndex<'_> {
    detections.iter().map(|d| (d.reference(), d)).collect()
}

/// Score of `detection` against an existing chain.
pub fn chain_similarity(
    detection: &Detection,
    chain: &VisualChain,
    index: &DetectionIndex<'_>,
    source: &SimilaritySource,
    aggregation: Aggregation,
) -> Result<f64, VisualError> {
    let members: Vec<&Detection> = match aggregation {
        Aggregation::Last => chain.members.last().into_iter().collect::<Vec<_>>(),
        _ => chain.members.iter().collect(),
    }
    .into_iter()
    .map(|m| index.get(m).copied().ok_or_else(|| VisualError::UnknownMember(m.clone())))
    .collect::<Result<_, _>>()?;
    if members.is_empty() {
        return Ok(0.0);
    }
    let scores = members
        .iter()
        .map(|m| pair_similarity(detection, m, source))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(match aggregation {
        Aggregation::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        _ => scores.iter().sum::<f64>() / scores.len() as f64,
    })
}

/// Tuning knobs of [`build_chains`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainParams {
    pub policy: FilterPolicy,
    /// Minimum chain score for a detection to join an existing chain.
    pub tau: f64,
    pub aggregation: Aggregation,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            policy: FilterPolicy::default(),
            tau: 0.5,
            aggregation: Aggregation::Mean,
        }
    }
}

/// Builds visual chains for one sequence. Chain ids are `c0, c1, ...` in
/// creation order; members are sorted by image.
pub fn build_chains(
    sequence: &ImageSequence,
    detections: &[Detection],
    source: &SimilaritySource,
    params: &ChainParams,
) -> Result<Vec<VisualChain>, VisualError> {
    if params.tau.is_nan() {
        return Err(VisualError::NanThreshold);
    }
    let k = sequence.image_count;
    let kept = filter_detections(detections, &params.policy);
    let mut per_image: Vec<Vec<&Detection>> = vec![Vec::new(); k];
    for d in &kept {
        if d.image_index >= k {
            return Err(VisualError::ImageOutOfRange {
                detection: d.reference(),
                index: d.image_index,
                count: k,
            });
        }
        per_image[d.image_index].push(d);
    }
    let index = index_detections(&kept);
    let mut chains: Vec<VisualChain> = Vec::new();
    for image in per_image {
        if image.is_empty() {
            continue;
        }
        let mut scores = Vec::with_capacity(image.len() * chains.len());
        for det in &image {
            for chain in &chains {
                scores.push(chain_similarity(det, chain, &index, source, params.aggregation)?);
            }
        }
        let assignment = if chains.is_empty() {
            solve_with_threshold(&ScoreMatrix::empty(image.len(), 0), params.tau)
        } else {
            let matrix = ScoreMatrix::new(image.len(), chains.len(), scores).map_err(|e| match e {
                AssignmentError::NonFinite { row, .. } => VisualError::NonFiniteScore(image[row].reference()),
                other => unreachable!("matrix shape is fixed: {other}"),
            })?;
            solve_with_threshold(&matrix, params.tau)
        };
        for (row, det) in image.iter().enumerate() {
            match assignment.col_for_row(row) {
                Some(col) => chains[col].members.push(det.reference()),
                None => {
                    let chain_id = format!("c{}", chains.len());
                    chains.push(VisualChain {
                        chain_id,
                        members: vec![det.reference()],
                    });
                }
            }
        }
    }
    Ok(chains)
}
