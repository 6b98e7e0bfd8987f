//! Domain types shared by every stage of the pipeline.
//!
//! All types are plain data: immutable after construction, `Send + Sync`,
//! and serializable to the canonical document format in [`crate::corpus`].

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of images (and story sentences) in a standard sequence.
pub const DEFAULT_SEQUENCE_LEN: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("index out of range: {index} >= {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("chain {0} has no members")]
    EmptyChain(String),
    #[error("unknown cluster: {0}")]
    UnknownCluster(String),
    #[error("invalid {entity}: {rule}")]
    Invalid { entity: String, rule: String },
}

/// A single broken invariant, reported by the `validate` methods.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub entity: String,
    pub rule: String,
}

impl Violation {
    pub fn new(entity: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            entity: entity.into(),
            rule: rule.into(),
        }
    }
}

/// Orders strings so that embedded integers compare numerically
/// (`"c2" < "c10"`, `"#9" < "#10"`). Falls back to byte order on ties.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (mut ai, mut bi) = (a.as_bytes(), b.as_bytes());
    loop {
        match (ai.first(), bi.first()) {
            (None, None) => return a.cmp(b),
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) if x.is_ascii_digit() && y.is_ascii_digit() => {
                let an = ai.iter().take_while(|c| c.is_ascii_digit()).count();
                let bn = bi.iter().take_while(|c| c.is_ascii_digit()).count();
                let (ad, bd) = (&ai[..an], &bi[..bn]);
                let at = trim_leading_zeros(ad);
                let bt = trim_leading_zeros(bd);
                let ord = at.len().cmp(&bt.len()).then_with(|| at.cmp(bt));
                if ord != Ordering::Equal {
                    return ord;
                }
                ai = &ai[an..];
                bi = &bi[bn..];
            }
            (Some(x), Some(y)) => {
                if x != y {
                    return x.cmp(y);
                }
                ai = &ai[1..];
                bi = &bi[1..];
            }
        }
    }
}

fn trim_leading_zeros(d: &[u8]) -> &[u8] {
    let n = d.iter().take_while(|&&c| c == b'0').count();
    &d[n.min(d.len().saturating_sub(1))..]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

/// An ordered sequence of `image_count` images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSequence {
    pub sequence_id: String,
    pub image_count: usize,
    pub image_refs: Vec<String>,
    /// Pixel dimensions per image, when known. Enables the area-fraction check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_sizes: Option<Vec<ImageSize>>,
}

impl ImageSequence {
    pub fn new(sequence_id: impl Into<String>, image_refs: Vec<String>) -> Result<Self, ModelError> {
        let seq = Self {
            sequence_id: sequence_id.into(),
            image_count: image_refs.len(),
            image_refs,
            image_sizes: None,
        };
        match seq.validate().into_iter().next() {
            Some(v) => Err(ModelError::Invalid {
                entity: v.entity,
                rule: v.rule,
            }),
            None => Ok(seq),
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let id = &self.sequence_id;
        if self.image_count == 0 {
            out.push(Violation::new(id, "image_count must be at least 1"));
        }
        if self.image_refs.len() != self.image_count {
            out.push(Violation::new(id, "image_refs length differs from image_count"));
        }
        let distinct: HashSet<&String> = self.image_refs.iter().collect();
        if distinct.len() != self.image_refs.len() {
            out.push(Violation::new(id, "duplicate image_ref"));
        }
        if let Some(sizes) = &self.image_sizes {
            if sizes.len() != self.image_count {
                out.push(Violation::new(id, "image_sizes length differs from image_count"));
            }
            if sizes.iter().any(|s| s.width == 0 || s.height == 0) {
                out.push(Violation::new(id, "image size must be positive"));
            }
        }
        out
    }
}

/// Axis-aligned box in pixels: top-left corner plus extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Self {
        Self { x, y, width, height }
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x + self.width).min(other.x + other.width) - self.x.max(other.x);
        let h = (self.y + self.height).min(other.y + other.height) - self.y.max(other.y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union. Zero when either box is degenerate.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn is_valid(&self) -> bool {
        [self.x, self.y, self.width, self.height].iter().all(|v| v.is_finite())
            && self.x >= 0.0
            && self.y >= 0.0
            && self.width > 0.0
            && self.height > 0.0
    }
}

/// One candidate character region in one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub detection_id: String,
    pub image_index: usize,
    pub bbox: BBox,
    pub label: String,
    pub confidence: f64,
    pub area_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    /// Opaque reference to a segmentation mask; carried through, never read.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ref: Option<String>,
}

impl Detection {
    pub fn reference(&self) -> DetectionRef {
        DetectionRef::new(self.image_index, self.detection_id.clone())
    }

    pub fn entity(&self) -> String {
        format!("image {} detection {}", self.image_index, self.detection_id)
    }

    /// Checks the per-detection invariants. `image_count` bounds `image_index`;
    /// `size`, when given, is the pixel size of the detection's image.
    pub fn validate(&self, image_count: usize, size: Option<ImageSize>) -> Vec<Violation> {
        let mut out = Vec::new();
        let e = self.entity();
        if self.detection_id.is_empty() {
            out.push(Violation::new(&e, "empty detection_id"));
        }
        if self.image_index >= image_count {
            out.push(Violation::new(&e, "image_index out of range"));
        }
        if !self.bbox.is_valid() {
            out.push(Violation::new(&e, "invalid bbox"));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            out.push(Violation::new(&e, "confidence out of [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.area_fraction) {
            out.push(Violation::new(&e, "area_fraction out of [0,1]"));
        }
        if let Some(size) = size {
            let computed = self.bbox.area() / (f64::from(size.width) * f64::from(size.height));
            if (computed - self.area_fraction).abs() > 1e-6 {
                out.push(Violation::new(&e, "area_fraction inconsistent with bbox"));
            }
        }
        if let Some(emb) = &self.embedding {
            if emb.is_empty() || emb.iter().any(|v| !v.is_finite()) {
                out.push(Violation::new(&e, "embedding must be non-empty and finite"));
            }
        }
        out
    }
}

/// Identifies a detection within a sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DetectionRef {
    pub image_index: usize,
    pub detection_id: String,
}

impl DetectionRef {
    pub fn new(image_index: usize, detection_id: impl Into<String>) -> Self {
        Self {
            image_index,
            detection_id: detection_id.into(),
        }
    }
}

impl std::fmt::Display for DetectionRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.image_index, self.detection_id)
    }
}

/// Detections across images judged to depict the same character.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualChain {
    pub chain_id: String,
    pub members: Vec<DetectionRef>,
}

impl VisualChain {
    /// Structural invariants only; use [`VisualChain::validate_against`] to
    /// also resolve members.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let e = format!("chain {}", self.chain_id);
        if self.members.is_empty() {
            out.push(Violation::new(&e, "empty chain"));
        }
        let mut seen = BTreeSet::new();
        for m in &self.members {
            if !seen.insert(m.image_index) {
                out.push(Violation::new(&e, "duplicate image_index"));
                break;
            }
        }
        if self.members.windows(2).any(|w| w[0].image_index > w[1].image_index) {
            out.push(Violation::new(&e, "members not sorted by image_index"));
        }
        out
    }

    pub fn validate_against(&self, detections: &[Detection]) -> Vec<Violation> {
        let mut out = self.validate();
        let known: HashSet<DetectionRef> = detections.iter().map(Detection::reference).collect();
        for m in &self.members {
            if !known.contains(m) {
                out.push(Violation::new(
                    format!("chain {}", self.chain_id),
                    format!("member {m} does not resolve to a detection"),
                ));
            }
        }
        out
    }
}

/// Half-open byte range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextualMention {
    pub mention_id: String,
    pub sentence_index: usize,
    pub span: Span,
    pub surface: String,
    /// Clusters in written order. More than one only for plural mentions.
    pub cluster_ids: Vec<String>,
}

/// Story text with its character mentions and clusters.
///
/// `text` is the plain story (tags stripped); spans index into it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedStory {
    pub story_id: String,
    pub text: String,
    pub sentences: Vec<String>,
    pub mentions: Vec<TextualMention>,
    pub chains: BTreeMap<String, Vec<String>>,
}

impl AnnotatedStory {
    pub fn with_id(mut self, story_id: impl Into<String>) -> Self {
        self.story_id = story_id.into();
        self
    }

    /// Inverse index cluster -> mention ids, ordered by mention position.
    pub fn chain_index(mentions: &[TextualMention]) -> BTreeMap<String, Vec<String>> {
        let mut ordered: Vec<&TextualMention> = mentions.iter().collect();
        ordered.sort_by_key(|m| (m.sentence_index, m.span));
        let mut chains: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for m in ordered {
            for c in &m.cluster_ids {
                let entry = chains.entry(c.clone()).or_default();
                if !entry.contains(&m.mention_id) {
                    entry.push(m.mention_id.clone());
                }
            }
        }
        chains
    }

    /// Cluster ids in natural order (`#2` before `#10`).
    pub fn cluster_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.chains.keys().map(String::as_str).collect();
        ids.sort_by(|a, b| natural_cmp(a, b));
        ids
    }

    pub fn mention(&self, mention_id: &str) -> Option<&TextualMention> {
        self.mentions.iter().find(|m| m.mention_id == mention_id)
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut ids = HashSet::new();
        for m in &self.mentions {
            let e = format!("story {} mention {}", self.story_id, m.mention_id);
            if !ids.insert(&m.mention_id) {
                out.push(Violation::new(&e, "duplicate mention_id"));
            }
            if m.span.is_empty() {
                out.push(Violation::new(&e, "empty span"));
            }
            match self.text.get(m.span.start..m.span.end) {
                Some(s) if s == m.surface => {}
                _ => out.push(Violation::new(&e, "surface does not match span")),
            }
            if m.cluster_ids.is_empty() {
                out.push(Violation::new(&e, "mention has no cluster"));
            }
            let distinct: HashSet<&String> = m.cluster_ids.iter().collect();
            if distinct.len() != m.cluster_ids.len() {
                out.push(Violation::new(&e, "duplicate cluster id"));
            }
            if m.sentence_index >= self.sentences.len().max(1) {
                out.push(Violation::new(&e, "sentence_index out of range"));
            }
        }
        let mut spans: Vec<Span> = self.mentions.iter().map(|m| m.span).collect();
        spans.sort();
        if spans.windows(2).any(|w| w[0].overlaps(&w[1])) {
            out.push(Violation::new(format!("story {}", self.story_id), "overlapping mentions"));
        }
        if Self::chain_index(&self.mentions) != self.chains {
            out.push(Violation::new(
                format!("story {}", self.story_id),
                "chains differ from mention cluster index",
            ));
        }
        out
    }
}

/// An aligned textual cluster / visual chain pair, or a single-modality chain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultimodalChain {
    pub chain_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub textual: Option<String>,
    pub visual_members: Vec<DetectionRef>,
    pub textual_members: Vec<String>,
}

impl MultimodalChain {
    pub fn is_fused(&self) -> bool {
        self.visual.is_some() && self.textual.is_some()
    }
}

/// Checks that each visual chain and each textual cluster occurs in at most
/// one multimodal chain, and that every chain has at least one side.
pub fn validate_multimodal(chains: &[MultimodalChain]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut vis = HashSet::new();
    let mut txt = HashSet::new();
    for c in chains {
        let e = format!("multimodal chain {}", c.chain_id);
        if c.visual.is_none() && c.textual.is_none() {
            out.push(Violation::new(&e, "neither visual nor textual side present"));
        }
        if let Some(v) = &c.visual {
            if !vis.insert(v) {
                out.push(Violation::new(&e, format!("visual chain {v} used twice")));
            }
        }
        if let Some(t) = &c.textual {
            if !txt.insert(t) {
                out.push(Violation::new(&e, format!("textual cluster {t} used twice")));
            }
        }
    }
    out
}

/// Presence of a chain over the `K` images or sentences of a sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DistributionVector {
    pub bits: Vec<u8>,
}

impl DistributionVector {
    /// Sets bit `i` for every index in `indices`. Repeats are harmless.
    pub fn from_indices<I>(indices: I, len: usize) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = usize>,
    {
        let mut bits = vec![0u8; len];
        for i in indices {
            if i >= len {
                return Err(ModelError::IndexOutOfRange { index: i, len });
            }
            bits[i] = 1;
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    /// Dot product; the shorter vector is treated as zero-padded.
    pub fn dot(&self, other: &DistributionVector) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a != 0 && **b != 0)
            .count()
    }

    pub fn padded(&self, len: usize) -> DistributionVector {
        let mut bits = self.bits.clone();
        if bits.len() < len {
            bits.resize(len, 0);
        }
        Self { bits }
    }
}

/// Image-presence vector of a visual chain.
pub fn visual_distribution(chain: &VisualChain, k: usize) -> Result<DistributionVector, ModelError> {
    if chain.members.is_empty() {
        return Err(ModelError::EmptyChain(chain.chain_id.clone()));
    }
    DistributionVector::from_indices(chain.members.iter().map(|m| m.image_index), k)
}

/// Sentence-presence vector of one textual cluster.
pub fn textual_distribution(
    story: &AnnotatedStory,
    cluster_id: &str,
    k: usize,
) -> Result<DistributionVector, ModelError> {
    let members = story
        .chains
        .get(cluster_id)
        .ok_or_else(|| ModelError::UnknownCluster(cluster_id.to_string()))?;
    if members.is_empty() {
        return Err(ModelError::EmptyChain(cluster_id.to_string()));
    }
    let indices = members
        .iter()
        .map(|id| {
            story
                .mention(id)
                .map(|m| m.sentence_index)
                .ok_or_else(|| ModelError::Invalid {
                    entity: format!("cluster {cluster_id}"),
                    rule: format!("mention {id} missing"),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    DistributionVector::from_indices(indices, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(id: &str, images: &[usize]) -> VisualChain {
        VisualChain {
            chain_id: id.into(),
            members: images.iter().map(|&i| DetectionRef::new(i, format!("d{i}"))).collect(),
        }
    }

    #[test]
    fn natural_order() {
        let mut v = vec!["c10", "c2", "c1", "#10", "#9", "b", "a"];
        v.sort_by(|a, b| natural_cmp(a, b));
        assert_eq!(v, ["#9", "#10", "a", "b", "c1", "c2", "c10"]);
        assert_eq!(natural_cmp("x01", "x1"), "x01".cmp("x1"));
    }

    #[test]
    fn visual_vector() {
        let v = visual_distribution(&chain("c0", &[0, 1, 4]), 5).unwrap();
        assert_eq!(v.bits, vec![1, 1, 0, 0, 1]);
    }

    #[test]
    fn empty_chain_is_rejected() {
        assert_eq!(
            visual_distribution(&chain("c0", &[]), 5),
            Err(ModelError::EmptyChain("c0".into()))
        );
    }

    #[test]
    fn out_of_range_member() {
        assert!(matches!(
            visual_distribution(&chain("c0", &[5]), 5),
            Err(ModelError::IndexOutOfRange { index: 5, len: 5 })
        ));
    }

    #[test]
    fn duplicate_image_in_chain() {
        let c = VisualChain {
            chain_id: "c0".into(),
            members: vec![DetectionRef::new(3, "a"), DetectionRef::new(3, "b")],
        };
        assert!(c.validate().iter().any(|v| v.rule == "duplicate image_index"));
    }

    #[test]
    fn iou_of_shifted_boxes() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 0.0, 10.0, 10.0);
        assert_eq!(a.iou(&b), 1.0 / 3.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(20.0, 20.0, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn detection_ranges() {
        let d = Detection {
            detection_id: "d0".into(),
            image_index: 0,
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
            label: "person".into(),
            confidence: 1.2,
            area_fraction: 0.25,
            embedding: None,
            mask_ref: None,
        };
        let v = d.validate(5, Some(ImageSize { width: 20, height: 20 }));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "confidence out of [0,1]");
        let v = d.validate(5, Some(ImageSize { width: 10, height: 20 }));
        assert!(v.iter().any(|x| x.rule == "area_fraction inconsistent with bbox"));
    }

    #[test]
    fn sequence_requires_distinct_refs() {
        assert!(ImageSequence::new("s", vec!["a".into(), "a".into()]).is_err());
        assert!(ImageSequence::new("s", vec![]).is_err());
        let s = ImageSequence::new("s", vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(s.image_count, 2);
    }

    #[test]
    fn dot_pads_shorter() {
        let a = DistributionVector { bits: vec![1, 1, 0] };
        let b = DistributionVector { bits: vec![1, 0, 0, 1, 1] };
        assert_eq!(a.dot(&b), 1);
        assert_eq!(a.padded(5).bits, vec![1, 1, 0, 0, 0]);
    }
}
