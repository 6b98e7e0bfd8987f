//! On-disk corpus layout and canonical documents.
//!
//! ```text
//! corpus/<sequence_id>/
//!     images.meta            ImagesDoc
//!     detections.doc         DetectionsDoc
//!     pairwise.doc           PairwiseDoc (optional)
//!     story.txt              plain story
//!     story.annotated.txt    story with [mention](#id) tags
//!     gold/detections.doc    DetectionsDoc of gold person boxes
//!     gold/vchains.doc       VisualChainsDoc over gold detections
//!     gold/story.annotated.txt
//!     gold/alignment.doc     AlignmentDoc
//! out/<sequence_id>/
//!     vchains.doc  story.doc  mmchains.doc
//! ```
//!
//! Documents are JSON with sorted keys, two-space indentation and a
//! trailing newline. Writing a value that was just read reproduces the
//! file byte for byte.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    natural_cmp, AnnotatedStory, Detection, DetectionRef, ImageSequence, MultimodalChain, Violation,
    VisualChain,
};
use crate::text::first_divergence;
use crate::textual::parse_annotated;
use crate::visual::PairwiseTable;

pub const FORMAT_VERSION: u32 = 1;

pub const IMAGES_META: &str = "images.meta";
pub const DETECTIONS_DOC: &str = "detections.doc";
pub const PAIRWISE_DOC: &str = "pairwise.doc";
pub const STORY_TXT: &str = "story.txt";
pub const STORY_ANNOTATED: &str = "story.annotated.txt";
pub const GOLD_DIR: &str = "gold";
pub const VCHAINS_DOC: &str = "vchains.doc";
pub const STORY_DOC: &str = "story.doc";
pub const MMCHAINS_DOC: &str = "mmchains.doc";
pub const ALIGNMENT_DOC: &str = "alignment.doc";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: malformed document at byte {offset}: {message}", path.display())]
    Malformed {
        path: PathBuf,
        offset: usize,
        message: String,
    },
}

impl CorpusError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Documents carrying a `format_version` field.
pub trait Document: Serialize + DeserializeOwned {
    fn format_version(&self) -> u32;
}

macro_rules! document {
    ($t:ty) => {
        impl Document for $t {
            fn format_version(&self) -> u32 {
                self.format_version
            }
        }
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagesDoc {
    pub format_version: u32,
    pub sequence: ImageSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionsDoc {
    pub format_version: u32,
    pub sequence_id: String,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairScore {
    pub a: DetectionRef,
    pub b: DetectionRef,
    pub score: f64,
}

/// Externally computed detection-pair similarities, e.g. from a visual QA model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairwiseDoc {
    pub format_version: u32,
    pub sequence_id: String,
    pub pairs: Vec<PairScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualChainsDoc {
    pub format_version: u32,
    pub sequence_id: String,
    pub chains: Vec<VisualChain>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryDoc {
    pub format_version: u32,
    pub story: AnnotatedStory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultimodalDoc {
    pub format_version: u32,
    pub sequence_id: String,
    pub chains: Vec<MultimodalChain>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldPair {
    /// Cluster id in the gold annotated story.
    pub cluster: String,
    /// Chain id in the gold visual chains.
    pub chain: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentDoc {
    pub format_version: u32,
    pub sequence_id: String,
    pub pairs: Vec<GoldPair>,
}

document!(ImagesDoc);
document!(DetectionsDoc);
document!(PairwiseDoc);
document!(VisualChainsDoc);
document!(StoryDoc);
document!(MultimodalDoc);
document!(AlignmentDoc);

impl DetectionsDoc {
    pub fn new(sequence_id: impl Into<String>, mut detections: Vec<Detection>) -> Self {
        sort_detections(&mut detections);
        Self {
            format_version: FORMAT_VERSION,
            sequence_id: sequence_id.into(),
            detections,
        }
    }
}

impl PairwiseDoc {
    pub fn table(&self) -> PairwiseTable {
        self.pairs.iter().map(|p| (p.a.clone(), p.b.clone(), p.score)).collect()
    }
}

impl VisualChainsDoc {
    pub fn new(sequence_id: impl Into<String>, mut chains: Vec<VisualChain>) -> Self {
        chains.sort_by(|a, b| natural_cmp(&a.chain_id, &b.chain_id));
        Self {
            format_version: FORMAT_VERSION,
            sequence_id: sequence_id.into(),
            chains,
        }
    }
}

impl StoryDoc {
    pub fn new(story: AnnotatedStory) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            story,
        }
    }
}

impl MultimodalDoc {
    pub fn new(sequence_id: impl Into<String>, mut chains: Vec<MultimodalChain>) -> Self {
        chains.sort_by(|a, b| natural_cmp(&a.chain_id, &b.chain_id));
        Self {
            format_version: FORMAT_VERSION,
            sequence_id: sequence_id.into(),
            chains,
        }
    }
}

/// Detections in `(image_index, detection_id)` order.
pub fn sort_detections(detections: &mut [Detection]) {
    detections.sort_by(|a, b| {
        a.image_index
            .cmp(&b.image_index)
            .then_with(|| natural_cmp(&a.detection_id, &b.detection_id))
    });
}

/// Canonical text of any serializable value.
pub fn to_canonical_string<T: Serialize>(value: &T) -> String {
    // Going through `Value` sorts object keys.
    let v = serde_json::to_value(value).expect("documents serialize to JSON");
    let mut s = serde_json::to_string_pretty(&v).expect("JSON values serialize");
    s.push('\n');
    s
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub fn parse_doc<T: Document>(path: &Path, text: &str) -> Result<T, CorpusError> {
    let doc: T = serde_json::from_str(text).map_err(|e| CorpusError::Malformed {
        path: path.to_path_buf(),
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    if doc.format_version() != FORMAT_VERSION {
        return Err(CorpusError::Malformed {
            path: path.to_path_buf(),
            offset: text.find("format_version").unwrap_or(0),
            message: format!("unsupported format_version {}", doc.format_version()),
        });
    }
    Ok(doc)
}

pub fn read_text(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))
}

pub fn read_doc<T: Document>(path: &Path) -> Result<T, CorpusError> {
    parse_doc(path, &read_text(path)?)
}

/// Writes `text` through a temporary sibling so readers never see a
/// partial file.
pub fn write_text(path: &Path, text: &str) -> Result<(), CorpusError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| CorpusError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CorpusError::io(path, e))
}

pub fn write_doc<T: Serialize>(path: &Path, doc: &T) -> Result<(), CorpusError> {
    write_text(path, &to_canonical_string(doc))
}

/// Parses an annotated story file, mapping parse errors to the file.
pub fn read_annotated(path: &Path, story_id: &str) -> Result<AnnotatedStory, CorpusError> {
    let text = read_text(path)?;
    parse_annotated(&text)
        .map(|s| s.with_id(story_id))
        .map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            offset: e.offset,
            message: e.kind.to_string(),
        })
}

/// Sequence directories under `root`, in natural id order.
pub fn sequence_ids(root: &Path) -> Result<Vec<String>, CorpusError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| CorpusError::io(root, e))? {
        let entry = entry.map_err(|e| CorpusError::io(root, e))?;
        if entry.path().join(IMAGES_META).is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort_by(|a, b| natural_cmp(a, b));
    Ok(ids)
}

/// One finding of [`validate_corpus`].
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Finding {
    pub file: String,
    pub entity: String,
    pub rule: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub sequences: usize,
    pub findings: Vec<Finding>,
}

struct Collector<'a> {
    root: &'a Path,
    findings: Vec<Finding>,
}

impl Collector<'_> {
    fn add(&mut self, path: &Path, violations: impl IntoIterator<Item = Violation>) {
        let file = path
            .strip_prefix(self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned();
        self.findings.extend(violations.into_iter().map(|v| Finding {
            file: file.clone(),
            entity: v.entity,
            rule: v.rule,
        }));
    }
}

fn detection_violations(doc: &DetectionsDoc, seq: &ImageSequence, embedding_len: &mut Option<usize>) -> Vec<Violation> {
    let mut out = Vec::new();
    if doc.sequence_id != seq.sequence_id {
        out.push(Violation::new(format!("sequence {}", doc.sequence_id), "sequence_id mismatch"));
    }
    let mut ids = BTreeSet::new();
    for d in &doc.detections {
        let size = seq.image_sizes.as_ref().and_then(|s| s.get(d.image_index).copied());
        out.extend(d.validate(seq.image_count, size));
        if !ids.insert(d.reference()) {
            out.push(Violation::new(d.entity(), "duplicate detection_id"));
        }
        if let Some(e) = &d.embedding {
            match *embedding_len {
                None => *embedding_len = Some(e.len()),
                Some(n) if n != e.len() => out.push(Violation::new(d.entity(), "embedding length mismatch")),
                Some(_) => {}
            }
        }
    }
    out
}

fn story_violations(story: &AnnotatedStory, plain: Option<&str>) -> Vec<Violation> {
    let mut out = story.validate();
    if let Some(plain) = plain {
        if let Some(offset) = first_divergence(&story.text, plain) {
            out.push(Violation::new(
                format!("story {}", story.story_id),
                format!("annotation drifts from story text at byte {offset}"),
            ));
        }
    }
    out
}

/// Checks every document under `root` and collects invariant violations.
///
/// Unreadable or malformed documents abort with an error naming the file;
/// violations of domain rules are collected as findings.
pub fn validate_corpus(root: &Path) -> Result<ValidationReport, CorpusError> {
    let ids = sequence_ids(root)?;
    let mut c = Collector {
        root,
        findings: Vec::new(),
    };
    let mut embedding_len = None;
    for id in &ids {
        let dir = root.join(id);
        let images_path = dir.join(IMAGES_META);
        let seq = read_doc::<ImagesDoc>(&images_path)?.sequence;
        let mut v = seq.validate();
        if &seq.sequence_id != id {
            v.push(Violation::new(format!("sequence {}", seq.sequence_id), "sequence_id does not match directory"));
        }
        c.add(&images_path, v);

        let det_path = dir.join(DETECTIONS_DOC);
        let detections = read_doc::<DetectionsDoc>(&det_path)?;
        c.add(&det_path, detection_violations(&detections, &seq, &mut embedding_len));

        let pw_path = dir.join(PAIRWISE_DOC);
        if pw_path.is_file() {
            let pw = read_doc::<PairwiseDoc>(&pw_path)?;
            let known: BTreeSet<DetectionRef> = detections.detections.iter().map(Detection::reference).collect();
            let mut v = Vec::new();
            for p in &pw.pairs {
                let e = format!("pair {}~{}", p.a, p.b);
                if !known.contains(&p.a) || !known.contains(&p.b) {
                    v.push(Violation::new(&e, "unknown detection"));
                }
                if !p.score.is_finite() {
                    v.push(Violation::new(&e, "non-finite score"));
                }
            }
            c.add(&pw_path, v);
        }

        let plain_path = dir.join(STORY_TXT);
        let plain = if plain_path.is_file() {
            Some(read_text(&plain_path)?)
        } else {
            None
        };
        let ann_path = dir.join(STORY_ANNOTATED);
        if ann_path.is_file() {
            let story = read_annotated(&ann_path, id)?;
            c.add(&ann_path, story_violations(&story, plain.as_deref()));
        }

        let gold = dir.join(GOLD_DIR);
        let gold_det_path = gold.join(DETECTIONS_DOC);
        let gold_dets = if gold_det_path.is_file() {
            let d = read_doc::<DetectionsDoc>(&gold_det_path)?;
            c.add(&gold_det_path, detection_violations(&d, &seq, &mut None));
            Some(d.detections)
        } else {
            None
        };
        let gold_vc_path = gold.join(VCHAINS_DOC);
        let gold_chains = if gold_vc_path.is_file() {
            let doc = read_doc::<VisualChainsDoc>(&gold_vc_path)?;
            let dets = gold_dets.as_deref().unwrap_or(&detections.detections);
            let mut v = Vec::new();
            let mut seen = BTreeSet::new();
            for ch in &doc.chains {
                v.extend(ch.validate_against(dets));
                for m in &ch.members {
                    if !seen.insert(m.clone()) {
                        v.push(Violation::new(format!("chain {}", ch.chain_id), format!("member {m} in several chains")));
                    }
                }
            }
            c.add(&gold_vc_path, v);
            Some(doc.chains)
        } else {
            None
        };
        let gold_story_path = gold.join(STORY_ANNOTATED);
        let gold_story = if gold_story_path.is_file() {
            let s = read_annotated(&gold_story_path, id)?;
            c.add(&gold_story_path, story_violations(&s, plain.as_deref()));
            Some(s)
        } else {
            None
        };
        let align_path = gold.join(ALIGNMENT_DOC);
        if align_path.is_file() {
            let doc = read_doc::<AlignmentDoc>(&align_path)?;
            let mut v = Vec::new();
            let mut clusters = BTreeSet::new();
            let mut chains = BTreeSet::new();
            for p in &doc.pairs {
                let e = format!("pair {}~{}", p.cluster, p.chain);
                if gold_story.as_ref().is_some_and(|s| !s.chains.contains_key(&p.cluster)) {
                    v.push(Violation::new(&e, "unknown cluster"));
                }
                if gold_chains.as_ref().is_some_and(|cs| !cs.iter().any(|ch| ch.chain_id == p.chain)) {
                    v.push(Violation::new(&e, "unknown chain"));
                }
                if !clusters.insert(&p.cluster) || !chains.insert(&p.chain) {
                    v.push(Violation::new(&e, "pairing is not one-to-one"));
                }
            }
            c.add(&align_path, v);
        }
    }
    let mut findings = c.findings;
    findings.sort();
    Ok(ValidationReport {
        ok: findings.is_empty(),
        sequences: ids.len(),
        findings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BBox;

    fn det(image: usize, id: &str, confidence: f64) -> Detection {
        Detection {
            detection_id: id.into(),
            image_index: image,
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
            label: "person".into(),
            confidence,
            area_fraction: 0.25,
            embedding: Some(vec![1.0, 0.0]),
            mask_ref: None,
        }
    }

    fn write_sequence(root: &Path, id: &str, dets: Vec<Detection>) {
        let seq = ImageSequence::new(id, (0..5).map(|i| format!("{id}/{i}.jpg")).collect()).unwrap();
        write_doc(
            &root.join(id).join(IMAGES_META),
            &ImagesDoc {
                format_version: FORMAT_VERSION,
                sequence: seq,
            },
        )
        .unwrap();
        write_doc(&root.join(id).join(DETECTIONS_DOC), &DetectionsDoc::new(id, dets)).unwrap();
    }

    #[test]
    fn canonical_round_trip() {
        let doc = DetectionsDoc::new("s1", vec![det(1, "b", 0.95), det(0, "a", 0.5)]);
        let text = to_canonical_string(&doc);
        assert!(text.ends_with("}\n"));
        let back: DetectionsDoc = parse_doc(Path::new("x"), &text).unwrap();
        assert_eq!(back, doc);
        assert_eq!(to_canonical_string(&back), text);
        assert_eq!(back.detections[0].detection_id, "a");
        let keys: Vec<usize> = ["\"detections\"", "\"format_version\"", "\"sequence_id\""]
            .iter()
            .map(|k| text.find(k).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn malformed_reports_offset() {
        let text = "{\n  \"format_version\": 1,\n  \"sequence_id\": oops\n}\n";
        match parse_doc::<DetectionsDoc>(Path::new("d.doc"), text) {
            Err(CorpusError::Malformed { offset, .. }) => assert_eq!(&text[offset..offset + 1], "o"),
            other => panic!("{other:?}"),
        }
        let wrong = "{\"format_version\": 7, \"sequence_id\": \"s\", \"detections\": []}";
        let err = parse_doc::<DetectionsDoc>(Path::new("d.doc"), wrong).unwrap_err();
        assert!(err.to_string().contains("unsupported format_version 7"));
    }

    #[test]
    fn validation_findings() {
        let dir = tempfile::tempdir().unwrap();
        write_sequence(dir.path(), "s1", vec![det(0, "a", 0.95), det(1, "b", 0.97)]);
        let report = validate_corpus(dir.path()).unwrap();
        assert!(report.ok, "{:?}", report.findings);
        assert_eq!(report.sequences, 1);

        write_sequence(dir.path(), "s2", vec![det(0, "a", 1.2)]);
        let chains = VisualChainsDoc::new(
            "s2",
            vec![VisualChain {
                chain_id: "g0".into(),
                members: vec![DetectionRef::new(3, "x"), DetectionRef::new(3, "y")],
            }],
        );
        write_doc(&dir.path().join("s2/gold").join(VCHAINS_DOC), &chains).unwrap();
        let report = validate_corpus(dir.path()).unwrap();
        assert!(!report.ok);
        let rules: Vec<&str> = report.findings.iter().map(|f| f.rule.as_str()).collect();
        assert!(rules.contains(&"confidence out of [0,1]"));
        assert!(rules.contains(&"duplicate image_index"));
        assert!(report.findings.iter().any(|f| f.file == "s2/detections.doc"));
    }

    #[test]
    fn story_drift_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_sequence(dir.path(), "s1", vec![]);
        write_text(&dir.path().join("s1").join(STORY_TXT), "Tom waved.").unwrap();
        write_text(&dir.path().join("s1").join(STORY_ANNOTATED), "[Tom](#1) left.").unwrap();
        let report = validate_corpus(dir.path()).unwrap();
        assert!(report.findings[0].rule.starts_with("annotation drifts"));

        write_text(&dir.path().join("s1").join(STORY_ANNOTATED), "[Tom](#1 waved.").unwrap();
        let err = validate_corpus(dir.path()).unwrap_err();
        assert!(err.to_string().contains("story.annotated.txt"), "{err}");
    }
}
