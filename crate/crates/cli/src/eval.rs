//! The `eval` command: per-story and corpus-level metrics written as one
//! report document.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use charcoref::corpus::{
    read_annotated, read_doc, read_text, write_doc, AlignmentDoc, DetectionsDoc, Document, MultimodalDoc, StoryDoc,
    VisualChainsDoc, ALIGNMENT_DOC, DETECTIONS_DOC, FORMAT_VERSION, GOLD_DIR, MMCHAINS_DOC, STORY_ANNOTATED, STORY_DOC,
    VCHAINS_DOC,
};
use charcoref::metrics::{
    alignment_counts, best_gold_chain, coref_sums, character_richness, fkgl, inter_story_repetition, match_mentions,
    mention_renaming, textual_eval_mentions, B3Sums, EvalMention, MentionMatchPolicy,
};
use charcoref::model::{AnnotatedStory, Detection, DetectionRef, VisualChain};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::manifest::{self, FileSet};
use crate::stages::{require_valid, Layout};
use crate::{par_map, pool, CliError, EvalArgs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    /// B³ over textual and visual chains.
    Coref,
    /// Mention detection precision and recall.
    Detection,
    /// Precision and recall of fused (cluster, chain) pairs.
    Alignment,
    /// Flesch-Kincaid grade level.
    Fkgl,
    /// Trigram repetition across stories.
    Repetition,
    /// Characters and mentions per story.
    Richness,
}

impl MetricName {
    pub const ALL: [MetricName; 6] = [
        Self::Coref,
        Self::Detection,
        Self::Alignment,
        Self::Fkgl,
        Self::Repetition,
        Self::Richness,
    ];

    fn needs_gold(self) -> bool {
        matches!(self, Self::Coref | Self::Detection | Self::Alignment)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PredSource {
    /// Pipeline outputs under the output root.
    #[default]
    Out,
    /// The gold files themselves (a sanity check that must score perfectly).
    Gold,
}

/// Gold annotation layouts understood by the importer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GoldFormat {
    /// The `gold/` documents described in the corpus layout.
    #[default]
    Native,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
}

impl From<(f64, f64)> for PrecisionRecall {
    fn from((precision, recall): (f64, f64)) -> Self {
        Self { precision, recall }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Modalities<T> {
    pub textual: T,
    pub visual: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub sequence_id: String,
    /// B³ precision and recall, as percentages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coref: Option<Modalities<PrecisionRecall>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<Modalities<PrecisionRecall>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<PrecisionRecall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fkgl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub characters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mentions: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// B³ pooled over all mentions of all stories, as percentages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coref: Option<Modalities<PrecisionRecall>>,
    /// Matched counts pooled over all stories.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<Modalities<PrecisionRecall>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<PrecisionRecall>,
    /// Mean over scorable stories.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fkgl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetition: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub characters_per_story: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mentions_per_story: Option<f64>,
    /// Filled only from an external score file.
    pub grooviist: Option<f64>,
    /// Filled only from an external score file.
    pub mauve: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub metrics: Vec<MetricName>,
    pub pred_source: PredSource,
    pub gold_format: GoldFormat,
    pub sequences: Vec<SequenceReport>,
    pub aggregate: Aggregate,
    pub warnings: Vec<String>,
}

impl Document for EvalReport {
    fn format_version(&self) -> u32 {
        self.format_version
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExternalScores {
    grooviist: Option<f64>,
    mauve: Option<f64>,
}

/// Everything the metrics read for one sequence.
struct Inputs {
    pred_story: AnnotatedStory,
    gold: Option<GoldSide>,
    pred_visual: Option<VisualSide>,
    pred_pairs: Option<Vec<FusedPair>>,
}

struct GoldSide {
    story: AnnotatedStory,
    visual: VisualSide,
    pairs: Option<Vec<(String, String)>>,
}

struct VisualSide {
    chains: Vec<VisualChain>,
    detections: Vec<Detection>,
}

struct FusedPair {
    textual_members: Vec<String>,
    visual_members: Vec<DetectionRef>,
    cluster: String,
    chain: String,
}

impl VisualSide {
    fn mentions(&self, what: &Path) -> Result<Vec<EvalMention>, CliError> {
        let by_ref: HashMap<DetectionRef, &Detection> = self.detections.iter().map(|d| (d.reference(), d)).collect();
        let mut out = Vec::new();
        for chain in &self.chains {
            for m in &chain.members {
                let d = by_ref.get(m).ok_or_else(|| {
                    CliError::Input(format!("{}: chain member {m} has no detection", what.display()))
                })?;
                out.push(EvalMention::visual(m.to_string(), m.image_index, d.bbox));
            }
        }
        Ok(out)
    }

    /// Gold detections outside every chain are one-member chains.
    fn all_mentions(&self) -> Vec<EvalMention> {
        self.detections
            .iter()
            .map(|d| EvalMention::visual(d.reference().to_string(), d.image_index, d.bbox))
            .collect()
    }

    fn chain_lists(&self) -> Vec<(String, Vec<String>)> {
        self.chains
            .iter()
            .map(|c| (c.chain_id.clone(), c.members.iter().map(ToString::to_string).collect()))
            .collect()
    }
}

fn cluster_lists(story: &AnnotatedStory) -> Vec<(String, Vec<String>)> {
    story
        .cluster_ids()
        .into_iter()
        .map(|c| (c.to_string(), story.chains[c].clone()))
        .collect()
}

fn require<T: Document>(path: &Path) -> Result<T, CliError> {
    if !path.is_file() {
        return Err(CliError::Input(format!("{}: missing", path.display())));
    }
    Ok(read_doc(path)?)
}

fn require_annotated(path: &Path, id: &str) -> Result<AnnotatedStory, CliError> {
    if !path.is_file() {
        return Err(CliError::Input(format!("{}: missing", path.display())));
    }
    Ok(read_annotated(path, id)?)
}

fn gold_dir(layout: &Layout, id: &str) -> PathBuf {
    layout.corpus.join(id).join(GOLD_DIR)
}

fn load_gold(layout: &Layout, id: &str, with_pairs: bool) -> Result<GoldSide, CliError> {
    let dir = gold_dir(layout, id);
    Ok(GoldSide {
        story: require_annotated(&dir.join(STORY_ANNOTATED), id)?,
        visual: VisualSide {
            chains: require::<VisualChainsDoc>(&dir.join(VCHAINS_DOC))?.chains,
            detections: require::<DetectionsDoc>(&dir.join(DETECTIONS_DOC))?.detections,
        },
        pairs: if with_pairs {
            Some(
                require::<AlignmentDoc>(&dir.join(ALIGNMENT_DOC))?
                    .pairs
                    .into_iter()
                    .map(|p| (p.cluster, p.chain))
                    .collect(),
            )
        } else {
            None
        },
    })
}

fn load(layout: &Layout, id: &str, metrics: &[MetricName], source: PredSource) -> Result<Inputs, CliError> {
    let needs_gold = metrics.iter().any(|m| m.needs_gold());
    let needs_pairs = metrics.contains(&MetricName::Alignment);
    let gold = if needs_gold || source == PredSource::Gold {
        Some(load_gold(layout, id, needs_pairs)?)
    } else {
        None
    };
    match source {
        PredSource::Gold => {
            let g = gold.expect("gold loaded for gold source");
            let pred_pairs = g.pairs.as_ref().map(|pairs| {
                pairs
                    .iter()
                    .map(|(cluster, chain)| FusedPair {
                        textual_members: g.story.chains.get(cluster).cloned().unwrap_or_default(),
                        visual_members: g
                            .visual
                            .chains
                            .iter()
                            .find(|c| &c.chain_id == chain)
                            .map(|c| c.members.clone())
                            .unwrap_or_default(),
                        cluster: cluster.clone(),
                        chain: chain.clone(),
                    })
                    .collect()
            });
            Ok(Inputs {
                pred_story: g.story.clone(),
                pred_visual: Some(VisualSide {
                    chains: g.visual.chains.clone(),
                    detections: g.visual.detections.clone(),
                }),
                pred_pairs,
                gold: needs_gold.then_some(g),
            })
        }
        PredSource::Out => {
            let pred_story = require::<StoryDoc>(&layout.output(id, STORY_DOC))?.story;
            let pred_visual = if needs_gold {
                Some(VisualSide {
                    chains: require::<VisualChainsDoc>(&layout.output(id, VCHAINS_DOC))?.chains,
                    detections: require::<DetectionsDoc>(&layout.input(id, DETECTIONS_DOC))?.detections,
                })
            } else {
                None
            };
            let pred_pairs = if needs_pairs {
                Some(
                    require::<MultimodalDoc>(&layout.output(id, MMCHAINS_DOC))?
                        .chains
                        .into_iter()
                        .filter_map(|c| {
                            Some(FusedPair {
                                cluster: c.textual?,
                                chain: c.visual?,
                                textual_members: c.textual_members,
                                visual_members: c.visual_members,
                            })
                        })
                        .collect(),
                )
            } else {
                None
            };
            Ok(Inputs {
                pred_story,
                gold,
                pred_visual,
                pred_pairs,
            })
        }
    }
}

/// Per-story scores plus the raw counts needed for pooling.
struct Scored {
    report: SequenceReport,
    text: String,
    coref: Option<(B3Sums, B3Sums)>,
    detection: Option<([usize; 3], [usize; 3])>,
    alignment: Option<(usize, usize, usize)>,
    warnings: Vec<String>,
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        1.0
    } else {
        n as f64 / d as f64
    }
}

fn pr_from_counts([matched, pred, gold]: [usize; 3]) -> PrecisionRecall {
    PrecisionRecall {
        precision: ratio(matched, pred),
        recall: ratio(matched, gold),
    }
}

fn percent(s: B3Sums) -> PrecisionRecall {
    let (p, r) = s.scores();
    PrecisionRecall {
        precision: p * 100.0,
        recall: r * 100.0,
    }
}

fn score_sequence(
    layout: &Layout,
    id: &str,
    metrics: &[MetricName],
    source: PredSource,
    config: &Config,
) -> Result<Scored, CliError> {
    let inputs = load(layout, id, metrics, source)?;
    let policy: &MentionMatchPolicy = &config.eval.matching;
    let story = &inputs.pred_story;
    let mut scored = Scored {
        report: SequenceReport {
            sequence_id: id.to_string(),
            coref: None,
            detection: None,
            alignment: None,
            fkgl: None,
            characters: None,
            mentions: None,
        },
        text: story.text.clone(),
        coref: None,
        detection: None,
        alignment: None,
        warnings: Vec::new(),
    };

    if let Some(gold) = &inputs.gold {
        let pred_vis = inputs.pred_visual.as_ref().expect("visual predictions loaded with gold");
        let pred_text_m = textual_eval_mentions(story);
        let gold_text_m = textual_eval_mentions(&gold.story);
        let pred_vis_m = pred_vis.mentions(&layout.output(id, VCHAINS_DOC))?;
        let gold_vis_m = gold.visual.all_mentions();
        let text_ren = mention_renaming(&pred_text_m, &gold_text_m, policy);
        let vis_ren = mention_renaming(&pred_vis_m, &gold_vis_m, policy);

        if metrics.contains(&MetricName::Coref) {
            let members = |lists: Vec<(String, Vec<String>)>| lists.into_iter().map(|(_, m)| m).collect::<Vec<_>>();
            let t = coref_sums(
                &members(cluster_lists(story)),
                &pred_text_m,
                &members(cluster_lists(&gold.story)),
                &gold_text_m,
                policy,
            );
            let v = coref_sums(
                &members(pred_vis.chain_lists()),
                &pred_vis_m,
                &members(gold.visual.chain_lists()),
                &gold_vis_m,
                policy,
            );
            scored.report.coref = Some(Modalities {
                textual: percent(t),
                visual: percent(v),
            });
            scored.coref = Some((t, v));
        }
        if metrics.contains(&MetricName::Detection) {
            let t = [
                match_mentions(&pred_text_m, &gold_text_m, policy).len(),
                pred_text_m.len(),
                gold_text_m.len(),
            ];
            let v = [
                match_mentions(&pred_vis_m, &gold_vis_m, policy).len(),
                pred_vis_m.len(),
                gold_vis_m.len(),
            ];
            scored.report.detection = Some(Modalities {
                textual: pr_from_counts(t),
                visual: pr_from_counts(v),
            });
            scored.detection = Some((t, v));
        }
        if metrics.contains(&MetricName::Alignment) {
            let gold_clusters = cluster_lists(&gold.story);
            let gold_chains = gold.visual.chain_lists();
            let pred_pairs = inputs.pred_pairs.as_deref().unwrap_or_default();
            let mapped: Vec<(Option<&str>, Option<&str>)> = pred_pairs
                .iter()
                .map(|p| {
                    let vm: Vec<String> = p.visual_members.iter().map(ToString::to_string).collect();
                    (
                        best_gold_chain(&p.textual_members, &text_ren, &gold_clusters),
                        best_gold_chain(&vm, &vis_ren, &gold_chains),
                    )
                })
                .collect();
            for p in pred_pairs.iter().filter(|p| p.textual_members.is_empty()) {
                scored.warnings.push(format!("{id}: fused pair {}~{} has no textual members", p.cluster, p.chain));
            }
            let counts = alignment_counts(&mapped, gold.pairs.as_deref().unwrap_or_default());
            let (c, p, g) = counts;
            scored.report.alignment = Some(PrecisionRecall {
                precision: ratio(c, p),
                recall: ratio(c, g),
            });
            scored.alignment = Some(counts);
        }
    }

    if metrics.contains(&MetricName::Fkgl) {
        match fkgl(&story.text, config.eval.fkgl, config.eval.fkgl_clamp) {
            Ok(v) => scored.report.fkgl = Some(v),
            Err(e) => scored.warnings.push(format!("{id}: fkgl {e}")),
        }
    }
    if metrics.contains(&MetricName::Richness) {
        let (c, m) = character_richness(std::slice::from_ref(story));
        scored.report.characters = Some(c as usize);
        scored.report.mentions = Some(m as usize);
    }
    Ok(scored)
}

fn requested(args: &EvalArgs) -> Vec<MetricName> {
    let mut m = if args.metrics.is_empty() {
        MetricName::ALL.to_vec()
    } else {
        args.metrics.clone()
    };
    m.sort();
    m.dedup();
    m
}

/// Scores every sequence and assembles the report.
pub fn evaluate(
    layout: &Layout,
    ids: &[String],
    config: &Config,
    args: &EvalArgs,
    workers: &rayon::ThreadPool,
) -> Result<EvalReport, CliError> {
    let metrics = requested(args);
    let scored = par_map(workers, ids, |id| score_sequence(layout, id, &metrics, args.pred_source, config))?;

    let mut agg = Aggregate::default();
    let mut warnings: Vec<String> = scored.iter().flat_map(|s| s.warnings.iter().cloned()).collect();
    if metrics.contains(&MetricName::Coref) {
        let (mut t, mut v) = (B3Sums::default(), B3Sums::default());
        for s in &scored {
            let (a, b) = s.coref.expect("coref scored");
            t.add(a);
            v.add(b);
        }
        agg.coref = Some(Modalities {
            textual: percent(t),
            visual: percent(v),
        });
    }
    if metrics.contains(&MetricName::Detection) {
        let (mut t, mut v) = ([0usize; 3], [0usize; 3]);
        for s in &scored {
            let (a, b) = s.detection.expect("detection scored");
            for i in 0..3 {
                t[i] += a[i];
                v[i] += b[i];
            }
        }
        agg.detection = Some(Modalities {
            textual: pr_from_counts(t),
            visual: pr_from_counts(v),
        });
    }
    if metrics.contains(&MetricName::Alignment) {
        let mut tot = [0usize; 3];
        for s in &scored {
            let (c, p, g) = s.alignment.expect("alignment scored");
            tot[0] += c;
            tot[1] += p;
            tot[2] += g;
        }
        agg.alignment = Some(pr_from_counts(tot));
    }
    if metrics.contains(&MetricName::Fkgl) {
        let vals: Vec<f64> = scored.iter().filter_map(|s| s.report.fkgl).collect();
        if !vals.is_empty() {
            agg.fkgl = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    if metrics.contains(&MetricName::Repetition) {
        let texts: Vec<&str> = scored.iter().map(|s| s.text.as_str()).collect();
        match inter_story_repetition(&texts) {
            Ok(r) => {
                agg.repetition = Some(r.score);
                for i in r.excluded {
                    warnings.push(format!("{}: fewer than three tokens, left out of repetition", ids[i]));
                }
            }
            Err(e) => warnings.push(format!("repetition {e}")),
        }
    }
    if metrics.contains(&MetricName::Richness) {
        let n = scored.len() as f64;
        agg.characters_per_story = Some(scored.iter().filter_map(|s| s.report.characters).sum::<usize>() as f64 / n);
        agg.mentions_per_story = Some(scored.iter().filter_map(|s| s.report.mentions).sum::<usize>() as f64 / n);
    }
    if let Some(path) = &args.external {
        let text = read_text(path)?;
        let ext: ExternalScores =
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        agg.grooviist = ext.grooviist;
        agg.mauve = ext.mauve;
    }

    Ok(EvalReport {
        format_version: FORMAT_VERSION,
        config: config.to_json(),
        metrics,
        pred_source: args.pred_source,
        gold_format: args.gold_format,
        sequences: scored.into_iter().map(|s| s.report).collect(),
        aggregate: agg,
        warnings,
    })
}

fn report_path(layout: &Layout, args: &EvalArgs) -> PathBuf {
    args.report.clone().unwrap_or_else(|| layout.out.join("report.doc"))
}

fn print_summary(report: &EvalReport) {
    let a = &report.aggregate;
    println!("{} sequences scored", report.sequences.len());
    if let Some(c) = &a.coref {
        println!(
            "coref       textual P {:.2} R {:.2} | visual P {:.2} R {:.2}",
            c.textual.precision, c.textual.recall, c.visual.precision, c.visual.recall
        );
    }
    if let Some(d) = &a.detection {
        println!(
            "detection   textual P {:.3} R {:.3} | visual P {:.3} R {:.3}",
            d.textual.precision, d.textual.recall, d.visual.precision, d.visual.recall
        );
    }
    if let Some(al) = &a.alignment {
        println!("alignment   P {:.3} R {:.3}", al.precision, al.recall);
    }
    if let Some(f) = a.fkgl {
        println!("fkgl        {f:.2}");
    }
    if let Some(r) = a.repetition {
        println!("repetition  {r:.2}");
    }
    if let (Some(c), Some(m)) = (a.characters_per_story, a.mentions_per_story) {
        println!("richness    {c:.2} characters, {m:.2} mentions per story");
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

pub fn cmd_eval(corpus: &Path, out: &Path, config: &Config, args: &EvalArgs) -> Result<(), CliError> {
    let ids = require_valid(corpus)?;
    let layout = Layout::new(corpus, out);
    let report = evaluate(&layout, &ids, config, args, &pool(config.workers)?)?;
    write_doc(&report_path(&layout, args), &report)?;
    print_summary(&report);
    Ok(())
}

fn eval_inputs(layout: &Layout, ids: &[String], args: &EvalArgs) -> FileSet {
    let mut files = FileSet::new();
    for id in ids {
        for name in [STORY_DOC, VCHAINS_DOC, MMCHAINS_DOC] {
            files.push((format!("out/{id}/{name}"), layout.output(id, name)));
        }
        files.push((format!("corpus/{id}/{DETECTIONS_DOC}"), layout.input(id, DETECTIONS_DOC)));
        for name in [STORY_ANNOTATED, VCHAINS_DOC, DETECTIONS_DOC, ALIGNMENT_DOC] {
            files.push((format!("corpus/{id}/{GOLD_DIR}/{name}"), gold_dir(layout, id).join(name)));
        }
    }
    if let Some(p) = &args.external {
        files.push(("external".to_string(), p.clone()));
    }
    files
}

/// The pipeline's eval stage; returns false when the report is up to date.
pub fn run_eval_stage(
    layout: &Layout,
    ids: &[String],
    config: &Config,
    args: &EvalArgs,
    workers: &rayon::ThreadPool,
) -> Result<bool, CliError> {
    let cfg = manifest::hash_json(&serde_json::json!({
        "config": config.to_json(),
        "metrics": requested(args),
        "pred_source": args.pred_source,
        "gold_format": args.gold_format,
    }));
    let inputs = eval_inputs(layout, ids, args);
    let path = report_path(layout, args);
    let outputs: FileSet = vec![("report".to_string(), path.clone())];
    let manifest_path = layout.out.join("eval.manifest");
    if manifest::is_current(&manifest_path, "eval", &cfg, &inputs, &outputs)? {
        return Ok(false);
    }
    let report = evaluate(layout, ids, config, args, workers)?;
    write_doc(&path, &report)?;
    manifest::record(&manifest_path, "eval", &cfg, &inputs, &outputs)?;
    print_summary(&report);
    Ok(true)
}
