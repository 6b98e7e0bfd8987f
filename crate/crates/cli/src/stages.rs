//! Per-sequence stages (visual chains, textual chains, alignment) and the
//! resumable pipeline that chains them with evaluation.

use std::path::{Path, PathBuf};

use charcoref::align::align;
use charcoref::corpus::{
    read_annotated, read_doc, read_text, validate_corpus, write_doc, DetectionsDoc, ImagesDoc, MultimodalDoc,
    PairwiseDoc, StoryDoc, VisualChainsDoc, DETECTIONS_DOC, IMAGES_META, MMCHAINS_DOC, PAIRWISE_DOC, STORY_ANNOTATED,
    STORY_DOC, STORY_TXT, VCHAINS_DOC,
};
use charcoref::model::validate_multimodal;
use charcoref::text::first_divergence;
use charcoref::visual::{build_chains, ChainParams, SimilaritySource};
use serde_json::json;

use crate::config::{Config, SimilarityKind};
use crate::manifest::{self, FileSet};
use crate::{eval, par_map, pool, CliError, EvalArgs};

/// Where a sequence's inputs and outputs live.
#[derive(Clone, Debug)]
pub struct Layout {
    pub corpus: PathBuf,
    pub out: PathBuf,
}

impl Layout {
    pub fn new(corpus: &Path, out: &Path) -> Self {
        Self {
            corpus: corpus.to_path_buf(),
            out: out.to_path_buf(),
        }
    }

    pub fn input(&self, id: &str, name: &str) -> PathBuf {
        self.corpus.join(id).join(name)
    }

    pub fn output(&self, id: &str, name: &str) -> PathBuf {
        self.out.join(id).join(name)
    }

    fn labelled_input(&self, id: &str, name: &str) -> (String, PathBuf) {
        (format!("corpus/{id}/{name}"), self.input(id, name))
    }

    fn labelled_output(&self, id: &str, name: &str) -> (String, PathBuf) {
        (format!("out/{id}/{name}"), self.output(id, name))
    }
}

pub fn cmd_validate(corpus: &Path) -> Result<(), CliError> {
    let report = validate_corpus(corpus)?;
    if !report.ok {
        return Err(CliError::Validation(report.findings));
    }
    println!("{} sequences, 0 findings", report.sequences);
    Ok(())
}

/// Validates the corpus and returns its sequence ids.
pub fn require_valid(corpus: &Path) -> Result<Vec<String>, CliError> {
    let report = validate_corpus(corpus)?;
    if !report.ok {
        return Err(CliError::Validation(report.findings));
    }
    let ids = charcoref::corpus::sequence_ids(corpus)?;
    if ids.is_empty() {
        return Err(CliError::Input(format!("{}: no sequences found", corpus.display())));
    }
    Ok(ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Vchains,
    Tchains,
    Align,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Vchains => "vchains",
            Self::Tchains => "tchains",
            Self::Align => "align",
        }
    }

    fn config_hash(self, config: &Config, verify: bool) -> String {
        match self {
            Self::Vchains => manifest::hash_json(&config.visual),
            Self::Tchains => manifest::hash_json(&json!({ "verify": verify })),
            Self::Align => manifest::hash_json(&config.align),
        }
    }

    fn inputs(self, layout: &Layout, id: &str, config: &Config, verify: bool) -> FileSet {
        match self {
            Self::Vchains => {
                let mut v = vec![
                    layout.labelled_input(id, IMAGES_META),
                    layout.labelled_input(id, DETECTIONS_DOC),
                ];
                if config.visual.similarity == SimilarityKind::Table {
                    v.push(layout.labelled_input(id, PAIRWISE_DOC));
                }
                v
            }
            Self::Tchains => {
                let mut v = vec![layout.labelled_input(id, STORY_ANNOTATED)];
                if verify {
                    v.push(layout.labelled_input(id, STORY_TXT));
                }
                v
            }
            Self::Align => vec![
                layout.labelled_input(id, IMAGES_META),
                layout.labelled_output(id, VCHAINS_DOC),
                layout.labelled_output(id, STORY_DOC),
            ],
        }
    }

    fn outputs(self, layout: &Layout, id: &str) -> FileSet {
        let name = match self {
            Self::Vchains => VCHAINS_DOC,
            Self::Tchains => STORY_DOC,
            Self::Align => MMCHAINS_DOC,
        };
        vec![layout.labelled_output(id, name)]
    }

    /// Runs the stage for one sequence and returns the number of chains
    /// (or clusters) written.
    fn run(self, layout: &Layout, id: &str, config: &Config, verify: bool) -> Result<usize, CliError> {
        match self {
            Self::Vchains => vchains_one(layout, id, config),
            Self::Tchains => tchains_one(layout, id, verify),
            Self::Align => align_one(layout, id, config),
        }
    }
}

fn vchains_one(layout: &Layout, id: &str, config: &Config) -> Result<usize, CliError> {
    let seq = read_doc::<ImagesDoc>(&layout.input(id, IMAGES_META))?.sequence;
    let detections = read_doc::<DetectionsDoc>(&layout.input(id, DETECTIONS_DOC))?.detections;
    let source = match config.visual.similarity {
        SimilarityKind::Embedding => SimilaritySource::EmbeddingCosine,
        SimilarityKind::Table => {
            let path = layout.input(id, PAIRWISE_DOC);
            if !path.is_file() {
                return Err(CliError::Input(format!(
                    "{}: required for table similarity",
                    path.display()
                )));
            }
            SimilaritySource::PairwiseTable(read_doc::<PairwiseDoc>(&path)?.table())
        }
    };
    let params = ChainParams {
        policy: config.visual.policy.clone(),
        tau: config.visual.tau,
        aggregation: config.visual.aggregation,
    };
    let chains = build_chains(&seq, &detections, &source, &params)
        .map_err(|e| CliError::Input(format!("sequence {id}: {e}")))?;
    let n = chains.len();
    write_doc(&layout.output(id, VCHAINS_DOC), &VisualChainsDoc::new(id, chains))?;
    Ok(n)
}

fn tchains_one(layout: &Layout, id: &str, verify: bool) -> Result<usize, CliError> {
    let story = read_annotated(&layout.input(id, STORY_ANNOTATED), id)?;
    if verify {
        let original = read_text(&layout.input(id, STORY_TXT))?;
        if let Some(offset) = first_divergence(&story.text, &original) {
            return Err(CliError::Input(format!(
                "{}: annotation drifts from {STORY_TXT} at byte {offset}",
                layout.input(id, STORY_ANNOTATED).display()
            )));
        }
    }
    let n = story.chains.len();
    write_doc(&layout.output(id, STORY_DOC), &StoryDoc::new(story))?;
    Ok(n)
}

fn require_output<T: charcoref::corpus::Document>(layout: &Layout, id: &str, name: &str, stage: &str) -> Result<T, CliError> {
    let path = layout.output(id, name);
    if !path.is_file() {
        return Err(CliError::Input(format!("{}: missing; run {stage} first", path.display())));
    }
    Ok(read_doc(&path)?)
}

fn align_one(layout: &Layout, id: &str, config: &Config) -> Result<usize, CliError> {
    let seq = read_doc::<ImagesDoc>(&layout.input(id, IMAGES_META))?.sequence;
    let vchains: VisualChainsDoc = require_output(layout, id, VCHAINS_DOC, "vchains")?;
    let story: StoryDoc = require_output(layout, id, STORY_DOC, "tchains")?;
    let chains = align(&story.story, &vchains.chains, seq.image_count, config.align.min_overlap)
        .map_err(|e| CliError::Input(format!("sequence {id}: {e}")))?;
    let problems = validate_multimodal(&chains);
    if let Some(v) = problems.first() {
        return Err(CliError::Input(format!("sequence {id}: {}: {}", v.entity, v.rule)));
    }
    let n = chains.len();
    write_doc(&layout.output(id, MMCHAINS_DOC), &MultimodalDoc::new(id, chains))?;
    Ok(n)
}

fn run_stage(stage: Stage, corpus: &Path, out: &Path, config: &Config, verify: bool) -> Result<(usize, usize), CliError> {
    let ids = if stage == Stage::Vchains {
        require_valid(corpus)?
    } else {
        charcoref::corpus::sequence_ids(corpus)?
    };
    let layout = Layout::new(corpus, out);
    let counts = par_map(&pool(config.workers)?, &ids, |id| stage.run(&layout, id, config, verify))?;
    Ok((ids.len(), counts.iter().sum()))
}

pub fn cmd_vchains(corpus: &Path, out: &Path, config: &Config) -> Result<(), CliError> {
    let (n, chains) = run_stage(Stage::Vchains, corpus, out, config, false)?;
    println!("{n} sequences, {chains} chains");
    Ok(())
}

pub fn cmd_tchains(corpus: &Path, out: &Path, config: &Config, verify: bool) -> Result<(), CliError> {
    let (n, clusters) = run_stage(Stage::Tchains, corpus, out, config, verify)?;
    println!("{n} stories, {clusters} clusters");
    Ok(())
}

pub fn cmd_align(corpus: &Path, out: &Path, config: &Config) -> Result<(), CliError> {
    let (n, chains) = run_stage(Stage::Align, corpus, out, config, false)?;
    println!("{n} sequences, {chains} multimodal chains");
    Ok(())
}

/// Runs every stage in order. A sequence's stage is skipped when its
/// manifest shows the same inputs, config and outputs as last time.
pub fn cmd_pipeline(corpus: &Path, out: &Path, config: &Config, eval_args: &EvalArgs) -> Result<(), CliError> {
    let ids = require_valid(corpus)?;
    let layout = Layout::new(corpus, out);
    let workers = pool(config.workers)?;
    for stage in [Stage::Vchains, Stage::Tchains, Stage::Align] {
        let ran = par_map(&workers, &ids, |id| {
            let verify = stage == Stage::Tchains && layout.input(id, STORY_TXT).is_file();
            let cfg = stage.config_hash(config, verify);
            let inputs = stage.inputs(&layout, id, config, verify);
            let outputs = stage.outputs(&layout, id);
            let path = layout.output(id, &format!("{}.manifest", stage.name()));
            if manifest::is_current(&path, stage.name(), &cfg, &inputs, &outputs)? {
                return Ok(false);
            }
            stage.run(&layout, id, config, verify)?;
            manifest::record(&path, stage.name(), &cfg, &inputs, &outputs)?;
            Ok(true)
        })?;
        let n_run = ran.iter().filter(|r| **r).count();
        println!("{}: {} run, {} up to date", stage.name(), n_run, ids.len() - n_run);
    }
    let ran = eval::run_eval_stage(&layout, &ids, config, eval_args, &workers)?;
    println!("eval: {}", if ran { "run" } else { "up to date" });
    Ok(())
}
