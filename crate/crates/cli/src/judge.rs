//! The `judge` command: pairwise story comparison by a language model and
//! agreement with human verdicts.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use charcoref::corpus::{read_doc, write_doc, Document, FORMAT_VERSION};
use charcoref::llm::{JudgeVerdict, LlmClient, MockTransport, ReplayTransport, Transport};
use charcoref::metrics::judge_accuracy;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::{par_map, pool, CliError};

#[derive(Args, Debug)]
pub struct JudgeArgs {
    /// Pairs document listing the stories to compare.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Where to write the verdicts document.
    #[arg(long)]
    pub output: PathBuf,
    /// Human verdicts document; enables the accuracy table.
    #[arg(long)]
    pub human: Option<PathBuf>,
    /// Answer from scripted rules (JSON lines of `{"match", "response"}`) instead of the endpoint.
    #[arg(long, conflicts_with = "replay")]
    pub mock: Option<PathBuf>,
    /// Answer from a transcript recorded with `--transcript`.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Append every exchange to this JSON-lines file.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
}

impl JudgeArgs {
    pub fn apply(&self, c: &mut Config) {
        if let Some(u) = &self.base_url {
            c.llm.base_url = u.clone();
        }
        if let Some(m) = &self.model {
            c.llm.model = m.clone();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryPair {
    pub pair_id: String,
    pub story_a: String,
    pub story_b: String,
    /// Image references shown to the judge; empty for text-only judging.
    #[serde(default)]
    pub images: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsDoc {
    pub format_version: u32,
    pub pairs: Vec<StoryPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairVerdict {
    pub pair_id: String,
    pub verdict: JudgeVerdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictsDoc {
    pub format_version: u32,
    pub verdicts: Vec<PairVerdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub dimension: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub format_version: u32,
    pub endpoint: serde_json::Value,
    pub verdicts: Vec<PairVerdict>,
    /// Agreement with human verdicts, in SPE, COH, ENG, GRD, CHA, OVR order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<Vec<AccuracyRow>>,
}

impl Document for PairsDoc {
    fn format_version(&self) -> u32 {
        self.format_version
    }
}

impl Document for VerdictsDoc {
    fn format_version(&self) -> u32 {
        self.format_version
    }
}

impl Document for JudgeReport {
    fn format_version(&self) -> u32 {
        self.format_version
    }
}

fn open(path: &Path) -> Result<BufReader<std::fs::File>, CliError> {
    std::fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn client(args: &JudgeArgs, config: &Config) -> Result<LlmClient, CliError> {
    let transport: Option<Box<dyn Transport>> = if let Some(p) = &args.mock {
        Some(Box::new(
            MockTransport::from_rules_jsonl(open(p)?).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
        ))
    } else if let Some(p) = &args.replay {
        Some(Box::new(
            ReplayTransport::from_jsonl(open(p)?).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
        ))
    } else {
        None
    };
    let mut client = match transport {
        Some(t) => LlmClient::new(config.llm.clone(), t)?,
        None => LlmClient::http(config.llm.clone())?,
    };
    if let Some(p) = &args.transcript {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
        client = client.with_transcript(Box::new(f));
    }
    Ok(client)
}

/// Human verdicts reordered to match `pairs`; every pair must be covered.
fn align_human(pairs: &[StoryPair], human: &VerdictsDoc) -> Result<Vec<JudgeVerdict>, CliError> {
    let by_id: BTreeMap<&str, JudgeVerdict> =
        human.verdicts.iter().map(|v| (v.pair_id.as_str(), v.verdict)).collect();
    if by_id.len() != pairs.len() {
        return Err(CliError::Input(format!(
            "{} human verdicts for {} pairs",
            by_id.len(),
            pairs.len()
        )));
    }
    pairs
        .iter()
        .map(|p| {
            by_id
                .get(p.pair_id.as_str())
                .copied()
                .ok_or_else(|| CliError::Input(format!("no human verdict for pair {}", p.pair_id)))
        })
        .collect()
}

pub fn cmd_judge(args: &JudgeArgs, config: &Config) -> Result<(), CliError> {
    let pairs = read_doc::<PairsDoc>(&args.pairs)?.pairs;
    let human = match &args.human {
        Some(p) if p.is_file() => Some(read_doc::<VerdictsDoc>(p)?),
        Some(p) => {
            eprintln!("warning: {}: not found; accuracy table omitted", p.display());
            None
        }
        None => None,
    };
    let human = human.map(|h| align_human(&pairs, &h)).transpose()?;
    let client = client(args, config)?;
    let verdicts = par_map(&pool(config.workers)?, &pairs, |p| {
        client
            .judge(&p.story_a, &p.story_b, &p.images)
            .map_err(|e| match CliError::from(e) {
                CliError::Service(m) => CliError::Service(format!("pair {}: {m}", p.pair_id)),
                other => other,
            })
    })?;
    let accuracy = match &human {
        Some(h) => {
            let acc = judge_accuracy(&verdicts, h).map_err(|e| CliError::Input(e.to_string()))?;
            print!("{}", acc.table());
            Some(
                acc.rows()
                    .map(|(d, a)| AccuracyRow {
                        dimension: d.abbrev().to_string(),
                        accuracy: a,
                    })
                    .collect(),
            )
        }
        None => None,
    };
    let report = JudgeReport {
        format_version: FORMAT_VERSION,
        endpoint: serde_json::to_value(&config.llm).expect("endpoint config serializes"),
        verdicts: pairs
            .iter()
            .zip(verdicts)
            .map(|(p, verdict)| PairVerdict {
                pair_id: p.pair_id.clone(),
                verdict,
            })
            .collect(),
        accuracy,
    };
    write_doc(&args.output, &report)?;
    println!("{} pairs judged", report.verdicts.len());
    Ok(())
}
