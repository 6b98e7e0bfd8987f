//! Character-centric story metrics: B³ coreference scoring, mention
//! detection precision/recall, FKGL readability, inter-story trigram
//! repetition, character richness and judge agreement.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{JudgeDimension, JudgeVerdict};
use crate::model::{AnnotatedStory, BBox};
use crate::text::{normalized_tokens, sentences, syllables, words};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("unscorable: {0}")]
    Unscorable(String),
    #[error("length mismatch: {left} verdicts vs {right} human judgements")]
    LengthMismatch { left: usize, right: usize },
    #[error("iou_threshold must be in (0, 1], got {0}")]
    InvalidThreshold(f64),
}

// ---------------------------------------------------------------------------
// Readability

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FkglCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for FkglCoefficients {
    fn default() -> Self {
        Self {
            a: 0.39,
            b: 11.8,
            c: -15.59,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextStats {
    pub n_word: usize,
    pub n_sentence: usize,
    pub n_syllable: usize,
}

impl TextStats {
    pub fn of(text: &str) -> Self {
        let w = words(text);
        Self {
            n_word: w.len(),
            n_sentence: sentences(text).len(),
            n_syllable: w.iter().map(|x| syllables(x)).sum(),
        }
    }
}

pub fn fkgl_from_stats(stats: TextStats, coeffs: FkglCoefficients) -> Result<f64, MetricsError> {
    if stats.n_word == 0 || stats.n_sentence == 0 {
        return Err(MetricsError::Unscorable("no words or sentences".into()));
    }
    let words_per_sentence = stats.n_word as f64 / stats.n_sentence as f64;
    let syllables_per_word = stats.n_syllable as f64 / stats.n_word as f64;
    Ok(coeffs.a * words_per_sentence + coeffs.b * syllables_per_word + coeffs.c)
}

/// Flesch-Kincaid grade level. The raw value is returned unless `clamp`
/// is set, in which case it is limited to `[0, 18]`.
pub fn fkgl(text: &str, coeffs: FkglCoefficients, clamp: bool) -> Result<f64, MetricsError> {
    let raw = fkgl_from_stats(TextStats::of(text), coeffs)?;
    Ok(if clamp { raw.clamp(0.0, 18.0) } else { raw })
}

// ---------------------------------------------------------------------------
// B³

/// Running B³ sums, so scores can be pooled over many stories by mention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct B3Sums {
    pub precision_sum: f64,
    pub precision_count: usize,
    pub recall_sum: f64,
    pub recall_count: usize,
}

impl B3Sums {
    pub fn add(&mut self, other: B3Sums) {
        self.precision_sum += other.precision_sum;
        self.precision_count += other.precision_count;
        self.recall_sum += other.recall_sum;
        self.recall_count += other.recall_count;
    }

    /// Averages; an empty side scores 1.0.
    pub fn scores(&self) -> (f64, f64) {
        let avg = |s: f64, n: usize| if n == 0 { 1.0 } else { s / n as f64 };
        (
            avg(self.precision_sum, self.precision_count),
            avg(self.recall_sum, self.recall_count),
        )
    }
}

/// Chain memberships of every item, as chain indices. Items listed twice
/// in one chain count once.
fn memberships<M: Hash + Eq + Clone>(chains: &[Vec<M>]) -> HashMap<M, Vec<usize>> {
    let mut out: HashMap<M, Vec<usize>> = HashMap::new();
    for (i, chain) in chains.iter().enumerate() {
        for m in chain {
            let v = out.entry(m.clone()).or_default();
            if v.last() != Some(&i) {
                v.push(i);
            }
        }
    }
    out
}

fn shared(a: &[usize], b: &[usize]) -> usize {
    a.iter().filter(|x| b.contains(x)).count()
}

/// Sum over items of `response` of their per-item B³ precision against `key`.
///
/// Items may sit in several chains (plural mentions). Each item's score
/// averages, over every item it shares a response chain with, the ratio
/// `min(shared response chains, shared key chains) / shared response chains`.
/// When every item is in exactly one chain this is `|R ∩ G| / |R|`.
/// Items missing from `key` are singletons there.
fn item_precision<M: Hash + Eq + Clone>(response: &[Vec<M>], key: &[Vec<M>]) -> (f64, usize) {
    let resp = memberships(response);
    let gold = memberships(key);
    let none: Vec<usize> = Vec::new();
    // Items and their neighbours in first-seen order, so float sums do
    // not depend on hash order.
    let mut order: Vec<&M> = Vec::new();
    let mut neighbours: HashMap<&M, (Vec<&M>, HashSet<&M>)> = HashMap::new();
    for chain in response {
        for a in chain {
            let (near, seen) = neighbours.entry(a).or_insert_with(|| {
                order.push(a);
                Default::default()
            });
            for b in chain {
                if seen.insert(b) {
                    near.push(b);
                }
            }
        }
    }
    let mut total = 0.0;
    for item in &order {
        let near = &neighbours[item].0;
        let ci = &resp[*item];
        let gi = gold.get(*item).unwrap_or(&none);
        let mut sum = 0.0;
        for other in near {
            let c = shared(ci, &resp[*other]);
            let g = if item == other {
                c
            } else {
                shared(gi, gold.get(*other).unwrap_or(&none))
            };
            sum += c.min(g) as f64 / c as f64;
        }
        total += sum / near.len() as f64;
    }
    (total, order.len())
}

pub fn b3_sums<M: Hash + Eq + Clone>(predicted: &[Vec<M>], gold: &[Vec<M>]) -> B3Sums {
    let (precision_sum, precision_count) = item_precision(predicted, gold);
    let (recall_sum, recall_count) = item_precision(gold, predicted);
    B3Sums {
        precision_sum,
        precision_count,
        recall_sum,
        recall_count,
    }
}

/// B³ precision (averaged over predicted mentions) and recall (averaged
/// over gold mentions).
pub fn b3<M: Hash + Eq + Clone>(predicted: &[Vec<M>], gold: &[Vec<M>]) -> (f64, f64) {
    b3_sums(predicted, gold).scores()
}

// ---------------------------------------------------------------------------
// Mention matching

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MentionMatchPolicy {
    pub iou_threshold: f64,
}

impl Default for MentionMatchPolicy {
    fn default() -> Self {
        Self { iou_threshold: 0.5 }
    }
}

impl MentionMatchPolicy {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.iou_threshold > 0.0 && self.iou_threshold <= 1.0 {
            Ok(())
        } else {
            Err(MetricsError::InvalidThreshold(self.iou_threshold))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Textual,
    Visual,
}

/// What a mention is matched on.
#[derive(Clone, Debug, PartialEq)]
pub enum MentionKey {
    Textual { sentence_index: usize, head: String },
    Visual { image_index: usize, bbox: BBox },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMention {
    pub id: String,
    pub key: MentionKey,
}

impl EvalMention {
    pub fn textual(id: impl Into<String>, sentence_index: usize, surface: &str) -> Self {
        Self {
            id: id.into(),
            key: MentionKey::Textual {
                sentence_index,
                head: head_word(surface),
            },
        }
    }

    pub fn visual(id: impl Into<String>, image_index: usize, bbox: BBox) -> Self {
        Self {
            id: id.into(),
            key: MentionKey::Visual { image_index, bbox },
        }
    }
}

/// Head word of a noun phrase: the word before the first "of" if there is
/// one, else the last word. Lowercased, possessive stripped.
pub fn head_word(phrase: &str) -> String {
    let tokens: Vec<String> = words(phrase).iter().map(|w| w.to_lowercase()).collect();
    let idx = match tokens.iter().position(|t| t == "of") {
        Some(p) if p > 0 => p - 1,
        _ => tokens.len().saturating_sub(1),
    };
    let Some(head) = tokens.get(idx) else {
        return String::new();
    };
    head.strip_suffix("'s")
        .or_else(|| head.strip_suffix("\u{2019}s"))
        .unwrap_or(head)
        .to_string()
}

/// Textual mentions of an annotated story, keyed by sentence and head word.
pub fn textual_eval_mentions(story: &AnnotatedStory) -> Vec<EvalMention> {
    story
        .mentions
        .iter()
        .map(|m| EvalMention::textual(m.mention_id.clone(), m.sentence_index, &m.surface))
        .collect()
}

/// One-to-one matching of predicted to gold mentions, as index pairs.
///
/// Textual mentions match on equal head words within the same sentence,
/// taking candidates in input order. Visual mentions match per image when
/// IoU reaches the threshold, greedily from the highest IoU down.
pub fn match_mentions(
    predicted: &[EvalMention],
    gold: &[EvalMention],
    policy: &MentionMatchPolicy,
) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in predicted.iter().enumerate() {
        for (j, g) in gold.iter().enumerate() {
            match (&p.key, &g.key) {
                (
                    MentionKey::Textual { sentence_index: s1, head: h1 },
                    MentionKey::Textual { sentence_index: s2, head: h2 },
                ) if s1 == s2 && h1 == h2 && !h1.is_empty() => candidates.push((1.0, i, j)),
                (
                    MentionKey::Visual { image_index: i1, bbox: b1 },
                    MentionKey::Visual { image_index: i2, bbox: b2 },
                ) if i1 == i2 => {
                    let iou = b1.iou(b2);
                    if iou >= policy.iou_threshold {
                        candidates.push((iou, i, j));
                    }
                }
                _ => {}
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; predicted.len()];
    let mut used_g = vec![false; gold.len()];
    let mut out = Vec::new();
    for (_, i, j) in candidates {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

/// Matched-count precision and recall. An empty side scores 1.0.
pub fn detection_pr(predicted: &[EvalMention], gold: &[EvalMention], policy: &MentionMatchPolicy) -> (f64, f64) {
    let matched = match_mentions(predicted, gold, policy).len();
    let ratio = |n: usize| if n == 0 { 1.0 } else { matched as f64 / n as f64 };
    (ratio(predicted.len()), ratio(gold.len()))
}

/// B³ sums after renaming predicted mentions to the gold mentions they
/// match. Unmatched predicted mentions get fresh ids, which lowers precision.
pub fn coref_sums(
    pred_chains: &[Vec<String>],
    pred_mentions: &[EvalMention],
    gold_chains: &[Vec<String>],
    gold_mentions: &[EvalMention],
    policy: &MentionMatchPolicy,
) -> B3Sums {
    let rename: HashMap<&str, &str> = match_mentions(pred_mentions, gold_mentions, policy)
        .into_iter()
        .map(|(i, j)| (pred_mentions[i].id.as_str(), gold_mentions[j].id.as_str()))
        .collect();
    let mapped: Vec<Vec<(bool, String)>> = pred_chains
        .iter()
        .map(|chain| {
            chain
                .iter()
                .map(|m| match rename.get(m.as_str()) {
                    Some(g) => (true, g.to_string()),
                    None => (false, m.clone()),
                })
                .collect()
        })
        .collect();
    let gold: Vec<Vec<(bool, String)>> = gold_chains
        .iter()
        .map(|c| c.iter().map(|m| (true, m.clone())).collect())
        .collect();
    b3_sums(&mapped, &gold)
}

/// B³ precision × 100 of predicted chains against gold chains.
pub fn coref_score(
    pred_chains: &[Vec<String>],
    pred_mentions: &[EvalMention],
    gold_chains: &[Vec<String>],
    gold_mentions: &[EvalMention],
    policy: &MentionMatchPolicy,
) -> f64 {
    coref_sums(pred_chains, pred_mentions, gold_chains, gold_mentions, policy)
        .scores()
        .0
        * 100.0
}

/// Renaming of predicted mention ids to the gold ids they match.
pub fn mention_renaming(
    predicted: &[EvalMention],
    gold: &[EvalMention],
    policy: &MentionMatchPolicy,
) -> HashMap<String, String> {
    match_mentions(predicted, gold, policy)
        .into_iter()
        .map(|(i, j)| (predicted[i].id.clone(), gold[j].id.clone()))
        .collect()
}

/// The gold chain sharing the most members with `members` after renaming.
/// Ties go to the earlier gold chain; no shared member gives `None`.
pub fn best_gold_chain<'a>(
    members: &[String],
    renaming: &HashMap<String, String>,
    gold: &'a [(String, Vec<String>)],
) -> Option<&'a str> {
    let renamed: HashSet<&str> = members
        .iter()
        .filter_map(|m| renaming.get(m).map(String::as_str))
        .collect();
    let mut best: Option<(&str, usize)> = None;
    for (id, gm) in gold {
        let n = gm.iter().filter(|m| renamed.contains(m.as_str())).count();
        if n > 0 && best.is_none_or(|(_, b)| n > b) {
            best = Some((id, n));
        }
    }
    best.map(|(id, _)| id)
}

/// Precision and recall of predicted (cluster, chain) pairs once mapped to
/// gold ids. Unmappable predicted pairs count as wrong. Returns the counts
/// `(correct, predicted, gold)`.
pub fn alignment_counts(predicted_pairs: &[(Option<&str>, Option<&str>)], gold_pairs: &[(String, String)]) -> (usize, usize, usize) {
    let gold: HashSet<(&str, &str)> = gold_pairs.iter().map(|(c, v)| (c.as_str(), v.as_str())).collect();
    let mut seen = HashSet::new();
    let correct = predicted_pairs
        .iter()
        .filter_map(|(c, v)| Some(((*c)?, (*v)?)))
        .filter(|p| gold.contains(p) && seen.insert(*p))
        .count();
    (correct, predicted_pairs.len(), gold.len())
}

// ---------------------------------------------------------------------------
// Diversity and richness

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Repetition {
    pub score: f64,
    /// Indices of stories with fewer than three tokens, left out of the mean.
    pub excluded: Vec<usize>,
}

fn trigrams(text: &str) -> HashSet<[String; 3]> {
    normalized_tokens(text)
        .windows(3)
        .map(|w| [w[0].clone(), w[1].clone(), w[2].clone()])
        .collect()
}

/// Mean percentage of each story's distinct word trigrams that also occur
/// in some other story.
pub fn inter_story_repetition<S: AsRef<str>>(stories: &[S]) -> Result<Repetition, MetricsError> {
    if stories.len() < 2 {
        return Err(MetricsError::Unscorable("need at least two stories".into()));
    }
    let sets: Vec<HashSet<[String; 3]>> = stories.iter().map(|s| trigrams(s.as_ref())).collect();
    let mut df: HashMap<&[String; 3], usize> = HashMap::new();
    for set in &sets {
        for t in set {
            *df.entry(t).or_default() += 1;
        }
    }
    let mut excluded = Vec::new();
    let mut total = 0.0;
    let mut counted = 0usize;
    for (i, set) in sets.iter().enumerate() {
        if set.is_empty() {
            log::warn!("story {i} has fewer than three tokens; excluded from repetition");
            excluded.push(i);
            continue;
        }
        let repeated = set.iter().filter(|t| df[t] > 1).count();
        total += repeated as f64 / set.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(MetricsError::Unscorable("no story has three tokens".into()));
    }
    Ok(Repetition {
        score: total / counted as f64 * 100.0,
        excluded,
    })
}

/// Mean number of characters (clusters) and mentions per story.
pub fn character_richness(stories: &[AnnotatedStory]) -> (f64, f64) {
    if stories.is_empty() {
        return (0.0, 0.0);
    }
    let n = stories.len() as f64;
    let chars: usize = stories.iter().map(|s| s.chains.len()).sum();
    let ments: usize = stories.iter().map(|s| s.mentions.len()).sum();
    (chars as f64 / n, ments as f64 / n)
}

// ---------------------------------------------------------------------------
// Judge agreement

/// Percentage agreement with human verdicts for each judge dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeAccuracy {
    pub pairs: usize,
    /// Indexed like [`JudgeDimension::ALL`].
    pub scores: [f64; 6],
}

impl JudgeAccuracy {
    pub fn get(&self, dim: JudgeDimension) -> f64 {
        let i = JudgeDimension::ALL.iter().position(|d| *d == dim).expect("known dimension");
        self.scores[i]
    }

    pub fn rows(&self) -> impl Iterator<Item = (JudgeDimension, f64)> + '_ {
        JudgeDimension::ALL.iter().copied().zip(self.scores.iter().copied())
    }

    /// Two-line table: dimension abbreviations, then scores to two decimals.
    pub fn table(&self) -> String {
        let head: Vec<String> = JudgeDimension::ALL.iter().map(|d| format!("{:>6}", d.abbrev())).collect();
        let vals: Vec<String> = self.scores.iter().map(|v| format!("{v:>6.2}")).collect();
        format!("{}\n{}\n", head.join(" "), vals.join(" "))
    }
}

pub fn judge_accuracy(verdicts: &[JudgeVerdict], human: &[JudgeVerdict]) -> Result<JudgeAccuracy, MetricsError> {
    if verdicts.len() != human.len() {
        return Err(MetricsError::LengthMismatch {
            left: verdicts.len(),
            right: human.len(),
        });
    }
    if verdicts.is_empty() {
        return Err(MetricsError::Unscorable("no judged pairs".into()));
    }
    let mut scores = [0.0; 6];
    for (slot, dim) in scores.iter_mut().zip(JudgeDimension::ALL) {
        let agree = verdicts.iter().zip(human).filter(|(a, b)| a.get(dim) == b.get(dim)).count();
        *slot = agree as f64 / verdicts.len() as f64 * 100.0;
    }
    Ok(JudgeAccuracy {
        pairs: verdicts.len(),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::Preference;
    use crate::textual::parse_annotated;

    fn chains(spec: &[&[&str]]) -> Vec<Vec<String>> {
        spec.iter().map(|c| c.iter().map(|s| s.to_string()).collect()).collect()
    }

    #[test]
    fn fkgl_formula() {
        let stats = TextStats {
            n_word: 100,
            n_sentence: 10,
            n_syllable: 150,
        };
        let v = fkgl_from_stats(stats, FkglCoefficients::default()).unwrap();
        assert!((v - 6.01).abs() < 1e-9, "{v}");
        assert_eq!(
            TextStats::of("The cat sat on the mat."),
            TextStats {
                n_word: 6,
                n_sentence: 1,
                n_syllable: 6
            }
        );
        let v = fkgl("The cat sat on the mat.", FkglCoefficients::default(), false).unwrap();
        assert!((v + 1.45).abs() < 1e-9, "{v}");
        assert_eq!(fkgl("The cat sat on the mat.", FkglCoefficients::default(), true).unwrap(), 0.0);
        let constant = FkglCoefficients { a: 0.0, b: 0.0, c: 5.0 };
        assert_eq!(fkgl("Anything at all here.", constant, false).unwrap(), 5.0);
        assert!(matches!(fkgl("", constant, false), Err(MetricsError::Unscorable(_))));
    }

    #[test]
    fn b3_examples() {
        let (p, r) = b3(&chains(&[&["a", "b"], &["c"]]), &chains(&[&["a"], &["b", "c"]]));
        assert!((p - 2.0 / 3.0).abs() < 1e-12 && (r - 2.0 / 3.0).abs() < 1e-12);
        let g = chains(&[&["a", "b", "c"], &["d"]]);
        assert_eq!(b3(&g, &g), (1.0, 1.0));
        let (p, r) = b3(&chains(&[&["a"], &["b"], &["c"], &["d"]]), &chains(&[&["a", "b", "c", "d"]]));
        assert_eq!(p, 1.0);
        assert!((r - 0.25).abs() < 1e-12);
    }

    #[test]
    fn b3_missing_items_are_singletons() {
        let (p, r) = b3(&chains(&[&["a", "x"]]), &chains(&[&["a"]]));
        assert_eq!(p, 0.5);
        assert_eq!(r, 1.0);
    }

    #[test]
    fn b3_plural_mentions() {
        // "they" belongs to both characters on both sides: perfect.
        let g = chains(&[&["tom", "they"], &["sue", "they"]]);
        assert_eq!(b3(&g, &g), (1.0, 1.0));
        // Prediction links "they" only to Tom.
        let p = chains(&[&["tom", "they"], &["sue"]]);
        let (prec, rec) = b3(&p, &g);
        assert_eq!(prec, 1.0);
        assert!(rec < 1.0);
    }

    #[test]
    fn coref_merge_of_two_equal_characters() {
        let gold_m: Vec<EvalMention> = ["a", "b", "c", "d"]
            .iter()
            .enumerate()
            .map(|(i, id)| EvalMention::textual(*id, i, &format!("w{i}")))
            .collect();
        let gold = chains(&[&["a", "b"], &["c", "d"]]);
        let policy = MentionMatchPolicy::default();
        assert_eq!(coref_score(&gold, &gold_m, &gold, &gold_m, &policy), 100.0);
        let merged = chains(&[&["a", "b", "c", "d"]]);
        assert_eq!(coref_score(&merged, &gold_m, &gold, &gold_m, &policy), 50.0);
    }

    #[test]
    fn unmatched_predictions_lower_precision() {
        let gold_m = vec![EvalMention::textual("g0", 0, "Tom"), EvalMention::textual("g1", 1, "he")];
        let pred_m = vec![EvalMention::textual("p0", 0, "Tom"), EvalMention::textual("p1", 1, "the dog")];
        let gold = chains(&[&["g0", "g1"]]);
        let pred = chains(&[&["p0", "p1"]]);
        let s = coref_score(&pred, &pred_m, &gold, &gold_m, &MentionMatchPolicy::default());
        assert_eq!(s, 50.0);
    }

    #[test]
    fn chain_mapping() {
        let renaming: HashMap<String, String> =
            [("p0", "g0"), ("p1", "g1"), ("p2", "g2")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let gold = vec![
            ("A".to_string(), vec!["g0".to_string()]),
            ("B".to_string(), vec!["g1".to_string(), "g2".to_string()]),
        ];
        let members = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(best_gold_chain(&members(&["p0", "p1", "p2"]), &renaming, &gold), Some("B"));
        assert_eq!(best_gold_chain(&members(&["p0", "p1"]), &renaming, &gold), Some("A"));
        assert_eq!(best_gold_chain(&members(&["zz"]), &renaming, &gold), None);
        let gold_pairs = vec![("A".to_string(), "x".to_string()), ("B".to_string(), "y".to_string())];
        assert_eq!(
            alignment_counts(&[(Some("A"), Some("x")), (Some("B"), None), (Some("A"), Some("x"))], &gold_pairs),
            (1, 3, 2)
        );
    }

    #[test]
    fn heads() {
        assert_eq!(head_word("the tall man"), "man");
        assert_eq!(head_word("The King of Spain"), "king");
        assert_eq!(head_word("Tom's"), "tom");
        assert_eq!(head_word("her"), "her");
        assert_eq!(head_word(""), "");
    }

    #[test]
    fn iou_gate() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 0.0, 10.0, 10.0);
        assert_eq!(a.iou(&b), 1.0 / 3.0);
        let p = [EvalMention::visual("p", 0, a)];
        let g = [EvalMention::visual("g", 0, b)];
        assert_eq!(detection_pr(&p, &g, &MentionMatchPolicy::default()), (0.0, 0.0));
        assert_eq!(detection_pr(&p, &p, &MentionMatchPolicy::default()), (1.0, 1.0));
        let other_image = [EvalMention::visual("g", 1, a)];
        assert_eq!(detection_pr(&p, &other_image, &MentionMatchPolicy::default()), (0.0, 0.0));
    }

    #[test]
    fn greedy_visual_matching_prefers_high_iou() {
        let g = [EvalMention::visual("g", 0, BBox::new(0.0, 0.0, 10.0, 10.0))];
        let p = [
            EvalMention::visual("p0", 0, BBox::new(1.0, 0.0, 10.0, 10.0)),
            EvalMention::visual("p1", 0, BBox::new(0.0, 0.0, 10.0, 10.0)),
        ];
        assert_eq!(match_mentions(&p, &g, &MentionMatchPolicy::default()), vec![(1, 0)]);
        assert_eq!(detection_pr(&p, &g, &MentionMatchPolicy::default()), (0.5, 1.0));
    }

    #[test]
    fn textual_matching() {
        let p = [EvalMention::textual("p", 2, "the tall man")];
        let g = [EvalMention::textual("g", 2, "man")];
        assert_eq!(detection_pr(&p, &g, &MentionMatchPolicy::default()), (1.0, 1.0));
        let g = [EvalMention::textual("g", 3, "man")];
        assert_eq!(detection_pr(&p, &g, &MentionMatchPolicy::default()), (0.0, 0.0));
    }

    #[test]
    fn policy_bounds() {
        assert!(MentionMatchPolicy { iou_threshold: 0.0 }.validate().is_err());
        assert!(MentionMatchPolicy { iou_threshold: 1.0 }.validate().is_ok());
        assert!(MentionMatchPolicy { iou_threshold: f64::NAN }.validate().is_err());
    }

    #[test]
    fn repetition_examples() {
        let r = inter_story_repetition(&["the cat sat down", "the cat sat down"]).unwrap();
        assert_eq!(r.score, 100.0);
        let r = inter_story_repetition(&["one two three", "four five six"]).unwrap();
        assert_eq!(r.score, 0.0);
        let r = inter_story_repetition(&["a b c d", "b c d e"]).unwrap();
        assert_eq!(r.score, 50.0);
        let r = inter_story_repetition(&["A b, c d!", "b c d e", "hi"]).unwrap();
        assert_eq!(r.score, 50.0);
        assert_eq!(r.excluded, vec![2]);
        assert!(inter_story_repetition(&["only one story"]).is_err());
        assert!(inter_story_repetition(&["a", "b"]).is_err());
    }

    #[test]
    fn richness() {
        let s = parse_annotated("[Tom](#1) met [Sue](#2). [He](#1) waved.").unwrap();
        assert_eq!(character_richness(std::slice::from_ref(&s)), (2.0, 3.0));
        assert_eq!(character_richness(&[s.clone(), s]), (2.0, 3.0));
        assert_eq!(character_richness(&[]), (0.0, 0.0));
    }

    #[test]
    fn judge_agreement() {
        let all_a = JudgeVerdict::from_fn(|_| Preference::A);
        let spe_b = JudgeVerdict {
            specificity: Preference::B,
            ..all_a
        };
        let acc = judge_accuracy(&[all_a; 4], &[all_a; 4]).unwrap();
        assert!(acc.scores.iter().all(|&s| s == 100.0));
        let acc = judge_accuracy(&[all_a, all_a, all_a, all_a], &[all_a, all_a, all_a, spe_b]).unwrap();
        assert_eq!(acc.get(JudgeDimension::Specificity), 75.0);
        assert_eq!(acc.get(JudgeDimension::OverallPreference), 100.0);
        assert!(acc.table().starts_with("   SPE    COH"));
        assert!(matches!(
            judge_accuracy(&[all_a], &[]),
            Err(MetricsError::LengthMismatch { left: 1, right: 0 })
        ));
        assert!(judge_accuracy(&[], &[]).is_err());
    }
}
