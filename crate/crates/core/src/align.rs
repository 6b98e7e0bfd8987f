//! Alignment of textual clusters with visual chains.
//!
//! Each side is reduced to a presence vector over sentence/image slots and
//! the similarity of a pair is the dot product of the two vectors, i.e. the
//! number of slots where both characters appear. The best one-to-one
//! pairing comes from the thresholded assignment solver.

use std::collections::HashSet;

use crate::assignment::{solve_with_threshold, ScoreMatrix};
use crate::model::{
    natural_cmp, textual_distribution, visual_distribution, AnnotatedStory, DistributionVector,
    ModelError, MultimodalChain, VisualChain,
};

/// Row/column labels for an alignment matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix {
    pub clusters: Vec<String>,
    pub chains: Vec<String>,
    pub scores: ScoreMatrix,
}

/// Slot count used for the vectors: `k`, or more when the story has more
/// sentences than the sequence has images. Shorter vectors are zero-padded.
pub fn slot_count(story: &AnnotatedStory, k: usize) -> usize {
    let max_sentence = story.mentions.iter().map(|m| m.sentence_index + 1).max().unwrap_or(0);
    k.max(story.sentences.len()).max(max_sentence)
}

fn sorted_chains(vchains: &[VisualChain]) -> Vec<&VisualChain> {
    let mut v: Vec<&VisualChain> = vchains.iter().collect();
    v.sort_by(|a, b| natural_cmp(&a.chain_id, &b.chain_id));
    v
}

/// Dot-product similarity of every textual cluster (rows, natural id order)
/// against every visual chain (columns, natural id order).
pub fn alignment_matrix(
    story: &AnnotatedStory,
    vchains: &[VisualChain],
    k: usize,
) -> Result<AlignmentMatrix, ModelError> {
    let slots = slot_count(story, k);
    let clusters: Vec<String> = story.cluster_ids().into_iter().map(String::from).collect();
    let chains = sorted_chains(vchains);
    let text_vecs = clusters
        .iter()
        .map(|c| textual_distribution(story, c, slots))
        .collect::<Result<Vec<DistributionVector>, _>>()?;
    let vis_vecs = chains
        .iter()
        .map(|c| visual_distribution(c, k).map(|v| v.padded(slots)))
        .collect::<Result<Vec<DistributionVector>, _>>()?;
    let mut data = Vec::with_capacity(text_vecs.len() * vis_vecs.len());
    for t in &text_vecs {
        for v in &vis_vecs {
            data.push(t.dot(v) as f64);
        }
    }
    let scores = if text_vecs.is_empty() || vis_vecs.is_empty() {
        ScoreMatrix::empty(text_vecs.len(), vis_vecs.len())
    } else {
        ScoreMatrix::new(text_vecs.len(), vis_vecs.len(), data).expect("integer scores are finite")
    };
    Ok(AlignmentMatrix {
        clusters,
        chains: chains.iter().map(|c| c.chain_id.clone()).collect(),
        scores,
    })
}

/// Fuses clusters and chains that share at least `min_overlap` slots.
///
/// Output ids are `mm0, mm1, ...`: fused pairs first (by cluster order),
/// then unmatched clusters, then unmatched visual chains.
pub fn align(
    story: &AnnotatedStory,
    vchains: &[VisualChain],
    k: usize,
    min_overlap: usize,
) -> Result<Vec<MultimodalChain>, ModelError> {
    let m = alignment_matrix(story, vchains, k)?;
    let assignment = solve_with_threshold(&m.scores, min_overlap.max(1) as f64);
    let by_id = |id: &str| vchains.iter().find(|c| c.chain_id == id).expect("chain from input");
    let mut out: Vec<MultimodalChain> = Vec::new();

    for mt in &assignment.matches {
        let cluster = &m.clusters[mt.row];
        let chain = by_id(&m.chains[mt.col]);
        out.push(MultimodalChain {
            chain_id: format!("mm{}", out.len()),
            visual: Some(chain.chain_id.clone()),
            textual: Some(cluster.clone()),
            visual_members: chain.members.clone(),
            textual_members: story.chains[cluster].clone(),
        });
    }
    for &row in &assignment.unmatched_rows {
        let cluster = &m.clusters[row];
        out.push(MultimodalChain {
            chain_id: format!("mm{}", out.len()),
            visual: None,
            textual: Some(cluster.clone()),
            visual_members: Vec::new(),
            textual_members: story.chains[cluster].clone(),
        });
    }
    for &col in &assignment.unmatched_cols {
        let chain = by_id(&m.chains[col]);
        out.push(MultimodalChain {
            chain_id: format!("mm{}", out.len()),
            visual: Some(chain.chain_id.clone()),
            textual: None,
            visual_members: chain.members.clone(),
            textual_members: Vec::new(),
        });
    }
    Ok(out)
}

/// Precision and recall of fused `(cluster, visual chain)` pairs against
/// gold pairs. An empty denominator yields 1.0.
pub fn alignment_quality(predicted: &[MultimodalChain], gold_pairs: &[(String, String)]) -> (f64, f64) {
    let gold: HashSet<(&str, &str)> = gold_pairs
        .iter()
        .map(|(c, v)| (c.as_str(), v.as_str()))
        .collect();
    let pred: HashSet<(&str, &str)> = predicted
        .iter()
        .filter_map(|c| Some((c.textual.as_deref()?, c.visual.as_deref()?)))
        .collect();
    let correct = pred.intersection(&gold).count();
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    (ratio(correct, pred.len()), ratio(correct, gold.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DetectionRef;
    use crate::textual::parse_annotated;

    fn vchain(id: &str, images: &[usize]) -> VisualChain {
        VisualChain {
            chain_id: id.into(),
            members: images.iter().map(|&i| DetectionRef::new(i, format!("{id}_{i}"))).collect(),
        }
    }

    const FIVE: &str = "S0 [Ann](#1). S1 [Ann](#1) and [Bob](#2). S2 [Bob](#2). S3. S4.";

    #[test]
    fn matrix_entries_are_shared_slots() {
        let story = parse_annotated(FIVE).unwrap();
        let m = alignment_matrix(&story, &[vchain("c0", &[0]), vchain("c1", &[1, 2])], 5).unwrap();
        assert_eq!(m.clusters, ["1", "2"]);
        assert_eq!(m.chains, ["c0", "c1"]);
        // #1 = [1,1,0,0,0], #2 = [0,1,1,0,0]
        assert_eq!(m.scores.get(0, 0), 1.0);
        assert_eq!(m.scores.get(0, 1), 1.0);
        assert_eq!(m.scores.get(1, 0), 0.0);
        assert_eq!(m.scores.get(1, 1), 2.0);
    }

    #[test]
    fn single_fused_chain() {
        let story = parse_annotated("[Ann](#1) sat. B. C. D. E.").unwrap();
        let out = align(&story, &[vchain("c0", &[0])], 5, 1).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].is_fused());
        assert_eq!(out[0].chain_id, "mm0");
        assert_eq!(out[0].textual_members, ["m0"]);
    }

    #[test]
    fn diagonal_pairing() {
        // #1 = [1,1,1,0,0], #2 = [0,0,1,1,1]; c0 matches #1 on 3 slots, c1 matches #2 on 3.
        let story = parse_annotated(
            "[A](#1). [A](#1). [A](#1) [B](#2). [B](#2). [B](#2).",
        )
        .unwrap();
        let v = [vchain("c0", &[0, 1, 2]), vchain("c1", &[2, 3, 4])];
        let m = alignment_matrix(&story, &v, 5).unwrap();
        assert_eq!(m.scores, ScoreMatrix::from_rows(&[[3.0, 1.0], [1.0, 3.0]]).unwrap());
        let out = align(&story, &v, 5, 1).unwrap();
        assert_eq!(out[0].textual.as_deref(), Some("1"));
        assert_eq!(out[0].visual.as_deref(), Some("c0"));
        assert_eq!(out[1].textual.as_deref(), Some("2"));
        assert_eq!(out[1].visual.as_deref(), Some("c1"));
    }

    #[test]
    fn zero_overlap_is_not_fused() {
        let story = parse_annotated("A. B. [C](#1). D. E.").unwrap();
        let out = align(&story, &[vchain("c0", &[0, 1])], 5, 1).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].textual.as_deref(), Some("1"));
        assert!(out[0].visual.is_none());
        assert_eq!(out[1].visual.as_deref(), Some("c0"));
        assert_eq!(out[1].chain_id, "mm1");
    }

    #[test]
    fn longer_story_is_padded() {
        let story = parse_annotated("A. B. C. [D](#1). [E](#1). F.").unwrap();
        let m = alignment_matrix(&story, &[vchain("c0", &[3, 4])], 5).unwrap();
        assert_eq!(m.scores.get(0, 0), 2.0);
        let story = parse_annotated("A. B. C. D. E. [F](#1).").unwrap();
        let m = alignment_matrix(&story, &[vchain("c0", &[4])], 5).unwrap();
        assert_eq!(m.scores.get(0, 0), 0.0);
    }

    #[test]
    fn quality_counts() {
        let fused = |t: &str, v: &str| MultimodalChain {
            chain_id: String::new(),
            visual: Some(v.into()),
            textual: Some(t.into()),
            visual_members: vec![],
            textual_members: vec![],
        };
        let gold: Vec<(String, String)> = [("1", "a"), ("2", "b"), ("3", "c"), ("4", "d")]
            .iter()
            .map(|(x, y)| (x.to_string(), y.to_string()))
            .collect();
        let (p, r) = alignment_quality(&[fused("1", "a"), fused("2", "c")], &gold);
        assert_eq!((p, r), (0.5, 0.25));
        let (p, r) = alignment_quality(&[fused("1", "a"), fused("2", "b"), fused("3", "c")], &gold[..3]);
        assert_eq!((p, r), (1.0, 1.0));
        assert_eq!(alignment_quality(&[], &[]), (1.0, 1.0));
    }
}
