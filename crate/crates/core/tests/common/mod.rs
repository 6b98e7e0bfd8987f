//! Random scenario generators shared by the property tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use charcoref::visual::PairwiseTable;
use charcoref::{BBox, Detection, DetectionRef, ImageSequence, VisualChain};
use rand::seq::SliceRandom;
use rand::Rng;

pub type Partition = BTreeSet<BTreeSet<DetectionRef>>;

pub fn partition(chains: &[VisualChain]) -> Partition {
    chains.iter().map(|c| c.members.iter().cloned().collect()).collect()
}

pub fn person(image_index: usize, id: &str) -> Detection {
    Detection {
        detection_id: id.to_string(),
        image_index,
        bbox: BBox::new(10.0, 10.0, 200.0, 300.0),
        label: "person".into(),
        confidence: 0.95,
        area_fraction: 0.2,
        embedding: None,
        mask_ref: None,
    }
}

pub fn sequence(id: &str, k: usize) -> ImageSequence {
    ImageSequence::new(id, (0..k).map(|i| format!("{id}/{i}.jpg")).collect()).unwrap()
}

/// A sequence where each of up to six characters shows up in a random
/// subset of images, with an identity-indicator similarity table.
pub struct VisualScenario {
    pub sequence: ImageSequence,
    pub detections: Vec<Detection>,
    pub table: PairwiseTable,
    pub truth: Partition,
    pub tau: f64,
}

pub fn visual_scenario<R: Rng>(rng: &mut R) -> VisualScenario {
    let k = rng.gen_range(1..=8);
    let n_chars = rng.gen_range(1..=6);
    let mut detections = Vec::new();
    let mut owner: Vec<usize> = Vec::new();
    for img in 0..k {
        let mut present: Vec<usize> = (0..n_chars).filter(|_| rng.gen_bool(0.6)).collect();
        present.shuffle(rng);
        for (slot, ch) in present.into_iter().enumerate() {
            detections.push(person(img, &format!("d{slot}")));
            owner.push(ch);
        }
    }
    let mut table = PairwiseTable::new();
    for i in 0..detections.len() {
        for j in i + 1..detections.len() {
            let s = if owner[i] == owner[j] { 1.0 } else { 0.0 };
            table.insert(detections[i].reference(), detections[j].reference(), s);
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<DetectionRef>> = BTreeMap::new();
    for (d, ch) in detections.iter().zip(&owner) {
        groups.entry(*ch).or_default().insert(d.reference());
    }
    // tau strictly inside (0, 1)
    let tau = rng.gen_range(0.01..0.99);
    VisualScenario {
        sequence: sequence("seq", k),
        detections,
        table,
        truth: groups.into_values().collect(),
        tau,
    }
}

/// A story and visual chains in which every character has the same
/// sentence and image distribution, distinct from every other character's.
pub struct AlignScenario {
    pub k: usize,
    pub annotated: String,
    pub vchains: Vec<VisualChain>,
    /// (cluster id, chain id)
    pub gold: BTreeSet<(String, String)>,
}

const NAMES: [&str; 6] = ["Anna", "Ben", "Cora", "Dev", "Eli", "Fay"];

pub fn align_scenario<R: Rng>(rng: &mut R) -> AlignScenario {
    let k = rng.gen_range(2..=8);
    // at most 2^k - 1 distinct non-empty slot sets exist
    let want = rng.gen_range(1..=6usize.min((1 << k) - 1));
    let mut slot_sets: Vec<Vec<usize>> = Vec::new();
    while slot_sets.len() < want {
        let s: Vec<usize> = (0..k).filter(|_| rng.gen_bool(0.5)).collect();
        if !s.is_empty() && !slot_sets.contains(&s) {
            slot_sets.push(s);
        }
    }
    let mut sentences = Vec::new();
    for slot in 0..k {
        let here: Vec<usize> = (0..want).filter(|c| slot_sets[*c].contains(&slot)).collect();
        if here.is_empty() {
            sentences.push("Nothing much happened.".to_string());
        } else {
            let tags: Vec<String> = here.iter().map(|c| format!("[{}](#{})", NAMES[*c], c + 1)).collect();
            sentences.push(format!("Then {} looked around.", tags.join(" and ")));
        }
    }
    let mut chain_order: Vec<usize> = (0..want).collect();
    chain_order.shuffle(rng);
    let mut vchains = Vec::new();
    let mut gold = BTreeSet::new();
    for (i, c) in chain_order.iter().enumerate() {
        let chain_id = format!("c{i}");
        vchains.push(VisualChain {
            chain_id: chain_id.clone(),
            members: slot_sets[*c].iter().map(|&img| DetectionRef::new(img, format!("p{c}"))).collect(),
        });
        gold.insert(((c + 1).to_string(), chain_id));
    }
    AlignScenario {
        k,
        annotated: sentences.join(" "),
        vchains,
        gold,
    }
}

const WORDS: [&str; 12] = [
    "the", "park", "was", "sunny", "and", "café", "naïve", "went", "home", "laughed", "big", "dog",
];
const SURFACES: [&str; 8] = ["Tom", "Susan", "they", "the old man", "her", "His granddaughter", "Zoë", "we"];
const IDS: [&str; 7] = ["1", "2", "3", "4", "hero", "x_2", "10"];

/// A random tagged story in canonical form (plural tags joined by ", ").
pub fn annotated_story<R: Rng>(rng: &mut R) -> String {
    let n_sent = rng.gen_range(0..=6);
    let mut out = String::new();
    for s in 0..n_sent {
        if s > 0 {
            out.push_str(if rng.gen_bool(0.2) { "  " } else { " " });
        }
        let n_tok = rng.gen_range(1..=8);
        for t in 0..n_tok {
            if t > 0 {
                out.push(' ');
            }
            if rng.gen_bool(0.35) {
                let n_ids = if rng.gen_bool(0.25) { rng.gen_range(2..=3) } else { 1 };
                let ids: Vec<&str> = IDS.choose_multiple(rng, n_ids).copied().collect();
                let tags: Vec<String> = ids.iter().map(|i| format!("#{i}")).collect();
                out.push_str(&format!("[{}]({})", SURFACES.choose(rng).unwrap(), tags.join(", ")));
                if rng.gen_bool(0.15) {
                    out.push_str("'s");
                }
            } else {
                out.push_str(WORDS.choose(rng).unwrap());
            }
        }
        out.push(*['.', '!', '?'].choose(rng).unwrap());
    }
    out
}
