mod common;

use std::path::Path;

use charcoref::align::align;
use charcoref::corpus::{
    parse_doc, to_canonical_string, DetectionsDoc, Document, MultimodalDoc, StoryDoc, VisualChainsDoc,
};
use charcoref::llm::{JudgeDimension, JudgeVerdict, Preference};
use charcoref::model::{textual_distribution, visual_distribution};
use charcoref::visual::{build_chains, ChainParams, SimilaritySource};
use charcoref::{parse_annotated, DistributionVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn assert_round_trip<T: Document + Serialize + DeserializeOwned + PartialEq + std::fmt::Debug>(doc: &T) {
    let text = to_canonical_string(doc);
    let back: T = parse_doc(Path::new("mem"), &text).unwrap();
    assert_eq!(&back, doc);
    assert_eq!(to_canonical_string(&back), text);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn documents_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = common::visual_scenario(&mut rng);
        for d in &mut s.detections {
            d.confidence = rng.gen_range(0.9..1.0);
            d.area_fraction = rng.gen();
            d.embedding = Some((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
            if rng.gen_bool(0.3) {
                d.mask_ref = Some(format!("masks/{}.png", d.detection_id));
            }
        }
        assert_round_trip(&DetectionsDoc::new("seq", s.detections.clone()));
        let chains = build_chains(&s.sequence, &s.detections, &SimilaritySource::PairwiseTable(s.table), &ChainParams::default()).unwrap();
        assert_round_trip(&VisualChainsDoc::new("seq", chains));

        let story = parse_annotated(&common::annotated_story(&mut rng)).unwrap().with_id("seq");
        assert_round_trip(&StoryDoc::new(story));

        let a = common::align_scenario(&mut rng);
        let story = parse_annotated(&a.annotated).unwrap();
        assert_round_trip(&MultimodalDoc::new("seq", align(&story, &a.vchains, a.k, 1).unwrap()));
    }

    #[test]
    fn distributions_ignore_order_and_repeats(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = common::align_scenario(&mut rng);
        for chain in &a.vchains {
            let mut shuffled = chain.clone();
            rand::seq::SliceRandom::shuffle(shuffled.members.as_mut_slice(), &mut rng);
            prop_assert_eq!(visual_distribution(&shuffled, a.k).unwrap(), visual_distribution(chain, a.k).unwrap());
        }
        // Repeating a character's mention inside a sentence leaves its vector unchanged.
        let story = parse_annotated(&a.annotated).unwrap();
        let doubled = parse_annotated(&a.annotated.replace("[Anna](#1)", "[Anna](#1) with [Anna](#1)")).unwrap();
        if story.chains.contains_key("1") {
            prop_assert_eq!(
                textual_distribution(&doubled, "1", a.k).unwrap(),
                textual_distribution(&story, "1", a.k).unwrap()
            );
        }
        let idx: Vec<usize> = (0..a.k).filter(|_| rng.gen_bool(0.5)).collect();
        let mut twice = idx.clone();
        twice.extend(idx.iter().rev());
        prop_assert_eq!(
            DistributionVector::from_indices(twice, a.k).unwrap(),
            DistributionVector::from_indices(idx, a.k).unwrap()
        );
    }
}

#[test]
fn verdicts_round_trip() {
    for bits in 0u32..64 {
        let v = JudgeVerdict::from_fn(|d| {
            let i = JudgeDimension::ALL.iter().position(|x| *x == d).unwrap();
            if bits >> i & 1 == 1 { Preference::B } else { Preference::A }
        });
        let text = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<JudgeVerdict>(&text).unwrap(), v);
    }
}
