mod common;

use std::collections::BTreeSet;

use charcoref::align::{align, alignment_matrix};
use charcoref::parse_annotated;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn perfect_information_recovers_pairing(seed in any::<u64>()) {
        let s = common::align_scenario(&mut ChaCha8Rng::seed_from_u64(seed));
        let story = parse_annotated(&s.annotated).unwrap();
        let chains = align(&story, &s.vchains, s.k, 1).unwrap();
        let fused: BTreeSet<(String, String)> = chains
            .iter()
            .filter(|c| c.is_fused())
            .map(|c| (c.textual.clone().unwrap(), c.visual.clone().unwrap()))
            .collect();
        prop_assert_eq!(fused, s.gold);
        prop_assert!(chains.iter().all(|c| c.is_fused()));
    }

    #[test]
    fn matrix_is_slot_overlap(seed in any::<u64>()) {
        let s = common::align_scenario(&mut ChaCha8Rng::seed_from_u64(seed));
        let story = parse_annotated(&s.annotated).unwrap();
        let m = alignment_matrix(&story, &s.vchains, s.k).unwrap();
        for (i, cluster) in m.clusters.iter().enumerate() {
            let sentences: BTreeSet<usize> = story.chains[cluster]
                .iter()
                .map(|id| story.mention(id).unwrap().sentence_index)
                .collect();
            for (j, chain_id) in m.chains.iter().enumerate() {
                let chain = s.vchains.iter().find(|c| &c.chain_id == chain_id).unwrap();
                let images: BTreeSet<usize> = chain.members.iter().map(|d| d.image_index).collect();
                prop_assert_eq!(m.scores.get(i, j), sentences.intersection(&images).count() as f64);
            }
        }
    }

    /// With a partial visual side, every cluster and chain still appears in
    /// exactly one output chain.
    #[test]
    fn each_input_used_once(seed in any::<u64>(), drop in 0usize..6, min_overlap in 1usize..4) {
        let mut s = common::align_scenario(&mut ChaCha8Rng::seed_from_u64(seed));
        if drop < s.vchains.len() {
            s.vchains.remove(drop);
        }
        let story = parse_annotated(&s.annotated).unwrap();
        let out = align(&story, &s.vchains, s.k, min_overlap).unwrap();
        let mut clusters: Vec<String> = out.iter().filter_map(|c| c.textual.clone()).collect();
        let mut vis: Vec<String> = out.iter().filter_map(|c| c.visual.clone()).collect();
        clusters.sort();
        vis.sort();
        let mut want_c: Vec<String> = story.chains.keys().cloned().collect();
        let mut want_v: Vec<String> = s.vchains.iter().map(|c| c.chain_id.clone()).collect();
        want_c.sort();
        want_v.sort();
        prop_assert_eq!(clusters, want_c);
        prop_assert_eq!(vis, want_v);
        for (i, c) in out.iter().enumerate() {
            prop_assert_eq!(&c.chain_id, &format!("mm{i}"));
        }
    }
}
