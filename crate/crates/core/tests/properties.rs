//! Property tests for the structural invariants that the acceptance gate
//! spot-checks with fixed corpora.

use std::collections::BTreeSet;

use proptest::prelude::*;

use vistune::eval::parse_judge_score;
use vistune::prompt::{jaccard, parse_sd_prompt};
use vistune::schema::{decode_sample, encode_sample, Provenance, Speaker, TrainingSample, Turn};
use vistune::template::{rotate_pool, InContextPool};

fn keyword() -> impl Strategy<Value = String> {
    "[a-z]{1,8}( [a-z]{1,8})?"
}

fn keyword_set() -> impl Strategy<Value = BTreeSet<String>> {
    proptest::collection::btree_set(keyword(), 0..10)
}

proptest! {
    #[test]
    fn jaccard_is_symmetric_and_bounded(a in keyword_set(), b in keyword_set()) {
        let ab = jaccard(&a, &b);
        let ba = jaccard(&b, &a);
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(jaccard(&a, &a), if a.is_empty() { 0.0 } else { 1.0 });
    }

    #[test]
    fn prompt_parse_serialize_parse_is_identity(
        keywords in proptest::collection::vec(keyword(), 1..10),
        emphases in proptest::collection::vec(0u32..4, 1..10),
    ) {
        let raw = keywords
            .iter()
            .zip(emphases.iter().cycle())
            .map(|(k, &e)| {
                let open = "(".repeat(e as usize);
                let close = ")".repeat(e as usize);
                format!("{open}{k}{close}")
            })
            .collect::<Vec<_>>()
            .join(", ");
        let once = parse_sd_prompt(&raw, "prop").unwrap();
        let again = parse_sd_prompt(&once.raw_text, "prop").unwrap();
        prop_assert_eq!(&once, &again);
    }

    #[test]
    fn rotation_preserves_size_and_counter_bounds(
        capacity in 1usize..16,
        interval in 1u32..6,
        fraction in 0.0f64..=1.0,
        counter_seed in 0u32..6,
        fresh in proptest::collection::vec(keyword(), 0..8),
    ) {
        let mut pool = InContextPool::new(capacity, interval, fraction);
        pool.fill(&(0..capacity).map(|i| format!("seed-{i}")).collect::<Vec<_>>());
        pool.batches_since_rotation = counter_seed % interval;
        let rotated = rotate_pool(&pool, &fresh);
        prop_assert_eq!(rotated.examples.len(), pool.examples.len());
        prop_assert!(rotated.batches_since_rotation < interval.max(1));
    }

    #[test]
    fn judge_parser_never_panics(input in "\\PC{0,120}") {
        if let Ok(score) = parse_judge_score(&input) {
            prop_assert!(score <= 5);
        }
    }

    #[test]
    fn sample_encode_decode_round_trips(
        id_suffix in 0u64..1_000_000,
        n_pairs in 1usize..5,
        multi in proptest::bool::ANY,
        answer in "[a-zA-Z ,.]{1,80}",
    ) {
        let image_count = if multi { 2 } else { 1 };
        let mut conversations = Vec::new();
        for i in 0..n_pairs {
            let placeholders = if i == 0 { "<image>\n".repeat(image_count) } else { String::new() };
            conversations.push(Turn {
                speaker: Speaker::Human,
                text: format!("{placeholders}Question {i}?"),
                image_prompts: Vec::new(),
            });
            conversations.push(Turn {
                speaker: Speaker::Assistant,
                text: answer.clone(),
                image_prompts: Vec::new(),
            });
        }
        let sample = TrainingSample {
            id: format!("prop-{id_suffix:06}"),
            stage: if multi { 2 } else { 1 },
            image_refs: (0..image_count).map(|i| format!("images/prop/{i}.png")).collect(),
            conversations,
            provenance: Provenance {
                ability_id: "prop".into(),
                prompts: vec!["((subject)), scene".into()],
                seed: id_suffix,
            },
        };
        let encoded = encode_sample(&sample).unwrap();
        let decoded = decode_sample(&encoded).unwrap();
        prop_assert_eq!(&decoded, &sample);
        let re_encoded = encode_sample(&decoded).unwrap();
        prop_assert_eq!(re_encoded, encoded);
    }
}
