use std::collections::{BTreeSet, HashSet};

use notecoder_core::cohort::{filter_labels, impute_all, split_by_patient, Split};
use notecoder_core::corpus::{chunk_note, encode, Chunk, Note, TokenizedNote, Vocab, MASK, NUM_SPECIALS, PAD, SEP};
use notecoder_core::eval::{aggregate_chunks, auc_binary};
use notecoder_core::numerics::rng_from_seed;
use notecoder_core::pretrain::{mask_tokens, MaskingPolicy};
use proptest::prelude::*;

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li == 0 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            den += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / den
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..8).prop_map(|s| s as f64 / 4.0), n),
            prop::collection::vec(0u8..2, n),
        )
            .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
    })
}

proptest! {
    #[test]
    fn auc_matches_pair_counting((scores, labels) in scored()) {
        let a = auc_binary(&scores, &labels).unwrap();
        prop_assert!((a - brute_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps((scores, labels) in scored()) {
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(auc_binary(&scores, &labels).unwrap(), auc_binary(&mapped, &labels).unwrap());
    }

    #[test]
    fn flipping_labels_complements_auc((scores, labels) in scored()) {
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let sum = auc_binary(&scores, &labels).unwrap() + auc_binary(&scores, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation_dominates_every_chunk(
        chunks in (1usize..6).prop_flat_map(|l| prop::collection::vec(prop::collection::vec(0.0f64..1.0, l), 1..5))
    ) {
        let agg = aggregate_chunks(&chunks).unwrap();
        for j in 0..agg.len() {
            prop_assert!(chunks.iter().all(|c| c[j] <= agg[j]));
            prop_assert!(chunks.iter().any(|c| c[j] == agg[j]));
        }
    }

    #[test]
    fn masking_touches_only_selected_content(
        ids in prop::collection::vec(NUM_SPECIALS..40, 1..30),
        seed in any::<u64>(),
    ) {
        let chunk = Chunk::truncated(&ids, 32, ("n".into(), 0)).unwrap();
        let m = mask_tokens(&chunk, &MaskingPolicy::default(), 40, &mut rng_from_seed(seed)).unwrap();
        prop_assert!(!m.positions.is_empty());
        let content: BTreeSet<usize> = chunk.content_positions().into_iter().collect();
        let chosen: BTreeSet<usize> = m.positions.iter().copied().collect();
        prop_assert!(chosen.is_subset(&content));
        for (k, &p) in m.positions.iter().enumerate() {
            prop_assert_eq!(m.targets[k], chunk.ids[p]);
            let v = m.chunk.ids[p];
            prop_assert!(v == MASK || v >= NUM_SPECIALS);
        }
        for i in 0..chunk.len() {
            if !chosen.contains(&i) {
                prop_assert_eq!(m.chunk.ids[i], chunk.ids[i]);
            }
        }
        prop_assert_eq!(&m.chunk.mask, &chunk.mask);
        prop_assert_eq!(&m.chunk.segments, &chunk.segments);
    }

    #[test]
    fn chunks_partition_the_note(
        ids in prop::collection::vec(NUM_SPECIALS..50, 0..200),
        max_len in 8usize..40,
    ) {
        let note = TokenizedNote { note_id: "n".into(), token_strings: Vec::new(), token_ids: ids.clone(), oov_count: 0 };
        let chunks = chunk_note(&note, max_len).unwrap();
        prop_assert_eq!(chunks.len(), ids.len().div_ceil(max_len - 2).max(1));
        let mut joined = Vec::new();
        for (i, c) in chunks.iter().enumerate() {
            c.check_invariants().unwrap();
            prop_assert_eq!(c.len(), max_len);
            prop_assert_eq!(c.origin.1, i);
            prop_assert!(c.ids[c.active_len()..].iter().all(|&x| x == PAD));
            prop_assert_eq!(c.ids[c.active_len() - 1], SEP);
            joined.extend(c.content_ids());
        }
        prop_assert_eq!(joined, ids);
    }

    #[test]
    fn imputation_is_idempotent_and_only_adds(histories in prop::collection::vec(history(), 1..6)) {
        let chronic: HashSet<String> = ["c0", "c1"].iter().map(|s| s.to_string()).collect();
        let notes: Vec<Note> = histories.into_iter().flatten().collect();
        let once = impute_all(&notes, &chronic).unwrap();
        let twice = impute_all(&once, &chronic).unwrap();
        prop_assert_eq!(&once, &twice);
        for (before, after) in notes.iter().zip(&once) {
            prop_assert_eq!(&before.note_id, &after.note_id);
            let b: BTreeSet<&String> = before.codes.iter().collect();
            let a: BTreeSet<&String> = after.codes.iter().collect();
            prop_assert!(b.is_subset(&a));
            prop_assert!(a.difference(&b).all(|c| chronic.contains(*c)));
        }
    }

    #[test]
    fn patient_splits_are_disjoint_and_total(
        patients in prop::collection::vec("[a-z]{1,4}", 1..80),
        seed in any::<u64>(),
    ) {
        let s = split_by_patient(&patients, (0.7, 0.1, 0.2), seed).unwrap();
        let distinct: BTreeSet<&String> = patients.iter().collect();
        prop_assert_eq!(s.assignments.len(), distinct.len());
        let total: usize = [Split::Train, Split::Dev, Split::Test].iter().map(|&x| s.count(x)).sum();
        prop_assert_eq!(total, distinct.len());
        prop_assert!(patients.iter().all(|p| s.get(p).is_some()));
        prop_assert_eq!(s, split_by_patient(&patients, (0.7, 0.1, 0.2), seed).unwrap());
    }

    #[test]
    fn label_filter_is_strict(
        notes in prop::collection::vec(prop::collection::vec(0u8..6, 0..4), 0..40),
        min in 1u64..6,
    ) {
        let codes: Vec<Vec<String>> = notes.iter().map(|n| n.iter().map(|c| format!("k{c}")).collect()).collect();
        let space = filter_labels(&codes, min).unwrap();
        for c in 0u8..6 {
            let code = format!("k{c}");
            let count = codes.iter().filter(|n| n.contains(&code)).count() as u64;
            prop_assert_eq!(space.index_of(&code).is_some(), count > min);
        }
    }

    #[test]
    fn vocab_is_order_independent(mut tokens in prop::collection::vec("[a-e]{1,2}", 1..60), budget in 1usize..20) {
        let a = notecoder_core::corpus::build_vocab(&tokens, budget).unwrap();
        tokens.reverse();
        let b = notecoder_core::corpus::build_vocab(&tokens, budget).unwrap();
        prop_assert_eq!(a.to_text(), b.to_text());
        let back = Vocab::read_from(a.to_text().as_bytes()).unwrap();
        prop_assert_eq!(&back, &a);
        let enc = encode("n", &tokens, &a);
        prop_assert_eq!(enc.oov_count, tokens.iter().filter(|t| !a.contains(t)).count());
    }
}

fn history() -> impl Strategy<Value = Vec<Note>> {
    (any::<u16>(), prop::collection::vec(prop::collection::vec(0u8..4, 0..3), 1..6)).prop_map(|(pid, notes)| {
        notes
            .into_iter()
            .enumerate()
            .map(|(i, cs)| Note {
                note_id: format!("p{pid}n{i}"),
                patient_id: format!("p{pid}"),
                timestamp: format!("2020-01-{:02}", 10 + i),
                category: "x".into(),
                text: String::new(),
                codes: cs.into_iter().map(|c| format!("c{c}")).collect(),
            })
            .collect()
    })
}
