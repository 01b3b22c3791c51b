mod common;

use std::collections::{BTreeMap, HashSet};

use passage_distill::eval::{evaluate, mrr_at_k, recall_at_k, Metric, Run};
use passage_distill::filter::false_negative_mask;
use passage_distill::losses::{
    build_pair_mask, contrastive_ce, sentence_kl, sentence_kl_grad, similarity_map, word_mse, FnMask, ScoreOrigin, ScoreVector,
    NEG_INF,
};
use passage_distill::text::{
    build_train_groups, build_vocab, gen_synthetic, tokenize, DocumentStore, SeqLens, SyntheticSpec, CLS, PAD, SEP, UNK,
};
use proptest::prelude::*;

use common::*;

fn sv(v: Vec<f64>) -> ScoreVector {
    ScoreVector::new(v, ScoreOrigin::Retriever)
}

fn tv(v: Vec<f64>) -> ScoreVector {
    ScoreVector::new(v, ScoreOrigin::Ranker)
}

fn logits(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..8.0, n)
}

fn paired_logits() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (2usize..10).prop_flat_map(|n| {
        (
            prop::collection::vec(-8.0f64..8.0, n),
            prop::collection::vec(-8.0f64..8.0, n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

fn mask_from(bits: &[bool], pos: usize) -> FnMask {
    FnMask {
        values: bits
            .iter()
            .enumerate()
            .map(|(i, &b)| if b && i != pos { NEG_INF } else { 0.0 })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ce_and_kl_are_shift_invariant((s, t, bits) in paired_logits(), c in -50.0f64..50.0) {
        let mask = mask_from(&bits, 0);
        let shift = |v: &[f64]| v.iter().map(|x| x + c).collect::<Vec<_>>();
        let a = contrastive_ce(&sv(s.clone()), 0, Some(&mask)).unwrap();
        let b = contrastive_ce(&sv(shift(&s)), 0, Some(&mask)).unwrap();
        prop_assert!((a - b).abs() <= 1e-8);
        let a = sentence_kl(&sv(s.clone()), &tv(t.clone()), Some(&mask)).unwrap();
        let b = sentence_kl(&sv(shift(&s)), &tv(shift(&t)), Some(&mask)).unwrap();
        prop_assert!((a - b).abs() <= 1e-8);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal((s, t, bits) in paired_logits()) {
        let mask = mask_from(&bits, 0);
        prop_assert!(sentence_kl(&sv(s.clone()), &tv(t), Some(&mask)).unwrap() >= 0.0);
        prop_assert!(sentence_kl(&sv(s.clone()), &tv(s), Some(&mask)).unwrap() <= 1e-8);
    }

    #[test]
    fn masked_kl_equals_reduced_problem((s, t, bits) in paired_logits()) {
        let mask = mask_from(&bits, 0);
        let keep: Vec<usize> = (0..s.len()).filter(|&i| !mask.is_masked(i)).collect();
        let full = sentence_kl(&sv(s.clone()), &tv(t.clone()), Some(&mask)).unwrap();
        let reduced = sentence_kl(
            &sv(keep.iter().map(|&i| s[i]).collect()),
            &tv(keep.iter().map(|&i| t[i]).collect()),
            None,
        ).unwrap();
        prop_assert!((full - reduced).abs() <= 1e-10);
    }

    #[test]
    fn masked_candidates_get_no_gradient((s, t, bits) in paired_logits()) {
        let mask = mask_from(&bits, 0);
        let (_, g) = sentence_kl_grad(&sv(s), &tv(t), Some(&mask)).unwrap();
        for (i, gi) in g.iter().enumerate() {
            if mask.is_masked(i) {
                prop_assert_eq!(*gi, 0.0);
            }
        }
    }

    #[test]
    fn ce_masking_all_negatives_is_zero(s in logits(2..10)) {
        let mut mask = FnMask::zeros(s.len());
        for v in mask.values.iter_mut().skip(1) {
            *v = NEG_INF;
        }
        prop_assert_eq!(contrastive_ce(&sv(s), 0, Some(&mask)).unwrap(), 0.0);
    }

    #[test]
    fn word_mse_nonnegative(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let (q, d) = (1 + seed as usize % 4, 1 + seed as usize % 5);
        let pm = build_pair_mask(q, d, q, d).unwrap();
        let sim = random_matrix(&mut r, q + d, q + d, 4.0);
        let att = random_matrix(&mut r, q + d, q + d, 1.0).mapv(f64::abs);
        prop_assert!(word_mse(&att, &sim, &pm, true).unwrap() >= 0.0);
        prop_assert!(word_mse(&att, &sim, &pm, false).unwrap() >= 0.0);
    }

    #[test]
    fn similarity_map_is_symmetric(seed in 0u64..10_000, q in 1usize..5, d in 1usize..6) {
        let mut r = rng(seed);
        let qh = random_matrix(&mut r, q, 6, 2.0);
        let dh = random_matrix(&mut r, d, 6, 2.0);
        let m = similarity_map(&qh, &dh).unwrap();
        for i in 0..q + d {
            for j in 0..q + d {
                prop_assert!((m[[i, j]] - m[[j, i]]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn pair_mask_geometry(q in 1usize..8, d in 1usize..10, qf in 0.0f64..1.0, df in 0.0f64..1.0) {
        let qr = 1 + ((q - 1) as f64 * qf) as usize;
        let dr = 1 + ((d - 1) as f64 * df) as usize;
        let pm = build_pair_mask(q, d, qr, dr).unwrap();
        for ((i, j), &v) in pm.matrix.indexed_iter() {
            let qi = i < q;
            let qj = j < q;
            let real = |p: usize| if p < q { p < qr } else { p - q < dr };
            let want = (qi != qj) && real(i) && real(j);
            prop_assert_eq!(v == 1.0, want);
        }
    }

    #[test]
    fn filter_matches_oracle_and_softmax(raw in logits(2..12), pos_seed in any::<usize>()) {
        let pos = pos_seed % raw.len();
        let m = false_negative_mask(&tv(raw.clone()), pos).unwrap();
        let oracle = oracle_fn_mask(&raw, pos);
        // the same decisions on softmax outputs
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = raw.iter().map(|x| (x - max).exp()).sum();
        let p: Vec<f64> = raw.iter().map(|x| (x - max).exp() / z).collect();
        let via_probs = oracle_fn_mask(&p, pos);
        for i in 0..raw.len() {
            prop_assert_eq!(m.is_masked(i), oracle[i]);
            prop_assert_eq!(oracle[i], via_probs[i]);
        }
        prop_assert!(!m.is_masked(pos));
    }

    #[test]
    fn metrics_bounded_monotone_and_order_free(seed in 0u64..5000) {
        use rand::Rng;
        let mut r = rng(seed);
        let docs: Vec<String> = (0..20).map(|i| format!("D{i}")).collect();
        let mut lists = Vec::new();
        let mut qrels = passage_distill::text::Qrels::default();
        for q in 0..5 {
            let qid = format!("Q{q}");
            let len = r.random_range(1..15);
            let ranked: Vec<String> = rand::seq::index::sample(&mut r, 20, len).into_iter().map(|i| docs[i].clone()).collect();
            qrels.insert(&qid, &docs[r.random_range(0..20)]);
            lists.push((qid, ranked));
        }
        let run = Run::from_doc_lists(lists.clone()).unwrap();
        let mut rev = lists;
        rev.reverse();
        let run_rev = Run::from_doc_lists(rev).unwrap();
        let metrics = [Metric::Mrr(10), Metric::Recall(5), Metric::Recall(20)];
        prop_assert_eq!(evaluate(&run, &qrels, &metrics).unwrap().values, evaluate(&run_rev, &qrels, &metrics).unwrap().values);
        for k in 1..20 {
            let m = mrr_at_k(&run, &qrels, k).unwrap();
            let rc = recall_at_k(&run, &qrels, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&m) && (0.0..=1.0).contains(&rc));
            // single relevant doc per query
            prop_assert!(m <= rc);
            prop_assert!(mrr_at_k(&run, &qrels, k + 1).unwrap() >= m);
            prop_assert!(recall_at_k(&run, &qrels, k + 1).unwrap() >= rc);
        }
    }

    #[test]
    fn tokenize_is_total_and_padded(words in prop::collection::vec("[a-e]{1,3}", 0..12), max_len in 1usize..8) {
        let store = DocumentStore::new(vec!["D".into()], vec!["a b c".into()]).unwrap();
        let vocab = build_vocab(&store, &[], 1).unwrap();
        let text = words.join(" ");
        let s = tokenize(&text, &vocab, max_len);
        prop_assert_eq!(&s, &tokenize(&text, &vocab, max_len));
        prop_assert_eq!(s.ids.len(), max_len);
        prop_assert_eq!(s.length, words.len().min(max_len));
        prop_assert!(s.ids[s.length..].iter().all(|&i| i == PAD));
        prop_assert!(s.ids[..s.length].iter().all(|&i| i != PAD));
    }
}

#[test]
fn vocabulary_specials_and_round_trip() {
    let data = gen_synthetic(&SyntheticSpec {
        num_docs: 50,
        num_queries: 5,
        vocab_size: 80,
        doc_len: 6,
        query_len: 3,
        seed: 3,
    })
    .unwrap();
    let qs: Vec<&str> = data.queries.iter().map(|(_, t)| t).collect();
    let vocab = build_vocab(&data.store, &qs, 1).unwrap();
    let specials: HashSet<u32> = [PAD, UNK, CLS, SEP].into_iter().collect();
    assert_eq!(specials.len(), 4);
    assert!(specials.iter().all(|&s| (s as usize) < vocab.size()));
    for (tok, &id) in vocab.token_to_id() {
        if id != UNK {
            assert_eq!(vocab.id(vocab.token(id).unwrap()), id, "{tok}");
        }
    }
}

#[test]
fn groups_hold_one_positive_and_clean_negatives() {
    let data = gen_synthetic(&SyntheticSpec {
        num_docs: 300,
        num_queries: 30,
        vocab_size: 200,
        doc_len: 8,
        query_len: 4,
        seed: 9,
    })
    .unwrap();
    let vocab = build_vocab(&data.store, &[], 1).unwrap();
    let lens = SeqLens { query: 4, doc: 8 };
    let groups = build_train_groups(&data.queries, &data.qrels, &data.store, &vocab, lens, 8, 1).unwrap();
    assert_eq!(groups.len(), 30);
    for g in &groups {
        assert_eq!(g.n(), 8);
        assert!(data.qrels.is_relevant(&g.query_id, &g.doc_ids[g.pos_idx]));
        let negs: Vec<_> = g.doc_ids.iter().enumerate().filter(|(i, _)| *i != g.pos_idx).collect();
        assert!(negs.iter().all(|(_, d)| !data.qrels.is_relevant(&g.query_id, d)));
        let distinct: HashSet<_> = g.doc_ids.iter().collect();
        assert_eq!(distinct.len(), 8);
    }
    let again = build_train_groups(&data.queries, &data.qrels, &data.store, &vocab, lens, 8, 1).unwrap();
    assert_eq!(groups, again);
}

#[test]
fn overlap_oracle_recovers_relevance() {
    let data = gen_synthetic(&SyntheticSpec {
        num_docs: 2000,
        num_queries: 250,
        vocab_size: 400,
        doc_len: 8,
        query_len: 4,
        seed: 0,
    })
    .unwrap();
    let docs: Vec<HashSet<&str>> = data.store.texts.iter().map(|t| t.split(' ').collect()).collect();
    let mut run = BTreeMap::new();
    let mut rel = BTreeMap::new();
    for (qid, text) in data.queries.iter() {
        let q: HashSet<&str> = text.split(' ').collect();
        let scores: Vec<f64> = docs.iter().map(|d| d.intersection(&q).count() as f64).collect();
        run.insert(qid.to_string(), oracle_top_k(&scores, &data.store.doc_ids, 10));
        rel.insert(qid.to_string(), data.qrels.relevant(qid).iter().cloned().collect::<HashSet<_>>());
        // relevant doc shares at least half the query tokens
        let pos = data.store.position(&data.qrels.relevant(qid)[0]).unwrap();
        assert!(2 * docs[pos].intersection(&q).count() >= q.len());
    }
    let mrr = oracle_mrr(&run, &rel, 10);
    assert!(mrr > 0.5, "overlap oracle MRR@10 {mrr}");
}

#[test]
fn perfect_run_scores_one() {
    let mut qrels = passage_distill::text::Qrels::default();
    let mut lists = Vec::new();
    for q in 0..4 {
        qrels.insert(&format!("Q{q}"), &format!("D{q}"));
        lists.push((format!("Q{q}"), vec![format!("D{q}"), "X".to_string()]));
    }
    let run = Run::from_doc_lists(lists).unwrap();
    for k in [1, 2, 10] {
        assert_eq!(mrr_at_k(&run, &qrels, k).unwrap(), 1.0);
        assert_eq!(recall_at_k(&run, &qrels, k).unwrap(), 1.0);
    }
}
