mod common;

use measx_core::corpus::{AnnotationKind, Corpus, Span};
use measx_core::metrics::{align, overlap_f1, score_corpus, MetricsError};
use measx_core::synthgen::{generate, GrammarSpec};
use proptest::prelude::*;

#[test]
fn overlap_fixtures() {
    assert_eq!(overlap_f1(Span::new(0, 10), Span::new(5, 15)), 0.5);
    assert_eq!(overlap_f1(Span::new(4, 9), Span::new(4, 9)), 1.0);
    assert_eq!(overlap_f1(Span::new(0, 2), Span::new(10, 12)), 0.0);
}

#[test]
fn three_document_fixture() {
    let (pred, gold) = common::metrics_fixture();
    let r = score_corpus(&pred, &gold).unwrap();
    let err = common::fixture_max_error(&r);
    assert!(err < 1e-12, "max deviation {err}\n{}", r.table());
}

#[test]
fn identical_corpora_score_one() {
    let (gold, _) = generate(&GrammarSpec { seed: 3, ..Default::default() }, 25).unwrap();
    let r = score_corpus(&gold, &gold).unwrap();
    let ones = |p: &measx_core::metrics::Prf| [p.precision, p.recall, p.f1];
    let mut all: Vec<f64> = Vec::new();
    for k in r.kinds.values() {
        all.extend(ones(&k.binary));
        all.extend(ones(&k.overlap));
        all.push(k.exact_match);
    }
    r.relations.values().for_each(|p| all.extend(ones(p)));
    all.extend(ones(&r.units));
    all.extend(ones(&r.mods));
    all.push(r.unit_exact_match);
    for s in r.subtasks.values() {
        all.extend([s.precision, s.recall, s.f1, s.overlap_f1]);
    }
    let g = &r.global;
    all.extend([g.precision, g.recall, g.f1, g.exact_match, g.overlap_f1, g.document_macro_overlap_f1]);
    assert!(all.iter().all(|&v| v == 1.0), "{}", r.table());
    assert_eq!(r.attribution, Default::default());
}

#[test]
fn empty_predictions_score_zero() {
    let (gold, _) = generate(&GrammarSpec { seed: 4, ..Default::default() }, 5).unwrap();
    let empty = Corpus::new(gold.docs.iter().map(|d| measx_core::DocEntry::new(d.doc.clone())).collect());
    let r = score_corpus(&empty, &gold).unwrap();
    let q = &r.kinds["Quantity"];
    assert_eq!((q.binary.precision, q.binary.recall), (0.0, 0.0));
    assert_eq!(r.attribution.quantities_missed, gold.count(AnnotationKind::Quantity));
}

#[test]
fn document_sets_must_match() {
    let (gold, _) = generate(&GrammarSpec::default(), 3).unwrap();
    let fewer = Corpus::new(gold.docs[..2].to_vec());
    assert!(matches!(score_corpus(&fewer, &gold), Err(MetricsError::DocumentSetMismatch { .. })));
}

#[test]
fn one_prediction_two_golds_takes_larger_overlap() {
    // [3,9) meets [0,5) in 2 chars (F1 0.4) and [6,12) in 3 chars (F1 0.5)
    let pairs = align(&[Span::new(3, 9)], &[Span::new(0, 5), Span::new(6, 12)]);
    assert_eq!((pairs.len(), pairs[0].gold), (1, 1));
    assert!((pairs[0].f1 - 0.5).abs() < 1e-15);
}

fn span() -> impl Strategy<Value = Span> {
    (0usize..40, 1usize..15).prop_map(|(s, l)| Span::new(s, s + l))
}

proptest! {
    #[test]
    fn overlap_symmetric_and_bounded(a in span(), b in span()) {
        let f = overlap_f1(a, b);
        prop_assert_eq!(f, overlap_f1(b, a));
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn sliding_toward_gold_never_hurts(len_p in 1usize..12, len_g in 1usize..12, gap in 0usize..20) {
        let gold = Span::new(30, 30 + len_g);
        let far = Span::new(30 + gap + 1, 30 + gap + 1 + len_p);
        let near = Span::new(30 + gap, 30 + gap + len_p);
        prop_assert!(overlap_f1(near, gold) >= overlap_f1(far, gold));
    }

    #[test]
    fn scores_ignore_document_and_annotation_order(seed in 0u64..200) {
        let (gold, _) = generate(&GrammarSpec { seed: 11, ..Default::default() }, 4).unwrap();
        let (mut pred, _) = generate(&GrammarSpec { seed: 11, ..Default::default() }, 4).unwrap();
        for d in &mut pred.docs {
            d.annotations.retain(|a| (a.span.start as u64 + seed) % 3 != 0);
            let keep: std::collections::BTreeSet<String> = d.annotations.iter().map(|a| a.annot_id.clone()).collect();
            d.relations.retain(|r| keep.contains(&r.source) && keep.contains(&r.target));
        }
        let base = score_corpus(&pred, &gold).unwrap();
        let mut shuffled = pred.clone();
        for d in &mut shuffled.docs {
            d.annotations.reverse();
            d.relations.reverse();
        }
        shuffled.docs.reverse();
        let again = score_corpus(&shuffled, &gold).unwrap();
        prop_assert_eq!(&base, &again);
        for k in base.kinds.values() {
            prop_assert!(k.exact_match <= k.overlap.recall + 1e-12);
        }
    }
}
