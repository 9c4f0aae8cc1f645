//! Independent reference implementations for integration and acceptance tests.
#![allow(dead_code)]

use measx_core::corpus::{Annotation, AnnotationKind, Corpus, DocEntry, Document, QuantityDetail, Relation, RelationKind, Span};
use measx_core::crf::CrfTables;
use measx_core::math::Mat;
use measx_core::netcore::Rng;
use rand::Rng as _;

/// Score of one tag path, written out position by position.
pub fn crf_score(t: &CrfTables, l: &Mat, y: &[usize]) -> f64 {
    let k = t.num_tags;
    let mut s = t.w_start[y[0]] * l.get(0, y[0]) + t.start[y[0]];
    for i in 1..y.len() {
        let idx = y[i - 1] * k + y[i];
        s += t.w_trans[idx] * l.get(i, y[i]) + t.b_trans[idx];
    }
    s + t.end[y[y.len() - 1]]
}

/// Every length-`n` sequence over `k` tags, in lexicographic order.
pub fn all_sequences(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                (0..k).map(move |t| {
                    let mut q = p.clone();
                    q.push(t);
                    q
                })
            })
            .collect();
    }
    out
}

/// Log-sum-exp computed in the most direct stable way.
pub fn brute_log_z(scores: &[f64]) -> f64 {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

pub fn random_tables(r: &mut Rng, k: usize) -> CrfTables {
    let mut v = |m: usize| (0..m).map(|_| r.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
    CrfTables { num_tags: k, w_trans: v(k * k), b_trans: v(k * k), w_start: v(k), start: v(k), end: v(k) }
}

pub fn random_logits(r: &mut Rng, n: usize, k: usize) -> Mat {
    Mat::from_vec(n, k, (0..n * k).map(|_| r.gen_range(-3.0..3.0)).collect())
}

/// Best `(i, j, start[i] + end[j])` by scanning every pair; first maximum in (i, j) order wins.
pub fn exhaustive_best_span(start: &[f64], end: &[f64], lo: usize, hi: usize, max_len: usize) -> Option<(usize, usize, f64)> {
    let mut all = Vec::new();
    for i in lo..hi {
        for j in i..hi {
            if j - i + 1 <= max_len {
                all.push((i, j, start[i] + end[j]));
            }
        }
    }
    let best = all.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
    all.into_iter().find(|c| c.2 == best)
}

fn ann(id: &str, set: u32, kind: AnnotationKind, start: usize, end: usize, unit: Option<&str>, mods: &[&str]) -> Annotation {
    let mut a = Annotation::new(id, set, kind, Span::new(start, end), "x".repeat(end - start));
    if kind == AnnotationKind::Quantity {
        a.payload = Some(QuantityDetail { unit: unit.map(String::from), mods: mods.iter().map(|s| s.to_string()).collect() });
    }
    a
}

fn rel(kind: RelationKind, s: &str, t: &str) -> Relation {
    Relation { kind, source: s.into(), target: t.into() }
}

fn entry(id: &str, annotations: Vec<Annotation>, relations: Vec<Relation>) -> DocEntry {
    DocEntry { doc: Document::new(id, "x".repeat(60)), annotations, relations }
}

/// Three small documents: a half-overlapping quantity with an extra modifier,
/// a missed qualifier with two missed relations, and a fully missed quantity
/// next to a spurious qualifier.
pub fn metrics_fixture() -> (Corpus, Corpus) {
    use AnnotationKind::*;
    use RelationKind::*;
    let gold = Corpus::new(vec![
        entry(
            "a",
            vec![ann("Q1", 1, Quantity, 0, 10, Some("kg"), &["IsApproximate"]), ann("E1", 1, MeasuredEntity, 20, 30, None, &[])],
            vec![rel(HasQuantity, "E1", "Q1")],
        ),
        entry(
            "b",
            vec![
                ann("Q2", 1, Quantity, 0, 8, None, &["IsCount"]),
                ann("P2", 1, MeasuredProperty, 10, 15, None, &[]),
                ann("E2", 1, MeasuredEntity, 20, 25, None, &[]),
                ann("L2", 1, Qualifier, 30, 35, None, &[]),
            ],
            vec![rel(HasQuantity, "P2", "Q2"), rel(HasProperty, "E2", "P2"), rel(Qualifies, "L2", "Q2")],
        ),
        entry(
            "c",
            vec![ann("Q3", 1, Quantity, 0, 5, Some("m"), &[]), ann("E3", 1, MeasuredEntity, 10, 14, None, &[])],
            vec![rel(HasQuantity, "E3", "Q3")],
        ),
    ]);
    let pred = Corpus::new(vec![
        entry(
            "a",
            vec![
                ann("a-T1", 1, Quantity, 5, 15, Some("kg"), &["IsApproximate", "IsRange"]),
                ann("a-T2", 1, MeasuredEntity, 20, 30, None, &[]),
            ],
            vec![rel(HasQuantity, "a-T2", "a-T1")],
        ),
        entry(
            "b",
            vec![
                ann("b-T1", 1, Quantity, 0, 8, None, &["IsCount"]),
                ann("b-T2", 1, MeasuredProperty, 10, 15, None, &[]),
                ann("b-T3", 1, MeasuredEntity, 20, 25, None, &[]),
            ],
            vec![rel(HasQuantity, "b-T2", "b-T1")],
        ),
        entry("c", vec![ann("c-T1", 1, Qualifier, 40, 45, None, &[])], vec![]),
    ]);
    (pred, gold)
}

/// Report values for [`metrics_fixture`], worked out by hand.
///
/// Quantity: 2 predicted, 3 gold, 2 aligned with overlaps 0.5 and 1, one exact.
///   binary P 1, R 2/3, F1 0.8; overlap P 0.75, R 0.5, F1 0.6; EM 1/3.
/// Entity: 2 / 3 / 2 aligned, both exact: P 1, R 2/3, F1 0.8; EM 2/3.
/// Property: 1 / 1 / 1: all 1.  Qualifier: 1 / 1 / 0 aligned: all 0.
/// Units over aligned quantities: kg=kg and none=none; P=R=F1=1, unit EM 1.
/// Mods: predicted 3, gold 2, shared 2: P 2/3, R 1, F1 0.8.
/// Relations: HasQuantity 2 of 2 predicted correct, 3 gold: P 1, R 2/3, F1 0.8;
///   HasProperty and Qualifies 0 predicted, 1 gold each: 0; all: 2/2 vs 5 gold: F1 4/7.
/// Subtasks (P, R, F1, overlap F1):
///   1 (1, 2/3, 0.8, 0.6); 2 (5/6, 1, 0.9, 0.9); 3 (1, 5/6, 0.9, 0.9); 4 (0, 0, 0, 0);
///   5 (1, 0.4, 4/7, 4/7).
/// Global: P 23/30, R 0.58, F1 22.2/35, overlap 20.8/35, EM mean(1/3, 2/3, 1, 0) = 0.5.
/// Per-document overlap: a 13/15, b 0.7, c 0.3, macro 28/45.
pub struct FixtureExpectation;

impl FixtureExpectation {
    pub const SUBTASKS: [(&'static str, [f64; 4]); 5] = [
        ("1_quantity", [1.0, 2.0 / 3.0, 0.8, 0.6]),
        ("2_units_mods", [5.0 / 6.0, 1.0, 0.9, 0.9]),
        ("3_entities_properties", [1.0, 5.0 / 6.0, 0.9, 0.9]),
        ("4_qualifiers", [0.0, 0.0, 0.0, 0.0]),
        ("5_relations", [1.0, 0.4, 4.0 / 7.0, 4.0 / 7.0]),
    ];
    pub const GLOBAL: [f64; 6] = [23.0 / 30.0, 0.58, 22.2 / 35.0, 0.5, 20.8 / 35.0, 28.0 / 45.0];
}

/// Every number in the fixture report against the hand-computed values; returns the largest deviation.
pub fn fixture_max_error(r: &measx_core::metrics::MatchReport) -> f64 {
    let mut worst: f64 = 0.0;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());
    for (name, [p, rc, f, o]) in FixtureExpectation::SUBTASKS {
        let s = &r.subtasks[name];
        check(s.precision, p);
        check(s.recall, rc);
        check(s.f1, f);
        check(s.overlap_f1, o);
    }
    let g = &r.global;
    for (got, want) in [g.precision, g.recall, g.f1, g.exact_match, g.overlap_f1, g.document_macro_overlap_f1]
        .into_iter()
        .zip(FixtureExpectation::GLOBAL)
    {
        check(got, want);
    }
    let q = &r.kinds["Quantity"];
    check(q.overlap.precision, 0.75);
    check(q.overlap.recall, 0.5);
    check(q.overlap.f1, 0.6);
    check(q.exact_match, 1.0 / 3.0);
    check(r.kinds["MeasuredEntity"].exact_match, 2.0 / 3.0);
    check(r.kinds["MeasuredProperty"].overlap.f1, 1.0);
    check(r.kinds["Qualifier"].overlap.f1, 0.0);
    check(r.units.f1, 1.0);
    check(r.unit_exact_match, 1.0);
    check(r.mods.precision, 2.0 / 3.0);
    check(r.mods.f1, 0.8);
    check(r.relations["HasQuantity"].recall, 2.0 / 3.0);
    check(r.relations["HasProperty"].f1, 0.0);
    check(r.relations["all"].f1, 4.0 / 7.0);
    let a = &r.attribution;
    let counts = [
        a.quantities_missed,
        a.quantities_spurious,
        a.unit_errors,
        a.mods_errors,
        a.relational_missed,
        a.relational_missed_after_quantity_miss,
        a.relational_spurious,
    ];
    if counts != [1, 0, 0, 1, 2, 1, 1] {
        worst = f64::INFINITY;
    }
    worst
}
