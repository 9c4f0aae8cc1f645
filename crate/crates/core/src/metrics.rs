//! Span and relation scoring.
//!
//! Predicted and gold annotations of one kind in one document are paired by
//! a greedy one-to-one alignment on character overlap F1. Everything else
//! (exact match, units, modifiers, relation triples) is read off that
//! alignment.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotationKind, Corpus, DocEntry, RelationKind, Span};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("prediction and gold document sets differ (missing: {missing:?}, unexpected: {unexpected:?})")]
    DocumentSetMismatch { missing: Vec<String>, unexpected: Vec<String> },
}

/// Character-overlap F1 between two spans.
pub fn overlap_f1(pred: Span, gold: Span) -> f64 {
    let inter = pred.intersection_len(&gold);
    if inter == 0 || pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let p = inter as f64 / pred.len() as f64;
    let r = inter as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// One aligned pair: indices into the prediction and gold slices plus their overlap F1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub pred: usize,
    pub gold: usize,
    pub f1: f64,
}

/// Greedy one-to-one matching by descending overlap F1; ties go to the
/// earlier gold start, then gold end, then earlier prediction.
pub fn align(preds: &[Span], golds: &[Span]) -> Vec<Pair> {
    let mut cands: Vec<Pair> = Vec::new();
    for (p, ps) in preds.iter().enumerate() {
        for (g, gs) in golds.iter().enumerate() {
            let f1 = overlap_f1(*ps, *gs);
            if f1 > 0.0 {
                cands.push(Pair { pred: p, gold: g, f1 });
            }
        }
    }
    cands.sort_by(|a, b| {
        b.f1.total_cmp(&a.f1)
            .then_with(|| golds[a.gold].start.cmp(&golds[b.gold].start))
            .then_with(|| golds[a.gold].end.cmp(&golds[b.gold].end))
            .then_with(|| preds[a.pred].start.cmp(&preds[b.pred].start))
            .then_with(|| preds[a.pred].end.cmp(&preds[b.pred].end))
            .then_with(|| a.gold.cmp(&b.gold))
            .then_with(|| a.pred.cmp(&b.pred))
    });
    let mut used_p = alloc::vec![false; preds.len()];
    let mut used_g = alloc::vec![false; golds.len()];
    let mut out = Vec::new();
    for c in cands {
        if !used_p[c.pred] && !used_g[c.gold] {
            used_p[c.pred] = true;
            used_g[c.gold] = true;
            out.push(c);
        }
    }
    out
}

/// Precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Nothing predicted and nothing to find scores 1; otherwise an empty
    /// denominator scores 0.
    pub fn from_counts(hits_p: f64, n_pred: usize, hits_r: f64, n_gold: usize) -> Self {
        if n_pred == 0 && n_gold == 0 {
            return Prf { precision: 1.0, recall: 1.0, f1: 1.0 };
        }
        let precision = if n_pred == 0 { 0.0 } else { hits_p / n_pred as f64 };
        let recall = if n_gold == 0 { 0.0 } else { hits_r / n_gold as f64 };
        Prf { precision, recall, f1: harmonic(precision, recall) }
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindScores {
    /// Binary scores: an aligned pair counts as one hit whatever its overlap.
    pub binary: Prf,
    /// Overlap scores: an aligned pair counts its overlap F1.
    pub overlap: Prf,
    pub exact_match: f64,
    pub predicted: usize,
    pub gold: usize,
    pub aligned: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubtaskScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub overlap_f1: f64,
}

impl SubtaskScores {
    fn from_prfs(binary: &[Prf], overlap: &[Prf]) -> Self {
        SubtaskScores {
            precision: mean(&binary.iter().map(|p| p.precision).collect::<Vec<_>>()),
            recall: mean(&binary.iter().map(|p| p.recall).collect::<Vec<_>>()),
            f1: mean(&binary.iter().map(|p| p.f1).collect::<Vec<_>>()),
            overlap_f1: mean(&overlap.iter().map(|p| p.f1).collect::<Vec<_>>()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub exact_match: f64,
    /// Mean over the five subtasks of their overlap F1, counts pooled over the corpus.
    pub overlap_f1: f64,
    /// The same quantity computed per document, then averaged over documents.
    pub document_macro_overlap_f1: f64,
}

/// Where the errors of a cascade come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorAttribution {
    pub quantities_missed: usize,
    pub quantities_spurious: usize,
    /// Aligned quantities whose unit string differs from gold.
    pub unit_errors: usize,
    /// Aligned quantities whose modifier set differs from gold.
    pub mods_errors: usize,
    /// Gold entities, properties and qualifiers left unaligned.
    pub relational_missed: usize,
    /// Of those, how many belong to an annotation set whose quantity was also missed.
    pub relational_missed_after_quantity_miss: usize,
    pub relational_spurious: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub documents: usize,
    pub kinds: BTreeMap<String, KindScores>,
    pub relations: BTreeMap<String, Prf>,
    pub units: Prf,
    pub unit_exact_match: f64,
    pub mods: Prf,
    pub subtasks: BTreeMap<String, SubtaskScores>,
    pub global: GlobalScores,
    pub attribution: ErrorAttribution,
}

pub const SUBTASKS: [&str; 5] = ["1_quantity", "2_units_mods", "3_entities_properties", "4_qualifiers", "5_relations"];

#[derive(Debug, Clone, Copy, Default)]
struct KindCounts {
    pred: usize,
    gold: usize,
    aligned: usize,
    overlap: f64,
    exact: usize,
}

impl KindCounts {
    fn add(&mut self, o: &KindCounts) {
        self.pred += o.pred;
        self.gold += o.gold;
        self.aligned += o.aligned;
        self.overlap += o.overlap;
        self.exact += o.exact;
    }

    fn scores(&self) -> KindScores {
        let exact_match = if self.gold == 0 {
            if self.pred == 0 { 1.0 } else { 0.0 }
        } else {
            self.exact as f64 / self.gold as f64
        };
        KindScores {
            binary: Prf::from_counts(self.aligned as f64, self.pred, self.aligned as f64, self.gold),
            overlap: Prf::from_counts(self.overlap, self.pred, self.overlap, self.gold),
            exact_match,
            predicted: self.pred,
            gold: self.gold,
            aligned: self.aligned,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts3 {
    tp: usize,
    pred: usize,
    gold: usize,
}

impl Counts3 {
    fn add(&mut self, o: &Counts3) {
        self.tp += o.tp;
        self.pred += o.pred;
        self.gold += o.gold;
    }

    fn prf(&self) -> Prf {
        Prf::from_counts(self.tp as f64, self.pred, self.tp as f64, self.gold)
    }
}

#[derive(Debug, Clone, Default)]
struct Tally {
    kinds: [KindCounts; 4],
    relations: [Counts3; 3],
    units: Counts3,
    unit_pairs: usize,
    unit_equal: usize,
    mods: Counts3,
    attribution: ErrorAttribution,
}

fn kind_index(k: AnnotationKind) -> usize {
    AnnotationKind::ALL.iter().position(|&x| x == k).unwrap_or(0)
}

fn relation_index(k: RelationKind) -> usize {
    match k {
        RelationKind::HasQuantity => 0,
        RelationKind::HasProperty => 1,
        RelationKind::Qualifies => 2,
    }
}

const RELATION_KINDS: [RelationKind; 3] = [RelationKind::HasQuantity, RelationKind::HasProperty, RelationKind::Qualifies];

impl Tally {
    fn add(&mut self, o: &Tally) {
        for (a, b) in self.kinds.iter_mut().zip(&o.kinds) {
            a.add(b);
        }
        for (a, b) in self.relations.iter_mut().zip(&o.relations) {
            a.add(b);
        }
        self.units.add(&o.units);
        self.unit_pairs += o.unit_pairs;
        self.unit_equal += o.unit_equal;
        self.mods.add(&o.mods);
        let (a, b) = (&mut self.attribution, &o.attribution);
        a.quantities_missed += b.quantities_missed;
        a.quantities_spurious += b.quantities_spurious;
        a.unit_errors += b.unit_errors;
        a.mods_errors += b.mods_errors;
        a.relational_missed += b.relational_missed;
        a.relational_missed_after_quantity_miss += b.relational_missed_after_quantity_miss;
        a.relational_spurious += b.relational_spurious;
    }

    fn document(pred: &DocEntry, gold: &DocEntry) -> Tally {
        let mut t = Tally::default();
        // pred annotation id -> gold annotation id
        let mut mapped: BTreeMap<&str, &str> = BTreeMap::new();
        let mut gold_aligned: BTreeSet<&str> = BTreeSet::new();
        for kind in AnnotationKind::ALL {
            let ps: Vec<_> = pred.annotations.iter().filter(|a| a.kind == kind).collect();
            let gs: Vec<_> = gold.annotations.iter().filter(|a| a.kind == kind).collect();
            let pairs = align(
                &ps.iter().map(|a| a.span).collect::<Vec<_>>(),
                &gs.iter().map(|a| a.span).collect::<Vec<_>>(),
            );
            let c = &mut t.kinds[kind_index(kind)];
            c.pred = ps.len();
            c.gold = gs.len();
            c.aligned = pairs.len();
            for pair in &pairs {
                let (pa, ga) = (ps[pair.pred], gs[pair.gold]);
                c.overlap += pair.f1;
                if pa.span == ga.span {
                    c.exact += 1;
                }
                mapped.insert(pa.annot_id.as_str(), ga.annot_id.as_str());
                gold_aligned.insert(ga.annot_id.as_str());
                if kind == AnnotationKind::Quantity {
                    let pu = pa.payload.as_ref().and_then(|d| d.unit.as_deref());
                    let gu = ga.payload.as_ref().and_then(|d| d.unit.as_deref());
                    t.unit_pairs += 1;
                    if pu == gu {
                        t.unit_equal += 1;
                    } else {
                        t.attribution.unit_errors += 1;
                    }
                    t.units.pred += pu.is_some() as usize;
                    t.units.gold += gu.is_some() as usize;
                    t.units.tp += (pu.is_some() && pu == gu) as usize;
                    let pm: BTreeSet<&str> =
                        pa.payload.iter().flat_map(|d| d.mods.iter().map(|s| s.as_str())).collect();
                    let gm: BTreeSet<&str> =
                        ga.payload.iter().flat_map(|d| d.mods.iter().map(|s| s.as_str())).collect();
                    t.mods.pred += pm.len();
                    t.mods.gold += gm.len();
                    t.mods.tp += pm.intersection(&gm).count();
                    if pm != gm {
                        t.attribution.mods_errors += 1;
                    }
                }
            }
            if kind == AnnotationKind::Quantity {
                t.attribution.quantities_missed += gs.len() - pairs.len();
                t.attribution.quantities_spurious += ps.len() - pairs.len();
            } else {
                t.attribution.relational_spurious += ps.len() - pairs.len();
            }
        }

        let missed_sets: BTreeSet<u32> = gold
            .annotations
            .iter()
            .filter(|a| a.kind == AnnotationKind::Quantity && !gold_aligned.contains(a.annot_id.as_str()))
            .map(|a| a.annot_set)
            .collect();
        for a in &gold.annotations {
            if a.kind != AnnotationKind::Quantity && !gold_aligned.contains(a.annot_id.as_str()) {
                t.attribution.relational_missed += 1;
                if missed_sets.contains(&a.annot_set) {
                    t.attribution.relational_missed_after_quantity_miss += 1;
                }
            }
        }

        let gold_triples: BTreeSet<(usize, &str, &str)> = gold
            .relations
            .iter()
            .map(|r| (relation_index(r.kind), r.source.as_str(), r.target.as_str()))
            .collect();
        let mut hit: BTreeSet<(usize, &str, &str)> = BTreeSet::new();
        for r in &pred.relations {
            let k = relation_index(r.kind);
            t.relations[k].pred += 1;
            if let (Some(&s), Some(&g)) = (mapped.get(r.source.as_str()), mapped.get(r.target.as_str())) {
                let key = (k, s, g);
                if gold_triples.contains(&key) && hit.insert(key) {
                    t.relations[k].tp += 1;
                }
            }
        }
        for (k, _, _) in &gold_triples {
            t.relations[*k].gold += 1;
        }
        t
    }

    fn relation_total(&self) -> Counts3 {
        let mut all = Counts3::default();
        for r in &self.relations {
            all.add(r);
        }
        all
    }

    fn subtasks(&self) -> [SubtaskScores; 5] {
        let k = |kind| self.kinds[kind_index(kind)].scores();
        let q = k(AnnotationKind::Quantity);
        let me = k(AnnotationKind::MeasuredEntity);
        let mp = k(AnnotationKind::MeasuredProperty);
        let ql = k(AnnotationKind::Qualifier);
        let (u, m) = (self.units.prf(), self.mods.prf());
        let rel = self.relation_total().prf();
        [
            SubtaskScores::from_prfs(&[q.binary], &[q.overlap]),
            SubtaskScores::from_prfs(&[u, m], &[u, m]),
            SubtaskScores::from_prfs(&[me.binary, mp.binary], &[me.overlap, mp.overlap]),
            SubtaskScores::from_prfs(&[ql.binary], &[ql.overlap]),
            SubtaskScores::from_prfs(&[rel], &[rel]),
        ]
    }

    fn global_overlap_f1(&self) -> f64 {
        mean(&self.subtasks().iter().map(|s| s.overlap_f1).collect::<Vec<_>>())
    }
}

/// Score a predicted corpus against gold. Both must cover the same documents.
pub fn score_corpus(pred: &Corpus, gold: &Corpus) -> Result<MatchReport, MetricsError> {
    let (p_ids, g_ids) = (pred.doc_ids(), gold.doc_ids());
    if p_ids != g_ids {
        return Err(MetricsError::DocumentSetMismatch {
            missing: g_ids.difference(&p_ids).map(|s| s.to_string()).collect(),
            unexpected: p_ids.difference(&g_ids).map(|s| s.to_string()).collect(),
        });
    }
    let mut total = Tally::default();
    let mut per_doc = Vec::with_capacity(gold.len());
    for g in &gold.docs {
        let p = pred.get(&g.doc.doc_id).expect("document sets checked");
        let t = Tally::document(p, g);
        per_doc.push(t.global_overlap_f1());
        total.add(&t);
    }

    let mut kinds = BTreeMap::new();
    for kind in AnnotationKind::ALL {
        kinds.insert(kind.as_str().to_string(), total.kinds[kind_index(kind)].scores());
    }
    let mut relations = BTreeMap::new();
    for k in RELATION_KINDS {
        relations.insert(k.as_str().to_string(), total.relations[relation_index(k)].prf());
    }
    relations.insert("all".to_string(), total.relation_total().prf());
    let subs = total.subtasks();
    let subtasks: BTreeMap<String, SubtaskScores> =
        SUBTASKS.iter().zip(subs.iter()).map(|(n, s)| (n.to_string(), *s)).collect();
    let span_em: Vec<f64> = AnnotationKind::ALL.iter().map(|&k| total.kinds[kind_index(k)].scores().exact_match).collect();
    let global = GlobalScores {
        precision: mean(&subs.iter().map(|s| s.precision).collect::<Vec<_>>()),
        recall: mean(&subs.iter().map(|s| s.recall).collect::<Vec<_>>()),
        f1: mean(&subs.iter().map(|s| s.f1).collect::<Vec<_>>()),
        exact_match: mean(&span_em),
        overlap_f1: total.global_overlap_f1(),
        document_macro_overlap_f1: if per_doc.is_empty() { 1.0 } else { mean(&per_doc) },
    };
    let unit_exact_match = if total.unit_pairs == 0 { 1.0 } else { total.unit_equal as f64 / total.unit_pairs as f64 };
    Ok(MatchReport {
        documents: gold.len(),
        kinds,
        relations,
        units: total.units.prf(),
        unit_exact_match,
        mods: total.mods.prf(),
        subtasks,
        global,
        attribution: total.attribution,
    })
}

/// Overlap F1 of one annotation kind, counts pooled over the corpus.
pub fn kind_overlap_f1(pred: &Corpus, gold: &Corpus, kind: AnnotationKind) -> Result<f64, MetricsError> {
    Ok(score_corpus(pred, gold)?.kinds[kind.as_str()].overlap.f1)
}

/// Overlap P/R/F1 of span lists, counts pooled over all `(pred, gold)` groups.
pub fn pooled_overlap<'a, I>(groups: I) -> Prf
where
    I: IntoIterator<Item = (&'a [Span], &'a [Span])>,
{
    let (mut sum, mut np, mut ng) = (0.0, 0usize, 0usize);
    for (p, g) in groups {
        sum += align(p, g).iter().map(|x| x.f1).sum::<f64>();
        np += p.len();
        ng += g.len();
    }
    Prf::from_counts(sum, np, sum, ng)
}

/// Micro-averaged P/R/F1 over label sets.
pub fn multilabel_micro(preds: &[BTreeSet<String>], golds: &[BTreeSet<String>]) -> Prf {
    let mut c = Counts3::default();
    for (p, g) in preds.iter().zip(golds) {
        c.pred += p.len();
        c.gold += g.len();
        c.tp += p.intersection(g).count();
    }
    c.prf()
}

impl MatchReport {
    /// Fixed-width text table.
    pub fn table(&self) -> String {
        use core::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "{:<26}{:>10}{:>10}{:>10}{:>12}", "subtask", "precision", "recall", "f1", "overlap_f1");
        for (name, sc) in &self.subtasks {
            let _ = writeln!(
                s,
                "{:<26}{:>10.4}{:>10.4}{:>10.4}{:>12.4}",
                name, sc.precision, sc.recall, sc.f1, sc.overlap_f1
            );
        }
        let g = &self.global;
        let _ = writeln!(s, "{:<26}{:>10.4}{:>10.4}{:>10.4}{:>12.4}", "global", g.precision, g.recall, g.f1, g.overlap_f1);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<26}{:>10}{:>10}{:>10}{:>12}", "kind", "pred", "gold", "em", "overlap_f1");
        for (name, k) in &self.kinds {
            let _ = writeln!(s, "{:<26}{:>10}{:>10}{:>10.4}{:>12.4}", name, k.predicted, k.gold, k.exact_match, k.overlap.f1);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "exact match {:.4}  document-macro overlap f1 {:.4}", g.exact_match, g.document_macro_overlap_f1);
        let a = &self.attribution;
        let _ = writeln!(s);
        let _ = writeln!(s, "errors");
        for (name, n) in [
            ("quantities missed", a.quantities_missed),
            ("quantities spurious", a.quantities_spurious),
            ("unit errors", a.unit_errors),
            ("mods errors", a.mods_errors),
            ("relational missed", a.relational_missed),
            ("  after quantity miss", a.relational_missed_after_quantity_miss),
            ("relational spurious", a.relational_spurious),
        ] {
            let _ = writeln!(s, "  {name:<24}{n:>10}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(a: usize, b: usize) -> Span {
        Span { start: a, end: b }
    }

    #[test]
    fn overlap_cases() {
        assert_eq!(overlap_f1(sp(0, 10), sp(5, 15)), 0.5);
        assert_eq!(overlap_f1(sp(3, 9), sp(3, 9)), 1.0);
        assert_eq!(overlap_f1(sp(0, 2), sp(10, 12)), 0.0);
    }

    #[test]
    fn greedy_alignment_prefers_higher_overlap() {
        // pred [4,10) vs gold [0,6): inter 2 -> f1 1/3; vs gold [5,11): inter 5 -> f1 5/6
        let pairs = align(&[sp(4, 10)], &[sp(0, 6), sp(5, 11)]);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].gold, 1);
        // equal overlap: earlier gold start wins
        let pairs = align(&[sp(2, 4)], &[sp(3, 5), sp(1, 3)]);
        assert_eq!(pairs[0].gold, 1);
        assert!(align(&[], &[sp(0, 1)]).is_empty());
    }

    #[test]
    fn empty_conventions() {
        assert_eq!(Prf::from_counts(0.0, 0, 0.0, 3), Prf { precision: 0.0, recall: 0.0, f1: 0.0 });
        assert_eq!(Prf::from_counts(0.0, 0, 0.0, 0).f1, 1.0);
    }
}
