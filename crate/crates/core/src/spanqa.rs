//! Measured entities, properties and qualifiers by templated extractive QA.
//!
//! A question is prepended to the passage as
//! `<null> <q> question... <sep> passage...`. Every position gets a start
//! score `T_i . S` and an end score `T_i . E`; the null score is the start
//! plus end score of position 0. The answer is the best passage span unless
//! the question may be declined and `s_null + tau` beats it.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    self, annot_id_for, Annotation, AnnotationKind, Corpus, CorpusError, DocEntry, Document, QuantityDetail,
    Relation, RelationKind, Span, Token,
};
use crate::encoder::{build_vocabs, Encoder, EncoderConfig, EncoderError, EncoderInput, EncoderKind, EncoderTrace, Summary};
use crate::math::{self, Mat};
use crate::metrics::{overlap_f1, pooled_overlap, Prf};
use crate::netcore::{rng, softmax_cross_entropy, Gradients, Init, NetError, ParamId, ParamStore};
use crate::training::{fit, EpochLog, TrainOptions};
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QaError {
    #[error("template {template} takes {expected} argument(s), got {found}")]
    ArityMismatch { template: usize, expected: usize, found: usize },
    #[error("unknown question template {0}")]
    UnknownTemplate(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("development set is empty")]
    EmptyDevSet,
    #[error("relation graph invariant violated: {0}")]
    GraphInvariant(String),
    #[error("span QA needs the trainable encoder")]
    UnsupportedEncoder,
    #[error("invalid training options: {0}")]
    InvalidOptions(&'static str),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuestionTemplate {
    pub id: usize,
    pub relation: RelationKind,
    pub pattern: &'static str,
    /// Kinds filling the `___` slots, in order.
    pub slots: &'static [AnnotationKind],
    /// Kind of the annotation the answer becomes.
    pub answer: AnnotationKind,
    pub answer_required: bool,
}

use AnnotationKind::{MeasuredEntity as ME, MeasuredProperty as MP, Quantity as QT, Qualifier as QL};

pub const TEMPLATES: [QuestionTemplate; 6] = [
    QuestionTemplate {
        id: 1,
        relation: RelationKind::HasQuantity,
        pattern: "What is the measured property of the quantity ___?",
        slots: &[QT],
        answer: MP,
        answer_required: false,
    },
    QuestionTemplate {
        id: 2,
        relation: RelationKind::HasProperty,
        pattern: "What is the measured entity that has the measured property ___ of the quantity ___?",
        slots: &[MP, QT],
        answer: ME,
        answer_required: true,
    },
    QuestionTemplate {
        id: 3,
        relation: RelationKind::HasQuantity,
        pattern: "What is the measured entity that has the quantity ___?",
        slots: &[QT],
        answer: ME,
        answer_required: true,
    },
    QuestionTemplate {
        id: 4,
        relation: RelationKind::Qualifies,
        pattern: "What is the qualifier corresponding to the quantity ___?",
        slots: &[QT],
        answer: QL,
        answer_required: false,
    },
    QuestionTemplate {
        id: 5,
        relation: RelationKind::Qualifies,
        pattern: "What is the qualifier corresponding to the measured entity ___?",
        slots: &[ME],
        answer: QL,
        answer_required: false,
    },
    QuestionTemplate {
        id: 6,
        relation: RelationKind::Qualifies,
        pattern: "What is the qualifier corresponding to the measured property ___?",
        slots: &[MP],
        answer: QL,
        answer_required: false,
    },
];

pub fn template(id: usize) -> Result<&'static QuestionTemplate, QaError> {
    TEMPLATES.get(id.wrapping_sub(1)).ok_or(QaError::UnknownTemplate(id))
}

/// Replace the `___` slots of template `id` with `args`, in order.
pub fn fill_template(id: usize, args: &[&str]) -> Result<String, QaError> {
    let t = template(id)?;
    if args.len() != t.slots.len() || args.iter().any(|a| a.is_empty()) {
        return Err(QaError::ArityMismatch { template: id, expected: t.slots.len(), found: args.len() });
    }
    let mut out = String::new();
    let mut rest = t.pattern;
    for a in args {
        let at = rest.find("___").expect("slot count matches pattern");
        out.push_str(&rest[..at]);
        out.push_str(a);
        rest = &rest[at + 3..];
    }
    out.push_str(rest);
    Ok(out)
}

pub const NULL_TOKEN: &str = "<null>";
pub const QUESTION_TOKEN: &str = "<q>";
pub const SEP_TOKEN: &str = "<sep>";
pub const DEFAULT_MAX_ANSWER_LEN: usize = 30;
/// Slot-match flags for up to two slots, plus a passage-segment flag.
const EXTRA_FEATURES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QaConfig {
    pub encoder: EncoderConfig,
    pub max_answer_len: usize,
    pub max_len: usize,
    /// Threshold added to the null score.
    pub tau: f64,
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig {
            encoder: EncoderConfig::default(),
            max_answer_len: DEFAULT_MAX_ANSWER_LEN,
            max_len: corpus::DEFAULT_MAX_LEN,
            tau: 0.0,
        }
    }
}

/// Start/end scores for every position of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanScores {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub start_log_probs: Vec<f64>,
    pub end_log_probs: Vec<f64>,
    pub s_null: f64,
}

/// `T_i . S`, `T_i . E`, their log-softmaxes, and the null score of position 0.
pub fn score_spans(t: &Mat, s: &[f64], e: &[f64]) -> Result<SpanScores, QaError> {
    if s.len() != t.cols || e.len() != t.cols {
        return Err(QaError::DimensionMismatch { expected: t.cols, found: s.len().min(e.len()) });
    }
    if t.rows == 0 {
        return Err(NetError::EmptySequence.into());
    }
    let start: Vec<f64> = (0..t.rows).map(|i| math::dot(t.row(i), s)).collect();
    let end: Vec<f64> = (0..t.rows).map(|i| math::dot(t.row(i), e)).collect();
    Ok(SpanScores {
        start_log_probs: math::log_softmax(&start),
        end_log_probs: math::log_softmax(&end),
        s_null: start[0] + end[0],
        start,
        end,
    })
}

/// Highest `start[i] + end[j]` over `i <= j < i + max_len` inside `passage`;
/// ties go to the smaller `i`, then the smaller `j`.
pub fn best_candidate(start: &[f64], end: &[f64], passage: Range<usize>, max_len: usize) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for i in passage.clone() {
        let stop = passage.end.min(i.saturating_add(max_len.max(1)));
        for j in i..stop {
            let v = start[i] + end[j];
            if best.map_or(true, |(_, _, b)| v > b) {
                best = Some((i, j, v));
            }
        }
    }
    best
}

/// Best passage span, or `None` when declining is allowed and `s_null + tau` is higher.
pub fn best_span(
    start: &[f64],
    end: &[f64],
    passage: Range<usize>,
    s_null: f64,
    tau: f64,
    answer_required: bool,
    max_len: usize,
) -> Option<(usize, usize)> {
    let (i, j, v) = best_candidate(start, end, passage, max_len)?;
    if !answer_required && s_null + tau > v {
        None
    } else {
        Some((i, j))
    }
}

/// One question over one passage, ready for the encoder.
#[derive(Debug, Clone)]
pub struct QaInstance {
    pub template: usize,
    pub question: String,
    pub surfaces: Vec<String>,
    pub extra: Mat,
    pub summary: Summary,
    pub passage: Range<usize>,
    /// Passage tokens that made it into the sequence, with document offsets.
    pub passage_tokens: Vec<Token>,
    pub truncated: bool,
    /// Answer as inclusive sequence positions; `None` trains toward position 0.
    pub answer: Option<(usize, usize)>,
    pub answer_required: bool,
}

impl QaInstance {
    /// Build the sequence for `question` about `args` over the tokenised document.
    pub fn new(template_id: usize, args: &[&str], doc_tokens: &[Token], max_len: usize) -> Result<Self, QaError> {
        let t = template(template_id)?;
        let question = fill_template(template_id, args)?;
        let q_tokens = corpus::tokenize_str(&question);
        let p0 = 3 + q_tokens.len();
        let room = max_len.saturating_sub(p0).max(1);
        let passage_tokens: Vec<Token> = doc_tokens.iter().take(room).cloned().collect();
        let truncated = doc_tokens.len() > passage_tokens.len();
        let mut surfaces = Vec::with_capacity(p0 + passage_tokens.len());
        surfaces.push(NULL_TOKEN.to_string());
        surfaces.push(QUESTION_TOKEN.to_string());
        surfaces.extend(q_tokens.iter().map(|t| t.surface.clone()));
        surfaces.push(SEP_TOKEN.to_string());
        surfaces.extend(passage_tokens.iter().map(|t| t.surface.clone()));
        let n = surfaces.len();
        let mut extra = Mat::zeros(n, EXTRA_FEATURES);
        for i in p0..n {
            extra.set(i, 2, 1.0);
        }
        for (k, a) in args.iter().enumerate().take(2) {
            let needle: Vec<String> = corpus::tokenize_str(a).into_iter().map(|t| t.surface).collect();
            if needle.is_empty() || needle.len() > passage_tokens.len() {
                continue;
            }
            for s in 0..=passage_tokens.len() - needle.len() {
                if passage_tokens[s..s + needle.len()].iter().zip(&needle).all(|(t, w)| &t.surface == w) {
                    for i in s..s + needle.len() {
                        extra.set(p0 + i, k, 1.0);
                    }
                }
            }
        }
        Ok(QaInstance {
            template: template_id,
            question,
            surfaces,
            extra,
            summary: Summary { source: 2..p0 - 1, targets: 0..n },
            passage: p0..n,
            passage_tokens,
            truncated,
            answer: None,
            answer_required: t.answer_required,
        })
    }

    /// Point the training target at a character span of the document.
    /// Returns false when the span lies outside the kept passage.
    pub fn set_answer(&mut self, span: Span) -> bool {
        match corpus::char_span_to_tokens(&self.passage_tokens, span) {
            Some((a, b)) if self.passage_tokens[b].span.end >= span.end => {
                self.answer = Some((self.passage.start + a, self.passage.start + b));
                true
            }
            _ => false,
        }
    }

    /// Character span in the document of sequence positions `i..=j`.
    pub fn char_span(&self, i: usize, j: usize) -> Span {
        let p0 = self.passage.start;
        Span { start: self.passage_tokens[i - p0].span.start, end: self.passage_tokens[j - p0].span.end }
    }

    fn input(&self) -> EncoderInput<'_> {
        EncoderInput {
            surfaces: &self.surfaces,
            precomputed: None,
            extra: Some(&self.extra),
            summary: Some(self.summary.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaSpec {
    pub config: QaConfig,
    pub words: Vocab,
    pub chars: Vocab,
}

#[derive(Debug, Clone)]
pub struct QaModel {
    pub config: QaConfig,
    pub encoder: Encoder,
    pub store: ParamStore,
    s: ParamId,
    e: ParamId,
}

/// What one question produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub span: Option<Span>,
    pub best_sum: f64,
    pub s_null: f64,
    /// Best candidate even when declined.
    pub candidate: Option<Span>,
}

impl Answer {
    pub fn gap(&self) -> f64 {
        self.best_sum - self.s_null
    }
}

impl QaModel {
    pub fn new(spec: QaSpec, seed: u64) -> Result<Self, QaError> {
        if spec.config.encoder.kind != EncoderKind::TrainableBiLstm {
            return Err(QaError::UnsupportedEncoder);
        }
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let encoder =
            Encoder::new(&mut store, &mut r, "enc", spec.config.encoder.clone(), spec.words, spec.chars, EXTRA_FEATURES, true)?;
        let d = encoder.output_dim();
        let s = store.add("qa/S", &[d], Init::FanIn(d), &mut r);
        let e = store.add("qa/E", &[d], Init::FanIn(d), &mut r);
        Ok(QaModel { config: spec.config, encoder, store, s, e })
    }

    pub fn spec(&self) -> QaSpec {
        QaSpec { config: self.config.clone(), words: self.encoder.words.clone(), chars: self.encoder.chars.clone() }
    }

    fn forward(&self, store: &ParamStore, inst: &QaInstance) -> Result<(EncoderTrace, SpanScores), QaError> {
        let trace = self.encoder.forward(store, &inst.input())?;
        let scores = score_spans(trace.output(), store.values(self.s), store.values(self.e))?;
        Ok((trace, scores))
    }

    /// Start plus end cross-entropy; no-answer targets position 0.
    pub fn loss_grad(&self, store: &ParamStore, inst: &QaInstance, grads: &mut Gradients) -> Result<f64, QaError> {
        let (trace, sc) = self.forward(store, inst)?;
        let (ts, te) = inst.answer.unwrap_or((0, 0));
        let (ls, gs) = softmax_cross_entropy(&sc.start, ts);
        let (le, ge) = softmax_cross_entropy(&sc.end, te);
        let t = trace.output();
        let (sv, ev) = (store.values(self.s), store.values(self.e));
        let mut dt = Mat::zeros(t.rows, t.cols);
        for i in 0..t.rows {
            let row = dt.row_mut(i);
            math::axpy(gs[i], sv, row);
            math::axpy(ge[i], ev, row);
        }
        {
            let ds = grads.get_mut(self.s);
            for i in 0..t.rows {
                math::axpy(gs[i], t.row(i), ds);
            }
        }
        {
            let de = grads.get_mut(self.e);
            for i in 0..t.rows {
                math::axpy(ge[i], t.row(i), de);
            }
        }
        self.encoder.backward(store, &trace, dt, grads);
        Ok(ls + le)
    }

    pub fn answer_with(&self, store: &ParamStore, inst: &QaInstance, tau: f64) -> Result<Answer, QaError> {
        let (_, sc) = self.forward(store, inst)?;
        let cand = best_candidate(&sc.start, &sc.end, inst.passage.clone(), self.config.max_answer_len);
        let (candidate, best_sum) = match cand {
            Some((i, j, v)) => (Some(inst.char_span(i, j)), v),
            None => (None, f64::NEG_INFINITY),
        };
        let keep = inst.answer_required || !(sc.s_null + tau > best_sum);
        Ok(Answer { span: if keep { candidate } else { None }, best_sum, s_null: sc.s_null, candidate })
    }

    pub fn answer(&self, inst: &QaInstance, tau: f64) -> Result<Answer, QaError> {
        self.answer_with(&self.store, inst, tau)
    }
}

/// Quantity handed to the QA stage by the earlier stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityInput {
    pub span: Span,
    pub detail: QuantityDetail,
}

/// One question asked during [`multi_turn`], for debugging and threshold tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionLog {
    pub annot_set: u32,
    pub template: usize,
    pub question: String,
    pub answer_required: bool,
    pub best_sum: f64,
    pub s_null: f64,
    pub tau: f64,
    pub answered: bool,
    pub answer: Option<Span>,
    pub answer_text: Option<String>,
    pub truncated: bool,
}

struct GraphBuilder<'a> {
    entry: DocEntry,
    chars: &'a [char],
    next: usize,
}

impl GraphBuilder<'_> {
    fn add(&mut self, kind: AnnotationKind, span: Span, set: u32, payload: Option<QuantityDetail>) -> String {
        self.next += 1;
        let id = annot_id_for(&self.entry.doc.doc_id, self.next);
        let surface: String = self.chars[span.start..span.end].iter().collect();
        let mut a = Annotation::new(id.clone(), set, kind, span, surface);
        a.payload = payload.or(a.payload);
        self.entry.annotations.push(a);
        id
    }

    fn relate(&mut self, kind: RelationKind, source: &str, target: &str) {
        self.entry.relations.push(Relation { kind, source: source.to_string(), target: target.to_string() });
    }

    fn surface(&self, id: &str) -> String {
        self.entry.annotation(id).map(|a| a.surface.clone()).unwrap_or_default()
    }
}

struct SetState {
    set: u32,
    quantity: String,
    property: Option<String>,
    entity: String,
}

/// Ask the question sequence for every quantity and assemble the relation graph.
pub fn multi_turn(
    model: &QaModel,
    doc: &Document,
    quantities: &[QuantityInput],
    tau: f64,
) -> Result<(DocEntry, Vec<QuestionLog>), QaError> {
    multi_turn_with(model, &model.store, doc, quantities, tau)
}

pub fn multi_turn_with(
    model: &QaModel,
    store: &ParamStore,
    doc: &Document,
    quantities: &[QuantityInput],
    tau: f64,
) -> Result<(DocEntry, Vec<QuestionLog>), QaError> {
    let chars: Vec<char> = doc.text.chars().collect();
    let tokens = corpus::tokenize(doc);
    let mut g = GraphBuilder { entry: DocEntry::new(doc.clone()), chars: &chars, next: 0 };
    let mut logs = Vec::new();
    let mut qs: Vec<&QuantityInput> = quantities.iter().collect();
    qs.sort_by_key(|q| (q.span.start, q.span.end));
    let max_len = model.config.max_len;

    let mut ask = |g: &GraphBuilder, set: u32, tid: usize, args: &[&str]| -> Result<Answer, QaError> {
        let inst = QaInstance::new(tid, args, &tokens, max_len)?;
        let a = model.answer_with(store, &inst, tau)?;
        logs.push(QuestionLog {
            annot_set: set,
            template: tid,
            question: inst.question.clone(),
            answer_required: inst.answer_required,
            best_sum: a.best_sum,
            s_null: a.s_null,
            tau,
            answered: a.span.is_some(),
            answer: a.span,
            answer_text: a.span.map(|s| g.chars[s.start..s.end].iter().collect()),
            truncated: inst.truncated,
        });
        Ok(a)
    };

    let mut sets = Vec::with_capacity(qs.len());
    for (k, q) in qs.iter().enumerate() {
        let set = k as u32 + 1;
        let quantity = g.add(QT, q.span, set, Some(q.detail.clone()));
        let q_surface = g.surface(&quantity);
        let prop = ask(&g, set, 1, &[&q_surface])?;
        let (property, entity_answer) = match prop.span {
            Some(ps) => {
                let p = g.add(MP, ps, set, None);
                g.relate(RelationKind::HasQuantity, &p, &quantity);
                let p_surface = g.surface(&p);
                let e = ask(&g, set, 2, &[&p_surface, &q_surface])?;
                (Some(p), e)
            }
            None => (None, ask(&g, set, 3, &[&q_surface])?),
        };
        let entity = match entity_answer.span {
            Some(es) => {
                let e = g.add(ME, es, set, None);
                match &property {
                    Some(p) => g.relate(RelationKind::HasProperty, &e, p),
                    None => g.relate(RelationKind::HasQuantity, &e, &quantity),
                }
                e
            }
            // Only possible when the passage is empty after truncation.
            None => String::new(),
        };
        sets.push(SetState { set, quantity, property, entity });
    }

    for st in &sets {
        let mut targets: Vec<(usize, &String)> = alloc::vec![(4, &st.quantity)];
        if !st.entity.is_empty() {
            targets.push((5, &st.entity));
        }
        if let Some(p) = &st.property {
            targets.push((6, p));
        }
        let mut seen: BTreeMap<Span, String> = BTreeMap::new();
        for (tid, target) in targets {
            let surface = g.surface(target);
            let a = ask(&g, st.set, tid, &[&surface])?;
            if let Some(span) = a.span {
                let qid = match seen.get(&span) {
                    Some(id) => id.clone(),
                    None => {
                        let id = g.add(QL, span, st.set, None);
                        seen.insert(span, id.clone());
                        id
                    }
                };
                g.relate(RelationKind::Qualifies, &qid, target);
            }
        }
    }
    validate_graph(&g.entry)?;
    Ok((g.entry, logs))
}

/// Structural checks on a predicted or gold relation graph.
pub fn validate_graph(entry: &DocEntry) -> Result<(), QaError> {
    entry.validate()?;
    let bad = |m: String| Err(QaError::GraphInvariant(m));
    let mut out: BTreeMap<&str, Vec<&Relation>> = BTreeMap::new();
    for r in &entry.relations {
        out.entry(r.source.as_str()).or_default().push(r);
    }
    for a in &entry.annotations {
        let edges = out.get(a.annot_id.as_str()).map(|v| v.as_slice()).unwrap_or(&[]);
        match a.kind {
            MP => {
                let n = edges.iter().filter(|r| r.kind == RelationKind::HasQuantity).count();
                if n != 1 {
                    return bad(alloc::format!("property {} has {n} HasQuantity edges", a.annot_id));
                }
            }
            ME => {
                let n = edges
                    .iter()
                    .filter(|r| matches!(r.kind, RelationKind::HasQuantity | RelationKind::HasProperty))
                    .count();
                if n != 1 {
                    return bad(alloc::format!("entity {} has {n} outgoing edges", a.annot_id));
                }
            }
            _ => {}
        }
    }
    for r in &entry.relations {
        if r.kind == RelationKind::Qualifies && entry.annotation(&r.source).map(|a| a.kind) != Some(QL) {
            return bad(alloc::format!("Qualifies edge from non-qualifier {}", r.source));
        }
    }
    // Acyclic: follow out-edges depth first.
    let ids: Vec<&str> = entry.annotations.iter().map(|a| a.annot_id.as_str()).collect();
    let mut state: BTreeMap<&str, u8> = BTreeMap::new();
    fn visit<'a>(n: &'a str, out: &BTreeMap<&'a str, Vec<&'a Relation>>, state: &mut BTreeMap<&'a str, u8>) -> bool {
        match state.get(n) {
            Some(1) => return false,
            Some(2) => return true,
            _ => {}
        }
        state.insert(n, 1);
        for r in out.get(n).map(|v| v.as_slice()).unwrap_or(&[]) {
            if !visit(r.target.as_str(), out, state) {
                return false;
            }
        }
        state.insert(n, 2);
        true
    }
    for id in ids {
        if !visit(id, &out, &mut state) {
            return bad(alloc::format!("cycle through {id}"));
        }
    }
    Ok(())
}

/// Training questions for every gold quantity of a document.
pub fn gold_instances(entry: &DocEntry, max_len: usize) -> Result<Vec<QaInstance>, QaError> {
    let tokens = corpus::tokenize(&entry.doc);
    let mut out = Vec::new();
    let by_id: BTreeMap<&str, &Annotation> = entry.annotations.iter().map(|a| (a.annot_id.as_str(), a)).collect();
    let sources = |kind: RelationKind, target: &str, want: AnnotationKind| -> Vec<&Annotation> {
        entry
            .relations
            .iter()
            .filter(|r| r.kind == kind && r.target == target)
            .filter_map(|r| by_id.get(r.source.as_str()).copied())
            .filter(|a| a.kind == want)
            .collect()
    };
    // Nearest to the quantity when several gold answers exist.
    let nearest = |cands: Vec<&Annotation>, q: &Annotation| -> Option<Span> {
        cands
            .into_iter()
            .min_by_key(|a| ((a.span.start as i64 - q.span.start as i64).abs(), a.span.start))
            .map(|a| a.span)
    };
    let mut quantities: Vec<&Annotation> = entry.annotations.iter().filter(|a| a.kind == QT).collect();
    quantities.sort_by_key(|a| (a.span.start, a.span.end));
    for q in quantities {
        let mut push = |tid: usize, args: &[&str], answer: Option<Span>| -> Result<(), QaError> {
            let mut inst = QaInstance::new(tid, args, &tokens, max_len)?;
            match answer {
                Some(s) => {
                    if inst.set_answer(s) {
                        out.push(inst);
                    }
                }
                None if !inst.answer_required => out.push(inst),
                None => {}
            }
            Ok(())
        };
        let props = sources(RelationKind::HasQuantity, &q.annot_id, MP);
        let prop = props.iter().min_by_key(|a| ((a.span.start as i64 - q.span.start as i64).abs(), a.span.start)).copied();
        push(1, &[&q.surface], prop.map(|p| p.span))?;
        let entity = match prop {
            Some(p) => {
                let es = sources(RelationKind::HasProperty, &p.annot_id, ME);
                let e = es.iter().min_by_key(|a| ((a.span.start as i64 - q.span.start as i64).abs(), a.span.start)).copied();
                push(2, &[&p.surface, &q.surface], e.map(|a| a.span))?;
                e
            }
            None => {
                let es = sources(RelationKind::HasQuantity, &q.annot_id, ME);
                let e = es.iter().min_by_key(|a| ((a.span.start as i64 - q.span.start as i64).abs(), a.span.start)).copied();
                push(3, &[&q.surface], e.map(|a| a.span))?;
                e
            }
        };
        push(4, &[&q.surface], nearest(sources(RelationKind::Qualifies, &q.annot_id, QL), q))?;
        if let Some(e) = entity {
            push(5, &[&e.surface], nearest(sources(RelationKind::Qualifies, &e.annot_id, QL), q))?;
        }
        if let Some(p) = prop {
            push(6, &[&p.surface], nearest(sources(RelationKind::Qualifies, &p.annot_id, QL), q))?;
        }
    }
    Ok(out)
}

/// Gold quantities of a document in the form [`multi_turn`] consumes.
pub fn gold_quantities(entry: &DocEntry) -> Vec<QuantityInput> {
    entry
        .annotations
        .iter()
        .filter(|a| a.kind == QT)
        .map(|a| QuantityInput {
            span: a.span,
            detail: a.payload.clone().unwrap_or(QuantityDetail { unit: None, mods: Vec::new() }),
        })
        .collect()
}

/// Entity, property and qualifier overlap F1 of [`multi_turn`] run from gold quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QaScores {
    pub entity: Prf,
    pub property: Prf,
    pub qualifier: Prf,
}

impl QaScores {
    pub fn dev_metric(&self) -> f64 {
        (self.entity.f1 + self.property.f1 + self.qualifier.f1) / 3.0
    }
}

pub fn evaluate_with(model: &QaModel, store: &ParamStore, dev: &Corpus, tau: f64) -> Result<QaScores, QaError> {
    let mut per_kind: [Vec<(Vec<Span>, Vec<Span>)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for d in &dev.docs {
        let (pred, _) = multi_turn_with(model, store, &d.doc, &gold_quantities(d), tau)?;
        for (k, kind) in [ME, MP, QL].into_iter().enumerate() {
            per_kind[k].push((pred.spans_of(kind), d.spans_of(kind)));
        }
    }
    let prf = |v: &Vec<(Vec<Span>, Vec<Span>)>| pooled_overlap(v.iter().map(|(p, g)| (p.as_slice(), g.as_slice())));
    Ok(QaScores { entity: prf(&per_kind[0]), property: prf(&per_kind[1]), qualifier: prf(&per_kind[2]) })
}

/// Build vocabularies from the training questions and passages, fit, and return the best-on-dev model.
pub fn train<C: FnMut(&EpochLog)>(
    train: &Corpus,
    dev: &Corpus,
    config: &QaConfig,
    opts: &TrainOptions,
    on_epoch: C,
) -> Result<(QaModel, Vec<EpochLog>), QaError> {
    opts.validate().map_err(QaError::InvalidOptions)?;
    let mut items = Vec::new();
    for d in &train.docs {
        items.extend(gold_instances(d, config.max_len)?);
    }
    let reserved = [NULL_TOKEN, QUESTION_TOKEN, SEP_TOKEN];
    let mut surfaces: Vec<&str> = Vec::new();
    let doc_tokens: Vec<Vec<Token>> = train.docs.iter().map(|d| corpus::tokenize(&d.doc)).collect();
    surfaces.extend(doc_tokens.iter().flatten().map(|t| t.surface.as_str()));
    let question_words: Vec<Token> = TEMPLATES.iter().flat_map(|t| corpus::tokenize_str(t.pattern)).collect();
    surfaces.extend(question_words.iter().map(|t| t.surface.as_str()));
    let (words, chars) = build_vocabs(surfaces.iter().copied(), config.encoder.min_word_count, &reserved);
    let mut model = QaModel::new(QaSpec { config: config.clone(), words, chars }, opts.seed)?;
    log::info!("{} QA training questions", items.len());
    let mut store = core::mem::take(&mut model.store);
    let tau = config.tau;
    let history = fit(
        &mut store,
        &items,
        opts,
        |s, inst, g| model.loss_grad(s, inst, g),
        |s| Ok(evaluate_with(&model, s, dev, tau)?.dev_metric()),
        on_epoch,
    )?;
    model.store = store;
    Ok((model, history))
}

/// Outcome of one declinable question under teacher forcing, for threshold tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub gap: f64,
    /// Overlap F1 of the best candidate against the gold answer (0 without gold).
    pub candidate_f1: f64,
    pub has_gold: bool,
}

/// Abstention-aware overlap F1 when questions with `gap >= tau` are answered.
pub fn abstention_f1(records: &[GapRecord], tau: f64) -> f64 {
    let mut sum = 0.0;
    let mut answered = 0usize;
    let mut gold = 0usize;
    for r in records {
        if r.has_gold {
            gold += 1;
        }
        if r.gap >= tau {
            answered += 1;
            sum += r.candidate_f1;
        }
    }
    Prf::from_counts(sum, answered, sum, gold).f1
}

/// Sweep every observed gap plus one value above them all; ties keep the smallest threshold.
pub fn sweep_threshold(records: &[GapRecord]) -> Result<(f64, f64), QaError> {
    if records.is_empty() {
        return Err(QaError::EmptyDevSet);
    }
    let mut cands: Vec<f64> = records.iter().map(|r| r.gap).filter(|g| g.is_finite()).collect();
    cands.sort_by(|a, b| a.total_cmp(b));
    cands.dedup();
    let top = cands.last().copied().unwrap_or(0.0);
    cands.push(top + 1.0);
    let mut best = (cands[0], abstention_f1(records, cands[0]));
    for &t in &cands[1..] {
        let f = abstention_f1(records, t);
        if f > best.1 {
            best = (t, f);
        }
    }
    Ok(best)
}

/// Gap records of every declinable gold question on `dev`.
pub fn gap_records(model: &QaModel, dev: &Corpus) -> Result<Vec<GapRecord>, QaError> {
    let mut out = Vec::new();
    for d in &dev.docs {
        for inst in gold_instances(d, model.config.max_len)? {
            if inst.answer_required {
                continue;
            }
            let a = model.answer(&inst, 0.0)?;
            let gold = inst.answer.map(|(i, j)| inst.char_span(i, j));
            let candidate_f1 = match (a.candidate, gold) {
                (Some(c), Some(g)) => overlap_f1(c, g),
                _ => 0.0,
            };
            out.push(GapRecord { gap: a.gap(), candidate_f1, has_gold: gold.is_some() });
        }
    }
    Ok(out)
}

/// Threshold maximising abstention-aware overlap F1 on `dev`, and that F1.
pub fn tune_threshold(model: &QaModel, dev: &Corpus) -> Result<(f64, f64), QaError> {
    if dev.is_empty() {
        return Err(QaError::EmptyDevSet);
    }
    sweep_threshold(&gap_records(model, dev)?)
}
