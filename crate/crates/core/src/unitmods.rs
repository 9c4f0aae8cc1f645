//! Character-level models over a quantity's surface string: unit extraction
//! (per-character IOB tagging) and value-modifier classification (mean-pooled
//! multi-label sigmoid).

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotationKind, Corpus, Span};
use crate::math::{self, Mat};
use crate::metrics::multilabel_micro;
use crate::netcore::{
    rng, sigmoid_bce_mean, softmax_cross_entropy, Embedding, Gradients, Linear, NetError, ParamStore, Rng,
    StackedBiLstm, StackedTrace,
};
use crate::synthgen::MOD_LABELS;
use crate::training::{fit, EpochLog, TrainOptions};
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum UnitModsError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("no quantity records with unit or modifier labels")]
    NoRecords,
    #[error("invalid unit/modifier config: {0}")]
    InvalidConfig(&'static str),
    #[error("empty quantity surface")]
    EmptySurface,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnitModsConfig {
    pub char_embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// One BiLSTM feeding both heads instead of one per head.
    pub shared_trunk: bool,
    /// A label is selected when its probability is strictly above this.
    pub threshold: f64,
    pub labels: Vec<String>,
}

impl Default for UnitModsConfig {
    fn default() -> Self {
        UnitModsConfig {
            char_embed_dim: 32,
            hidden: 64,
            layers: 2,
            shared_trunk: false,
            threshold: 0.5,
            labels: MOD_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl UnitModsConfig {
    pub fn validate(&self) -> Result<(), UnitModsError> {
        if self.char_embed_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(UnitModsError::InvalidConfig("dimensions and layer count must be positive"));
        }
        if self.labels.is_empty() {
            return Err(UnitModsError::InvalidConfig("label inventory is empty"));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(UnitModsError::InvalidConfig("threshold must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Training/evaluation view of one quantity annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityRecord {
    pub surface: String,
    pub unit: Option<String>,
    /// Character span of the unit inside `surface`, when it could be located.
    pub unit_span: Option<Span>,
    pub mods: BTreeSet<String>,
}

impl QuantityRecord {
    pub fn new(surface: &str, unit: Option<&str>, mods: &[String]) -> Self {
        let unit_span = unit.and_then(|u| locate_unit(surface, u));
        QuantityRecord {
            surface: surface.to_string(),
            unit: unit.map(|u| u.to_string()),
            unit_span,
            mods: mods.iter().cloned().collect(),
        }
    }

    /// False when the unit is given but does not occur in the surface.
    pub fn unit_trainable(&self) -> bool {
        self.unit.is_none() || self.unit_span.is_some()
    }
}

/// Character span of `unit` in `surface`, preferring an occurrence not glued to
/// letters or digits on either side, else the first occurrence.
pub fn locate_unit(surface: &str, unit: &str) -> Option<Span> {
    let s: Vec<char> = surface.chars().collect();
    let u: Vec<char> = unit.chars().collect();
    if u.is_empty() || u.len() > s.len() {
        return None;
    }
    let mut first = None;
    for i in 0..=s.len() - u.len() {
        if s[i..i + u.len()] != u[..] {
            continue;
        }
        let span = Span { start: i, end: i + u.len() };
        let before_ok = i == 0 || !s[i - 1].is_alphabetic();
        let after_ok = i + u.len() == s.len() || !s[i + u.len()].is_alphanumeric();
        if before_ok && after_ok {
            return Some(span);
        }
        first.get_or_insert(span);
    }
    first
}

/// All quantity records of a corpus plus how many units could not be located.
pub fn records(corpus: &Corpus) -> (Vec<QuantityRecord>, usize) {
    let mut out = Vec::new();
    let mut unlocated = 0;
    for d in &corpus.docs {
        for a in d.annotations.iter().filter(|a| a.kind == AnnotationKind::Quantity) {
            let (unit, mods) = match &a.payload {
                Some(p) => (p.unit.as_deref(), p.mods.clone()),
                None => (None, Vec::new()),
            };
            let r = QuantityRecord::new(&a.surface, unit, &mods);
            if !r.unit_trainable() {
                unlocated += 1;
            }
            out.push(r);
        }
    }
    (out, unlocated)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModifierSet {
    pub labels: Vec<String>,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Trunk {
    emb: Embedding,
    lstm: StackedBiLstm,
}

impl Trunk {
    fn new(store: &mut ParamStore, r: &mut Rng, prefix: &str, vocab: usize, c: &UnitModsConfig) -> Self {
        let emb = Embedding::new(store, r, &format!("{prefix}/char_emb"), vocab, c.char_embed_dim);
        let lstm = StackedBiLstm::new(store, r, &format!("{prefix}/lstm"), c.char_embed_dim, c.hidden, c.layers);
        Trunk { emb, lstm }
    }

    fn forward(&self, store: &ParamStore, ids: &[usize]) -> Result<StackedTrace, NetError> {
        self.lstm.forward(store, self.emb.forward(store, ids))
    }

    fn backward(&self, store: &ParamStore, ids: &[usize], trace: &StackedTrace, d: Mat, grads: &mut Gradients) {
        let dx = self.lstm.backward(store, trace, d, grads);
        self.emb.backward(ids, &dx, grads);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitModsSpec {
    pub config: UnitModsConfig,
    pub chars: Vocab,
}

#[derive(Debug, Clone)]
pub struct UnitModsModel {
    pub config: UnitModsConfig,
    pub chars: Vocab,
    pub store: ParamStore,
    unit_trunk: Trunk,
    mods_trunk: Trunk,
    unit_head: Linear,
    mods_head: Linear,
}

/// Per-record loss and decoded outputs from one forward pass.
struct Forward {
    ids: Vec<usize>,
    unit: StackedTrace,
    mods: Option<StackedTrace>,
    unit_logits: Mat,
    pooled: Vec<f64>,
    mods_logits: Vec<f64>,
}

impl UnitModsModel {
    pub fn new(spec: UnitModsSpec, seed: u64) -> Result<Self, UnitModsError> {
        spec.config.validate()?;
        let c = &spec.config;
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let v = spec.chars.len();
        let (unit_trunk, mods_trunk) = if c.shared_trunk {
            let t = Trunk::new(&mut store, &mut r, "trunk", v, c);
            (t.clone(), t)
        } else {
            (Trunk::new(&mut store, &mut r, "unit", v, c), Trunk::new(&mut store, &mut r, "mods", v, c))
        };
        let d = 2 * c.hidden;
        let unit_head = Linear::new(&mut store, &mut r, "unit/head", d, 3);
        let mods_head = Linear::new(&mut store, &mut r, "mods/head", d, c.labels.len());
        Ok(UnitModsModel { config: spec.config, chars: spec.chars, store, unit_trunk, mods_trunk, unit_head, mods_head })
    }

    pub fn spec(&self) -> UnitModsSpec {
        UnitModsSpec { config: self.config.clone(), chars: self.chars.clone() }
    }

    fn char_ids(&self, surface: &str) -> Vec<usize> {
        let mut buf = [0u8; 4];
        surface.chars().map(|c| self.chars.id(c.encode_utf8(&mut buf))).collect()
    }

    fn forward(&self, store: &ParamStore, surface: &str) -> Result<Forward, UnitModsError> {
        let ids = self.char_ids(surface);
        if ids.is_empty() {
            return Err(UnitModsError::EmptySurface);
        }
        let unit = self.unit_trunk.forward(store, &ids)?;
        let mods = if self.config.shared_trunk { None } else { Some(self.mods_trunk.forward(store, &ids)?) };
        let unit_logits = self.unit_head.forward_rows(store, unit.output())?;
        let h = mods.as_ref().unwrap_or(&unit).output();
        let mut pooled = alloc::vec![0.0; h.cols];
        for i in 0..h.rows {
            math::axpy(1.0, h.row(i), &mut pooled);
        }
        let inv = 1.0 / h.rows as f64;
        pooled.iter_mut().for_each(|v| *v *= inv);
        let mods_logits = self.mods_head.forward(store, &pooled)?;
        Ok(Forward { ids, unit, mods, unit_logits, pooled, mods_logits })
    }

    /// Mean per-character unit cross-entropy (when the unit is located) plus
    /// mean binary cross-entropy over the modifier labels.
    pub fn loss_grad(&self, store: &ParamStore, rec: &QuantityRecord, grads: &mut Gradients) -> Result<f64, UnitModsError> {
        let f = self.forward(store, &rec.surface)?;
        let n = f.ids.len();
        let mut loss = 0.0;
        let mut d_unit = Mat::zeros(n, 2 * self.config.hidden);
        if rec.unit_trainable() {
            let tags = unit_tags(n, rec.unit_span);
            let mut dlogits = Mat::zeros(n, 3);
            for (i, &t) in tags.iter().enumerate() {
                let (l, g) = softmax_cross_entropy(f.unit_logits.row(i), t);
                loss += l / n as f64;
                math::axpy(1.0 / n as f64, &g, dlogits.row_mut(i));
            }
            d_unit = self.unit_head.backward_rows(store, f.unit.output(), &dlogits, grads);
        }
        let targets: Vec<f64> =
            self.config.labels.iter().map(|l| if rec.mods.contains(l) { 1.0 } else { 0.0 }).collect();
        let (l, g) = sigmoid_bce_mean(&f.mods_logits, &targets);
        loss += l;
        let mut dpool = alloc::vec![0.0; f.pooled.len()];
        self.mods_head.backward(store, &f.pooled, &g, grads, Some(&mut dpool));
        let mut d_mods = Mat::zeros(n, dpool.len());
        for i in 0..n {
            math::axpy(1.0 / n as f64, &dpool, d_mods.row_mut(i));
        }
        match &f.mods {
            Some(mt) => {
                self.mods_trunk.backward(store, &f.ids, mt, d_mods, grads);
                if rec.unit_trainable() {
                    self.unit_trunk.backward(store, &f.ids, &f.unit, d_unit, grads);
                }
            }
            None => {
                math::axpy(1.0, &d_mods.data, &mut d_unit.data);
                self.unit_trunk.backward(store, &f.ids, &f.unit, d_unit, grads);
            }
        }
        Ok(loss)
    }

    pub fn extract_unit(&self, surface: &str) -> Option<(String, Span)> {
        self.extract_unit_with(&self.store, surface)
    }

    /// First B I* run of the per-character argmax, as text and character span.
    pub fn extract_unit_with(&self, store: &ParamStore, surface: &str) -> Option<(String, Span)> {
        let f = self.forward(store, surface).ok()?;
        let tags: Vec<usize> = (0..f.unit_logits.rows).map(|i| math::argmax(f.unit_logits.row(i))).collect();
        let span = first_run(&tags)?;
        let text: String = surface.chars().skip(span.start).take(span.len()).collect();
        Some((text, span))
    }

    pub fn classify_mods(&self, surface: &str) -> ModifierSet {
        self.classify_mods_with(&self.store, surface)
    }

    pub fn classify_mods_with(&self, store: &ParamStore, surface: &str) -> ModifierSet {
        let probs: Vec<f64> = match self.forward(store, surface) {
            Ok(f) => f.mods_logits.iter().map(|&z| math::sigmoid(z)).collect(),
            Err(_) => alloc::vec![0.5; self.config.labels.len()],
        };
        let labels = self
            .config
            .labels
            .iter()
            .zip(&probs)
            .filter(|(_, &p)| p > self.config.threshold)
            .map(|(l, _)| l.clone())
            .collect();
        ModifierSet { labels, probabilities: probs }
    }

    pub fn evaluate_with(&self, store: &ParamStore, dev: &[QuantityRecord]) -> UnitModsScores {
        let mut unit_total = 0usize;
        let mut unit_hits = 0usize;
        let mut preds = Vec::with_capacity(dev.len());
        let mut golds = Vec::with_capacity(dev.len());
        for r in dev {
            if r.unit_trainable() {
                unit_total += 1;
                let got = self.extract_unit_with(store, &r.surface).map(|(t, _)| t);
                if got == r.unit {
                    unit_hits += 1;
                }
            }
            preds.push(self.classify_mods_with(store, &r.surface).labels.into_iter().collect::<BTreeSet<_>>());
            golds.push(r.mods.clone());
        }
        let unit_exact_match = if unit_total == 0 { 1.0 } else { unit_hits as f64 / unit_total as f64 };
        let mods = multilabel_micro(&preds, &golds);
        UnitModsScores { unit_exact_match, mods_micro_f1: mods.f1, mods_precision: mods.precision, mods_recall: mods.recall }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitModsScores {
    pub unit_exact_match: f64,
    pub mods_micro_f1: f64,
    pub mods_precision: f64,
    pub mods_recall: f64,
}

impl UnitModsScores {
    pub fn dev_metric(&self) -> f64 {
        0.5 * (self.unit_exact_match + self.mods_micro_f1)
    }
}

fn unit_tags(n: usize, span: Option<Span>) -> Vec<usize> {
    let mut t = alloc::vec![0; n];
    if let Some(s) = span {
        for (i, v) in t.iter_mut().enumerate().take(s.end.min(n)).skip(s.start) {
            *v = if i == s.start { 1 } else { 2 };
        }
    }
    t
}

/// First maximal run that opens with B (or a stray I) and continues with I.
fn first_run(tags: &[usize]) -> Option<Span> {
    let start = tags.iter().position(|&t| t != 0)?;
    let mut end = start + 1;
    while end < tags.len() && tags[end] == 2 {
        end += 1;
    }
    Some(Span { start, end })
}

/// Fit both heads on the quantities of `train`, selecting on `dev`.
pub fn train<C: FnMut(&EpochLog)>(
    train: &Corpus,
    dev: &Corpus,
    config: &UnitModsConfig,
    opts: &TrainOptions,
    on_epoch: C,
) -> Result<(UnitModsModel, Vec<EpochLog>, usize), UnitModsError> {
    opts.validate().map_err(UnitModsError::InvalidConfig)?;
    let (recs, unlocated) = records(train);
    if !recs.iter().any(|r| r.unit.is_some() || !r.mods.is_empty()) {
        return Err(UnitModsError::NoRecords);
    }
    if unlocated > 0 {
        log::warn!("{unlocated} quantity units not found in their surface; excluded from unit training");
    }
    let (dev_recs, _) = records(dev);
    let mut buf = [0u8; 4];
    let chars = Vocab::build(
        recs.iter().flat_map(|r| r.surface.chars()).map(|c| String::from(&*c.encode_utf8(&mut buf))),
        1,
        &[],
    );
    let mut model = UnitModsModel::new(UnitModsSpec { config: config.clone(), chars }, opts.seed)?;
    let mut store = core::mem::take(&mut model.store);
    let history = fit(
        &mut store,
        &recs,
        opts,
        |s, r, g| model.loss_grad(s, r, g),
        |s| Ok(model.evaluate_with(s, &dev_recs).dev_metric()),
        on_epoch,
    )?;
    model.store = store;
    Ok((model, history, unlocated))
}
