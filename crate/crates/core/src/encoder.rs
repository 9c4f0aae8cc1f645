//! Token encoder shared by the quantity tagger and the span QA model.
//!
//! A token's input vector is the concatenation of
//!
//! * a word embedding of its normalised surface ([`normalize_word`]),
//! * the final states of a character BiLSTM run over its surface,
//! * an externally supplied vector (precomputed mode),
//! * an optional summary: the mean word embedding over a source range of
//!   positions, copied onto a target range (the QA model uses this to give
//!   every passage token a view of the question),
//! * caller-supplied extra features.
//!
//! The sequence of input vectors then runs through a stacked BiLSTM.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::normalize_word;
use crate::math::{self, Mat};
use crate::netcore::{BiLstm, BiLstmTrace, Embedding, Gradients, NetError, ParamStore, Rng, StackedBiLstm, StackedTrace};
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error("no precomputed embeddings supplied for this sequence")]
    EmbeddingFileMissing,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid encoder config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    TrainableBiLstm,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub word_embed_dim: usize,
    pub char_embed_dim: usize,
    /// Zero disables the character BiLSTM.
    pub char_hidden: usize,
    pub token_hidden: usize,
    pub layers: usize,
    /// Words seen fewer times in training map to `<unk>`.
    pub min_word_count: usize,
    /// Characters beyond this many are ignored by the character BiLSTM.
    pub max_word_chars: usize,
    /// Width of precomputed vectors; only read in precomputed mode.
    pub precomputed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::TrainableBiLstm,
            word_embed_dim: 64,
            char_embed_dim: 32,
            char_hidden: 64,
            token_hidden: 128,
            layers: 2,
            min_word_count: 2,
            max_word_chars: 20,
            precomputed_dim: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        match self.kind {
            EncoderKind::TrainableBiLstm => {
                if self.word_embed_dim == 0 {
                    return Err(EncoderError::InvalidConfig("word_embed_dim must be positive"));
                }
                if self.char_hidden > 0 && self.char_embed_dim == 0 {
                    return Err(EncoderError::InvalidConfig("char_embed_dim must be positive"));
                }
            }
            EncoderKind::Precomputed => {
                if self.precomputed_dim == 0 {
                    return Err(EncoderError::InvalidConfig("precomputed_dim must be positive"));
                }
            }
        }
        if self.layers > 0 && self.token_hidden == 0 {
            return Err(EncoderError::InvalidConfig("token_hidden must be positive"));
        }
        if self.max_word_chars == 0 {
            return Err(EncoderError::InvalidConfig("max_word_chars must be positive"));
        }
        Ok(())
    }
}

/// Mean of word embeddings over `source`, appended to rows in `targets`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Summary {
    pub source: Range<usize>,
    pub targets: Range<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct EncoderInput<'a> {
    pub surfaces: &'a [String],
    pub precomputed: Option<&'a Mat>,
    pub extra: Option<&'a Mat>,
    pub summary: Option<Summary>,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    word_ids: Vec<usize>,
    chars: Option<CharTrace>,
    summary: Option<Summary>,
    stack: StackedTrace,
}

impl EncoderTrace {
    pub fn output(&self) -> &Mat {
        self.stack.output()
    }
}

#[derive(Debug, Clone)]
struct CharTrace {
    /// For every token, the index of its surface in `unique`.
    token_to_unique: Vec<usize>,
    unique_ids: Vec<Vec<usize>>,
    unique_inputs: Vec<Mat>,
    unique_traces: Vec<BiLstmTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub words: Vocab,
    pub chars: Vocab,
    pub extra_dim: usize,
    pub summary: bool,
    #[serde(skip)]
    layers: Option<Layers>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    word_emb: Option<Embedding>,
    char_emb: Option<Embedding>,
    char_lstm: Option<BiLstm>,
    stack: StackedBiLstm,
}

impl Encoder {
    /// Register the encoder's parameters under `prefix/` in `store`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        config: EncoderConfig,
        words: Vocab,
        chars: Vocab,
        extra_dim: usize,
        summary: bool,
    ) -> Result<Self, EncoderError> {
        let mut enc = Encoder { config, words, chars, extra_dim, summary, layers: None };
        enc.build(store, rng, prefix)?;
        Ok(enc)
    }

    /// Re-register parameters after deserialising; values are then loaded from a checkpoint.
    pub fn build(&mut self, store: &mut ParamStore, rng: &mut Rng, prefix: &str) -> Result<(), EncoderError> {
        self.config.validate()?;
        if self.summary && self.config.kind != EncoderKind::TrainableBiLstm {
            return Err(EncoderError::InvalidConfig("question summary needs word embeddings"));
        }
        let c = &self.config;
        let trainable = c.kind == EncoderKind::TrainableBiLstm;
        let word_emb = trainable
            .then(|| Embedding::new(store, rng, &alloc::format!("{prefix}/word_emb"), self.words.len(), c.word_embed_dim));
        let (char_emb, char_lstm) = if trainable && c.char_hidden > 0 {
            let e = Embedding::new(store, rng, &alloc::format!("{prefix}/char_emb"), self.chars.len(), c.char_embed_dim);
            let l = BiLstm::new(store, rng, &alloc::format!("{prefix}/char_lstm"), c.char_embed_dim, c.char_hidden);
            (Some(e), Some(l))
        } else {
            (None, None)
        };
        let input_dim = self.input_dim();
        let stack = StackedBiLstm::new(store, rng, &alloc::format!("{prefix}/lstm"), input_dim, c.token_hidden, c.layers);
        self.layers = Some(Layers { word_emb, char_emb, char_lstm, stack });
        Ok(())
    }

    fn layers(&self) -> &Layers {
        self.layers.as_ref().expect("encoder parameters not registered")
    }

    pub fn input_dim(&self) -> usize {
        let c = &self.config;
        let base = match c.kind {
            EncoderKind::TrainableBiLstm => {
                c.word_embed_dim + if c.char_hidden > 0 { 2 * c.char_hidden } else { 0 }
            }
            EncoderKind::Precomputed => c.precomputed_dim,
        };
        base + if self.summary { c.word_embed_dim } else { 0 } + self.extra_dim
    }

    pub fn output_dim(&self) -> usize {
        if self.config.layers == 0 {
            self.input_dim()
        } else {
            2 * self.config.token_hidden
        }
    }

    pub fn word_id(&self, surface: &str) -> usize {
        self.words.id(&normalize_word(surface))
    }

    pub fn forward(&self, store: &ParamStore, input: &EncoderInput) -> Result<EncoderTrace, EncoderError> {
        let n = input.surfaces.len();
        if n == 0 {
            return Err(NetError::EmptySequence.into());
        }
        let layers = self.layers();
        let mut parts: Vec<Mat> = Vec::new();
        let word_ids: Vec<usize> = input.surfaces.iter().map(|s| self.word_id(s)).collect();
        let words = layers.word_emb.map(|e| e.forward(store, &word_ids));
        if let Some(w) = &words {
            parts.push(w.clone());
        }
        let chars = match (layers.char_emb, layers.char_lstm) {
            (Some(emb), Some(lstm)) => {
                let (feat, trace) = self.char_forward(store, emb, lstm, input.surfaces)?;
                parts.push(feat);
                Some(trace)
            }
            _ => None,
        };
        if self.config.kind == EncoderKind::Precomputed {
            let p = input.precomputed.ok_or(EncoderError::EmbeddingFileMissing)?;
            if p.cols != self.config.precomputed_dim {
                return Err(EncoderError::DimensionMismatch { expected: self.config.precomputed_dim, found: p.cols });
            }
            if p.rows != n {
                return Err(EncoderError::DimensionMismatch { expected: n, found: p.rows });
            }
            parts.push(p.clone());
        }
        let summary = if self.summary {
            let s = input.summary.clone().unwrap_or(Summary { source: 0..0, targets: 0..0 });
            let w = words.as_ref().expect("summary requires word embeddings");
            let mut m = Mat::zeros(n, self.config.word_embed_dim);
            if !s.source.is_empty() {
                let mut mean = alloc::vec![0.0; self.config.word_embed_dim];
                for i in s.source.clone() {
                    math::axpy(1.0, w.row(i), &mut mean);
                }
                let inv = 1.0 / s.source.len() as f64;
                mean.iter_mut().for_each(|v| *v *= inv);
                for t in s.targets.clone() {
                    m.row_mut(t).copy_from_slice(&mean);
                }
            }
            parts.push(m);
            Some(s)
        } else {
            None
        };
        if self.extra_dim > 0 {
            let e = input.extra.ok_or(EncoderError::DimensionMismatch { expected: self.extra_dim, found: 0 })?;
            if e.cols != self.extra_dim || e.rows != n {
                return Err(EncoderError::DimensionMismatch { expected: self.extra_dim, found: e.cols });
            }
            parts.push(e.clone());
        }
        let refs: Vec<&Mat> = parts.iter().collect();
        let x = Mat::hcat(&refs);
        let stack = layers.stack.forward(store, x)?;
        Ok(EncoderTrace { word_ids, chars, summary, stack })
    }

    fn char_forward(
        &self,
        store: &ParamStore,
        emb: Embedding,
        lstm: BiLstm,
        surfaces: &[String],
    ) -> Result<(Mat, CharTrace), EncoderError> {
        let mut uniq: BTreeMap<&str, usize> = BTreeMap::new();
        let mut order: Vec<&str> = Vec::new();
        let token_to_unique: Vec<usize> = surfaces
            .iter()
            .map(|s| {
                *uniq.entry(s.as_str()).or_insert_with(|| {
                    order.push(s.as_str());
                    order.len() - 1
                })
            })
            .collect();
        let h = self.config.char_hidden;
        let mut unique_ids = Vec::with_capacity(order.len());
        let mut unique_inputs = Vec::with_capacity(order.len());
        let mut unique_traces = Vec::with_capacity(order.len());
        let mut feats = Mat::zeros(order.len(), 2 * h);
        for (u, s) in order.iter().enumerate() {
            let mut ids: Vec<usize> = s.chars().take(self.config.max_word_chars).map(|c| self.char_id(c)).collect();
            if ids.is_empty() {
                ids.push(Vocab::UNK_ID);
            }
            let xs = emb.forward(store, &ids);
            let tr = lstm.forward(store, &xs)?;
            let last = xs.rows - 1;
            feats.row_mut(u)[..h].copy_from_slice(&tr.output.row(last)[..h]);
            feats.row_mut(u)[h..].copy_from_slice(&tr.output.row(0)[h..]);
            unique_ids.push(ids);
            unique_inputs.push(xs);
            unique_traces.push(tr);
        }
        let mut out = Mat::zeros(surfaces.len(), 2 * h);
        for (t, &u) in token_to_unique.iter().enumerate() {
            out.row_mut(t).copy_from_slice(feats.row(u));
        }
        Ok((out, CharTrace { token_to_unique, unique_ids, unique_inputs, unique_traces }))
    }

    pub fn char_id(&self, c: char) -> usize {
        let mut buf = [0u8; 4];
        self.chars.id(c.encode_utf8(&mut buf))
    }

    pub fn backward(&self, store: &ParamStore, trace: &EncoderTrace, dout: Mat, grads: &mut Gradients) {
        let layers = self.layers();
        let dx = layers.stack.backward(store, &trace.stack, dout, grads);
        let c = &self.config;
        let mut off = 0;
        let mut dwords = layers.word_emb.map(|_| {
            let d = dx.slice_cols(0, c.word_embed_dim);
            off += c.word_embed_dim;
            d
        });
        if let (Some(emb), Some(lstm), Some(ct)) = (layers.char_emb, layers.char_lstm, &trace.chars) {
            let h = c.char_hidden;
            let dchar = dx.slice_cols(off, 2 * h);
            off += 2 * h;
            let mut per_unique = Mat::zeros(ct.unique_ids.len(), 2 * h);
            for (t, &u) in ct.token_to_unique.iter().enumerate() {
                math::axpy(1.0, dchar.row(t), per_unique.row_mut(u));
            }
            for u in 0..ct.unique_ids.len() {
                let xs = &ct.unique_inputs[u];
                let mut d = Mat::zeros(xs.rows, 2 * h);
                let last = xs.rows - 1;
                d.row_mut(last)[..h].copy_from_slice(&per_unique.row(u)[..h]);
                d.row_mut(0)[h..].copy_from_slice(&per_unique.row(u)[h..]);
                let dxs = lstm.backward(store, xs, &ct.unique_traces[u], &d, grads);
                emb.backward(&ct.unique_ids[u], &dxs, grads);
            }
        }
        if c.kind == EncoderKind::Precomputed {
            off += c.precomputed_dim;
        }
        if let Some(s) = &trace.summary {
            let dsum = dx.slice_cols(off, c.word_embed_dim);
            if !s.source.is_empty() {
                let mut acc = alloc::vec![0.0; c.word_embed_dim];
                for t in s.targets.clone() {
                    math::axpy(1.0, dsum.row(t), &mut acc);
                }
                let inv = 1.0 / s.source.len() as f64;
                let dw = dwords.as_mut().expect("summary requires word embeddings");
                for i in s.source.clone() {
                    math::axpy(inv, &acc, dw.row_mut(i));
                }
            }
        }
        if let (Some(emb), Some(dw)) = (layers.word_emb, dwords) {
            emb.backward(&trace.word_ids, &dw, grads);
        }
    }
}

/// Word vocabulary (normalised surfaces) and character vocabulary from training token surfaces.
pub fn build_vocabs<'a, I>(surfaces: I, min_word_count: usize, reserved: &[&str]) -> (Vocab, Vocab)
where
    I: IntoIterator<Item = &'a str> + Clone,
{
    let words = Vocab::build(surfaces.clone().into_iter().map(normalize_word), min_word_count, reserved);
    let mut buf = [0u8; 4];
    let chars = Vocab::build(
        surfaces.into_iter().flat_map(|s| s.chars()).map(|c| String::from(&*c.encode_utf8(&mut buf))),
        1,
        &[],
    );
    (words, chars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{grad_check, rng, GradCheckOptions};
    use alloc::string::ToString;
    use alloc::vec;
    use rand::Rng as _;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            word_embed_dim: 3,
            char_embed_dim: 2,
            char_hidden: 2,
            token_hidden: 2,
            layers: 2,
            min_word_count: 1,
            ..EncoderConfig::default()
        }
    }

    fn surfaces(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn shapes_and_unknowns() {
        let toks = surfaces(&["the", "rock", "weighs", "5", "kg"]);
        let (w, c) = build_vocabs(toks.iter().map(|s| s.as_str()), 1, &[]);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng(0), "enc", small_config(), w, c, 0, false).unwrap();
        let one = surfaces(&["never-seen"]);
        let tr = enc.forward(&store, &EncoderInput { surfaces: &one, ..Default::default() }).unwrap();
        assert_eq!((tr.output().rows, tr.output().cols), (1, 4));
        assert_eq!(enc.word_id("ROCK"), enc.word_id("rock"));
        assert_eq!(enc.word_id("7"), enc.word_id("5"));
    }

    #[test]
    fn precomputed_dimension_checked() {
        let cfg = EncoderConfig { kind: EncoderKind::Precomputed, precomputed_dim: 4, layers: 0, ..small_config() };
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng(0), "enc", cfg, Vocab::from(vec![]), Vocab::from(vec![]), 0, false).unwrap();
        let toks = surfaces(&["a", "b"]);
        let bad = Mat::zeros(2, 3);
        let err = enc.forward(&store, &EncoderInput { surfaces: &toks, precomputed: Some(&bad), ..Default::default() });
        assert!(matches!(err, Err(EncoderError::DimensionMismatch { expected: 4, found: 3 })));
        let missing = enc.forward(&store, &EncoderInput { surfaces: &toks, ..Default::default() });
        assert!(matches!(missing, Err(EncoderError::EmbeddingFileMissing)));
        let good = Mat::from_vec(2, 4, (0..8).map(|v| v as f64).collect());
        let tr = enc.forward(&store, &EncoderInput { surfaces: &toks, precomputed: Some(&good), ..Default::default() }).unwrap();
        assert_eq!(tr.output(), &good);
    }

    #[test]
    fn gradients_with_chars_summary_and_extras() {
        let toks = surfaces(&["<q>", "mass", "?", "<sep>", "the", "mass", "was", "5", "kg"]);
        let (w, c) = build_vocabs(toks.iter().map(|s| s.as_str()), 1, &[]);
        let mut store = ParamStore::new();
        let mut r = rng(11);
        let enc = Encoder::new(&mut store, &mut r, "enc", small_config(), w, c, 2, true).unwrap();
        let n = toks.len();
        let extra = Mat::from_vec(n, 2, (0..2 * n).map(|_| r.gen_range(-1.0..1.0)).collect());
        let target: Vec<f64> = (0..n * enc.output_dim()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let input = EncoderInput {
            surfaces: &toks,
            extra: Some(&extra),
            summary: Some(Summary { source: 1..3, targets: 4..9 }),
            ..Default::default()
        };
        let report = grad_check(
            &mut store,
            |s, g| {
                let tr = enc.forward(s, &input).unwrap();
                let out = tr.output();
                let loss = math::dot(&out.data, &target);
                enc.backward(s, &tr, Mat::from_vec(out.rows, out.cols, target.clone()), g);
                loss
            },
            GradCheckOptions::default(),
        );
        assert!(report.passed, "{report:?}");
    }
}
