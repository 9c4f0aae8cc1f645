//! Quantity span tagger: token encoder, ReLU emission projection, CRF head.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{self, AnnotationKind, Corpus, CorpusError, DocEntry, Document, Span, TagSequence};
use crate::crf::{Crf, CrfConfig, CrfError};
use crate::encoder::{build_vocabs, Encoder, EncoderConfig, EncoderError, EncoderInput, EncoderKind};
use crate::math::Mat;
use crate::metrics::pooled_overlap;
use crate::netcore::{relu_backward, rng, Gradients, Linear, NetError, ParamStore};
use crate::training::{fit, EpochLog, TrainOptions};
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaggerError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("training corpus has no quantity annotations")]
    NoQuantities,
    #[error("invalid training options: {0}")]
    InvalidOptions(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaggerConfig {
    pub encoder: EncoderConfig,
    pub crf: CrfConfig,
    pub max_len: usize,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig { encoder: EncoderConfig::default(), crf: CrfConfig::default(), max_len: corpus::DEFAULT_MAX_LEN }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerSpec {
    pub config: TaggerConfig,
    pub words: Vocab,
    pub chars: Vocab,
}

/// Per-document precomputed token vectors, keyed by document id.
pub type Embeddings = BTreeMap<String, Mat>;

#[derive(Debug, Clone)]
pub struct TaggerModel {
    pub config: TaggerConfig,
    pub encoder: Encoder,
    pub store: ParamStore,
    proj: Linear,
    crf: Crf,
}

/// One training sequence.
#[derive(Debug, Clone)]
pub struct TaggerInstance {
    pub surfaces: Vec<String>,
    pub tags: Vec<usize>,
    pub precomputed: Option<Mat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerPrediction {
    pub spans: Vec<Span>,
    pub truncated: bool,
    pub original_len: usize,
}

fn rows_prefix(m: &Mat, n: usize) -> Mat {
    Mat::from_vec(n, m.cols, m.data[..n * m.cols].to_vec())
}

fn doc_embedding<'a>(
    kind: EncoderKind,
    embeddings: Option<&'a Embeddings>,
    doc_id: &str,
    full_len: usize,
) -> Result<Option<&'a Mat>, TaggerError> {
    if kind != EncoderKind::Precomputed {
        return Ok(None);
    }
    let m = embeddings.and_then(|e| e.get(doc_id)).ok_or(EncoderError::EmbeddingFileMissing)?;
    if m.rows != full_len {
        return Err(EncoderError::DimensionMismatch { expected: full_len, found: m.rows }.into());
    }
    Ok(Some(m))
}

impl TaggerModel {
    pub fn new(spec: TaggerSpec, seed: u64) -> Result<Self, TaggerError> {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let encoder =
            Encoder::new(&mut store, &mut r, "enc", spec.config.encoder.clone(), spec.words, spec.chars, 0, false)?;
        let proj = Linear::with_names(&mut store, &mut r, "proj/W_l", "proj/b_l", encoder.output_dim(), 3);
        let crf = Crf::new(&mut store, &mut r, 3, spec.config.crf.clone());
        Ok(TaggerModel { config: spec.config, encoder, store, proj, crf })
    }

    pub fn spec(&self) -> TaggerSpec {
        TaggerSpec { config: self.config.clone(), words: self.encoder.words.clone(), chars: self.encoder.chars.clone() }
    }

    /// Row-wise `ReLU(W_l^T e + b_l)`; also returns the pre-activations.
    pub fn emit(&self, store: &ParamStore, e: &Mat) -> Result<(Mat, Mat), TaggerError> {
        let pre = self.proj.forward_rows(store, e)?;
        let mut l = pre.clone();
        l.data.iter_mut().for_each(|v| *v = v.max(0.0));
        Ok((pre, l))
    }

    /// Contextual token vectors.
    pub fn encode(&self, store: &ParamStore, surfaces: &[String], precomputed: Option<&Mat>) -> Result<Mat, TaggerError> {
        let trace = self.encoder.forward(store, &EncoderInput { surfaces, precomputed, ..Default::default() })?;
        Ok(trace.output().clone())
    }

    /// CRF negative log-likelihood of one sequence; gradients are added into `grads`.
    pub fn loss_grad(&self, store: &ParamStore, inst: &TaggerInstance, grads: &mut Gradients) -> Result<f64, TaggerError> {
        let input = EncoderInput { surfaces: &inst.surfaces, precomputed: inst.precomputed.as_ref(), ..Default::default() };
        let trace = self.encoder.forward(store, &input)?;
        let e = trace.output();
        let (pre, l) = self.emit(store, e)?;
        let (loss, g) = crate::crf::nll(&self.crf.weights(store), &l, &inst.tags)?;
        let dl = self.crf.accumulate(g, grads);
        let dpre = Mat::from_vec(dl.rows, dl.cols, relu_backward(&pre.data, &dl.data));
        let de = self.proj.backward_rows(store, e, &dpre, grads);
        self.encoder.backward(store, &trace, de, grads);
        Ok(loss)
    }

    pub fn instance(&self, entry: &DocEntry, embeddings: Option<&Embeddings>) -> Result<TaggerInstance, TaggerError> {
        let tokens = corpus::tokenize(&entry.doc);
        let emb = doc_embedding(self.config.encoder.kind, embeddings, &entry.doc.doc_id, tokens.len())?;
        let tr = corpus::truncate(&tokens, self.config.max_len)?;
        let gold = entry.spans_of(AnnotationKind::Quantity);
        let tags = corpus::spans_to_iob(&tr.tokens, &gold)?;
        Ok(TaggerInstance {
            surfaces: tr.tokens.iter().map(|t| t.surface.clone()).collect(),
            tags: tags.indices(),
            precomputed: emb.map(|m| rows_prefix(m, tr.tokens.len())),
        })
    }

    pub fn predict(&self, doc: &Document, embeddings: Option<&Embeddings>) -> Result<TaggerPrediction, TaggerError> {
        self.predict_with(&self.store, doc, embeddings)
    }

    pub fn predict_with(
        &self,
        store: &ParamStore,
        doc: &Document,
        embeddings: Option<&Embeddings>,
    ) -> Result<TaggerPrediction, TaggerError> {
        let tokens = corpus::tokenize(doc);
        if tokens.is_empty() {
            return Ok(TaggerPrediction { spans: Vec::new(), truncated: false, original_len: 0 });
        }
        let emb = doc_embedding(self.config.encoder.kind, embeddings, &doc.doc_id, tokens.len())?;
        let tr = corpus::truncate(&tokens, self.config.max_len)?;
        let surfaces: Vec<String> = tr.tokens.iter().map(|t| t.surface.clone()).collect();
        let pre = emb.map(|m| rows_prefix(m, tr.tokens.len()));
        let e = self.encode(store, &surfaces, pre.as_ref())?;
        let (_, l) = self.emit(store, &e)?;
        let (path, _) = self.crf.decode(store, &l)?;
        let tags = match TagSequence::from_indices(&path) {
            Some(t) if t.is_valid() => t,
            // Unconstrained decoding can emit O -> I; read such an I as a B.
            _ => TagSequence::from_indices(&repair_iob(&path)).expect("tag indices are in range"),
        };
        let spans = corpus::iob_to_spans(&tr.tokens, &tags)?;
        Ok(TaggerPrediction { spans, truncated: tr.truncated, original_len: tr.original_len })
    }

    /// Pooled quantity overlap F1 of predictions on `dev`.
    pub fn evaluate_with(&self, store: &ParamStore, dev: &Corpus, embeddings: Option<&Embeddings>) -> Result<f64, TaggerError> {
        let mut groups = Vec::with_capacity(dev.len());
        for d in &dev.docs {
            let p = self.predict_with(store, &d.doc, embeddings)?;
            groups.push((p.spans, d.spans_of(AnnotationKind::Quantity)));
        }
        Ok(pooled_overlap(groups.iter().map(|(p, g)| (p.as_slice(), g.as_slice()))).f1)
    }
}

fn repair_iob(path: &[usize]) -> Vec<usize> {
    let mut out = path.to_vec();
    for i in 0..out.len() {
        let prev = if i == 0 { 0 } else { out[i - 1] };
        if out[i] == 2 && prev == 0 {
            out[i] = 1;
        }
    }
    out
}

/// Build vocabularies from `train`, fit, and return the best-on-dev model.
pub fn train<C: FnMut(&EpochLog)>(
    train: &Corpus,
    dev: &Corpus,
    config: &TaggerConfig,
    opts: &TrainOptions,
    embeddings: Option<&Embeddings>,
    on_epoch: C,
) -> Result<(TaggerModel, Vec<EpochLog>), TaggerError> {
    opts.validate().map_err(TaggerError::InvalidOptions)?;
    if train.count(AnnotationKind::Quantity) == 0 {
        return Err(TaggerError::NoQuantities);
    }
    let token_lists: Vec<Vec<corpus::Token>> = train.docs.iter().map(|d| corpus::tokenize(&d.doc)).collect();
    let (words, chars) = build_vocabs(
        token_lists.iter().flatten().map(|t| t.surface.as_str()),
        config.encoder.min_word_count,
        &[],
    );
    let mut model = TaggerModel::new(TaggerSpec { config: config.clone(), words, chars }, opts.seed)?;
    let items: Vec<TaggerInstance> =
        train.docs.iter().map(|d| model.instance(d, embeddings)).collect::<Result<_, _>>()?;
    let mut store = core::mem::take(&mut model.store);
    let history = fit(
        &mut store,
        &items,
        opts,
        |s, inst, g| model.loss_grad(s, inst, g),
        |s| model.evaluate_with(s, dev, embeddings),
        on_epoch,
    )?;
    model.store = store;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{grad_check, GradCheckOptions};
    use alloc::string::ToString;
    use alloc::vec;

    fn tiny_config() -> TaggerConfig {
        TaggerConfig {
            encoder: EncoderConfig {
                word_embed_dim: 3,
                char_embed_dim: 2,
                char_hidden: 2,
                token_hidden: 3,
                layers: 1,
                min_word_count: 1,
                ..EncoderConfig::default()
            },
            ..TaggerConfig::default()
        }
    }

    fn tiny_model() -> TaggerModel {
        let words = Vocab::build(["weighs", "0", "kg"], 1, &[]);
        let chars = Vocab::build(["w", "e", "5", "k", "g"], 1, &[]);
        TaggerModel::new(TaggerSpec { config: tiny_config(), words, chars }, 5).unwrap()
    }

    #[test]
    fn emission_non_negative_and_zero_weights() {
        let mut m = tiny_model();
        let e = Mat::from_vec(2, 6, vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.0, -4.0, 2.0, 1.0, 0.0, 0.5, -0.5]);
        let (_, l) = m.emit(&m.store, &e).unwrap();
        assert!(l.data.iter().all(|&v| v >= 0.0));
        let (w, b) = (m.proj.w, m.proj.b);
        m.store.values_mut(w).iter_mut().for_each(|v| *v = 0.0);
        m.store.values_mut(b).iter_mut().for_each(|v| *v = 0.0);
        let (_, l) = m.emit(&m.store, &e).unwrap();
        assert!(l.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn length_one_shape() {
        let m = tiny_model();
        let e = m.encode(&m.store, &["kg".to_string()], None).unwrap();
        assert_eq!((e.rows, e.cols), (1, m.encoder.output_dim()));
    }

    #[test]
    fn end_to_end_gradient() {
        let mut m = tiny_model();
        let inst = TaggerInstance {
            surfaces: ["it", "weighs", "5", "kg", "."].iter().map(|s| s.to_string()).collect(),
            tags: vec![0, 0, 1, 2, 0],
            precomputed: None,
        };
        // Lift the projection bias so most pre-activations sit away from the ReLU kink.
        let b = m.proj.b;
        m.store.values_mut(b).copy_from_slice(&[0.7, 0.9, 0.8]);
        let mut store = core::mem::take(&mut m.store);
        let report = grad_check(&mut store, |s, g| m.loss_grad(s, &inst, g).unwrap(), GradCheckOptions::default());
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn repair_reads_stray_inside_as_begin() {
        assert_eq!(repair_iob(&[2, 2, 0, 2]), vec![1, 2, 0, 1]);
    }
}
