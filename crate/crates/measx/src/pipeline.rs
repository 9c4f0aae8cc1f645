//! Stage training, cascade prediction, threshold tuning and scoring over files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::thread;

use measx_core::corpus::{self, Corpus, DocEntry, QuantityDetail, Span};
use measx_core::encoder::{EncoderError, EncoderKind};
use measx_core::metrics::{score_corpus, MatchReport};
use measx_core::spanqa::{self, QaError, QaModel, QaScores, QuantityInput, QuestionLog};
use measx_core::tagger::{self, Embeddings, TaggerError, TaggerModel};
use measx_core::training::EpochLog;
use measx_core::unitmods::{self, UnitModsError, UnitModsModel, UnitModsScores};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, to_json, Stage};
use crate::config::PipelineConfig;
use crate::error::{from_net, Error, Result};
use crate::{memb, tsv};

fn tagger_err(e: TaggerError) -> Error {
    match e {
        TaggerError::Net(n) => from_net(n),
        TaggerError::InvalidOptions(m) => Error::Config(m.into()),
        TaggerError::Encoder(EncoderError::InvalidConfig(m)) => Error::Config(m.into()),
        other => Error::Data(other.to_string()),
    }
}

fn unitmods_err(e: UnitModsError) -> Error {
    match e {
        UnitModsError::Net(n) => from_net(n),
        UnitModsError::InvalidConfig(m) => Error::Config(m.into()),
        other => Error::Data(other.to_string()),
    }
}

fn qa_err(e: QaError) -> Error {
    match e {
        QaError::Net(n) => from_net(n),
        QaError::InvalidOptions(m) => Error::Config(m.into()),
        QaError::UnsupportedEncoder => Error::Config(e.to_string()),
        QaError::Encoder(EncoderError::InvalidConfig(m)) => Error::Config(m.into()),
        other => Error::Data(other.to_string()),
    }
}

/// Training and development corpora named by the config.
pub fn training_data(cfg: &PipelineConfig) -> Result<(Corpus, Corpus)> {
    let train = tsv::read_corpus(&cfg.paths.corpus)?;
    match &cfg.paths.dev {
        Some(d) => Ok((train, tsv::read_corpus(d)?)),
        None => Ok(corpus::split_dev(&train, cfg.dev_fraction, cfg.seed)),
    }
}

fn embeddings_for(cfg: &PipelineConfig, corpora: &[&Corpus]) -> Result<Option<Embeddings>> {
    if cfg.quantity.encoder.kind != EncoderKind::Precomputed {
        return Ok(None);
    }
    let dir = cfg
        .paths
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::Config("the precomputed encoder needs paths.embeddings".into()))?;
    let mut all = Embeddings::new();
    for c in corpora {
        all.extend(memb::load_for(dir, c, cfg.quantity.encoder.precomputed_dim)?);
    }
    Ok(Some(all))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: Stage,
    pub train_docs: usize,
    pub dev_docs: usize,
    pub history: Vec<EpochLog>,
    /// Dev metric of the kept checkpoint.
    pub dev_metric: f64,
}

fn write_log(dir: &Path, stage: Stage, history: &[EpochLog]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut s = String::new();
    for h in history {
        s.push_str(&serde_json::to_string(h).expect("serialisable"));
        s.push('\n');
    }
    let p = stage.log_path(dir);
    fs::write(&p, s).map_err(|e| Error::io(&p, e))
}

/// Train one stage from gold annotations and write its best-dev checkpoint and epoch log.
pub fn train_stage(cfg: &PipelineConfig, stage: Stage, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<TrainSummary> {
    let (train, dev) = training_data(cfg)?;
    let dir = &cfg.paths.checkpoints;
    let (history, dev_metric) = match stage {
        Stage::Quantity => {
            let opts = cfg.quantity.training.options(cfg.seed);
            let emb = embeddings_for(cfg, &[&train, &dev])?;
            let (m, h) = tagger::train(&train, &dev, &cfg.tagger_config(), &opts, emb.as_ref(), &mut *on_epoch)
                .map_err(tagger_err)?;
            let metric = m.evaluate_with(&m.store, &dev, emb.as_ref()).map_err(tagger_err)?;
            checkpoint::save_tagger(dir, &m)?;
            (h, metric)
        }
        Stage::Unitmods => {
            let opts = cfg.unitmods.training.options(cfg.seed);
            let (m, h, _) = unitmods::train(&train, &dev, &cfg.unitmods.model, &opts, &mut *on_epoch).map_err(unitmods_err)?;
            let (recs, _) = unitmods::records(&dev);
            let metric = m.evaluate_with(&m.store, &recs).dev_metric();
            checkpoint::save_unitmods(dir, &m)?;
            (h, metric)
        }
        Stage::Qa => {
            let opts = cfg.qa.training.options(cfg.seed);
            let qc = cfg.qa_config();
            let (m, h) = spanqa::train(&train, &dev, &qc, &opts, &mut *on_epoch).map_err(qa_err)?;
            let metric = spanqa::evaluate_with(&m, &m.store, &dev, qc.tau).map_err(qa_err)?.dev_metric();
            checkpoint::save_qa(dir, &m)?;
            (h, metric)
        }
    };
    write_log(dir, stage, &history)?;
    Ok(TrainSummary { stage, train_docs: train.len(), dev_docs: dev.len(), history, dev_metric })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub tau: f64,
    /// Abstention-aware overlap F1 on the declinable dev questions at `tau`.
    pub f1: f64,
    pub questions: usize,
}

/// Pick the QA null threshold on the development corpus.
pub fn tune(cfg: &PipelineConfig) -> Result<TuneResult> {
    let (_, dev) = training_data(cfg)?;
    let qa = checkpoint::load_qa(&cfg.paths.checkpoints)?;
    let recs = spanqa::gap_records(&qa, &dev).map_err(qa_err)?;
    if dev.is_empty() || recs.is_empty() {
        return Err(Error::Data("development set has no declinable questions".into()));
    }
    let (tau, f1) = spanqa::sweep_threshold(&recs).map_err(qa_err)?;
    Ok(TuneResult { tau, f1, questions: recs.len() })
}

/// The three stage models.
#[derive(Debug, Clone)]
pub struct Models {
    pub tagger: TaggerModel,
    pub unitmods: UnitModsModel,
    pub qa: QaModel,
}

impl Models {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Models {
            tagger: checkpoint::load_tagger(dir)?,
            unitmods: checkpoint::load_unitmods(dir)?,
            qa: checkpoint::load_qa(dir)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityDebug {
    pub span: Span,
    pub text: String,
    pub unit: Option<String>,
    /// Unit position inside `text`.
    pub unit_span: Option<Span>,
    pub mods: Vec<String>,
    pub mod_probabilities: BTreeMap<String, f64>,
}

/// Everything the cascade decided for one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocDebug {
    pub doc_id: String,
    pub tokens: usize,
    /// The tagger saw only the first `max_len` tokens.
    pub truncated: bool,
    pub tau: f64,
    pub quantities: Vec<QuantityDebug>,
    pub questions: Vec<QuestionLog>,
}

/// Quantities, then units and modifiers, then the question sequence, for one document.
pub fn predict_doc(models: &Models, entry: &DocEntry, tau: f64, emb: Option<&Embeddings>) -> Result<(DocEntry, DocDebug)> {
    let doc = &entry.doc;
    let tagged = models.tagger.predict(doc, emb).map_err(tagger_err)?;
    let mut inputs = Vec::with_capacity(tagged.spans.len());
    let mut qdebug = Vec::with_capacity(tagged.spans.len());
    for &span in &tagged.spans {
        let text = doc.slice(span);
        let unit = models.unitmods.extract_unit(&text);
        let ms = models.unitmods.classify_mods(&text);
        let mut mods = ms.labels.clone();
        mods.sort();
        inputs.push(QuantityInput { span, detail: QuantityDetail { unit: unit.as_ref().map(|u| u.0.clone()), mods: mods.clone() } });
        qdebug.push(QuantityDebug {
            span,
            text,
            unit: unit.as_ref().map(|u| u.0.clone()),
            unit_span: unit.map(|u| u.1),
            mods,
            mod_probabilities: models.unitmods.config.labels.iter().cloned().zip(ms.probabilities).collect(),
        });
    }
    let (pred, questions) = spanqa::multi_turn(&models.qa, doc, &inputs, tau).map_err(qa_err)?;
    let debug = DocDebug {
        doc_id: doc.doc_id.clone(),
        tokens: tagged.original_len,
        truncated: tagged.truncated,
        tau,
        quantities: qdebug,
        questions,
    };
    Ok((pred, debug))
}

/// Run the cascade over a corpus on `jobs` threads; output order follows the input.
pub fn predict(models: &Models, input: &Corpus, tau: f64, emb: Option<&Embeddings>, jobs: usize) -> Result<(Corpus, Vec<DocDebug>)> {
    let n = input.docs.len();
    let jobs = jobs.clamp(1, n.max(1));
    let chunk = n.div_ceil(jobs).max(1);
    let parts: Vec<Result<Vec<(DocEntry, DocDebug)>>> = thread::scope(|s| {
        let handles: Vec<_> = input
            .docs
            .chunks(chunk)
            .map(|docs| s.spawn(move || docs.iter().map(|d| predict_doc(models, d, tau, emb)).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("prediction worker panicked")).collect()
    });
    let mut docs = Vec::with_capacity(n);
    let mut debug = Vec::with_capacity(n);
    for p in parts {
        for (d, g) in p? {
            docs.push(d);
            debug.push(g);
        }
    }
    Ok((Corpus::new(docs), debug))
}

/// Load models per the config, predict `input`, and write the TSV, document texts and debug JSON.
pub fn predict_files(cfg: &PipelineConfig, input: &Path, out: &Path, debug_dir: Option<&Path>, jobs: usize) -> Result<Corpus> {
    let models = Models::load(&cfg.paths.checkpoints)?;
    let gold = tsv::read_corpus(input)?;
    let emb = embeddings_for(cfg, &[&gold])?;
    let (pred, debug) = predict(&models, &gold, cfg.qa.tau, emb.as_ref(), jobs)?;
    let tsv_file = tsv::write_corpus(&pred, out)?;
    let ddir = match debug_dir {
        Some(d) => d.to_path_buf(),
        None => tsv_file.parent().map(|p| p.join("debug")).unwrap_or_else(|| "debug".into()),
    };
    fs::create_dir_all(&ddir).map_err(|e| Error::io(&ddir, e))?;
    for d in &debug {
        let p = ddir.join(format!("{}.json", d.doc_id));
        fs::write(&p, to_json(d)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(pred)
}

/// Score predicted against gold corpora read from disk.
pub fn evaluate_files(pred: &Path, gold: &Path) -> Result<MatchReport> {
    let p = tsv::read_corpus(pred)?;
    let g = tsv::read_corpus(gold)?;
    score_corpus(&p, &g).map_err(|e| Error::Data(e.to_string()))
}

/// Per-stage scores on the development corpus with gold inputs to each stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageScores {
    pub quantity_overlap_f1: f64,
    pub unitmods: UnitModsScores,
    pub qa: QaScores,
}

pub fn stage_scores(cfg: &PipelineConfig, models: &Models, dev: &Corpus) -> Result<StageScores> {
    let emb = embeddings_for(cfg, &[dev])?;
    let q = models.tagger.evaluate_with(&models.tagger.store, dev, emb.as_ref()).map_err(tagger_err)?;
    let (recs, _) = unitmods::records(dev);
    let um = models.unitmods.evaluate_with(&models.unitmods.store, &recs);
    let qa = spanqa::evaluate_with(&models.qa, &models.qa.store, dev, cfg.qa.tau).map_err(qa_err)?;
    Ok(StageScores { quantity_overlap_f1: q, unitmods: um, qa })
}
