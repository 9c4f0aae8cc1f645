//! Pipeline configuration: TOML file over a named preset, then `MEASX_*` environment overrides.
//!
//! Environment keys map to config paths with `__` as the separator, e.g.
//! `MEASX_QA__TRAINING__EPOCHS=3` sets `qa.training.epochs`. Values are read
//! as TOML scalars when they parse as one, otherwise as strings.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use measx_core::crf::CrfConfig;
use measx_core::encoder::EncoderConfig;
use measx_core::spanqa::QaConfig;
use measx_core::tagger::TaggerConfig;
use measx_core::training::TrainOptions;
use measx_core::unitmods::UnitModsConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "MEASX_";
/// Read by the logger, never treated as a config key.
pub const LOG_ENV: &str = "MEASX_LOG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Preset {
    /// Hyperparameters as published: from-scratch encoder at published dims and rates.
    PaperDefaults,
    /// Smaller, faster settings that train on one CPU core in minutes.
    #[default]
    ScratchDefaults,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::PaperDefaults => "paper-defaults",
            Preset::ScratchDefaults => "scratch-defaults",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-defaults" => Ok(Preset::PaperDefaults),
            "scratch-defaults" => Ok(Preset::ScratchDefaults),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected paper-defaults or scratch-defaults)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    /// Training corpus directory.
    pub corpus: PathBuf,
    /// Development corpus; when absent, `dev_fraction` of the training corpus is held out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    pub checkpoints: PathBuf,
    /// Directory of `<docId>.memb` files, needed by the precomputed encoder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Training {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Training {
    pub fn options(&self, seed: u64) -> TrainOptions {
        TrainOptions { epochs: self.epochs, lr: self.lr, batch_size: self.batch_size, clip_norm: self.clip_norm, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityStage {
    pub training: Training,
    pub encoder: EncoderConfig,
    pub crf: CrfConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitModsStage {
    pub training: Training,
    pub model: UnitModsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaStage {
    pub training: Training,
    pub encoder: EncoderConfig,
    pub max_answer_len: usize,
    /// Null-score threshold; written by `tune-threshold`.
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub max_len: usize,
    pub dev_fraction: f64,
    /// Worker threads for document-level work in predict and evaluate.
    pub jobs: usize,
    pub paths: Paths,
    pub quantity: QuantityStage,
    pub unitmods: UnitModsStage,
    pub qa: QaStage,
}

impl PipelineConfig {
    pub fn preset(p: Preset) -> Self {
        let paths = Paths {
            corpus: PathBuf::from("data/train"),
            dev: None,
            checkpoints: PathBuf::from("checkpoints"),
            embeddings: None,
        };
        let clip_norm = measx_core::netcore::DEFAULT_CLIP_NORM;
        match p {
            Preset::PaperDefaults => PipelineConfig {
                seed: 13,
                max_len: 512,
                dev_fraction: 0.1,
                jobs: 1,
                paths,
                quantity: QuantityStage {
                    training: Training { epochs: 10, lr: 2e-5, batch_size: 8, clip_norm },
                    encoder: EncoderConfig::default(),
                    crf: CrfConfig::default(),
                },
                unitmods: UnitModsStage {
                    training: Training { epochs: 25, lr: 1e-4, batch_size: 16, clip_norm },
                    model: UnitModsConfig::default(),
                },
                qa: QaStage {
                    training: Training { epochs: 10, lr: 2e-5, batch_size: 8, clip_norm },
                    encoder: EncoderConfig::default(),
                    max_answer_len: 30,
                    tau: 0.0,
                },
            },
            Preset::ScratchDefaults => PipelineConfig {
                seed: 13,
                max_len: 512,
                dev_fraction: 0.1,
                jobs: 1,
                paths,
                quantity: QuantityStage {
                    training: Training { epochs: 10, lr: 2e-3, batch_size: 8, clip_norm },
                    encoder: EncoderConfig {
                        word_embed_dim: 32,
                        char_embed_dim: 16,
                        char_hidden: 16,
                        token_hidden: 32,
                        layers: 2,
                        ..EncoderConfig::default()
                    },
                    crf: CrfConfig::default(),
                },
                unitmods: UnitModsStage {
                    training: Training { epochs: 15, lr: 3e-3, batch_size: 16, clip_norm },
                    model: UnitModsConfig::default(),
                },
                qa: QaStage {
                    training: Training { epochs: 6, lr: 3e-3, batch_size: 16, clip_norm },
                    encoder: EncoderConfig {
                        word_embed_dim: 32,
                        char_embed_dim: 16,
                        char_hidden: 0,
                        token_hidden: 32,
                        layers: 1,
                        ..EncoderConfig::default()
                    },
                    max_answer_len: 30,
                    tau: 0.0,
                },
            },
        }
    }

    pub fn tagger_config(&self) -> TaggerConfig {
        TaggerConfig { encoder: self.quantity.encoder.clone(), crf: self.quantity.crf.clone(), max_len: self.max_len }
    }

    pub fn qa_config(&self) -> QaConfig {
        QaConfig {
            encoder: self.qa.encoder.clone(),
            max_answer_len: self.qa.max_answer_len,
            max_len: self.max_len,
            tau: self.qa.tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.max_len < 4 {
            return bad("max_len must be at least 4".into());
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return bad("dev_fraction must lie in (0, 1)".into());
        }
        if self.jobs == 0 {
            return bad("jobs must be positive".into());
        }
        for (name, t) in [("quantity", &self.quantity.training), ("unitmods", &self.unitmods.training), ("qa", &self.qa.training)] {
            if let Err(m) = t.options(self.seed).validate() {
                return bad(format!("{name}.training: {m}"));
            }
        }
        self.quantity.encoder.validate().map_err(|e| Error::Config(format!("quantity.encoder: {e}")))?;
        self.qa.encoder.validate().map_err(|e| Error::Config(format!("qa.encoder: {e}")))?;
        if self.qa.encoder.kind != measx_core::encoder::EncoderKind::TrainableBiLstm {
            return bad("qa.encoder.kind must be TrainableBiLstm".into());
        }
        if self.qa.max_answer_len == 0 {
            return bad("qa.max_answer_len must be positive".into());
        }
        if !self.qa.tau.is_finite() {
            return bad("qa.tau must be finite".into());
        }
        self.unitmods.model.validate().map_err(|e| Error::Config(format!("unitmods.model: {e}")))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Dotted key paths present in `given` but absent from `known`.
fn unknown_keys(given: &Table, known: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (known.get(k), v) {
            (None, _) => out.push(path),
            (Some(Value::Table(kt)), Value::Table(gt)) => unknown_keys(gt, kt, &path, out),
            _ => {}
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Apply `MEASX_A__B=value` pairs onto `table`.
pub fn apply_env<I: IntoIterator<Item = (String, String)>>(table: &mut Table, vars: I) -> Result<()> {
    for (key, raw) in vars {
        if key == LOG_ENV {
            continue;
        }
        let Some(rest) = key.strip_prefix(ENV_PREFIX) else { continue };
        let parts: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed override {key}")));
        }
        let mut t = &mut *table;
        for p in &parts[..parts.len() - 1] {
            let entry = t.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
            t = match entry {
                Value::Table(inner) => inner,
                _ => return Err(Error::Config(format!("{key}: {p} is not a table"))),
            };
        }
        t.insert(parts[parts.len() - 1].clone(), parse_scalar(&raw));
    }
    Ok(())
}

/// A resolved config and where it came from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: PipelineConfig,
    pub preset: Preset,
    pub path: Option<PathBuf>,
    /// The file as written, before merging, for producing edited copies.
    pub file: Table,
}

/// Merge a preset, a config file and environment overrides, then resolve relative paths
/// against the config file's directory.
pub fn resolve<I>(path: Option<&Path>, preset: Option<Preset>, env: I) -> Result<Loaded>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut file = Table::new();
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        file = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    }
    let mut layer = file.clone();
    let file_preset = match layer.remove("preset") {
        Some(Value::String(s)) => Some(s.parse::<Preset>()?),
        Some(_) => return Err(Error::Config("preset must be a string".into())),
        None => None,
    };
    let preset = preset.or(file_preset).unwrap_or_default();
    let base = PipelineConfig::preset(preset);
    let known: Table = Table::try_from(&base).expect("preset serialises");
    let mut merged = known.clone();
    apply_env(&mut layer, env)?;
    let mut extra = Vec::new();
    unknown_keys(&layer, &known, "", &mut extra);
    // Optional paths are absent from the serialised preset.
    extra.retain(|k| k != "paths.dev" && k != "paths.embeddings");
    if !extra.is_empty() {
        return Err(Error::Config(format!("unknown config keys: {}", extra.join(", "))));
    }
    merge(&mut merged, layer);
    let mut config: PipelineConfig =
        Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    if let Some(dir) = path.and_then(Path::parent) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut config.paths.corpus);
        fix(&mut config.paths.checkpoints);
        config.paths.dev.as_mut().map(fix);
        config.paths.embeddings.as_mut().map(fix);
    }
    config.validate()?;
    Ok(Loaded { config, preset, path: path.map(Path::to_path_buf), file })
}

/// Resolve with the process environment.
pub fn load(path: Option<&Path>, preset: Option<Preset>) -> Result<Loaded> {
    resolve(path, preset, std::env::vars())
}

/// Copy of the original config file with `qa.tau` set, written to `out`.
/// Relative paths are rewritten when `out` lives in another directory.
pub fn write_with_tau(loaded: &Loaded, tau: f64, out: &Path) -> Result<()> {
    let mut t = loaded.file.clone();
    let qa = t.entry("qa").or_insert_with(|| Value::Table(Table::new()));
    let Value::Table(qa) = qa else {
        return Err(Error::Config("qa must be a table".into()));
    };
    qa.insert("tau".into(), Value::Float(tau));
    let src_dir = loaded.path.as_deref().and_then(Path::parent).map(Path::to_path_buf).unwrap_or_default();
    let out_dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    let same = fs::canonicalize(&src_dir).ok() == fs::canonicalize(&out_dir).ok();
    if !same {
        let paths = t.entry("paths").or_insert_with(|| Value::Table(Table::new()));
        if let Value::Table(paths) = paths {
            let c = &loaded.config.paths;
            let abs = |p: &Path| Value::String(std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string());
            paths.insert("corpus".into(), abs(&c.corpus));
            paths.insert("checkpoints".into(), abs(&c.checkpoints));
            if let Some(d) = &c.dev {
                paths.insert("dev".into(), abs(d));
            }
            if let Some(e) = &c.embeddings {
                paths.insert("embeddings".into(), abs(e));
            }
        }
        if !t.contains_key("preset") {
            t.insert("preset".into(), Value::String(loaded.preset.name().into()));
        }
    }
    let text = toml::to_string(&t).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(out, text).map_err(|e| Error::io(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn presets_round_trip_through_toml() {
        for p in [Preset::PaperDefaults, Preset::ScratchDefaults] {
            let c = PipelineConfig::preset(p);
            c.validate().unwrap();
            let back: PipelineConfig = toml::from_str(&c.to_toml()).unwrap();
            assert_eq!(back, c);
        }
        let paper = PipelineConfig::preset(Preset::PaperDefaults);
        assert_eq!(paper.unitmods.training.epochs, 25);
        assert_eq!(paper.unitmods.training.batch_size, 16);
        assert_eq!(paper.unitmods.training.lr, 1e-4);
        assert_eq!(paper.unitmods.model.hidden, 64);
        assert_eq!(paper.unitmods.model.char_embed_dim, 32);
        assert_eq!(paper.quantity.training.lr, 2e-5);
        assert_eq!(paper.qa.training.epochs, 10);
        assert_eq!(paper.max_len, 512);
    }

    #[test]
    fn env_overrides_nest_and_type() {
        let l = resolve(
            None,
            None,
            env(&[("MEASX_QA__TRAINING__EPOCHS", "3"), ("MEASX_QA__TAU", "-0.5"), ("MEASX_PATHS__DEV", "x/dev"), ("MEASX_LOG", "debug"), ("HOME", "/")]),
        )
        .unwrap();
        assert_eq!(l.config.qa.training.epochs, 3);
        assert_eq!(l.config.qa.tau, -0.5);
        assert_eq!(l.config.paths.dev.as_deref(), Some(Path::new("x/dev")));
        assert_eq!(l.preset, Preset::ScratchDefaults);
    }

    #[test]
    fn file_over_preset_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "preset = \"paper-defaults\"\nseed = 5\n[paths]\ncorpus = \"train\"\n[unitmods.training]\nepochs = 2\n").unwrap();
        let l = load(Some(&p), None).unwrap();
        assert_eq!(l.preset, Preset::PaperDefaults);
        assert_eq!(l.config.seed, 5);
        assert_eq!(l.config.unitmods.training.epochs, 2);
        assert_eq!(l.config.unitmods.training.lr, 1e-4);
        assert_eq!(l.config.paths.corpus, dir.path().join("train"));

        fs::write(&p, "[qa]\ntua = 1.0\n").unwrap();
        let e = resolve(Some(&p), None, Vec::new()).unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("qa.tua")), "{e}");
        assert_eq!(e.exit_code(), 2);
        fs::write(&p, "[qa.training]\nepochs = \"many\"\n").unwrap();
        assert!(matches!(resolve(Some(&p), None, Vec::new()), Err(Error::Config(_))));
        fs::write(&p, "[qa.training]\nbatch_size = 0\n").unwrap();
        assert!(matches!(resolve(Some(&p), None, Vec::new()), Err(Error::Config(_))));
        assert!(matches!(resolve(Some(&dir.path().join("none.toml")), None, Vec::new()), Err(Error::Config(_))));
    }

    #[test]
    fn tau_copy_keeps_file_and_sets_tau() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "seed = 9\n[paths]\ncorpus = \"train\"\n").unwrap();
        let l = resolve(Some(&p), None, Vec::new()).unwrap();
        let out = dir.path().join("c.tuned.toml");
        write_with_tau(&l, 1.25, &out).unwrap();
        let again = resolve(Some(&out), None, Vec::new()).unwrap();
        assert_eq!(again.config.qa.tau, 1.25);
        assert_eq!(again.config.seed, 9);
        assert_eq!(again.config.paths.corpus, l.config.paths.corpus);
    }
}
