//! Stage checkpoints: parameter container (`<stage>.mprm`) plus a JSON sidecar (`<stage>.json`)
//! holding the config and vocabularies needed to rebuild the parameter layout.

use std::fs;
use std::path::{Path, PathBuf};

use measx_core::netcore::{checkpoint, ParamStore};
use measx_core::spanqa::{QaModel, QaSpec};
use measx_core::tagger::{TaggerModel, TaggerSpec};
use measx_core::unitmods::{UnitModsModel, UnitModsSpec};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Quantity,
    Unitmods,
    Qa,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Quantity, Stage::Unitmods, Stage::Qa];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Quantity => "quantity",
            Stage::Unitmods => "unitmods",
            Stage::Qa => "qa",
        }
    }

    pub fn params_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.mprm", self.name()))
    }

    pub fn sidecar_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.json", self.name()))
    }

    pub fn log_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.log.jsonl", self.name()))
    }
}

/// Pretty JSON with sorted keys and a trailing newline.
pub fn to_json<T: Serialize>(v: &T) -> String {
    let value = serde_json::to_value(v).expect("serialisable");
    let mut s = serde_json::to_string_pretty(&value).expect("serialisable");
    s.push('\n');
    s
}

fn save(stage: Stage, dir: &Path, store: &ParamStore, spec: &impl Serialize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = stage.params_path(dir);
    fs::write(&p, checkpoint::encode(store)).map_err(|e| Error::io(&p, e))?;
    let s = stage.sidecar_path(dir);
    fs::write(&s, to_json(spec)).map_err(|e| Error::io(&s, e))
}

fn load<S: DeserializeOwned>(stage: Stage, dir: &Path) -> Result<(S, Vec<u8>)> {
    let (p, s) = (stage.params_path(dir), stage.sidecar_path(dir));
    for f in [&p, &s] {
        if !f.is_file() {
            return Err(Error::MissingCheckpoint(f.clone()));
        }
    }
    let bad = |path: &Path, msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };
    let text = fs::read_to_string(&s).map_err(|e| bad(&s, e.to_string()))?;
    let spec = serde_json::from_str(&text).map_err(|e| bad(&s, e.to_string()))?;
    let bytes = fs::read(&p).map_err(|e| bad(&p, e.to_string()))?;
    Ok((spec, bytes))
}

fn fill(stage: Stage, dir: &Path, store: &mut ParamStore, bytes: &[u8]) -> Result<()> {
    checkpoint::load_into(store, bytes)
        .map_err(|e| Error::Checkpoint { path: stage.params_path(dir), msg: e.to_string() })
}

pub fn save_tagger(dir: &Path, m: &TaggerModel) -> Result<()> {
    save(Stage::Quantity, dir, &m.store, &m.spec())
}

pub fn save_unitmods(dir: &Path, m: &UnitModsModel) -> Result<()> {
    save(Stage::Unitmods, dir, &m.store, &m.spec())
}

pub fn save_qa(dir: &Path, m: &QaModel) -> Result<()> {
    save(Stage::Qa, dir, &m.store, &m.spec())
}

pub fn load_tagger(dir: &Path) -> Result<TaggerModel> {
    let (spec, bytes): (TaggerSpec, _) = load(Stage::Quantity, dir)?;
    let bad = |msg: String| Error::Checkpoint { path: Stage::Quantity.sidecar_path(dir), msg };
    let mut m = TaggerModel::new(spec, 0).map_err(|e| bad(e.to_string()))?;
    fill(Stage::Quantity, dir, &mut m.store, &bytes)?;
    Ok(m)
}

pub fn load_unitmods(dir: &Path) -> Result<UnitModsModel> {
    let (spec, bytes): (UnitModsSpec, _) = load(Stage::Unitmods, dir)?;
    let bad = |msg: String| Error::Checkpoint { path: Stage::Unitmods.sidecar_path(dir), msg };
    let mut m = UnitModsModel::new(spec, 0).map_err(|e| bad(e.to_string()))?;
    fill(Stage::Unitmods, dir, &mut m.store, &bytes)?;
    Ok(m)
}

pub fn load_qa(dir: &Path) -> Result<QaModel> {
    let (spec, bytes): (QaSpec, _) = load(Stage::Qa, dir)?;
    let bad = |msg: String| Error::Checkpoint { path: Stage::Qa.sidecar_path(dir), msg };
    let mut m = QaModel::new(spec, 0).map_err(|e| bad(e.to_string()))?;
    fill(Stage::Qa, dir, &mut m.store, &bytes)?;
    Ok(m)
}
