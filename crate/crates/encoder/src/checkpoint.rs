//! Encoder checkpoints: one REPD file per parameter tensor plus a JSON
//! manifest holding the config, vocabulary and training settings.

use std::fs;
use std::path::{Path, PathBuf};

use amnesic::repd;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{io_error, EncoderError, Result};
use crate::model::{EncoderConfig, LayeredEncoder, Params};
use crate::train::TrainConfig;

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const FORMAT: &str = "amnesic-encoder/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub train_config: Option<TrainConfig>,
    pub seed: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

fn bad(path: &Path, reason: impl Into<String>) -> EncoderError {
    EncoderError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `enc` into directory `dir`, creating it if needed.
pub fn save_checkpoint(enc: &LayeredEncoder, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let mut tensors = Vec::new();
    for (name, t) in enc.params.named() {
        let file = format!("{name}.repd");
        repd::write(dir.join(&file), t)?;
        tensors.push(TensorEntry {
            name,
            file,
            shape: [t.nrows(), t.ncols()],
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.to_string(),
        config: enc.config,
        vocab: enc.vocab.clone(),
        train_config: enc.train_config.clone(),
        seed: enc.seed,
        tensors,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| io_error(&path, e))?;
    Ok(path)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<LayeredEncoder> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| bad(&path, e.to_string()))?;
    if m.format != FORMAT {
        return Err(bad(&path, format!("unsupported format {:?}", m.format)));
    }
    m.config.validate()?;
    let mut params = Params::zeros(&m.config, m.vocab.len());
    let expected: Vec<(String, [usize; 2])> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, [t.nrows(), t.ncols()]))
        .collect();
    if expected.len() != m.tensors.len() {
        return Err(bad(
            &path,
            format!("expected {} tensors, found {}", expected.len(), m.tensors.len()),
        ));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&m.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(bad(
                &path,
                format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    entry.name, entry.shape
                ),
            ));
        }
        let file = dir.join(&entry.file);
        let t = repd::read(&file)?;
        if t.dim() != (shape[0], shape[1]) {
            return Err(bad(&file, format!("shape {:?}, expected {shape:?}", t.dim())));
        }
        loaded.push(t);
    }
    let mut it = loaded.into_iter();
    params.for_each_mut(|_, t| *t = it.next().expect("counted above"));
    Ok(LayeredEncoder {
        config: m.config,
        vocab: m.vocab,
        params,
        train_config: m.train_config,
        seed: m.seed,
    })
}
