//! Checkpoints are two files: `<stem>.json`, a manifest with the
//! configuration, epoch, RNG state and the name, shape and byte offset of
//! every tensor, and `<stem>.bin`, the tensors as little-endian `f64`
//! values laid end to end.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ToyDetector};
use super::optim::{AdamW, AdamWConfig};
use super::scene::SceneSpec;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const FORMAT: &str = "qskd-checkpoint";
const VERSION: u32 = 1;

/// Where the run's random streams stand. Shuffling for epoch `e` uses
/// stream `e` of the generator seeded by `seed`, so the next epoch's stream
/// is the whole state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_stream: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ToyDetector,
    pub optimizer: Option<AdamW>,
    pub epoch: usize,
    /// Snapshot of the configuration that produced this state.
    pub config: serde_json::Value,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerManifest {
    config: AdamWConfig,
    step: u64,
    first_moment: Vec<TensorEntry>,
    second_moment: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    epoch: usize,
    config: serde_json::Value,
    model: ModelConfig,
    scene: SceneSpec,
    rng: RngState,
    blob: String,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerManifest>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

fn push_tensor(blob: &mut Vec<u8>, name: &str, t: &Tensor) -> TensorEntry {
    let entry = TensorEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        dtype: "f64le".into(),
        offset: blob.len() as u64,
    };
    for v in t.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    entry
}

fn read_tensor(blob: &[u8], e: &TensorEntry) -> Result<Tensor> {
    if e.dtype != "f64le" {
        return Err(Error::Checkpoint(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
    }
    let n: usize = e.shape.iter().product();
    let start = usize::try_from(e.offset).map_err(|_| Error::Checkpoint("offset overflow".into()))?;
    let end = start + n * 8;
    let bytes = blob
        .get(start..end)
        .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the end of the blob", e.name)))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(e.shape.clone(), data)
}

impl Checkpoint {
    /// Writes `<stem>.json` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (json_path, bin_path) = paths(stem);
        let mut blob = Vec::new();
        let tensors: Vec<TensorEntry> = self
            .model
            .params
            .iter()
            .map(|(n, t)| push_tensor(&mut blob, n, t))
            .collect();
        let optimizer = self.optimizer.as_ref().map(|o| {
            let names: Vec<&str> = self.model.params.iter().map(|(n, _)| n).collect();
            let first_moment = names.iter().zip(&o.m).map(|(n, t)| push_tensor(&mut blob, n, t)).collect();
            let second_moment = names.iter().zip(&o.v).map(|(n, t)| push_tensor(&mut blob, n, t)).collect();
            OptimizerManifest {
                config: o.config,
                step: o.step,
                first_moment,
                second_moment,
            }
        });
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            epoch: self.epoch,
            config: self.config.clone(),
            model: self.model.config.clone(),
            scene: self.model.scene.clone(),
            rng: self.rng,
            blob: bin_path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string(),
            tensors,
            optimizer,
        };
        if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(&bin_path, &blob)?;
        fs::write(&json_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    /// Reads a checkpoint from `<stem>.json` (a path ending in `.json` also works).
    pub fn load(stem: &Path) -> Result<Self> {
        let (json_path, _) = paths(stem);
        let text = fs::read_to_string(&json_path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", json_path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", json_path.display())))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            )));
        }
        let bin_path = json_path.with_file_name(&manifest.blob);
        let blob = fs::read(&bin_path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", bin_path.display())))?;
        manifest.model.validate()?;
        manifest.scene.validate()?;

        let mut params = ParamStore::new();
        for e in &manifest.tensors {
            params.insert(e.name.clone(), read_tensor(&blob, e)?);
        }
        let optimizer = match &manifest.optimizer {
            None => None,
            Some(o) => {
                if o.first_moment.len() != params.len() || o.second_moment.len() != params.len() {
                    return Err(Error::Checkpoint("optimizer state does not cover every parameter".into()));
                }
                let read_all = |entries: &[TensorEntry]| -> Result<Vec<Tensor>> {
                    entries.iter().map(|e| read_tensor(&blob, e)).collect()
                };
                Some(AdamW {
                    config: o.config,
                    step: o.step,
                    m: read_all(&o.first_moment)?,
                    v: read_all(&o.second_moment)?,
                })
            }
        };
        Ok(Checkpoint {
            model: ToyDetector {
                config: manifest.model,
                scene: manifest.scene,
                params,
            },
            optimizer,
            epoch: manifest.epoch,
            config: manifest.config,
            rng: manifest.rng,
        })
    }
}
