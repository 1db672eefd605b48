//! Run configuration: one JSON document covering every command, with every
//! default filled in before it is written out as `effective_config.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use qskd_core::toydetr::{ModelConfig, SceneSpec, Suite, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    /// The model trained by `train`, and the student of `distill` and `ablate`.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub teacher: TeacherConfig,
    pub ablate: AblateConfig,
    pub bench: BenchConfig,
    pub stats: StatsConfig,
    pub mask_dump: MaskDumpConfig,
    pub grad_check: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            teacher: TeacherConfig::default(),
            ablate: AblateConfig::default(),
            bench: BenchConfig::default(),
            stats: StatsConfig::default(),
            mask_dump: MaskDumpConfig::default(),
            grad_check: GradCheckConfig::default(),
        }
    }
}

/// Synthetic scenes: training scenes are indices `0..train_size` and held-out
/// scenes start at `eval_start`, both under `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
    pub eval_start: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scene: SceneSpec::default(),
            seed: 0,
            train_size: 2000,
            eval_size: 500,
            eval_start: 1_000_000,
        }
    }
}

/// The frozen teacher. It is loaded from `checkpoint` when given, otherwise
/// trained from scratch under `train` and saved next to the run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            model: ModelConfig {
                n_enc: 3,
                ffn_dim: 128,
                backbone_hidden: 128,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 20,
                seed: 100,
                ..TrainConfig::default()
            },
            checkpoint: None,
        }
    }
}

/// Suites run in one process share finished runs, so a configuration that
/// appears in several suites trains once per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub suites: Vec<Suite>,
    pub seeds: Vec<u64>,
    /// Per suite name, run only these cells; suites not listed run in full.
    pub cells: BTreeMap<String, Vec<String>>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            suites: vec![Suite::Components],
            seeds: vec![0, 1, 2],
            cells: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub n_q: usize,
    pub n_gt: usize,
    pub tau: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_q: 900,
            n_gt: 8,
            tau: 0.0,
            trials: 5,
            seed: 0,
        }
    }
}

/// Query statistics of a trained model over the held-out scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    pub checkpoint: Option<PathBuf>,
    pub thresholds: Vec<f64>,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            checkpoint: None,
            thresholds: vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskDumpConfig {
    pub checkpoint: Option<PathBuf>,
    /// Index into the held-out scenes.
    pub scene_index: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { instances: 20, seed: 0 }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from the defaults), applies `key=value`
    /// overrides and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let raw = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        let cfg: RunConfig = from_value(raw)?;
        let mut value = serde_json::to_value(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.data.scene.validate().map_err(invalid)?;
        self.model.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        self.teacher.model.validate().map_err(|e| invalid_in("teacher", e))?;
        self.teacher.train.validate().map_err(|e| invalid_in("teacher", e))?;
        if self.data.train_size == 0 || self.data.eval_size == 0 {
            return Err(CliError::Config("data: train_size and eval_size must be positive".into()));
        }
        if self.data.eval_start < self.data.train_size as u64 {
            return Err(CliError::Config(
                "data: eval_start must not overlap the training scenes".into(),
            ));
        }
        if self.ablate.seeds.is_empty() || self.ablate.suites.is_empty() {
            return Err(CliError::Config("ablate: suites and seeds must not be empty".into()));
        }
        for name in self.ablate.cells.keys() {
            let suite: Suite = name.parse().map_err(invalid)?;
            if !self.ablate.suites.contains(&suite) {
                return Err(CliError::Config(format!("ablate: cells given for suite {name} which is not run")));
            }
        }
        if self.stats.thresholds.is_empty() {
            return Err(CliError::Config("stats: thresholds must not be empty".into()));
        }
        if self.grad_check.instances == 0 {
            return Err(CliError::Config("grad_check: instances must be positive".into()));
        }
        Ok(())
    }

    /// Writes the configuration to `<output_dir>/effective_config.json`,
    /// creating the directory.
    pub fn write_effective(&self) -> CliResult<PathBuf> {
        fs::create_dir_all(&self.output_dir).map_err(|e| {
            CliError::Config(format!("cannot create output dir {}: {e}", self.output_dir.display()))
        })?;
        let path = self.output_dir.join(EFFECTIVE_CONFIG);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

fn invalid(e: qskd_core::Error) -> CliError {
    match e {
        qskd_core::Error::Config(m) => CliError::Config(m),
        other => CliError::Config(other.to_string()),
    }
}

fn invalid_in(section: &str, e: qskd_core::Error) -> CliError {
    match invalid(e) {
        CliError::Config(m) => CliError::Config(format!("{section}: {m}")),
        other => other,
    }
}

fn from_value(v: Value) -> CliResult<RunConfig> {
    serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))
}

/// `a.b.c=value`. The value is parsed as JSON when it can be, so
/// `train.epochs=3` sets a number and `output_dir=out` a string. Every
/// path segment must already exist in the materialized config.
pub fn apply_override(root: &mut Value, spec: &str) -> CliResult<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for key in path.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(key))
            .ok_or_else(|| CliError::Config(format!("unknown config key {path:?}")))?;
    }
    *node = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::load(
            None,
            &[
                "train.epochs=3".into(),
                "train.gqs.per_gt_cap=2".into(),
                r#"ablate.suites=["dec"]"#.into(),
                "output_dir=/tmp/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.gqs.per_gt_cap, Some(2));
        assert_eq!(cfg.ablate.suites, [Suite::Dec]);
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn bad_keys_and_values_are_config_errors() {
        for o in ["train.epoch=3", "train.epochs=-1", "train.epochs", "model.n_enc.x=1", "train.lambda_agfd=-1"] {
            let err = RunConfig::load(None, &[o.to_string()]).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{o}: {err}");
        }
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"epochs": 2, "lr": 1}}"#).unwrap();
        let err = RunConfig::load(Some(&p), &[]).unwrap_err();
        assert!(err.to_string().contains("lr"), "{err}");
        fs::write(&p, r#"{"train": {"epochs": 2}}"#).unwrap();
        let cfg = RunConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.lambda_agfd, 50.0);
    }
}
