//! Run configuration: a TOML or JSON file, then command-line overrides.

use std::path::{Path, PathBuf};

use march_core::evalharness::EvalConfig;
use march_core::llmgateway::BackendSpec;
use march_core::pipeline::PipelineConfig;
use march_core::toyworld::{BaseConfig, Difficulty};
use march_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// The one seed of a run. Every component seed is derived from it.
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; all cores when unset.
    pub jobs: Option<usize>,
    /// Subject backend for `rollout` and `eval`.
    pub backend: Option<BackendSpec>,
    /// Judge backend for `eval`; the offline gold-match judge when unset.
    pub judge: Option<BackendSpec>,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    /// Warm start of the toy policy before training.
    pub base: BaseConfig,
    pub difficulty: Difficulty,
    pub eval: EvalConfig,
    /// Start training from this checkpoint instead of a warm start.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            out: PathBuf::from("out"),
            jobs: None,
            backend: None,
            judge: None,
            pipeline: PipelineConfig::default(),
            train: TrainConfig::default(),
            base: BaseConfig::default(),
            difficulty: Difficulty::default(),
            eval: EvalConfig::default(),
            init_checkpoint: None,
        }
    }
}

impl RunConfig {
    /// Reads a config file. A run manifest is accepted too, in which case
    /// its recorded configuration is used.
    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let mut value: Value = if is_json {
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
        } else {
            toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
        };
        if let Some(cfg) = value.get_mut("run_config") {
            value = cfg.take();
        }
        serde_json::from_value(value).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Pushes the run seed into every component.
    pub fn derive_seeds(&mut self) {
        self.train.seed = self.seed;
        self.base.seed = self.seed;
        self.pipeline.seed = Some(self.seed);
        self.eval.seed = Some(self.seed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(
            &p,
            "seed = 7\n[train]\nsteps = 3\n[pipeline]\nchecker_samples = 5\n[pipeline.prompt]\nmin_questions = 3\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.pipeline.checker_samples, 5);
        assert_eq!(cfg.pipeline.prompt.min_questions, Some(3));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "sed = 7\n").unwrap();
        assert!(RunConfig::load(&p).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        let mut cfg = RunConfig {
            seed: 11,
            ..RunConfig::default()
        };
        cfg.derive_seeds();
        let manifest = serde_json::json!({"command": "train", "run_config": cfg});
        std::fs::write(&p, serde_json::to_string(&manifest).unwrap()).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), cfg);
    }
}
