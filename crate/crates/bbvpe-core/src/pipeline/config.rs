//! Run configuration: one TOML document, every path in it, and the CLI
//! overrides that shadow it.
//!
//! Relative paths in the file resolve against the file's own directory;
//! override paths are taken as given. Secrets never appear here — providers
//! read API keys from the environment variable *named* in `api_key_env`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{bytes_digest, PipelineError};
use crate::gateway::MockProfile;
use crate::pope::{PopeSetup, DEFAULT_N_NEG, DEFAULT_N_POS};
use crate::router::TrainConfig;
use crate::vp::{default_pool, PoolConfig, VisualPrompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for question sampling, training, and the random strategy.
    pub seed: u64,
    pub paths: PathsSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub questions: QuestionsSection,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub mock: MockProfile,
    #[serde(default)]
    pub features: FeaturesSection,
    #[serde(default)]
    pub localization: Option<LocalizationSection>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_max_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// COCO-style annotation JSON.
    pub annotations: PathBuf,
    /// Directory the annotation `file_name`s are relative to.
    pub image_dir: PathBuf,
    /// Append-only response cache file; created on first use.
    pub cache: PathBuf,
    /// All stage artifacts land here.
    pub output_dir: PathBuf,
    /// Optional two-column TSV overriding the built-in synonym table.
    #[serde(default)]
    pub synonyms: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// In-process deterministic stand-in; needs no network or key.
    Mock,
    /// OpenAI-style `/chat/completions` JSON API.
    ChatCompletions,
    /// Anthropic-style `/v1/messages` JSON API.
    Messages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Name the gateway and cache key the model under.
    pub reference: String,
    pub provider: ProviderKind,
    /// HTTP endpoint; required for any non-mock provider.
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key. The key itself
    /// must never be written into config.
    pub api_key_env: Option<String>,
    pub max_tokens: u32,
    pub timeout_secs: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            reference: "mock".into(),
            provider: ProviderKind::Mock,
            endpoint: None,
            api_key_env: None,
            max_tokens: 512,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuestionsSection {
    pub setup: PopeSetup,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl Default for QuestionsSection {
    fn default() -> Self {
        QuestionsSection { setup: PopeSetup::Random, n_pos: DEFAULT_N_POS, n_neg: DEFAULT_N_NEG }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub validation_fraction: f64,
    pub hidden_dim: usize,
    pub early_stop_patience: Option<u32>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::new(0);
        TrainSection {
            learning_rate: base.learning_rate,
            epochs: base.epochs,
            batch_size: base.batch_size,
            weight_decay: base.weight_decay,
            validation_fraction: base.validation_fraction,
            hidden_dim: base.hidden_dim,
            early_stop_patience: base.early_stop_patience,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            seed,
            validation_fraction: self.validation_fraction,
            hidden_dim: self.hidden_dim,
            early_stop_patience: self.early_stop_patience,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Leave the identity prompt out of the random strategy's pool.
    pub random_excludes_none: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturesSection {
    /// Feature-extraction HTTP endpoint; the built-in extractor when unset.
    pub endpoint: Option<String>,
    /// Required when `endpoint` is set: the vector length it returns.
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizationSection {
    /// Object-localization HTTP endpoint, used for images whose annotations
    /// carry no boxes.
    pub endpoint: String,
    #[serde(default)]
    pub min_score: Option<f64>,
}

/// CLI flags that shadow config keys; a set flag wins over the file.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub seed: Option<u64>,
    pub annotations: Option<PathBuf>,
    pub image_dir: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub model_ref: Option<String>,
    pub setup: Option<PopeSetup>,
    pub n_pos: Option<usize>,
    pub n_neg: Option<usize>,
    pub max_in_flight: Option<usize>,
    pub epochs: Option<u32>,
}

impl RunConfig {
    /// Parses, resolves paths, applies overrides, and validates. Referenced
    /// inputs (annotations, image dir) must exist now; outputs are created
    /// later.
    pub fn load(path: &Path, overrides: &ConfigOverrides) -> Result<RunConfig, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.paths.annotations = resolve(base, &config.paths.annotations);
        config.paths.image_dir = resolve(base, &config.paths.image_dir);
        config.paths.cache = resolve(base, &config.paths.cache);
        config.paths.output_dir = resolve(base, &config.paths.output_dir);
        config.paths.synonyms = config.paths.synonyms.as_ref().map(|p| resolve(base, p));
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, overrides: &ConfigOverrides) {
        let o = overrides.clone();
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(p) = o.annotations {
            self.paths.annotations = p;
        }
        if let Some(p) = o.image_dir {
            self.paths.image_dir = p;
        }
        if let Some(p) = o.cache {
            self.paths.cache = p;
        }
        if let Some(p) = o.output_dir {
            self.paths.output_dir = p;
        }
        if let Some(m) = o.model_ref {
            self.model.reference = m;
        }
        if let Some(s) = o.setup {
            self.questions.setup = s;
        }
        if let Some(n) = o.n_pos {
            self.questions.n_pos = n;
        }
        if let Some(n) = o.n_neg {
            self.questions.n_neg = n;
        }
        if let Some(n) = o.max_in_flight {
            self.max_in_flight = n;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |msg: String| Err(PipelineError::Config(msg));
        if !self.paths.annotations.is_file() {
            return cfg(format!("annotations file {} does not exist", self.paths.annotations.display()));
        }
        if !self.paths.image_dir.is_dir() {
            return cfg(format!("image dir {} does not exist", self.paths.image_dir.display()));
        }
        if let Some(synonyms) = &self.paths.synonyms {
            if !synonyms.is_file() {
                return cfg(format!("synonym table {} does not exist", synonyms.display()));
            }
        }
        if self.questions.n_pos + self.questions.n_neg == 0 {
            return cfg("questions: n_pos + n_neg must be at least 1".into());
        }
        if self.max_in_flight == 0 {
            return cfg("max_in_flight must be at least 1".into());
        }
        if self.model.provider != ProviderKind::Mock && self.model.endpoint.is_none() {
            return cfg(format!("model provider {:?} needs an endpoint", self.model.provider));
        }
        if self.model.reference.trim().is_empty() {
            return cfg("model reference must not be empty".into());
        }
        let t = &self.train;
        if !(t.learning_rate > 0.0) {
            return cfg(format!("train: learning_rate must be positive, got {}", t.learning_rate));
        }
        if t.epochs == 0 || t.batch_size == 0 || t.hidden_dim == 0 {
            return cfg("train: epochs, batch_size, and hidden_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&t.validation_fraction) {
            return cfg(format!("train: validation_fraction must be in [0, 1), got {}", t.validation_fraction));
        }
        if t.weight_decay < 0.0 {
            return cfg(format!("train: weight_decay must be non-negative, got {}", t.weight_decay));
        }
        for (name, acc) in std::iter::once(("default_accuracy", self.mock.default_accuracy))
            .chain(self.mock.per_prompt.iter().map(|(k, v)| (k.as_str(), *v)))
            .chain(self.mock.per_image.values().flatten().map(|(k, v)| (k.as_str(), *v)))
        {
            if !(0.0..=1.0).contains(&acc) {
                return cfg(format!("mock accuracy {name:?} must be in [0, 1], got {acc}"));
            }
        }
        if self.features.endpoint.is_some() && self.features.dim.is_none() {
            return cfg("features: dim is required when endpoint is set".into());
        }
        self.pool()?;
        Ok(())
    }

    /// The candidate pool under this config's overrides.
    pub fn pool(&self) -> Result<Vec<VisualPrompt>, PipelineError> {
        default_pool(&self.pool).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Digest of the effective (post-override) config; the run manifest pins
    /// it so stages notice when flags or the file change mid-chain.
    pub fn digest(&self) -> String {
        bytes_digest(&serde_json::to_vec(self).expect("config serializes"))
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn minimal_toml() -> String {
        // Paths are created by the test harness next to the config file.
        "seed = 7\n\n[paths]\nannotations = \"ann.json\"\nimage_dir = \"images\"\ncache = \"cache.vpc\"\noutput_dir = \"out\"\n"
            .to_string()
    }

    fn write_fixture(dir: &Path, toml_text: &str) -> PathBuf {
        fs::write(dir.join("ann.json"), "{\"images\":[],\"annotations\":[],\"categories\":[]}").unwrap();
        fs::create_dir_all(dir.join("images")).unwrap();
        let path = dir.join("run.toml");
        fs::write(&path, toml_text).unwrap();
        path
    }

    #[test]
    fn minimal_config_fills_defaults_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), &minimal_toml());
        let config = RunConfig::load(&path, &ConfigOverrides::default()).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.paths.annotations, dir.path().join("ann.json"));
        assert_eq!(config.model.reference, "mock");
        assert_eq!(config.model.provider, ProviderKind::Mock);
        assert_eq!(config.questions.n_pos, 3);
        assert_eq!(config.train.epochs, 20);
        assert_eq!(config.train.hidden_dim, 512);
        assert_eq!(config.max_in_flight, 4);
        assert_eq!(config.pool().unwrap().len(), 8);
    }

    #[test]
    fn missing_seed_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let toml_text = minimal_toml().replace("seed = 7\n", "");
        let path = write_fixture(dir.path(), &toml_text);
        match RunConfig::load(&path, &ConfigOverrides::default()) {
            Err(PipelineError::Config(msg)) => assert!(msg.contains("seed"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), &format!("{}\ntypo_key = 1\n", minimal_toml()));
        assert!(matches!(
            RunConfig::load(&path, &ConfigOverrides::default()),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn overrides_shadow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), &minimal_toml());
        let overrides = ConfigOverrides {
            seed: Some(99),
            setup: Some(PopeSetup::Adversarial),
            epochs: Some(3),
            model_ref: Some("gpt-test".into()),
            ..Default::default()
        };
        let config = RunConfig::load(&path, &overrides).unwrap();
        assert_eq!(config.seed, 99);
        assert_eq!(config.questions.setup, PopeSetup::Adversarial);
        assert_eq!(config.train.epochs, 3);
        assert_eq!(config.model.reference, "gpt-test");
        // The digest tracks the effective config, not the file.
        let plain = RunConfig::load(&path, &ConfigOverrides::default()).unwrap();
        assert_ne!(config.digest(), plain.digest());
        assert_eq!(plain.digest(), RunConfig::load(&path, &ConfigOverrides::default()).unwrap().digest());
    }

    #[test]
    fn validation_catches_bad_values() {
        let dir = tempfile::tempdir().unwrap();

        let bad_path = write_fixture(dir.path(), &minimal_toml().replace("ann.json", "missing.json"));
        assert!(matches!(RunConfig::load(&bad_path, &ConfigOverrides::default()), Err(PipelineError::Config(_))));

        let cases = [
            "[model]\nprovider = \"chat_completions\"\n",
            "[train]\nlearning_rate = 0.0\n",
            "[train]\nvalidation_fraction = 1.0\n",
            "[mock]\ndefault_accuracy = 1.5\n",
            "[pool]\ndrop = [\"none\"]\n",
            "[features]\nendpoint = \"http://x\"\n",
        ];
        for extra in cases {
            let path = write_fixture(dir.path(), &format!("{}\n{extra}", minimal_toml()));
            let got = RunConfig::load(&path, &ConfigOverrides::default());
            assert!(matches!(got, Err(PipelineError::Config(_))), "case {extra:?} gave {got:?}");
        }
    }

    #[test]
    fn secrets_stay_out_of_config() {
        let dir = tempfile::tempdir().unwrap();
        let toml_text = format!(
            "{}\n[model]\nprovider = \"chat_completions\"\nendpoint = \"https://api.example/v1/chat/completions\"\napi_key_env = \"EXAMPLE_API_KEY\"\n",
            minimal_toml()
        );
        let path = write_fixture(dir.path(), &toml_text);
        let config = RunConfig::load(&path, &ConfigOverrides::default()).unwrap();
        // Only the variable NAME is stored.
        assert_eq!(config.model.api_key_env.as_deref(), Some("EXAMPLE_API_KEY"));
    }
}
