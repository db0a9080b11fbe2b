//! Orchestration of the full workflow: configuration, the artifact layout
//! under the output directory, and a digest-chained run manifest that lets
//! every stage verify its upstream inputs before running.
//!
//! Stage outputs are deterministic given the config seed and a warm response
//! cache, so a rerun reproduces every artifact byte for byte. The manifest
//! and the latency diagnostics are the only files outside that guarantee
//! (they carry timestamps) and are therefore never digest-tracked.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::GatewayError;

mod config;
mod stages;

pub use config::{
    ConfigOverrides, EvalSection, FeaturesSection, LocalizationSection, ModelSection,
    PathsSection, ProviderKind, QuestionsSection, RunConfig, TrainSection,
};
pub use stages::{
    cmd_build_dataset, cmd_collect, cmd_eval, cmd_render, cmd_report, cmd_route, cmd_train,
    CollectSummary, EvalFlags, EvalSummary, RenderSummary, RouteSummary, TrainSummary,
};

pub const RUN_VERSION: &str = "vprun/1";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RENDER_DIR: &str = "render";
pub const SCORES_FILE: &str = "collect/scores.jsonl";
/// Timing diagnostics; intentionally outside the digest chain.
pub const LATENCY_FILE: &str = "collect/latency.json";
pub const DATASET_FILE: &str = "dataset/train.jsonl";
pub const DATASET_MANIFEST_FILE: &str = "dataset/manifest.json";
pub const MODEL_FILE: &str = "train/router.vpr";
pub const TRAIN_LOG_FILE: &str = "train/train_log.jsonl";
pub const CHOICES_FILE: &str = "route/choices.jsonl";
pub const COMPARISON_CSV: &str = "eval/comparison.csv";
pub const COMPARISON_TXT: &str = "eval/comparison.txt";
pub const CHAIR_FILE: &str = "eval/chair.json";
pub const JUDGE_DIR: &str = "eval/judge";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stale input for {stage}: {reason}")]
    StaleInput { stage: String, reason: String },
    #[error("provider: {0}")]
    Provider(GatewayError),
    #[error("internal: {0}")]
    Internal(String),
}

impl PipelineError {
    /// Process exit code contract: 0 ok, 2 config, 3 stale input, 4 provider
    /// failure, 5 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::StaleInput { .. } => 3,
            PipelineError::Provider(_) => 4,
            PipelineError::Internal(_) => 5,
        }
    }

    pub(crate) fn internal(err: impl std::fmt::Display) -> Self {
        PipelineError::Internal(err.to_string())
    }
}

impl From<GatewayError> for PipelineError {
    fn from(err: GatewayError) -> Self {
        match err {
            GatewayError::Cache(_) | GatewayError::Internal(_) | GatewayError::InvalidRequest(_) => {
                PipelineError::internal(err)
            }
            other => PipelineError::Provider(other),
        }
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(err: std::io::Error) -> Self {
        PipelineError::internal(err)
    }
}

pub fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

pub(crate) fn bytes_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now_unix_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// One completed stage: named input digests going in, artifact digests
/// coming out. Output keys are paths relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

/// The chain linking every stage's artifacts back to the config that made
/// them. Lives at `manifest.json` in the output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_digest: String,
    pub tool_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config_digest: String) -> Self {
        RunManifest {
            version: RUN_VERSION.into(),
            config_digest,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            stages: BTreeMap::new(),
        }
    }

    pub fn load(out_dir: &Path) -> Result<Option<RunManifest>, PipelineError> {
        let path = out_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        let manifest: RunManifest = serde_json::from_str(&text)
            .map_err(|e| PipelineError::internal(format!("corrupt {}: {e}", path.display())))?;
        if manifest.version != RUN_VERSION {
            return Err(PipelineError::internal(format!(
                "manifest version {:?}, this build writes {RUN_VERSION:?}",
                manifest.version
            )));
        }
        Ok(Some(manifest))
    }

    pub fn save(&self, out_dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(out_dir)?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(out_dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Re-hashes every artifact a stage recorded and reports the first file
    /// that is missing or changed.
    pub fn verify_stage_outputs(&self, out_dir: &Path, stage: &str) -> Result<(), String> {
        let record = self.stages.get(stage).ok_or_else(|| format!("stage {stage:?} has not run"))?;
        for (rel, expected) in &record.outputs {
            let path = out_dir.join(rel);
            if !path.exists() {
                return Err(format!("artifact {rel} is missing"));
            }
            let actual = file_digest(&path).map_err(|e| format!("artifact {rel}: {e}"))?;
            if &actual != expected {
                return Err(format!("artifact {rel} changed since {stage} ran"));
            }
        }
        Ok(())
    }
}

/// Loads the manifest for a downstream stage and checks the full upstream
/// chain, converting any discrepancy into a stale-input error that names the
/// stage to rerun.
pub(crate) fn require_upstream(
    out_dir: &Path,
    config_digest: &str,
    current: &str,
    upstream: &[&str],
) -> Result<RunManifest, PipelineError> {
    let manifest = RunManifest::load(out_dir)?.ok_or_else(|| PipelineError::StaleInput {
        stage: current.into(),
        reason: format!("no run manifest in the output directory; run `{}` first", upstream.join("` then `")),
    })?;
    if manifest.config_digest != config_digest {
        return Err(PipelineError::StaleInput {
            stage: current.into(),
            reason: format!("the effective config changed since this run started; rerun `{}`", upstream.join("` then `")),
        });
    }
    for dep in upstream {
        manifest.verify_stage_outputs(out_dir, dep).map_err(|reason| PipelineError::StaleInput {
            stage: current.into(),
            reason: format!("{reason}; rerun `{dep}`"),
        })?;
    }
    Ok(manifest)
}

/// Loads the manifest for a chain-root stage. A config change starts a fresh
/// chain instead of failing.
pub(crate) fn manifest_for_root(out_dir: &Path, config_digest: &str) -> Result<RunManifest, PipelineError> {
    match RunManifest::load(out_dir)? {
        Some(m) if m.config_digest == config_digest => Ok(m),
        _ => Ok(RunManifest::new(config_digest.to_string())),
    }
}

pub(crate) struct StageTimer {
    started: u64,
}

impl StageTimer {
    pub(crate) fn start() -> Self {
        StageTimer { started: now_unix_ms() }
    }

    pub(crate) fn record(
        self,
        inputs: BTreeMap<String, String>,
        outputs: BTreeMap<String, String>,
    ) -> StageRecord {
        StageRecord { inputs, outputs, started_unix_ms: self.started, finished_unix_ms: now_unix_ms() }
    }
}

/// Writes a file and returns its digest, creating parent directories.
pub(crate) fn write_artifact(out_dir: &Path, rel: &str, bytes: &[u8]) -> Result<String, PipelineError> {
    let path = out_dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, bytes)?;
    Ok(bytes_digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_and_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let mut manifest = RunManifest::new("cfg".into());
        let digest = write_artifact(out, "collect/scores.jsonl", b"line\n").unwrap();
        let timer = StageTimer::start();
        manifest.stages.insert(
            "collect".into(),
            timer.record(BTreeMap::new(), [("collect/scores.jsonl".to_string(), digest)].into()),
        );
        manifest.save(out).unwrap();

        let loaded = RunManifest::load(out).unwrap().unwrap();
        assert_eq!(loaded, manifest);
        assert!(loaded.verify_stage_outputs(out, "collect").is_ok());

        std::fs::write(out.join("collect/scores.jsonl"), b"tampered\n").unwrap();
        let err = loaded.verify_stage_outputs(out, "collect").unwrap_err();
        assert!(err.contains("changed since collect ran"), "{err}");
        assert!(loaded.verify_stage_outputs(out, "train").unwrap_err().contains("has not run"));
    }

    #[test]
    fn upstream_requirements_map_to_stale_errors() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        match require_upstream(out, "cfg", "build-dataset", &["collect"]) {
            Err(PipelineError::StaleInput { stage, reason }) => {
                assert_eq!(stage, "build-dataset");
                assert!(reason.contains("collect"), "{reason}");
            }
            other => panic!("expected stale input, got {other:?}"),
        }

        let manifest = RunManifest::new("other-config".into());
        manifest.save(out).unwrap();
        match require_upstream(out, "cfg", "train", &["build-dataset"]) {
            Err(PipelineError::StaleInput { reason, .. }) => assert!(reason.contains("config changed"), "{reason}"),
            other => panic!("expected stale input, got {other:?}"),
        }

        // A chain root is allowed to restart on config change.
        let fresh = manifest_for_root(out, "cfg").unwrap();
        assert_eq!(fresh.config_digest, "cfg");
        assert!(fresh.stages.is_empty());
    }

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(PipelineError::Config("x".into()).exit_code(), 2);
        assert_eq!(PipelineError::StaleInput { stage: "s".into(), reason: "r".into() }.exit_code(), 3);
        assert_eq!(
            PipelineError::from(GatewayError::Transport("down".into())).exit_code(),
            4
        );
        assert_eq!(PipelineError::Internal("x".into()).exit_code(), 5);
        assert_eq!(
            PipelineError::from(GatewayError::InvalidRequest("bad".into())).exit_code(),
            5
        );
    }
}
