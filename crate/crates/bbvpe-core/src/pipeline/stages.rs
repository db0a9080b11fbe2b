//! The seven pipeline commands. Each stage loads what it needs, verifies its
//! upstream artifacts through the run manifest, writes its own artifacts, and
//! records their digests.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::config::{ProviderKind, RunConfig};
use super::{
    file_digest, manifest_for_root, require_upstream, write_artifact, PipelineError, StageTimer,
    CHAIR_FILE, CHOICES_FILE, COMPARISON_CSV, COMPARISON_TXT, DATASET_FILE, DATASET_MANIFEST_FILE,
    JUDGE_DIR, LATENCY_FILE, MODEL_FILE, RENDER_DIR, REPORT_FILE, SCORES_FILE, TRAIN_LOG_FILE,
};
use crate::annotations::{compute_stats, load_annotations, CategoryStats, LocalizationClient};
use crate::dataset::{
    build_dataset, evaluate_corpus, CorpusItem, DatasetError, DatasetManifest, EvaluationOptions,
    ImageEvaluation, RouterExample,
};
use crate::gateway::{
    ChatCompletionsProvider, DecodeParams, Gateway, GatewayError, LvlmProvider, LvlmRequest,
    MessagesProvider, MockLvlm, ResponseCache, DESCRIPTION_PROMPT,
};
use crate::http::UreqHttp;
use crate::metrics::{
    build_judge_prompt, chair, comparison_csv, comparison_table, oracle_choices,
    parse_judge_scores, run_comparators, ChairInput, ChairReport, ComparatorInput,
    ComparatorOptions, ComparisonReport, JudgeScores, MetricsError, SynonymTable,
    STRATEGY_BASELINE, STRATEGY_BBVPE, STRATEGY_BEST, STRATEGY_ORACLE,
};
use crate::raster::encode_png;
use crate::router::{
    fit, load_model, predict, save_model, BuiltinFeatures, EndpointFeatures, FeatureProvider,
    FeatureVector, RouterError, TrainExample,
};
use crate::vp::{apply_prompt, VisualPrompt};

struct LoadedCorpus {
    /// Loadable images, sorted by image id.
    items: Vec<CorpusItem>,
    stats: CategoryStats,
    categories: Vec<String>,
    /// (image id, reason) for images that could not be prepared.
    failures: Vec<(String, String)>,
}

/// Image ids become directory names under render/, so they must stay inert.
fn check_image_id(id: &str) -> Result<(), PipelineError> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(PipelineError::Config(format!(
            "image id {id:?} contains characters unsafe for artifact paths"
        )))
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<LoadedCorpus, PipelineError> {
    let corpus = load_annotations(&cfg.paths.annotations)
        .map_err(|e| PipelineError::Config(format!("annotations: {e}")))?;
    let localizer = cfg.localization.as_ref().map(|loc| {
        let http = Arc::new(UreqHttp::new(Duration::from_secs(cfg.model.timeout_secs)));
        let mut client = LocalizationClient::new(loc.endpoint.clone(), http);
        if let Some(min_score) = loc.min_score {
            client.min_score = min_score;
        }
        client
    });

    let mut items = Vec::new();
    let mut failures = Vec::new();
    for record in &corpus.records {
        check_image_id(&record.image_id)?;
        let path = cfg.paths.image_dir.join(&record.file_path);
        let raster = match crate::raster::load_image(&path) {
            Ok(raster) => raster,
            Err(e) => {
                failures.push((record.image_id.clone(), format!("{}: {e}", path.display())));
                continue;
            }
        };
        let mut record = record.clone();
        if record.boxes.is_empty() {
            if let Some(client) = &localizer {
                match client.localize(&raster) {
                    Ok(boxes) => record.boxes = boxes,
                    Err(e) => failures.push((record.image_id.clone(), format!("localization: {e}"))),
                }
            }
        }
        items.push(CorpusItem { record, raster });
    }
    items.sort_by(|a, b| a.record.image_id.cmp(&b.record.image_id));
    let stats = compute_stats(corpus.records.iter());
    Ok(LoadedCorpus { items, stats, categories: corpus.categories, failures })
}

fn build_gateway(cfg: &RunConfig, items: &[CorpusItem], categories: &[String]) -> Result<Gateway, PipelineError> {
    if let Some(parent) = cfg.paths.cache.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let cache = ResponseCache::open(&cfg.paths.cache)
        .map_err(|e| PipelineError::internal(format!("response cache: {e}")))?;
    let mut gateway = Gateway::new(cache);
    let provider: Arc<dyn LvlmProvider> = match cfg.model.provider {
        ProviderKind::Mock => {
            let mock = MockLvlm::new(cfg.mock.clone());
            for item in items {
                mock.register_image(item.raster.digest(), item.record.present.clone());
            }
            mock.extend_vocabulary(categories.iter().cloned());
            Arc::new(mock)
        }
        ProviderKind::ChatCompletions => {
            let endpoint = cfg.model.endpoint.clone().expect("validated");
            let http = Arc::new(UreqHttp::new(Duration::from_secs(cfg.model.timeout_secs)));
            Arc::new(ChatCompletionsProvider::new(
                endpoint,
                cfg.model.reference.clone(),
                cfg.model.api_key_env.clone().unwrap_or_default(),
                http,
            ))
        }
        ProviderKind::Messages => {
            let endpoint = cfg.model.endpoint.clone().expect("validated");
            let http = Arc::new(UreqHttp::new(Duration::from_secs(cfg.model.timeout_secs)));
            Arc::new(MessagesProvider::new(
                endpoint,
                cfg.model.reference.clone(),
                cfg.model.api_key_env.clone().unwrap_or_default(),
                http,
            ))
        }
    };
    gateway.register_provider(cfg.model.reference.clone(), provider);
    Ok(gateway)
}

fn feature_provider(cfg: &RunConfig) -> Result<Box<dyn FeatureProvider>, PipelineError> {
    match &cfg.features.endpoint {
        Some(endpoint) => {
            let dim = cfg.features.dim.expect("validated");
            let http = Arc::new(UreqHttp::new(Duration::from_secs(cfg.model.timeout_secs)));
            Ok(Box::new(EndpointFeatures::new(endpoint.clone(), dim, http)))
        }
        None => Ok(Box::new(BuiltinFeatures)),
    }
}

fn router_err(e: RouterError) -> PipelineError {
    match e {
        RouterError::InvalidConfig(m) => PipelineError::Config(m),
        RouterError::Endpoint(m) => PipelineError::Provider(GatewayError::Transport(m)),
        RouterError::Http(h) => PipelineError::Provider(h.into()),
        other => PipelineError::internal(other),
    }
}

fn dataset_err(e: DatasetError) -> PipelineError {
    match e {
        DatasetError::Gateway(g) => g.into(),
        other => PipelineError::internal(other),
    }
}

fn metrics_err(e: MetricsError) -> PipelineError {
    PipelineError::internal(e)
}

/// Digests of the external inputs every root stage depends on.
fn input_digests(cfg: &RunConfig) -> Result<BTreeMap<String, String>, PipelineError> {
    Ok([("annotations".to_string(), file_digest(&cfg.paths.annotations)?)].into())
}

fn decode_params(cfg: &RunConfig) -> DecodeParams {
    DecodeParams { greedy: true, max_tokens: cfg.model.max_tokens }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RenderSummary {
    pub written: usize,
    pub skipped: usize,
    /// Existing files whose digest no longer matched and were re-rendered.
    pub repaired: usize,
    pub failures: Vec<(String, String)>,
}

/// Writes every (image, prompt) PNG under render/. Reruns skip files whose
/// recorded digest still matches and re-render the rest.
pub fn cmd_render(cfg: &RunConfig) -> Result<RenderSummary, PipelineError> {
    let out = &cfg.paths.output_dir;
    let pool = cfg.pool()?;
    let corpus = load_corpus(cfg)?;
    let mut manifest = manifest_for_root(out, &cfg.digest())?;
    let previous = manifest.stages.get("render").map(|r| r.outputs.clone()).unwrap_or_default();

    let timer = StageTimer::start();
    let mut summary = RenderSummary { failures: corpus.failures.clone(), ..Default::default() };
    let mut outputs = BTreeMap::new();
    for item in &corpus.items {
        let regions: Vec<_> = item.record.boxes.iter().map(|b| b.region).collect();
        for prompt in &pool {
            let rel = format!("{RENDER_DIR}/{}/{}.png", item.record.image_id, prompt.id);
            let path = out.join(&rel);
            if let (Some(expected), true) = (previous.get(&rel), path.is_file()) {
                if file_digest(&path).ok().as_ref() == Some(expected) {
                    outputs.insert(rel, expected.clone());
                    summary.skipped += 1;
                    continue;
                }
            }
            let existed = path.is_file();
            match apply_prompt(&item.raster, prompt, &regions) {
                Ok(prompted) => {
                    let png = encode_png(&prompted.raster).map_err(PipelineError::internal)?;
                    let digest = write_artifact(out, &rel, &png)?;
                    outputs.insert(rel, digest);
                    if existed {
                        summary.repaired += 1;
                    } else {
                        summary.written += 1;
                    }
                }
                Err(e) => {
                    summary.failures.push((item.record.image_id.clone(), format!("{}: {e}", prompt.id)));
                }
            }
        }
    }
    manifest.stages.insert("render".into(), timer.record(input_digests(cfg)?, outputs));
    manifest.save(out)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct CollectSummary {
    pub images: usize,
    /// Images whose every pool prompt answered every question.
    pub complete: usize,
    pub provider_calls: u64,
    pub cached_hits: u64,
    pub failures: Vec<(String, String)>,
}

/// Diagnostics sidecar; carries timings, so it is never digest-tracked.
#[derive(Serialize)]
struct LatencyDiagnostics {
    provider_calls: u64,
    uncached_calls: u64,
    uncached_total_ms: f64,
    mean_uncached_ms: f64,
    cached_hits: u64,
    cache_entries: usize,
}

/// Asks every presence question for every (image, prompt) pair through the
/// cache-backed gateway and writes one evaluation per image.
pub fn cmd_collect(cfg: &RunConfig) -> Result<CollectSummary, PipelineError> {
    let out = &cfg.paths.output_dir;
    let pool = cfg.pool()?;
    let corpus = load_corpus(cfg)?;
    let gateway = build_gateway(cfg, &corpus.items, &corpus.categories)?;
    let opts = EvaluationOptions {
        model_ref: cfg.model.reference.clone(),
        setup: cfg.questions.setup,
        n_pos: cfg.questions.n_pos,
        n_neg: cfg.questions.n_neg,
        seed: cfg.seed,
        decode: decode_params(cfg),
        max_in_flight: cfg.max_in_flight,
    };
    let mut manifest = manifest_for_root(out, &cfg.digest())?;
    let timer = StageTimer::start();
    let evaluations = evaluate_corpus(&corpus.items, &pool, &corpus.stats, &gateway, &opts).map_err(dataset_err)?;

    let mut lines = String::new();
    for evaluation in &evaluations {
        lines.push_str(&serde_json::to_string(evaluation).expect("evaluation serializes"));
        lines.push('\n');
    }
    let scores_digest = write_artifact(out, SCORES_FILE, lines.as_bytes())?;

    let stats = gateway.latency_stats();
    let diagnostics = LatencyDiagnostics {
        provider_calls: gateway.provider_calls(),
        uncached_calls: stats.uncached_calls,
        uncached_total_ms: stats.uncached_total_ms,
        mean_uncached_ms: stats.mean_uncached_ms(),
        cached_hits: stats.cached_hits,
        cache_entries: gateway.cache().len(),
    };
    let diag_path = out.join(LATENCY_FILE);
    if let Some(parent) = diag_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&diag_path, serde_json::to_string_pretty(&diagnostics).expect("serializes"))?;

    let mut failures = corpus.failures.clone();
    for evaluation in &evaluations {
        for (prompt, reason) in &evaluation.failures {
            failures.push((evaluation.image_id.clone(), format!("{prompt}: {reason}")));
        }
    }
    let summary = CollectSummary {
        images: evaluations.len(),
        complete: evaluations.iter().filter(|e| !e.incomplete()).count(),
        provider_calls: diagnostics.provider_calls,
        cached_hits: diagnostics.cached_hits,
        failures,
    };
    manifest
        .stages
        .insert("collect".into(), timer.record(input_digests(cfg)?, [(SCORES_FILE.to_string(), scores_digest)].into()));
    manifest.save(out)?;
    Ok(summary)
}

fn read_evaluations(cfg: &RunConfig) -> Result<Vec<ImageEvaluation>, PipelineError> {
    let text = std::fs::read_to_string(cfg.paths.output_dir.join(SCORES_FILE))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| PipelineError::internal(format!("scores.jsonl: {e}"))))
        .collect()
}

/// Turns the per-image evaluations into (image, optimal prompt) training
/// pairs, excluding ties, degenerate images, and failures.
pub fn cmd_build_dataset(cfg: &RunConfig) -> Result<DatasetManifest, PipelineError> {
    let out = &cfg.paths.output_dir;
    let mut manifest = require_upstream(out, &cfg.digest(), "build-dataset", &["collect"])?;
    let evaluations = read_evaluations(cfg)?;
    let timer = StageTimer::start();
    let (examples, dataset_manifest) = build_dataset(&evaluations).map_err(dataset_err)?;

    let mut lines = String::new();
    for example in &examples {
        lines.push_str(&serde_json::to_string(example).expect("example serializes"));
        lines.push('\n');
    }
    let d_data = write_artifact(out, DATASET_FILE, lines.as_bytes())?;
    let d_manifest = write_artifact(
        out,
        DATASET_MANIFEST_FILE,
        serde_json::to_string_pretty(&dataset_manifest).expect("serializes").as_bytes(),
    )?;

    let scores_digest = manifest.stages["collect"].outputs[SCORES_FILE].clone();
    manifest.stages.insert(
        "build-dataset".into(),
        timer.record(
            [(SCORES_FILE.to_string(), scores_digest)].into(),
            [(DATASET_FILE.to_string(), d_data), (DATASET_MANIFEST_FILE.to_string(), d_manifest)].into(),
        ),
    );
    manifest.save(out)?;
    Ok(dataset_manifest)
}

fn read_examples(cfg: &RunConfig) -> Result<Vec<RouterExample>, PipelineError> {
    let text = std::fs::read_to_string(cfg.paths.output_dir.join(DATASET_FILE))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| PipelineError::internal(format!("train.jsonl: {e}"))))
        .collect()
}

/// image id → (source digest hex, features).
fn compute_features(
    items: &[CorpusItem],
    provider: &dyn FeatureProvider,
) -> Result<BTreeMap<String, (String, FeatureVector)>, PipelineError> {
    let extracted = crate::exec::map_collect(items, |item| {
        provider
            .extract(&item.raster)
            .map(|fv| (item.record.image_id.clone(), (item.raster.digest_hex(), fv)))
    });
    extracted.into_iter().collect::<Result<_, _>>().map_err(router_err)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub examples: usize,
    pub held_out: usize,
    pub epochs_run: u32,
    pub final_train_loss: f64,
    pub final_val_accuracy: Option<f64>,
}

/// Fits the router on the dataset and writes the model plus a per-epoch log.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, PipelineError> {
    let out = &cfg.paths.output_dir;
    let mut manifest = require_upstream(out, &cfg.digest(), "train", &["collect", "build-dataset"])?;
    let examples = read_examples(cfg)?;
    if examples.is_empty() {
        return Err(PipelineError::Config(
            "the dataset has no training examples (every image was excluded); nothing to train".into(),
        ));
    }
    let pool = cfg.pool()?;
    let prompt_order: Vec<String> = pool.iter().map(|p| p.id.clone()).collect();
    let corpus = load_corpus(cfg)?;
    let provider = feature_provider(cfg)?;
    let features = compute_features(&corpus.items, provider.as_ref())?;

    let mut train_examples = Vec::with_capacity(examples.len());
    for example in &examples {
        let (digest_hex, fv) = features.get(&example.image_id).ok_or_else(|| PipelineError::StaleInput {
            stage: "train".into(),
            reason: format!("image {} is no longer loadable; rerun collect and build-dataset", example.image_id),
        })?;
        if digest_hex != &example.feature_ref {
            return Err(PipelineError::StaleInput {
                stage: "train".into(),
                reason: format!(
                    "image {} changed since collect ran; rerun collect and build-dataset",
                    example.image_id
                ),
            });
        }
        train_examples.push(TrainExample {
            image_id: example.image_id.clone(),
            features: fv.clone(),
            label: example.label.clone(),
        });
    }

    let timer = StageTimer::start();
    let train_config = cfg.train.to_train_config(cfg.seed);
    let (model, log) = fit(&train_examples, &prompt_order, provider.id(), &train_config).map_err(router_err)?;
    save_model(&model, &out.join(MODEL_FILE)).map_err(router_err)?;
    let model_digest = file_digest(&out.join(MODEL_FILE))?;

    let mut log_lines = String::new();
    for entry in &log {
        log_lines.push_str(&serde_json::to_string(entry).expect("serializes"));
        log_lines.push('\n');
    }
    let log_digest = write_artifact(out, TRAIN_LOG_FILE, log_lines.as_bytes())?;

    let dataset_digest = manifest.stages["build-dataset"].outputs[DATASET_FILE].clone();
    manifest.stages.insert(
        "train".into(),
        timer.record(
            [(DATASET_FILE.to_string(), dataset_digest), ("feature_provider".to_string(), provider.id().to_string())]
                .into(),
            [(MODEL_FILE.to_string(), model_digest), (TRAIN_LOG_FILE.to_string(), log_digest)].into(),
        ),
    );
    manifest.save(out)?;

    let last = log.last().expect("at least one epoch");
    let held_out = train_examples
        .iter()
        .filter(|e| crate::router::in_validation_split(&e.image_id, train_config.validation_fraction))
        .count();
    Ok(TrainSummary {
        examples: train_examples.len(),
        held_out,
        epochs_run: model.metadata.epochs,
        final_train_loss: last.train_loss,
        final_val_accuracy: last.val_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteChoice {
    pub image_id: String,
    pub prompt_id: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RouteSummary {
    pub images: usize,
    pub histogram: BTreeMap<String, usize>,
}

/// Runs the trained router over the corpus and writes one chosen prompt id
/// per image.
pub fn cmd_route(cfg: &RunConfig) -> Result<RouteSummary, PipelineError> {
    let out = &cfg.paths.output_dir;
    let mut manifest = require_upstream(out, &cfg.digest(), "route", &["train"])?;
    let model = load_model(&out.join(MODEL_FILE)).map_err(|e| PipelineError::StaleInput {
        stage: "route".into(),
        reason: format!("cannot load the router model: {e}; rerun train"),
    })?;
    let pool = cfg.pool()?;
    let prompt_order: Vec<String> = pool.iter().map(|p| p.id.clone()).collect();
    model.verify_prompt_order(&prompt_order).map_err(|e| PipelineError::StaleInput {
        stage: "route".into(),
        reason: format!("{e}; rerun train"),
    })?;
    let provider = feature_provider(cfg)?;
    if model.provider_id != provider.id() {
        return Err(PipelineError::StaleInput {
            stage: "route".into(),
            reason: format!(
                "model was trained with feature provider {:?} but the config now selects {:?}; rerun train",
                model.provider_id,
                provider.id()
            ),
        });
    }

    let corpus = load_corpus(cfg)?;
    let timer = StageTimer::start();
    let mut lines = String::new();
    let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
    for item in &corpus.items {
        let features = provider.extract(&item.raster).map_err(router_err)?;
        let prompt_id = predict(&model, &features).map_err(router_err)?;
        *histogram.entry(prompt_id.to_string()).or_insert(0) += 1;
        let choice = RouteChoice { image_id: item.record.image_id.clone(), prompt_id: prompt_id.to_string() };
        lines.push_str(&serde_json::to_string(&choice).expect("serializes"));
        lines.push('\n');
    }
    let choices_digest = write_artifact(out, CHOICES_FILE, lines.as_bytes())?;

    let model_digest = manifest.stages["train"].outputs[MODEL_FILE].clone();
    manifest.stages.insert(
        "route".into(),
        timer.record(
            [(MODEL_FILE.to_string(), model_digest)].into(),
            [(CHOICES_FILE.to_string(), choices_digest)].into(),
        ),
    );
    manifest.save(out)?;
    Ok(RouteSummary { images: corpus.items.len(), histogram })
}

fn read_choices(cfg: &RunConfig) -> Result<BTreeMap<String, String>, PipelineError> {
    let text = std::fs::read_to_string(cfg.paths.output_dir.join(CHOICES_FILE))?;
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let choice: RouteChoice =
            serde_json::from_str(line).map_err(|e| PipelineError::internal(format!("choices.jsonl: {e}")))?;
        map.insert(choice.image_id, choice.prompt_id);
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalFlags {
    /// Also compute hallucination rates over generated descriptions.
    pub chair: bool,
    /// Also run the eight-description judge protocol per image.
    pub judge: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub comparison: ComparisonReport,
    pub chair: Option<BTreeMap<String, ChairReport>>,
    pub judged_images: usize,
    pub notices: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JudgeArtifact {
    image_id: String,
    /// Description d in the judge prompt came from prompt_order[d].
    prompt_order: Vec<String>,
    scores: JudgeScores,
}

fn describe_image(
    gateway: &Gateway,
    cfg: &RunConfig,
    item: &CorpusItem,
    prompt: &VisualPrompt,
) -> Result<String, PipelineError> {
    let regions: Vec<_> = item.record.boxes.iter().map(|b| b.region).collect();
    let prompted = apply_prompt(&item.raster, prompt, &regions).map_err(PipelineError::internal)?;
    let response = gateway.query(&LvlmRequest {
        model_ref: cfg.model.reference.clone(),
        image: prompted,
        text: DESCRIPTION_PROMPT.to_string(),
        decode: decode_params(cfg),
    })?;
    Ok(response.text)
}

/// Compares selection strategies on the collected scores and optionally adds
/// description-level hallucination rates and judge scores.
pub fn cmd_eval(cfg: &RunConfig, flags: &EvalFlags) -> Result<EvalSummary, PipelineError> {
    let out = &cfg.paths.output_dir;
    let mut manifest = require_upstream(out, &cfg.digest(), "eval", &["collect"])?;
    let evaluations = read_evaluations(cfg)?;
    let pool = cfg.pool()?;
    let prompt_order: Vec<String> = pool.iter().map(|p| p.id.clone()).collect();
    for evaluation in &evaluations {
        if evaluation.expected_prompts != pool.len() {
            return Err(PipelineError::StaleInput {
                stage: "eval".into(),
                reason: format!(
                    "scores were collected against a {}-prompt pool but the config now builds {}; rerun collect",
                    evaluation.expected_prompts,
                    pool.len()
                ),
            });
        }
    }

    let mut notices = Vec::new();
    let complete: Vec<ImageEvaluation> =
        evaluations.iter().filter(|e| !e.incomplete()).cloned().collect();
    if complete.len() < evaluations.len() {
        notices.push(format!(
            "{} of {} images had failed prompt sessions and were left out",
            evaluations.len() - complete.len(),
            evaluations.len()
        ));
    }
    if complete.is_empty() {
        return Err(PipelineError::Config("no complete image evaluations to compare; check collect failures".into()));
    }

    let router_choice = if manifest.stages.contains_key("route") {
        manifest.verify_stage_outputs(out, "route").map_err(|reason| PipelineError::StaleInput {
            stage: "eval".into(),
            reason: format!("{reason}; rerun route"),
        })?;
        Some(read_choices(cfg)?)
    } else {
        None
    };

    let timer = StageTimer::start();
    let comparator_input = ComparatorInput {
        evaluations: complete.clone(),
        pool_order: prompt_order.clone(),
        router_choice,
    };
    let comparator_opts = ComparatorOptions {
        seed: cfg.seed,
        random_excludes_none: cfg.eval.random_excludes_none,
    };
    let comparison = run_comparators(&comparator_input, &comparator_opts).map_err(metrics_err)?;
    notices.extend(comparison.notices.iter().cloned());

    let mut outputs = BTreeMap::new();
    outputs.insert(
        COMPARISON_CSV.to_string(),
        write_artifact(out, COMPARISON_CSV, comparison_csv(&comparison).as_bytes())?,
    );
    outputs.insert(
        COMPARISON_TXT.to_string(),
        write_artifact(out, COMPARISON_TXT, comparison_table(&comparison).as_bytes())?,
    );

    let mut chair_reports = None;
    let mut judged_images = 0usize;
    if flags.chair || flags.judge {
        let corpus = load_corpus(cfg)?;
        let gateway = build_gateway(cfg, &corpus.items, &corpus.categories)?;
        let items_by_id: BTreeMap<&str, &CorpusItem> =
            corpus.items.iter().map(|item| (item.record.image_id.as_str(), item)).collect();
        let prompts_by_id: BTreeMap<&str, &VisualPrompt> =
            pool.iter().map(|p| (p.id.as_str(), p)).collect();

        if flags.chair {
            let table = match &cfg.paths.synonyms {
                Some(path) => SynonymTable::from_tsv(path).map_err(|e| PipelineError::Config(e.to_string()))?,
                None => SynonymTable::identity(corpus.categories.iter().map(String::as_str)),
            };

            let mut strategies: Vec<(&str, BTreeMap<String, String>)> = Vec::new();
            let all_none: BTreeMap<String, String> =
                complete.iter().map(|e| (e.image_id.clone(), "none".to_string())).collect();
            strategies.push((STRATEGY_BASELINE, all_none));
            let best_prompt = comparison
                .row(STRATEGY_BEST)
                .and_then(|r| r.detail.clone())
                .ok_or_else(|| PipelineError::internal("comparison has no best_vp row"))?;
            strategies.push((
                STRATEGY_BEST,
                complete.iter().map(|e| (e.image_id.clone(), best_prompt.clone())).collect(),
            ));
            if let Some(choices) = &comparator_input.router_choice {
                strategies.push((STRATEGY_BBVPE, choices.clone()));
            }
            strategies.push((STRATEGY_ORACLE, oracle_choices(&comparator_input).map_err(metrics_err)?));

            let mut reports = BTreeMap::new();
            for (name, choices) in strategies {
                let mut inputs = Vec::new();
                for evaluation in &complete {
                    let Some(item) = items_by_id.get(evaluation.image_id.as_str()) else {
                        notices.push(format!("image {} not loadable for descriptions", evaluation.image_id));
                        continue;
                    };
                    let prompt_id = choices.get(&evaluation.image_id).expect("choice per image");
                    let prompt = prompts_by_id
                        .get(prompt_id.as_str())
                        .ok_or_else(|| PipelineError::internal(format!("unknown prompt {prompt_id:?}")))?;
                    inputs.push(ChairInput {
                        description: describe_image(&gateway, cfg, item, prompt)?,
                        truth: item.record.present.clone(),
                    });
                }
                reports.insert(name.to_string(), chair(&inputs, &table).map_err(metrics_err)?);
            }
            outputs.insert(
                CHAIR_FILE.to_string(),
                write_artifact(out, CHAIR_FILE, serde_json::to_string_pretty(&reports).expect("serializes").as_bytes())?,
            );
            chair_reports = Some(reports);
        }

        if flags.judge {
            if pool.len() != crate::metrics::JUDGE_DESCRIPTION_COUNT {
                return Err(PipelineError::Config(format!(
                    "the judge protocol rates exactly {} descriptions, but the pool has {} prompts",
                    crate::metrics::JUDGE_DESCRIPTION_COUNT,
                    pool.len()
                )));
            }
            for evaluation in &complete {
                let Some(item) = items_by_id.get(evaluation.image_id.as_str()) else {
                    notices.push(format!("image {} not loadable for judging", evaluation.image_id));
                    continue;
                };
                let descriptions: Vec<String> = pool
                    .iter()
                    .map(|prompt| describe_image(&gateway, cfg, item, prompt))
                    .collect::<Result<_, _>>()?;
                let instruction = build_judge_prompt(&descriptions).map_err(metrics_err)?;
                let unprompted = apply_prompt(&item.raster, &pool[0], &[]).map_err(PipelineError::internal)?;
                let reply = gateway.query(&LvlmRequest {
                    model_ref: cfg.model.reference.clone(),
                    image: unprompted,
                    text: instruction,
                    decode: decode_params(cfg),
                })?;
                match parse_judge_scores(&reply.text) {
                    Ok(scores) => {
                        let artifact = JudgeArtifact {
                            image_id: evaluation.image_id.clone(),
                            prompt_order: prompt_order.clone(),
                            scores,
                        };
                        let rel = format!("{JUDGE_DIR}/{}.json", evaluation.image_id);
                        let digest = write_artifact(
                            out,
                            &rel,
                            serde_json::to_string_pretty(&artifact).expect("serializes").as_bytes(),
                        )?;
                        outputs.insert(rel, digest);
                        judged_images += 1;
                    }
                    Err(e) => notices.push(format!("judge reply for image {} unusable: {e}", evaluation.image_id)),
                }
            }
        }
    }

    let scores_digest = manifest.stages["collect"].outputs[SCORES_FILE].clone();
    let mut inputs: BTreeMap<String, String> = [(SCORES_FILE.to_string(), scores_digest)].into();
    if let Some(route) = manifest.stages.get("route") {
        inputs.insert(CHOICES_FILE.to_string(), route.outputs[CHOICES_FILE].clone());
    }
    manifest.stages.insert("eval".into(), timer.record(inputs, outputs));
    manifest.save(out)?;
    Ok(EvalSummary { comparison, chair: chair_reports, judged_images, notices })
}

/// Renders a human-readable summary of everything the run produced, after
/// verifying the whole artifact chain. The text contains no timestamps, so a
/// rerun over unchanged artifacts reproduces it byte for byte.
pub fn cmd_report(cfg: &RunConfig) -> Result<String, PipelineError> {
    let out = &cfg.paths.output_dir;
    let mut manifest = super::RunManifest::load(out)?.ok_or_else(|| PipelineError::StaleInput {
        stage: "report".into(),
        reason: "no run manifest; run the pipeline stages first".into(),
    })?;
    if manifest.config_digest != cfg.digest() {
        return Err(PipelineError::StaleInput {
            stage: "report".into(),
            reason: "the effective config changed since this run started; rerun the pipeline".into(),
        });
    }
    let stage_names: Vec<String> = manifest.stages.keys().filter(|s| s.as_str() != "report").cloned().collect();
    for stage in &stage_names {
        manifest.verify_stage_outputs(out, stage).map_err(|reason| PipelineError::StaleInput {
            stage: "report".into(),
            reason: format!("{reason}; rerun {stage}"),
        })?;
    }

    let mut text = String::new();
    text.push_str(&format!("run report (tool {}, config {})\n", manifest.tool_version, &manifest.config_digest[..12]));
    text.push_str(&format!("stages recorded: {}\n", stage_names.join(", ")));

    let dataset_path = out.join(DATASET_MANIFEST_FILE);
    if dataset_path.is_file() {
        let m: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&dataset_path)?)
            .map_err(|e| PipelineError::internal(format!("dataset manifest: {e}")))?;
        text.push_str(&format!(
            "\ndataset: {} images -> {} examples (ties {}, degenerate {}, incomplete {})\n",
            m.total_images,
            m.label_histogram.values().sum::<usize>(),
            m.excluded_tie,
            m.excluded_degenerate,
            m.excluded_incomplete
        ));
        for (label, count) in &m.label_histogram {
            text.push_str(&format!("  {label}: {count}\n"));
        }
    }

    let log_path = out.join(TRAIN_LOG_FILE);
    if log_path.is_file() {
        if let Some(last) = std::fs::read_to_string(&log_path)?.lines().filter(|l| !l.trim().is_empty()).last() {
            let entry: crate::router::EpochStats =
                serde_json::from_str(last).map_err(|e| PipelineError::internal(format!("train log: {e}")))?;
            text.push_str(&format!(
                "\ntraining: {} epochs, final loss {:.4}, validation accuracy {}\n",
                entry.epoch,
                entry.train_loss,
                entry.val_accuracy.map(|a| format!("{a:.3}")).unwrap_or_else(|| "n/a".into())
            ));
        }
    }

    let comparison_path = out.join(COMPARISON_TXT);
    if comparison_path.is_file() {
        text.push('\n');
        text.push_str(&std::fs::read_to_string(&comparison_path)?);
    }

    let chair_path = out.join(CHAIR_FILE);
    if chair_path.is_file() {
        let reports: BTreeMap<String, ChairReport> = serde_json::from_str(&std::fs::read_to_string(&chair_path)?)
            .map_err(|e| PipelineError::internal(format!("chair report: {e}")))?;
        text.push_str("\nhallucination rates (sentence / instance):\n");
        for (strategy, report) in &reports {
            text.push_str(&format!("  {strategy}: {:.4} / {:.4}\n", report.ch_s, report.ch_i));
        }
    }

    let timer = StageTimer::start();
    let digest = write_artifact(out, REPORT_FILE, text.as_bytes())?;
    manifest
        .stages
        .insert("report".into(), timer.record(BTreeMap::new(), [(REPORT_FILE.to_string(), digest)].into()));
    manifest.save(out)?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::ConfigOverrides;
    use crate::raster::{Color, ImageRaster};
    use std::path::Path;

    /// A small corpus: n images with three object categories each, drawn from
    /// an eight-category universe, plus a run config pointing at everything.
    /// The mock strongly favors reverse_blur so most images get a unique
    /// optimal prompt and the training set is non-empty.
    fn fixture(dir: &Path, n: usize, extra_toml: &str) -> RunConfig {
        let image_dir = dir.join("images");
        std::fs::create_dir_all(&image_dir).unwrap();
        let mut images = Vec::new();
        let mut annotations = Vec::new();
        for i in 0..n {
            let (w, h) = (48u32, 36u32);
            let mut img = ImageRaster::new(w, h, Color::new((i * 37 % 256) as u8, 80, 200)).unwrap();
            for y in 0..h {
                for x in 0..w {
                    if (x + y + i as u32) % 7 == 0 {
                        img.set(x, y, Color::new(255, (x * 3 % 256) as u8, (y * 5 % 256) as u8));
                    }
                }
            }
            let file_name = format!("img{i:03}.png");
            crate::raster::save_image(&img, &image_dir.join(&file_name)).unwrap();
            images.push(serde_json::json!({"id": i, "file_name": file_name, "width": w, "height": h}));
            for (slot, offset) in [0usize, 2, 5].into_iter().enumerate() {
                annotations.push(serde_json::json!({
                    "image_id": i,
                    "category_id": (i + offset) % 8 + 1,
                    "bbox": [4.0 + 13.0 * slot as f64, 5.0, 11.0, 12.0]
                }));
            }
        }
        let categories: Vec<_> = ["cat", "dog", "bird", "car", "tree", "chair", "horse", "boat"]
            .iter()
            .enumerate()
            .map(|(id, name)| serde_json::json!({"id": id + 1, "name": name}))
            .collect();
        let coco = serde_json::json!({"images": images, "annotations": annotations, "categories": categories});
        std::fs::write(dir.join("ann.json"), serde_json::to_string(&coco).unwrap()).unwrap();

        let toml_text = format!(
            "seed = 11\n\n[paths]\nannotations = \"ann.json\"\nimage_dir = \"images\"\ncache = \"cache/responses.vpc\"\noutput_dir = \"out\"\n\n[questions]\nn_pos = 3\nn_neg = 3\n\n[train]\nepochs = 3\nhidden_dim = 16\nbatch_size = 8\nvalidation_fraction = 0.25\n\n[mock]\ndefault_accuracy = 0.3\n\n[mock.per_prompt]\nreverse_blur = 0.95\n{extra_toml}"
        );
        let config_path = dir.join("run.toml");
        std::fs::write(&config_path, toml_text).unwrap();
        RunConfig::load(&config_path, &ConfigOverrides::default()).unwrap()
    }

    #[test]
    fn full_pipeline_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path(), 6, "");
        let out = &cfg.paths.output_dir;

        let render = cmd_render(&cfg).unwrap();
        assert_eq!(render.written, 6 * 8);
        assert_eq!(render.skipped, 0);
        assert!(render.failures.is_empty());
        assert!(out.join("render/0/bounding_box.png").is_file());

        let collect = cmd_collect(&cfg).unwrap();
        assert_eq!(collect.images, 6);
        assert_eq!(collect.complete, 6);
        assert!(collect.provider_calls > 0);

        let dataset = cmd_build_dataset(&cfg).unwrap();
        assert_eq!(dataset.total_images, 6);
        let kept: usize = dataset.label_histogram.values().sum();
        assert_eq!(kept + dataset.excluded_tie + dataset.excluded_degenerate + dataset.excluded_incomplete, 6);
        assert!(kept >= 3, "fixture should yield trainable examples, got {kept}");

        let train = cmd_train(&cfg).unwrap();
        assert_eq!(train.examples, kept);
        assert!(out.join(MODEL_FILE).is_file());

        let route = cmd_route(&cfg).unwrap();
        assert_eq!(route.images, 6);
        assert_eq!(route.histogram.values().sum::<usize>(), 6);

        let eval = cmd_eval(&cfg, &EvalFlags::default()).unwrap();
        assert!(eval.comparison.row("oracle").is_some());
        assert!(eval.comparison.row("bbvpe").is_some());
        assert!(out.join(COMPARISON_CSV).is_file());

        let report = cmd_report(&cfg).unwrap();
        assert!(report.contains("oracle"));
        assert_eq!(report, std::fs::read_to_string(out.join(REPORT_FILE)).unwrap());
    }

    #[test]
    fn render_reruns_skip_then_repair() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path(), 2, "");
        let first = cmd_render(&cfg).unwrap();
        assert_eq!(first.written, 16);

        let second = cmd_render(&cfg).unwrap();
        assert_eq!((second.written, second.repaired, second.skipped), (0, 0, 16));

        let victim = cfg.paths.output_dir.join("render/1/circle.png");
        std::fs::write(&victim, b"garbage").unwrap();
        let third = cmd_render(&cfg).unwrap();
        assert_eq!((third.written, third.repaired, third.skipped), (0, 1, 15));
        // The repaired file decodes again.
        assert!(crate::raster::load_image(&victim).is_ok());
    }

    #[test]
    fn warm_cache_rerun_issues_no_provider_calls_and_rewrites_identical_scores() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path(), 3, "");
        let cold = cmd_collect(&cfg).unwrap();
        assert!(cold.provider_calls > 0);
        let digest_cold = file_digest(&cfg.paths.output_dir.join(SCORES_FILE)).unwrap();

        let warm = cmd_collect(&cfg).unwrap();
        assert_eq!(warm.provider_calls, 0);
        assert!(warm.cached_hits > 0);
        assert_eq!(file_digest(&cfg.paths.output_dir.join(SCORES_FILE)).unwrap(), digest_cold);
    }

    #[test]
    fn tampered_scores_stop_downstream_stages() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path(), 2, "");
        cmd_collect(&cfg).unwrap();
        let scores = cfg.paths.output_dir.join(SCORES_FILE);
        let mut text = std::fs::read_to_string(&scores).unwrap();
        text.push('\n');
        std::fs::write(&scores, text).unwrap();
        match cmd_build_dataset(&cfg) {
            Err(PipelineError::StaleInput { stage, reason }) => {
                assert_eq!(stage, "build-dataset");
                assert!(reason.contains("rerun `collect`"), "{reason}");
            }
            other => panic!("expected stale input, got {other:?}"),
        }
    }

    #[test]
    fn route_without_training_is_stale() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path(), 2, "");
        cmd_collect(&cfg).unwrap();
        match cmd_route(&cfg) {
            Err(PipelineError::StaleInput { stage, .. }) => assert_eq!(stage, "route"),
            other => panic!("expected stale input, got {other:?}"),
        }
    }

    #[test]
    fn eval_without_route_omits_the_routed_row_with_notice() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path(), 3, "");
        cmd_collect(&cfg).unwrap();
        let eval = cmd_eval(&cfg, &EvalFlags::default()).unwrap();
        assert!(eval.comparison.row("bbvpe").is_none());
        assert!(eval.notices.iter().any(|n| n.contains("no router")), "{:?}", eval.notices);
    }

    #[test]
    fn chair_and_judge_flags_produce_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path(), 2, "");
        cmd_collect(&cfg).unwrap();
        let eval = cmd_eval(&cfg, &EvalFlags { chair: true, judge: true }).unwrap();

        let chair = eval.chair.expect("chair reports");
        assert!(chair.contains_key("baseline") && chair.contains_key("oracle"));
        for report in chair.values() {
            assert!(report.sentences > 0);
        }
        assert!(cfg.paths.output_dir.join(CHAIR_FILE).is_file());

        assert_eq!(eval.judged_images, 2);
        for i in 0..2 {
            let artifact: JudgeArtifact = serde_json::from_str(
                &std::fs::read_to_string(cfg.paths.output_dir.join(format!("{JUDGE_DIR}/{i}.json"))).unwrap(),
            )
            .unwrap();
            assert!(artifact.scores.consistent());
            assert_eq!(artifact.prompt_order.len(), 8);
        }
    }
}
