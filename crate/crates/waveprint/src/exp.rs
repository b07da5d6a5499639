//! Experiment orchestration: declarative TOML configs drive corpus
//! synthesis, feature extraction, optional test-split perturbation,
//! training, evaluation, and report emission into a self-describing
//! run directory. A suite runner executes a whole grid and aggregates
//! summary tables.
//!
//! Determinism contract: every stage seed derives from the config seed
//! plus a fixed context string, so identical configs reproduce metrics
//! byte-for-byte in any directory.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::audio;
use crate::dsp::{self, LfccMatrix};
use crate::eval::{self, ConfusionMatrix, MetricsReport};
use crate::nn::{self, CheckpointMeta, FingerprintClassifier, TrainConfig, TrainHistory};
use crate::perturb::{self, PerturbKind, PerturbSpec};
use crate::simsource::{
    self, CorpusManifest, CorpusSpec, ManifestEntry, PipelineSpec, SourceKind, SourceSpec, Split,
    SplitPlan,
};
use crate::util;

#[derive(Debug, Error)]
pub enum ExpError {
    #[error("bad experiment configuration: {0}")]
    Config(String),
    #[error("{stage} stage failed: {cause}")]
    Stage { stage: String, cause: String },
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

fn stage_err(stage: &str, e: impl std::fmt::Display) -> ExpError {
    ExpError::Stage { stage: stage.to_string(), cause: e.to_string() }
}

/// Which pipeline stage the class label names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelAxis {
    Vocoder,
    Acoustic,
}

/// Whether labels distinguish source families or individual instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Family,
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acoustic: Option<String>,
    pub vocoder: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSizes {
    pub n_train_per_pipeline: usize,
    pub n_val_per_pipeline: usize,
    pub n_test_per_pipeline: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    pub kind: PerturbKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rt60: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_factor: Option<f64>,
    /// Suite rows that perturb another experiment's corpus name it here
    /// to reuse its trained checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_experiment: Option<String>,
    /// Extra parameter values evaluated for the sweep report.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<f64>,
}

impl PerturbConfig {
    fn spec(&self, seed: u64) -> Result<PerturbSpec, ExpError> {
        let spec = match self.kind {
            PerturbKind::Noise => PerturbSpec::noise(
                self.snr_db.ok_or_else(|| ExpError::Config("noise perturbation needs snr_db".into()))?,
                seed,
            ),
            PerturbKind::Reverb => PerturbSpec::reverb(
                self.rt60.ok_or_else(|| ExpError::Config("reverb perturbation needs rt60".into()))?,
                seed,
            ),
            PerturbKind::Speed => PerturbSpec::speed(
                self.speed_factor
                    .ok_or_else(|| ExpError::Config("speed perturbation needs speed_factor".into()))?,
                seed,
            ),
        };
        spec.param().map_err(|e| ExpError::Config(e.to_string()))?;
        Ok(spec)
    }

    fn spec_with_value(&self, value: f64, seed: u64) -> Result<PerturbSpec, ExpError> {
        let spec = match self.kind {
            PerturbKind::Noise => PerturbSpec::noise(value, seed),
            PerturbKind::Reverb => PerturbSpec::reverb(value, seed),
            PerturbKind::Speed => PerturbSpec::speed(value, seed),
        };
        spec.param().map_err(|e| ExpError::Config(e.to_string()))?;
        Ok(spec)
    }
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    16
}
fn default_epochs() -> usize {
    30
}
fn default_patience() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            batch_size: default_batch(),
            max_epochs: default_epochs(),
            patience: default_patience(),
        }
    }
}

fn default_tsne_iters() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsneParams {
    #[serde(default = "default_tsne_iters")]
    pub iters: usize,
    /// None: min(30, N/3) chosen from the test-set size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self { iters: default_tsne_iters(), perplexity: None }
    }
}

fn default_duration() -> f64 {
    2.0
}

/// One experiment row: which pipelines feed each split, what the class
/// label names, optional test-split perturbation, and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub label_axis: LabelAxis,
    pub granularity: Granularity,
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub duration_secs: f64,
    pub corpus: CorpusSizes,
    pub train_pipelines: Vec<PipelineConfig>,
    /// Test-split composition; validation mirrors it. Defaults to the
    /// training composition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_pipelines: Option<Vec<PipelineConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturb: Option<PerturbConfig>,
    #[serde(default)]
    pub train: TrainParams,
    #[serde(default)]
    pub tsne: TsneParams,
}

impl ExperimentConfig {
    pub fn test_pipelines(&self) -> &[PipelineConfig] {
        self.test_pipelines.as_deref().unwrap_or(&self.train_pipelines)
    }
}

/// Strips the trailing instance digits from a vocoder id: "P3" -> "P".
pub fn vocoder_family(id: &str) -> String {
    id.trim_end_matches(|c: char| c.is_ascii_digit()).to_string()
}

/// Strips an "-n" instance suffix from an acoustic id: "T2-1" -> "T2".
pub fn acoustic_family(id: &str) -> String {
    match id.split_once('-') {
        Some((family, _)) => family.to_string(),
        None => id.to_string(),
    }
}

/// Class label for a manifest entry under the configured axis.
pub fn entry_label(acoustic_label: &str, vocoder_label: &str, axis: LabelAxis, gran: Granularity) -> String {
    match (axis, gran) {
        (LabelAxis::Vocoder, Granularity::Instance) => vocoder_label.to_string(),
        (LabelAxis::Vocoder, Granularity::Family) => vocoder_family(vocoder_label),
        (LabelAxis::Acoustic, Granularity::Instance) => acoustic_label.to_string(),
        (LabelAxis::Acoustic, Granularity::Family) => acoustic_family(acoustic_label),
    }
}

fn manifest_label(e: &ManifestEntry, cfg: &ExperimentConfig) -> String {
    entry_label(&e.acoustic_label, &e.vocoder_label, cfg.label_axis, cfg.granularity)
}

/// Parses a vocoder id like "P0": family letters, then the instance
/// number.
pub fn parse_vocoder_id(id: &str) -> Result<SourceSpec, ExpError> {
    let split = id
        .rfind(|c: char| !c.is_ascii_digit())
        .map(|p| p + 1)
        .ok_or_else(|| ExpError::Config(format!("vocoder id {id:?} has no family prefix")))?;
    let (family, digits) = id.split_at(split);
    if digits.is_empty() {
        return Err(ExpError::Config(format!("vocoder id {id:?} needs a trailing instance number")));
    }
    let instance: u64 = digits
        .parse()
        .map_err(|_| ExpError::Config(format!("bad instance number in vocoder id {id:?}")))?;
    SourceSpec::new(SourceKind::Vocoder, family, instance).map_err(|e| ExpError::Config(e.to_string()))
}

/// Parses an acoustic id like "T2" (instance 0) or "T2-3" (instance 3).
pub fn parse_acoustic_id(id: &str) -> Result<SourceSpec, ExpError> {
    let (family, instance) = match id.split_once('-') {
        Some((f, n)) => (
            f,
            n.parse::<u64>()
                .map_err(|_| ExpError::Config(format!("bad instance number in acoustic id {id:?}")))?,
        ),
        None => (id, 0),
    };
    SourceSpec::new(SourceKind::AcousticModel, family, instance).map_err(|e| ExpError::Config(e.to_string()))
}

fn parse_pipeline(p: &PipelineConfig) -> Result<PipelineSpec, ExpError> {
    let acoustic = p.acoustic.as_deref().map(parse_acoustic_id).transpose()?;
    let vocoder = parse_vocoder_id(&p.vocoder)?;
    Ok(PipelineSpec { acoustic, vocoder })
}

fn pipeline_label(p: &PipelineConfig, axis: LabelAxis, gran: Granularity) -> Result<String, ExpError> {
    let spec = parse_pipeline(p)?;
    Ok(entry_label(&spec.acoustic_id(), &spec.vocoder.id(), axis, gran))
}

/// Structural validation beyond what TOML parsing enforces.
pub fn validate(cfg: &ExperimentConfig) -> Result<(), ExpError> {
    if cfg.experiment_id.is_empty()
        || !cfg.experiment_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
    {
        return Err(ExpError::Config(format!(
            "experiment_id {:?} must be nonempty and filesystem-safe",
            cfg.experiment_id
        )));
    }
    if cfg.train_pipelines.is_empty() {
        return Err(ExpError::Config("train_pipelines is empty".into()));
    }
    if cfg.corpus.n_train_per_pipeline == 0 || cfg.corpus.n_val_per_pipeline == 0 || cfg.corpus.n_test_per_pipeline == 0
    {
        return Err(ExpError::Config("corpus sizes must be positive".into()));
    }
    let mut train_labels = BTreeSet::new();
    for p in &cfg.train_pipelines {
        if cfg.label_axis == LabelAxis::Acoustic && p.acoustic.is_none() {
            return Err(ExpError::Config(
                "acoustic labeling requires an acoustic stage in every training pipeline".into(),
            ));
        }
        train_labels.insert(pipeline_label(p, cfg.label_axis, cfg.granularity)?);
    }
    if train_labels.len() < 2 {
        return Err(ExpError::Config(format!(
            "training pipelines produce {} class(es); need at least 2",
            train_labels.len()
        )));
    }
    for p in cfg.test_pipelines() {
        let label = pipeline_label(p, cfg.label_axis, cfg.granularity)?;
        if !train_labels.contains(&label) {
            return Err(ExpError::Config(format!(
                "test pipeline {:?} maps to unseen class {label:?}",
                parse_pipeline(p)?.id()
            )));
        }
    }
    if let Some(p) = &cfg.perturb {
        p.spec(0)?;
        for &v in &p.sweep {
            p.spec_with_value(v, 0)?;
        }
    }
    if cfg.train.batch_size == 0 || cfg.train.max_epochs == 0 {
        return Err(ExpError::Config("batch_size and max_epochs must be positive".into()));
    }
    Ok(())
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, ExpError> {
    let text = fs::read_to_string(path.as_ref())
        .map_err(|e| ExpError::Config(format!("cannot read {}: {e}", path.as_ref().display())))?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| ExpError::Config(format!("bad TOML: {e}")))?;
    validate(&cfg)?;
    Ok(cfg)
}

/// Hash of the canonical JSON form of a config; recomputable from the
/// config copy stored in a run directory.
pub fn config_hash(cfg: &ExperimentConfig) -> u64 {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    util::fnv1a64(canonical.as_bytes())
}

pub fn corpus_seed(cfg: &ExperimentConfig) -> u64 {
    util::derive_seed(cfg.seed, "corpus")
}

/// Builds the synthesis plan. Validation mirrors the test composition.
pub fn build_corpus_spec(cfg: &ExperimentConfig) -> Result<CorpusSpec, ExpError> {
    let train: Vec<PipelineSpec> =
        cfg.train_pipelines.iter().map(parse_pipeline).collect::<Result<_, _>>()?;
    let eval_side: Vec<PipelineSpec> =
        cfg.test_pipelines().iter().map(parse_pipeline).collect::<Result<_, _>>()?;
    Ok(CorpusSpec {
        seed: corpus_seed(cfg),
        duration_secs: cfg.duration_secs,
        train: SplitPlan { pipelines: train, n_per_source: cfg.corpus.n_train_per_pipeline },
        val: SplitPlan { pipelines: eval_side.clone(), n_per_source: cfg.corpus.n_val_per_pipeline },
        test: SplitPlan { pipelines: eval_side, n_per_source: cfg.corpus.n_test_per_pipeline },
    })
}

/// Loads one entry's features, using (or writing) a cache file stored
/// next to the WAV.
fn feature_for_entry(e: &ManifestEntry, manifest_dir: &Path) -> Result<LfccMatrix, ExpError> {
    let wav_path = manifest_dir.join(&e.path);
    let cache_path = wav_path.with_extension("lfcc");
    if cache_path.exists() {
        if let Ok(m) = dsp::read_feature_cache(&cache_path) {
            return Ok(m);
        }
    }
    let w = audio::read_wav(&wav_path).map_err(|err| stage_err("extract", err))?;
    let m = dsp::extract_lfcc(&w).map_err(|err| stage_err("extract", err))?;
    dsp::write_feature_cache(&m, &cache_path).map_err(|err| stage_err("extract", err))?;
    Ok(m)
}

fn split_data(
    manifest: &CorpusManifest,
    manifest_dir: &Path,
    split: Split,
    cfg: &ExperimentConfig,
    classes: &[String],
) -> Result<(Vec<LfccMatrix>, Vec<usize>, Vec<String>), ExpError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut labels = Vec::new();
    for e in manifest.entries_for(split) {
        let label = manifest_label(e, cfg);
        let y = classes
            .iter()
            .position(|c| *c == label)
            .ok_or_else(|| stage_err("eval", format!("label {label:?} not among training classes")))?;
        xs.push(feature_for_entry(e, manifest_dir)?);
        ys.push(y);
        labels.push(label);
    }
    Ok((xs, ys, labels))
}

fn train_classes(manifest: &CorpusManifest, cfg: &ExperimentConfig) -> Vec<String> {
    let set: BTreeSet<String> =
        manifest.entries_for(Split::Train).map(|e| manifest_label(e, cfg)).collect();
    set.into_iter().collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub experiment_id: String,
    pub classes: Vec<String>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub best_epoch: usize,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(skip)]
    pub metrics: Option<MetricsReport>,
}

fn write_lockfile(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), ExpError> {
    let lock = json!({
        "schema_version": 1,
        "experiment_id": cfg.experiment_id,
        "config_hash": format!("{:016x}", config_hash(cfg)),
        "seed": cfg.seed,
        "corpus_seed": corpus_seed(cfg),
        "base_experiment": cfg.perturb.as_ref().and_then(|p| p.base_experiment.clone()),
    });
    fs::write(out_dir.join("lockfile.json"), serde_json::to_string_pretty(&lock).expect("json") + "\n")?;
    Ok(())
}

fn write_config_copy(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), ExpError> {
    let text = toml::to_string_pretty(cfg).map_err(|e| ExpError::Config(e.to_string()))?;
    fs::write(out_dir.join("config.toml"), text)?;
    Ok(())
}

fn mark_failed(out_dir: &Path, err: &ExpError) {
    let dir = out_dir.join("failed");
    if fs::create_dir_all(&dir).is_ok() {
        let _ = fs::write(dir.join("marker.txt"), format!("{err}\n"));
    }
}

/// Synthesizes (or reuses) the corpus under `run_dir/corpus`.
fn corpus_stage(cfg: &ExperimentConfig, run_dir: &Path) -> Result<(CorpusManifest, PathBuf), ExpError> {
    let corpus_dir = run_dir.join("corpus");
    let manifest_path = corpus_dir.join("manifest.jsonl");
    let want_seed = corpus_seed(cfg);
    if manifest_path.exists() {
        if let Ok(m) = simsource::read_manifest(&manifest_path) {
            if m.seed == want_seed {
                log::info!("{}: reusing existing corpus", cfg.experiment_id);
                return Ok((m, corpus_dir));
            }
        }
    }
    let spec = build_corpus_spec(cfg)?;
    let manifest = simsource::synth_corpus(&spec, &corpus_dir).map_err(|e| stage_err("synth-corpus", e))?;
    Ok((manifest, corpus_dir))
}

/// Applies the configured perturbation to the test split, returning the
/// manifest to evaluate from and its directory.
fn perturb_stage(
    cfg: &ExperimentConfig,
    manifest: &CorpusManifest,
    corpus_dir: &Path,
    run_dir: &Path,
) -> Result<(CorpusManifest, PathBuf), ExpError> {
    match &cfg.perturb {
        None => Ok((manifest.clone(), corpus_dir.to_path_buf())),
        Some(p) => {
            let spec = p.spec(util::derive_seed(cfg.seed, "perturb"))?;
            let out = run_dir.join("perturbed");
            fs::create_dir_all(&out)?;
            let perturbed = perturb::perturb_manifest(manifest, corpus_dir, &spec, &out)
                .map_err(|e| stage_err("perturb", e))?;
            Ok((perturbed, out))
        }
    }
}

fn train_stage(
    cfg: &ExperimentConfig,
    manifest: &CorpusManifest,
    manifest_dir: &Path,
    classes: &[String],
    run_dir: &Path,
) -> Result<(FingerprintClassifier, TrainHistory), ExpError> {
    let (train_x, train_y, _) = split_data(manifest, manifest_dir, Split::Train, cfg, classes)?;
    let (val_x, val_y, _) = split_data(manifest, manifest_dir, Split::Val, cfg, classes)?;
    let mut model = FingerprintClassifier::new(classes.len(), util::derive_seed(cfg.seed, "model"))
        .map_err(|e| stage_err("train", e))?;
    let tc = TrainConfig {
        lr: cfg.train.lr,
        batch_size: cfg.train.batch_size,
        max_epochs: cfg.train.max_epochs,
        patience: cfg.train.patience,
        seed: util::derive_seed(cfg.seed, "train"),
    };
    let history =
        nn::train(&mut model, &train_x, &train_y, &val_x, &val_y, &tc).map_err(|e| stage_err("train", e))?;
    let meta = CheckpointMeta {
        config_hash: config_hash(cfg),
        epoch: history.best_epoch as u32,
        seed: cfg.seed,
        n_classes: classes.len() as u32,
    };
    nn::save_checkpoint(&model, &meta, run_dir.join("checkpoint.vtck")).map_err(|e| stage_err("train", e))?;
    fs::write(
        run_dir.join("history.json"),
        serde_json::to_string_pretty(&history).expect("history serializes") + "\n",
    )?;
    Ok((model, history))
}

/// Perplexity for a test set of size `n`: the configured value, or
/// min(30, n/3). None when `n` cannot support a valid embedding.
fn tsne_perplexity(cfg: &ExperimentConfig, n: usize) -> Option<f64> {
    let p = cfg.tsne.perplexity.unwrap_or_else(|| 30.0f64.min((n as f64 / 3.0).floor()));
    (p >= 2.0 && n as f64 >= 3.0 * p).then_some(p)
}

fn eval_stage(
    cfg: &ExperimentConfig,
    model: &FingerprintClassifier,
    manifest: &CorpusManifest,
    manifest_dir: &Path,
    classes: &[String],
    run_dir: &Path,
) -> Result<MetricsReport, ExpError> {
    let (test_x, test_y, test_labels) = split_data(manifest, manifest_dir, Split::Test, cfg, classes)?;
    if test_x.is_empty() {
        return Err(stage_err("eval", "test split is empty"));
    }
    let preds = model.predict_batch(&test_x);
    let cm = ConfusionMatrix::from_indices(&test_y, &preds, classes).map_err(|e| stage_err("eval", e))?;
    let report = eval::metrics(&cm).map_err(|e| stage_err("eval", e))?;

    let embedding = match tsne_perplexity(cfg, test_x.len()) {
        Some(perplexity) => {
            let embeds = model.embed_batch(&test_x);
            Some(
                eval::tsne(&embeds, perplexity, cfg.tsne.iters, util::derive_seed(cfg.seed, "tsne"))
                    .map_err(|e| stage_err("tsne", e))?,
            )
        }
        None => {
            log::warn!("{}: test set too small for t-SNE, skipping plot", cfg.experiment_id);
            None
        }
    };
    let plot = embedding.as_ref().map(|e| (e, test_labels.as_slice()));
    eval::emit_report(&cfg.experiment_id, &report, &cm, plot, run_dir).map_err(|e| stage_err("report", e))?;
    Ok(report)
}

fn run_stages(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunReport, ExpError> {
    write_config_copy(cfg, run_dir)?;
    write_lockfile(cfg, run_dir)?;
    let (manifest, corpus_dir) = corpus_stage(cfg, run_dir)?;
    let classes = train_classes(&manifest, cfg);
    let (eval_manifest, eval_dir) = perturb_stage(cfg, &manifest, &corpus_dir, run_dir)?;
    // Train/val paths in a perturbed manifest still point at the
    // original audio, so one manifest serves every split.
    let (model, history) = train_stage(cfg, &eval_manifest, &eval_dir, &classes, run_dir)?;
    let report = eval_stage(cfg, &model, &eval_manifest, &eval_dir, &classes, run_dir)?;
    Ok(RunReport {
        experiment_id: cfg.experiment_id.clone(),
        classes,
        macro_precision: report.macro_avg.precision,
        macro_recall: report.macro_avg.recall,
        macro_f1: report.macro_avg.f1,
        best_epoch: history.best_epoch,
        n_train: eval_manifest.entries_for(Split::Train).count(),
        n_test: eval_manifest.entries_for(Split::Test).count(),
        metrics: Some(report),
    })
}

/// Runs one experiment end to end into `run_dir`. On failure, partial
/// outputs stay in place and `run_dir/failed/marker.txt` names the
/// failing stage.
pub fn run_experiment(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunReport, ExpError> {
    validate(cfg)?;
    fs::create_dir_all(run_dir)?;
    match run_stages(cfg, run_dir) {
        Ok(r) => Ok(r),
        Err(e) => {
            mark_failed(run_dir, &e);
            Err(e)
        }
    }
}

/// Synthesizes a config's corpus into `run_dir/corpus` without
/// training. Reuses an existing corpus with a matching seed.
pub fn run_synth(cfg: &ExperimentConfig, run_dir: &Path) -> Result<CorpusManifest, ExpError> {
    validate(cfg)?;
    fs::create_dir_all(run_dir)?;
    let (manifest, _) = corpus_stage(cfg, run_dir)?;
    Ok(manifest)
}

/// Computes (and caches) features for every entry of a manifest.
/// Returns the number of entries processed.
pub fn run_extract(manifest_path: &Path) -> Result<usize, ExpError> {
    let manifest =
        simsource::read_manifest(manifest_path).map_err(|e| stage_err("extract", e))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    for e in &manifest.entries {
        feature_for_entry(e, dir)?;
    }
    Ok(manifest.entries.len())
}

/// Trains a classifier for a config (synthesizing the corpus if
/// needed) and writes `checkpoint.vtck` and `history.json` into
/// `run_dir`. No evaluation is performed.
pub fn run_train(cfg: &ExperimentConfig, run_dir: &Path) -> Result<TrainHistory, ExpError> {
    validate(cfg)?;
    fs::create_dir_all(run_dir)?;
    write_config_copy(cfg, run_dir)?;
    write_lockfile(cfg, run_dir)?;
    let (manifest, corpus_dir) = corpus_stage(cfg, run_dir)?;
    let classes = train_classes(&manifest, cfg);
    let (_, history) = train_stage(cfg, &manifest, &corpus_dir, &classes, run_dir)?;
    Ok(history)
}

fn load_model_for(
    cfg: &ExperimentConfig,
    manifest: &CorpusManifest,
    checkpoint: &Path,
) -> Result<(FingerprintClassifier, Vec<String>), ExpError> {
    let (model, _) = nn::load_checkpoint(checkpoint).map_err(|e| stage_err("eval", e))?;
    let classes = train_classes(manifest, cfg);
    if classes.len() != model.n_classes() {
        return Err(stage_err(
            "eval",
            format!("checkpoint has {} classes, config yields {}", model.n_classes(), classes.len()),
        ));
    }
    Ok((model, classes))
}

/// Evaluates a trained checkpoint on a config's test split (applying
/// any configured perturbation) and emits report artifacts into
/// `run_dir`.
pub fn run_eval(cfg: &ExperimentConfig, run_dir: &Path, checkpoint: &Path) -> Result<MetricsReport, ExpError> {
    validate(cfg)?;
    fs::create_dir_all(run_dir)?;
    let (manifest, corpus_dir) = corpus_stage(cfg, run_dir)?;
    let (model, classes) = load_model_for(cfg, &manifest, checkpoint)?;
    let (eval_manifest, eval_dir) = perturb_stage(cfg, &manifest, &corpus_dir, run_dir)?;
    eval_stage(cfg, &model, &eval_manifest, &eval_dir, &classes, run_dir)
}

/// Embeds a config's test split with a trained checkpoint and writes
/// `tsne.svg` into `run_dir`. Returns the plot path.
pub fn run_tsne(cfg: &ExperimentConfig, run_dir: &Path, checkpoint: &Path) -> Result<PathBuf, ExpError> {
    validate(cfg)?;
    fs::create_dir_all(run_dir)?;
    let (manifest, corpus_dir) = corpus_stage(cfg, run_dir)?;
    let (model, classes) = load_model_for(cfg, &manifest, checkpoint)?;
    let (eval_manifest, eval_dir) = perturb_stage(cfg, &manifest, &corpus_dir, run_dir)?;
    let (test_x, _, test_labels) = split_data(&eval_manifest, &eval_dir, Split::Test, cfg, &classes)?;
    let perplexity = tsne_perplexity(cfg, test_x.len())
        .ok_or_else(|| stage_err("tsne", format!("test set of {} is too small to embed", test_x.len())))?;
    let embeds = model.embed_batch(&test_x);
    let emb = eval::tsne(&embeds, perplexity, cfg.tsne.iters, util::derive_seed(cfg.seed, "tsne"))
        .map_err(|e| stage_err("tsne", e))?;
    let svg = eval::scatter_svg(&emb, &test_labels, &cfg.experiment_id);
    let path = run_dir.join("tsne.svg");
    fs::write(&path, svg)?;
    Ok(path)
}

/// Rebuilds a summary table from the `metrics.json` files of the run
/// directories directly under `out_dir`, in directory-name order.
/// Writes `summary.txt` there and returns the table text.
pub fn rebuild_summary(out_dir: &Path) -> Result<String, ExpError> {
    let mut runs = Vec::new();
    for entry in fs::read_dir(out_dir)? {
        let path = entry?.path();
        if path.join("metrics.json").exists() {
            runs.push(path);
        }
    }
    runs.sort();
    if runs.is_empty() {
        return Err(ExpError::Config(format!("no run directories with metrics under {}", out_dir.display())));
    }
    let mut text = String::from(eval::SUMMARY_HEADER);
    text.push('\n');
    for run in &runs {
        let id = run.file_name().and_then(|n| n.to_str()).unwrap_or("?").to_string();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json"))?)
            .map_err(|e| stage_err("report", e))?;
        let get = |k: &str| v["macro"][k].as_f64().unwrap_or(f64::NAN);
        text.push_str(&format!(
            "{:<6} {:>9.2} {:>9.2} {:>9.2}\n",
            id,
            100.0 * get("precision"),
            100.0 * get("recall"),
            100.0 * get("f1")
        ));
    }
    fs::write(out_dir.join("summary.txt"), &text)?;
    Ok(text)
}

/// Runs a perturbation row against an already-trained base run:
/// perturbs the base corpus's test split and evaluates the base
/// checkpoint on it. Used by the suite to avoid retraining.
fn run_reusing_base(cfg: &ExperimentConfig, base_dir: &Path, run_dir: &Path) -> Result<RunReport, ExpError> {
    fs::create_dir_all(run_dir)?;
    let inner = || -> Result<RunReport, ExpError> {
        write_config_copy(cfg, run_dir)?;
        write_lockfile(cfg, run_dir)?;
        let corpus_dir = base_dir.join("corpus");
        let manifest = simsource::read_manifest(corpus_dir.join("manifest.jsonl"))
            .map_err(|e| stage_err("perturb", format!("base corpus unreadable: {e}")))?;
        let (model, meta) = nn::load_checkpoint(base_dir.join("checkpoint.vtck"))
            .map_err(|e| stage_err("perturb", format!("base checkpoint unreadable: {e}")))?;
        let classes = train_classes(&manifest, cfg);
        if classes.len() != model.n_classes() {
            return Err(stage_err(
                "eval",
                format!("base checkpoint has {} classes, config yields {}", model.n_classes(), classes.len()),
            ));
        }
        let (eval_manifest, eval_dir) = perturb_stage(cfg, &manifest, &corpus_dir, run_dir)?;
        let report = eval_stage(cfg, &model, &eval_manifest, &eval_dir, &classes, run_dir)?;
        Ok(RunReport {
            experiment_id: cfg.experiment_id.clone(),
            classes,
            macro_precision: report.macro_avg.precision,
            macro_recall: report.macro_avg.recall,
            macro_f1: report.macro_avg.f1,
            best_epoch: meta.epoch as usize,
            n_train: eval_manifest.entries_for(Split::Train).count(),
            n_test: eval_manifest.entries_for(Split::Test).count(),
            metrics: Some(report),
        })
    };
    match inner() {
        Ok(r) => Ok(r),
        Err(e) => {
            mark_failed(run_dir, &e);
            Err(e)
        }
    }
}

/// Evaluates one extra perturbation value against a trained model,
/// writing metrics under `sweep_dir`. Returns the metrics report.
fn eval_sweep_value(
    cfg: &ExperimentConfig,
    pcfg: &PerturbConfig,
    value: f64,
    model: &FingerprintClassifier,
    manifest: &CorpusManifest,
    corpus_dir: &Path,
    classes: &[String],
    sweep_dir: &Path,
) -> Result<MetricsReport, ExpError> {
    let spec = pcfg.spec_with_value(value, util::derive_seed(cfg.seed, "perturb"))?;
    fs::create_dir_all(sweep_dir)?;
    let perturbed = perturb::perturb_manifest(manifest, corpus_dir, &spec, sweep_dir)
        .map_err(|e| stage_err("perturb", e))?;
    let (test_x, test_y, _) = split_data(&perturbed, sweep_dir, Split::Test, cfg, classes)?;
    let preds = model.predict_batch(&test_x);
    let cm = ConfusionMatrix::from_indices(&test_y, &preds, classes).map_err(|e| stage_err("eval", e))?;
    let report = eval::metrics(&cm).map_err(|e| stage_err("eval", e))?;
    fs::write(
        sweep_dir.join("metrics.json"),
        serde_json::to_string_pretty(&report.to_json()).expect("json") + "\n",
    )?;
    fs::write(sweep_dir.join("confusion.csv"), eval::confusion_csv(&cm))?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteRow {
    pub experiment_id: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub experiment_id: String,
    pub setting: String,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
    pub sweep: Vec<SweepRow>,
}

fn sweep_setting(kind: PerturbKind, value: f64) -> String {
    match kind {
        PerturbKind::Noise => format!("noise SNR {value} dB"),
        PerturbKind::Reverb => format!("reverb RT60 {value} s"),
        PerturbKind::Speed => format!("speed {value}x"),
    }
}

/// Runs every config in order. Perturbation rows that name a completed
/// base experiment reuse its corpus and checkpoint; failures are
/// recorded and the suite continues. Emits `summary.txt` (one row per
/// experiment), `sweep.txt` (perturbation settings), and `suite.json`.
pub fn run_suite(cfgs: &[ExperimentConfig], out_dir: &Path) -> Result<SuiteReport, ExpError> {
    if cfgs.is_empty() {
        return Err(ExpError::Config("experiment grid is empty".into()));
    }
    for cfg in cfgs {
        validate(cfg)?;
    }
    fs::create_dir_all(out_dir)?;

    let mut rows = Vec::new();
    let mut sweep = Vec::new();
    let mut completed: Vec<(String, PathBuf)> = Vec::new();

    for cfg in cfgs {
        let row_start = std::time::Instant::now();
        let run_dir = out_dir.join(&cfg.experiment_id);
        let base_dir = cfg
            .perturb
            .as_ref()
            .and_then(|p| p.base_experiment.as_ref())
            .and_then(|base| completed.iter().find(|(id, _)| id == base).map(|(_, d)| d.clone()));

        let result = match &base_dir {
            Some(base) => run_reusing_base(cfg, base, &run_dir),
            None => run_experiment(cfg, &run_dir),
        };

        match result {
            Ok(report) => {
                if let Some(pcfg) = &cfg.perturb {
                    let primary = pcfg.spec(0)?.param().expect("validated");
                    sweep.push(SweepRow {
                        experiment_id: cfg.experiment_id.clone(),
                        setting: sweep_setting(pcfg.kind, primary),
                        macro_precision: report.macro_precision,
                        macro_recall: report.macro_recall,
                        macro_f1: report.macro_f1,
                    });
                    if !pcfg.sweep.is_empty() {
                        let model_dir = base_dir.as_deref().unwrap_or(&run_dir);
                        let corpus_dir = match &base_dir {
                            Some(b) => b.join("corpus"),
                            None => run_dir.join("corpus"),
                        };
                        let (model, _) = nn::load_checkpoint(model_dir.join("checkpoint.vtck"))
                            .map_err(|e| stage_err("sweep", e))?;
                        let manifest = simsource::read_manifest(corpus_dir.join("manifest.jsonl"))
                            .map_err(|e| stage_err("sweep", e))?;
                        let classes = train_classes(&manifest, cfg);
                        for &value in &pcfg.sweep {
                            let spec = pcfg.spec_with_value(value, 0)?;
                            let sweep_dir = run_dir.join(format!("sweep-{}", spec.tag()));
                            let m = eval_sweep_value(
                                cfg, pcfg, value, &model, &manifest, &corpus_dir, &classes, &sweep_dir,
                            )?;
                            sweep.push(SweepRow {
                                experiment_id: cfg.experiment_id.clone(),
                                setting: sweep_setting(pcfg.kind, value),
                                macro_precision: m.macro_avg.precision,
                                macro_recall: m.macro_avg.recall,
                                macro_f1: m.macro_avg.f1,
                            });
                        }
                    }
                }
                completed.push((cfg.experiment_id.clone(), run_dir.clone()));
                rows.push(SuiteRow {
                    experiment_id: report.experiment_id,
                    status: "ok".into(),
                    error: None,
                    macro_precision: Some(report.macro_precision),
                    macro_recall: Some(report.macro_recall),
                    macro_f1: Some(report.macro_f1),
                    elapsed_secs: row_start.elapsed().as_secs_f64(),
                });
            }
            Err(e) => {
                log::error!("{} failed: {e}", cfg.experiment_id);
                rows.push(SuiteRow {
                    experiment_id: cfg.experiment_id.clone(),
                    status: "failed".into(),
                    error: Some(e.to_string()),
                    macro_precision: None,
                    macro_recall: None,
                    macro_f1: None,
                    elapsed_secs: row_start.elapsed().as_secs_f64(),
                });
            }
        }
    }

    let mut summary = String::from(eval::SUMMARY_HEADER);
    summary.push('\n');
    for row in &rows {
        match (row.macro_precision, row.macro_recall, row.macro_f1) {
            (Some(p), Some(r), Some(f)) => {
                summary.push_str(&format!(
                    "{:<6} {:>9.2} {:>9.2} {:>9.2}\n",
                    row.experiment_id,
                    100.0 * p,
                    100.0 * r,
                    100.0 * f
                ));
            }
            _ => {
                summary.push_str(&format!(
                    "{:<6} FAILED: {}\n",
                    row.experiment_id,
                    row.error.as_deref().unwrap_or("unknown")
                ));
            }
        }
    }
    fs::write(out_dir.join("summary.txt"), &summary)?;

    if !sweep.is_empty() {
        let mut text = String::from("setting                 precision    recall        f1\n");
        for s in &sweep {
            text.push_str(&format!(
                "{:<22} {:>9.2} {:>9.2} {:>9.2}\n",
                s.setting,
                100.0 * s.macro_precision,
                100.0 * s.macro_recall,
                100.0 * s.macro_f1
            ));
        }
        fs::write(out_dir.join("sweep.txt"), &text)?;
    }

    let report = SuiteReport { rows, sweep };
    fs::write(
        out_dir.join("suite.json"),
        serde_json::to_string_pretty(&report).expect("suite serializes") + "\n",
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocoder_ids_parse_and_round_trip() {
        let s = parse_vocoder_id("P0").unwrap();
        assert_eq!(s.id(), "P0");
        assert_eq!(s.family(), "P");
        let s = parse_vocoder_id("H13").unwrap();
        assert_eq!(s.id(), "H13");
        assert!(parse_vocoder_id("P").is_err());
        assert!(parse_vocoder_id("123").is_err());
    }

    #[test]
    fn acoustic_ids_parse_and_round_trip() {
        let s = parse_acoustic_id("T2").unwrap();
        assert_eq!(s.id(), "T2");
        assert_eq!(s.instance_seed(), 0);
        let s = parse_acoustic_id("T2-3").unwrap();
        assert_eq!(s.id(), "T2-3");
        assert!(parse_acoustic_id("T2-x").is_err());
    }

    #[test]
    fn family_label_strips_instances() {
        assert_eq!(vocoder_family("P0"), "P");
        assert_eq!(vocoder_family("H12"), "H");
        assert_eq!(acoustic_family("T2"), "T2");
        assert_eq!(acoustic_family("T2-4"), "T2");
        assert_eq!(acoustic_family("GD"), "GD");
    }

    #[test]
    fn entry_labels_follow_axis_and_granularity() {
        assert_eq!(entry_label("COPY", "P3", LabelAxis::Vocoder, Granularity::Family), "P");
        assert_eq!(entry_label("COPY", "P3", LabelAxis::Vocoder, Granularity::Instance), "P3");
        assert_eq!(entry_label("T2-1", "H0", LabelAxis::Acoustic, Granularity::Family), "T2");
        assert_eq!(entry_label("T2-1", "H0", LabelAxis::Acoustic, Granularity::Instance), "T2-1");
    }

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            experiment_id: "tiny".into(),
            label_axis: LabelAxis::Vocoder,
            granularity: Granularity::Family,
            seed: 7,
            duration_secs: 1.0,
            corpus: CorpusSizes { n_train_per_pipeline: 3, n_val_per_pipeline: 2, n_test_per_pipeline: 2 },
            train_pipelines: vec![
                PipelineConfig { acoustic: None, vocoder: "P0".into() },
                PipelineConfig { acoustic: None, vocoder: "H0".into() },
            ],
            test_pipelines: None,
            perturb: None,
            train: TrainParams { max_epochs: 1, ..TrainParams::default() },
            tsne: TsneParams::default(),
        }
    }

    #[test]
    fn validate_accepts_tiny_config() {
        validate(&tiny_config()).unwrap();
    }

    #[test]
    fn validate_rejects_single_class() {
        let mut cfg = tiny_config();
        cfg.train_pipelines = vec![
            PipelineConfig { acoustic: None, vocoder: "P0".into() },
            PipelineConfig { acoustic: None, vocoder: "P1".into() },
        ];
        // Family granularity collapses P0 and P1 into one class.
        assert!(matches!(validate(&cfg), Err(ExpError::Config(_))));
    }

    #[test]
    fn validate_rejects_unseen_test_class() {
        let mut cfg = tiny_config();
        cfg.test_pipelines = Some(vec![PipelineConfig { acoustic: None, vocoder: "M0".into() }]);
        assert!(matches!(validate(&cfg), Err(ExpError::Config(_))));
    }

    #[test]
    fn validate_rejects_acoustic_axis_on_copy_synthesis() {
        let mut cfg = tiny_config();
        cfg.label_axis = LabelAxis::Acoustic;
        assert!(matches!(validate(&cfg), Err(ExpError::Config(_))));
    }

    #[test]
    fn config_hash_stable_and_sensitive() {
        let cfg = tiny_config();
        assert_eq!(config_hash(&cfg), config_hash(&cfg.clone()));
        let mut other = tiny_config();
        other.seed = 8;
        assert_ne!(config_hash(&cfg), config_hash(&other));
    }

    #[test]
    fn config_toml_round_trips() {
        let cfg = tiny_config();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(config_hash(&cfg), config_hash(&back));
    }

    #[test]
    fn unknown_toml_fields_are_rejected() {
        let text = "experiment_id = \"x\"\nlabel_axis = \"vocoder\"\nbogus = 1\n";
        assert!(toml::from_str::<ExperimentConfig>(text).is_err());
    }
}
