//! Experiment orchestration: declarative TOML configs, staged execution with
//! on-disk checkpoints for resumability, and versioned JSON reports.
//!
//! Stage order: reference training → (trigger generation) → embedding →
//! attacks → verification. Each stage persists its artifact and metrics under
//! the experiment directory; `resume` skips stages whose artifacts exist.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{shapes10, LabeledDataset, Split};
use crate::diffusion::{
    load_denoiser, save_denoiser, train_denoiser, DenoiserTrainConfig, NoiseSchedule,
    SamplerConfig,
};
use crate::embed::{
    embed_noise_label_wm, embed_pattern_wm, embed_trivial_wm, embed_uae_watermark,
    load_watermarked, save_watermarked, EmbedConfig, NoiseSet, PatternSpec, WatermarkedModel,
};
use crate::error::{Error, Result};
use crate::evade::{
    invert_targeted_trigger, invert_universal, nlti, sparse_instance_attack, LRSchedule,
    PerturbationBudget,
};
use crate::model::{
    evaluate_accuracy, to_unit_batch, train_erm, ClassifierModel, TrainConfig,
};
use crate::nn::argmax_rows;
use crate::remove::{
    adversarial_finetune, extract_surrogate, filtered_serving, fine_prune, fit_anomaly_filter,
    randomized_smoothing_eval, AnomalyFilterConfig, ExtractionConfig, PruneConfig,
};
use crate::serve::TemperedServing;
use crate::triggergen::{
    build_trigger_bundle, generate_uae_candidates, load_bundle, save_bundle, GuidanceConfig,
    SelectionConfig,
};
use crate::verify::{phi_wm_of_model, verify_ownership};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Uae,
    Pattern,
    NoiseLabel,
    Trivial,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { n_train: 600, n_val: 300, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub arch: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            arch: "smallresnet:base=8,k=10,in=3x32x32".into(),
            epochs: 6,
            batch_size: 64,
            lr: 2e-3,
            weight_decay: 1e-5,
        }
    }
}

/// Embedding-stage parameters; only the fields relevant to the chosen method
/// are consulted.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedSpec {
    pub epochs: usize,
    pub lambda_cr: f32,
    pub gamma_v: f32,
    pub rho: Option<f32>,
    pub mixing: usize,
    /// interpolation views per trigger batch (see `EmbedConfig::absorption`)
    pub absorption: usize,
    /// feature-anchor penalty weight (see `EmbedConfig::feat_align`)
    pub feat_align: f32,
    /// pattern / trivial watermark classes
    pub source: usize,
    pub target: usize,
    /// trivial watermark: trigger batches per clean batch
    pub frequency: usize,
    /// noise-label watermark: relabeled sample count
    pub n_noise: usize,
}

impl Default for EmbedSpec {
    fn default() -> Self {
        Self {
            epochs: 8,
            lambda_cr: 1.0,
            gamma_v: 3.0,
            rho: None,
            mixing: 4,
            absorption: 0,
            feat_align: 0.0,
            source: 0,
            target: 1,
            frequency: 1,
            n_noise: 6,
        }
    }
}

/// Trigger-generation parameters (UAE method only).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriggerSpec {
    pub denoiser_epochs: usize,
    pub sampler_steps: usize,
    pub warmup_iters: usize,
    pub xi: f32,
    pub edition_steps: usize,
    /// trigger-set size (pros count)
    pub n: usize,
    /// candidates generated before selection
    pub candidates: usize,
    pub shadows: usize,
    /// > 0 turns generation into edition of real images: seeds are training
    /// images noised to this fraction of the forward trajectory
    #[serde(default)]
    pub edit_strength: f32,
    /// fraction of lowest-density candidates removed before selection
    pub drop_frac: f32,
    /// independently trained probe models that must all misclassify a
    /// candidate before it can enter the bundle (0 disables the screen)
    pub probes: usize,
    /// rank the density-filtered pool most train-like first instead of
    /// hardest first
    pub density_rank: bool,
}

impl Default for TriggerSpec {
    fn default() -> Self {
        Self {
            denoiser_epochs: 8,
            sampler_steps: 10,
            warmup_iters: 3,
            xi: 3.0,
            edition_steps: 5,
            n: 10,
            candidates: 60,
            shadows: 2,
            edit_strength: 0.0,
            drop_frac: 0.2,
            probes: 0,
            density_rank: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AttackSpec {
    TargetedInversion {
        source: usize,
        target: usize,
        #[serde(default = "default_budget_pixels")]
        budget_pixels: usize,
        #[serde(default = "default_inversion_steps")]
        steps: usize,
    },
    UniversalInversion {
        #[serde(default = "default_budget_pixels")]
        budget_pixels: usize,
        #[serde(default = "default_inversion_steps")]
        steps: usize,
    },
    Nlti {
        #[serde(default = "default_nlti_epochs")]
        epochs: usize,
        #[serde(default = "default_nlti_radius")]
        radius: f32,
    },
    SparseAttack {
        #[serde(default = "default_sparse_steps")]
        steps: usize,
    },
    Extract {
        #[serde(default = "default_gamma")]
        gamma: f32,
        #[serde(default = "default_extract_epochs")]
        epochs: usize,
        /// query the victim with an out-of-distribution set instead of train
        #[serde(default)]
        ood_queries: bool,
        /// drop query responses whose argmax disagrees with the query label
        #[serde(default)]
        filter_misclassified: bool,
    },
    FinePrune {
        #[serde(default = "default_prune_step")]
        prune_step: f32,
    },
    AnomalyFilter {
        #[serde(default = "default_filter_blocks")]
        blocks: usize,
        /// fraction of fitting scores treated as anomalous (the attacker's
        /// false-positive budget)
        #[serde(default = "default_filter_contamination")]
        contamination: f32,
    },
    AdvFinetune {
        #[serde(default = "default_advft_epochs")]
        epochs: usize,
    },
    Smoothing {
        #[serde(default = "default_sigmas")]
        sigmas: Vec<f32>,
        #[serde(default = "default_draws")]
        draws: usize,
    },
}

fn default_budget_pixels() -> usize {
    5
}
fn default_inversion_steps() -> usize {
    500
}
fn default_nlti_epochs() -> usize {
    30
}
fn default_nlti_radius() -> f32 {
    2.0
}
fn default_sparse_steps() -> usize {
    100
}
fn default_gamma() -> f32 {
    1.0
}
fn default_extract_epochs() -> usize {
    6
}
fn default_prune_step() -> f32 {
    0.1
}
fn default_filter_blocks() -> usize {
    2
}
fn default_filter_contamination() -> f32 {
    0.05
}
fn default_advft_epochs() -> usize {
    2
}
fn default_sigmas() -> Vec<f32> {
    vec![0.0, 0.1, 0.25, 0.5]
}
fn default_draws() -> usize {
    10
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::TargetedInversion { .. } => "targeted-inversion",
            AttackSpec::UniversalInversion { .. } => "universal-inversion",
            AttackSpec::Nlti { .. } => "nlti",
            AttackSpec::SparseAttack { .. } => "sparse-attack",
            AttackSpec::Extract { .. } => "extract",
            AttackSpec::FinePrune { .. } => "fine-prune",
            AttackSpec::AnomalyFilter { .. } => "anomaly-filter",
            AttackSpec::AdvFinetune { .. } => "adv-finetune",
            AttackSpec::Smoothing { .. } => "smoothing",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySpec {
    pub threshold: f32,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub method: Method,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub embed: EmbedSpec,
    #[serde(default)]
    pub triggers: TriggerSpec,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub verify: VerifySpec,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config schema: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.n_train == 0 || self.dataset.n_val == 0 {
            return Err(Error::Config("dataset.n_train / dataset.n_val must be positive".into()));
        }
        if self.embed.source == self.embed.target
            && matches!(self.method, Method::Pattern | Method::Trivial)
        {
            return Err(Error::Config("embed.source must differ from embed.target".into()));
        }
        if matches!(self.method, Method::Uae) && self.triggers.n == 0 {
            return Err(Error::Config("triggers.n must be positive for the uae method".into()));
        }
        for a in &self.attacks {
            if let AttackSpec::Nlti { .. } = a {
                if !matches!(self.method, Method::NoiseLabel) {
                    return Err(Error::Config(
                        "attacks: nlti requires method = \"noise-label\"".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        hex::encode(&h.finalize()[..16])
    }
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub method: Method,
    /// per-stage metric objects, keyed by stage name
    pub stages: BTreeMap<String, serde_json::Value>,
    pub wall_clock_secs: f64,
}

/// Compare two reports on metric content, ignoring wall clock. Returns the
/// list of differing field paths (empty means metric-identical within `tol`).
pub fn report_diff(a: &ExperimentReport, b: &ExperimentReport, tol: f64) -> Vec<String> {
    let mut diffs = Vec::new();
    if a.config_hash != b.config_hash {
        diffs.push("config_hash".into());
    }
    let keys: std::collections::BTreeSet<&String> =
        a.stages.keys().chain(b.stages.keys()).collect();
    for k in keys {
        match (a.stages.get(k), b.stages.get(k)) {
            (Some(x), Some(y)) => value_diff(x, y, tol, k, &mut diffs),
            _ => diffs.push(format!("stages.{k} (missing on one side)")),
        }
    }
    diffs
}

fn value_diff(a: &serde_json::Value, b: &serde_json::Value, tol: f64, path: &str, out: &mut Vec<String>) {
    use serde_json::Value as V;
    match (a, b) {
        (V::Number(x), V::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap_or(f64::NAN), y.as_f64().unwrap_or(f64::NAN));
            if (x - y).abs() > tol && !(x.is_nan() && y.is_nan()) {
                out.push(format!("{path}: {x} vs {y}"));
            }
        }
        (V::Object(x), V::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                match (x.get(k), y.get(k)) {
                    (Some(xa), Some(yb)) => value_diff(xa, yb, tol, &format!("{path}.{k}"), out),
                    _ => out.push(format!("{path}.{k} (missing on one side)")),
                }
            }
        }
        (V::Array(x), V::Array(y)) => {
            if x.len() != y.len() {
                out.push(format!("{path} (length {} vs {})", x.len(), y.len()));
            } else {
                for (i, (xa, yb)) in x.iter().zip(y).enumerate() {
                    value_diff(xa, yb, tol, &format!("{path}[{i}]"), out);
                }
            }
        }
        _ => {
            if a != b {
                out.push(format!("{path}: {a} vs {b}"));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Stage plumbing
// ---------------------------------------------------------------------------

fn stage_err(stage: &str, e: Error) -> Error {
    Error::Stage { stage: stage.to_string(), source: Box::new(e) }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Exclusive ownership of an experiment directory for the process lifetime.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write as _;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Contract(format!(
                "experiment directory is locked by another run ({})",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Serializable noise-set artifact (noise-label method).
#[derive(Serialize, Deserialize)]
struct NoiseSetFile {
    shape: (usize, usize, usize),
    images: Vec<Vec<u8>>,
    y_true: Vec<usize>,
    y_wrong: Vec<usize>,
    num_classes: usize,
    #[serde(default)]
    indices: Vec<usize>,
}

fn save_noise_set(ns: &NoiseSet, path: &Path) -> Result<()> {
    let (h, w, c) = ns.images.image_shape();
    let images: Vec<Vec<u8>> = (0..ns.images.len())
        .map(|i| ns.images.image(i).iter().copied().collect())
        .collect();
    write_json(
        path,
        &NoiseSetFile {
            shape: (h, w, c),
            images,
            y_true: ns.y_true.clone(),
            y_wrong: ns.y_wrong.clone(),
            num_classes: ns.images.num_classes,
            indices: ns.indices.clone(),
        },
    )
}

fn load_noise_set(path: &Path) -> Result<NoiseSet> {
    let f: NoiseSetFile = read_json(path)?;
    let (h, w, c) = f.shape;
    let n = f.images.len();
    let mut images = Array4::<u8>::zeros((n, h, w, c));
    for (i, img) in f.images.iter().enumerate() {
        for (j, &v) in img.iter().enumerate() {
            images[[i, j / (w * c), (j / c) % w, j % c]] = v;
        }
    }
    let ds = LabeledDataset::new("noise-set", Split::AttackSubset, images, f.y_wrong.clone(), f.num_classes)?;
    Ok(NoiseSet { images: ds, y_true: f.y_true, y_wrong: f.y_wrong, indices: f.indices })
}

#[derive(Serialize, Deserialize)]
struct PatternFile {
    delta: Vec<f32>,
    mask: Vec<f32>,
    shape: (usize, usize, usize),
    source: usize,
    target: usize,
}

fn save_pattern(spec: &PatternSpec, path: &Path) -> Result<()> {
    write_json(
        path,
        &PatternFile {
            delta: spec.delta.iter().copied().collect(),
            mask: spec.mask.iter().copied().collect(),
            shape: spec.delta.dim(),
            source: spec.source,
            target: spec.target,
        },
    )
}

fn load_pattern(path: &Path) -> Result<PatternSpec> {
    let f: PatternFile = read_json(path)?;
    let delta = Array3::from_shape_vec(f.shape, f.delta)
        .map_err(|e| Error::Corruption(format!("pattern file: {e}")))?;
    let mask = Array3::from_shape_vec(f.shape, f.mask)
        .map_err(|e| Error::Corruption(format!("pattern file: {e}")))?;
    Ok(PatternSpec { delta, mask, source: f.source, target: f.target })
}

// ---------------------------------------------------------------------------
// Experiment context and execution
// ---------------------------------------------------------------------------

struct Context {
    cfg: ExperimentConfig,
    dir: PathBuf,
    train: LabeledDataset,
    val: LabeledDataset,
}

impl Context {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = cfg.out_dir.clone();
        std::fs::create_dir_all(dir.join("attacks"))?;
        let train = shapes10(cfg.dataset.n_train, cfg.dataset.seed, Split::Train);
        let val = shapes10(cfg.dataset.n_val, cfg.dataset.seed + 1, Split::Val);
        Ok(Self { cfg: cfg.clone(), dir, train, val })
    }

    fn train_cfg(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.cfg.model.epochs,
            batch_size: self.cfg.model.batch_size,
            lr: self.cfg.model.lr,
            weight_decay: self.cfg.model.weight_decay,
            seed: self.cfg.seed,
        }
    }

    // ---- reference stage --------------------------------------------------

    fn reference_paths(&self) -> (PathBuf, PathBuf) {
        (self.dir.join("reference.ckpt"), self.dir.join("reference.json"))
    }

    fn run_reference(&self, resume: bool) -> Result<serde_json::Value> {
        let (ckpt, meta) = self.reference_paths();
        if resume && ckpt.exists() && meta.exists() {
            return read_json(&meta);
        }
        let mut model = train_erm(&self.train, &self.cfg.model.arch, &self.train_cfg())?;
        let rec = evaluate_accuracy(&mut model, &self.val)?;
        crate::checkpoint::save_classifier(&model, &ckpt)?;
        let metrics = serde_json::json!({
            "val_acc": rec.accuracy,
            "train_acc": model.train_accuracy,
            "per_class_recall": rec.per_class_recall,
        });
        write_json(&meta, &metrics)?;
        Ok(metrics)
    }

    fn load_reference(&self) -> Result<ClassifierModel> {
        crate::checkpoint::load_classifier(&self.reference_paths().0)
    }

    // ---- trigger generation (uae) -----------------------------------------

    fn run_triggers(&self, resume: bool) -> Result<Option<serde_json::Value>> {
        if !matches!(self.cfg.method, Method::Uae) {
            return Ok(None);
        }
        let denoiser_path = self.dir.join("denoiser.ckpt");
        let bundle_path = self.dir.join("bundle.wmb");
        let meta_path = self.dir.join("triggers.json");
        if resume && bundle_path.exists() && meta_path.exists() {
            return Ok(Some(read_json(&meta_path)?));
        }
        let t = &self.cfg.triggers;
        let mut denoiser = if resume && denoiser_path.exists() {
            load_denoiser(&denoiser_path)?
        } else {
            let dcfg = DenoiserTrainConfig {
                epochs: t.denoiser_epochs,
                seed: self.cfg.seed,
                ..Default::default()
            };
            let d = train_denoiser(&self.train, NoiseSchedule::default_desk(), &dcfg)?;
            save_denoiser(&d, &denoiser_path)?;
            d
        };
        let mut surrogate = self.load_reference()?;
        let mut gcfg = GuidanceConfig::default_desk();
        gcfg.sampler = SamplerConfig {
            steps: t.sampler_steps,
            deterministic: true,
            seed: self.cfg.seed,
        };
        gcfg.xi = vec![t.xi; t.sampler_steps];
        gcfg.warmup.iters = t.warmup_iters;
        gcfg.edition.steps = t.edition_steps;
        gcfg.edit_strength = t.edit_strength;
        let edit_pool = (t.edit_strength > 0.0).then_some(&self.train);
        let candidates = generate_uae_candidates(
            &mut denoiser,
            &mut surrogate,
            t.candidates,
            &gcfg,
            self.cfg.seed,
            edit_pool,
        )?;
        let mut probes: Vec<_> = (0..t.probes)
            .map(|i| {
                let pcfg = TrainConfig {
                    seed: self.cfg.seed.wrapping_add(500 + i as u64),
                    ..self.train_cfg()
                };
                train_erm(&self.train, &self.cfg.model.arch, &pcfg)
            })
            .collect::<Result<_>>()?;
        let screened = crate::triggergen::probe_screen(&candidates, &mut probes);
        let scfg = SelectionConfig {
            n: t.n,
            shadows: t.shadows,
            seed: self.cfg.seed,
            drop_frac: t.drop_frac,
            density_rank: t.density_rank,
            ..Default::default()
        };
        let denoiser_hash = "denoiser";
        let surrogate_ref = surrogate.clone();
        let mut ranking_ref = surrogate;
        let bundle = build_trigger_bundle(
            &screened,
            &scfg,
            &surrogate_ref,
            Some(&mut ranking_ref),
            Some(&self.train),
            denoiser_hash,
        )?;
        save_bundle(&bundle, &bundle_path)?;
        let fooling = candidates.iter().filter(|c| c.margin < 0.0).count();
        let metrics = serde_json::json!({
            "candidates": candidates.len(),
            "fooling_candidates": fooling,
            "probe_screened": screened.len(),
            "pros": bundle.pros.len(),
            "reserve": bundle.reserve.len(),
        });
        write_json(&meta_path, &metrics)?;
        Ok(Some(metrics))
    }

    // ---- embedding --------------------------------------------------------

    fn victim_path(&self) -> PathBuf {
        self.dir.join("victim.ckpt")
    }

    fn run_embed(&self, resume: bool) -> Result<serde_json::Value> {
        let meta_path = self.dir.join("embed.json");
        if resume
            && self.victim_path().exists()
            && self.victim_path().with_extension("json").exists()
            && meta_path.exists()
        {
            return read_json(&meta_path);
        }
        let arch = &self.cfg.model.arch;
        let e = &self.cfg.embed;
        let mut train_cfg = self.train_cfg();
        train_cfg.epochs = e.epochs;
        let mut extra = serde_json::Map::new();
        let wm: WatermarkedModel = match self.cfg.method {
            Method::None => {
                let model = self.load_reference()?;
                WatermarkedModel {
                    model,
                    bundle_hash: String::new(),
                    gamma_v: 1.0,
                    config_hash: "none".into(),
                    pros_curve: vec![],
                }
            }
            Method::Uae => {
                let bundle_path = self.dir.join("bundle.wmb");
                let mut bundle = load_bundle(&bundle_path)?;
                let ecfg = EmbedConfig {
                    lambda_cr: e.lambda_cr,
                    gamma_v: e.gamma_v,
                    rho: e.rho,
                    mixing: e.mixing,
                    absorption: e.absorption,
                    feat_align: e.feat_align,
                    train: train_cfg,
                    ..Default::default()
                };
                let wm = embed_uae_watermark(&self.train, &mut bundle, arch, &ecfg)?;
                // persist the finalized bundle (cons populated)
                save_bundle(&bundle, &bundle_path)?;
                extra.insert("cons".into(), serde_json::json!(bundle.cons.len()));
                extra.insert("pros_curve".into(), serde_json::json!(wm.pros_curve));
                wm
            }
            Method::Pattern => {
                let (h, w, c) = self.train.image_shape();
                let spec = PatternSpec::corner_patch((h, w, c), e.source, e.target);
                save_pattern(&spec, &self.dir.join("pattern.json"))?;
                embed_pattern_wm(&self.train, &spec, &train_cfg, arch)?
            }
            Method::NoiseLabel => {
                let (wm, ns) = embed_noise_label_wm(&self.train, e.n_noise, &train_cfg, arch)?;
                save_noise_set(&ns, &self.dir.join("noise_set.json"))?;
                extra.insert("n_noise".into(), serde_json::json!(ns.images.len()));
                wm
            }
            Method::Trivial => {
                embed_trivial_wm(&self.train, e.source, e.target, e.frequency, &train_cfg, arch)?
            }
        };
        let mut model = wm.model.clone();
        let rec = evaluate_accuracy(&mut model, &self.val)?;
        let train_rec = evaluate_accuracy(&mut model, &self.train)?;
        save_watermarked(&wm, &self.victim_path())?;
        let mut metrics = serde_json::json!({
            "val_acc": rec.accuracy,
            "train_acc": train_rec.accuracy,
            "per_class_recall": rec.per_class_recall,
            "trigger_acc": self.trigger_metric(&mut model)?,
        });
        metrics.as_object_mut().unwrap().extend(extra);
        write_json(&meta_path, &metrics)?;
        Ok(metrics)
    }

    fn load_victim(&self) -> Result<WatermarkedModel> {
        load_watermarked(&self.victim_path())
    }

    /// Method-specific watermark response of a model:
    /// uae → φ_wm; pattern → patterned-source→target rate; trivial →
    /// val source-class→target rate; noise-label → noise-set wrong-label
    /// accuracy; none → 0.
    fn trigger_metric(&self, model: &mut ClassifierModel) -> Result<f32> {
        let e = &self.cfg.embed;
        Ok(match self.cfg.method {
            Method::None => 0.0,
            Method::Uae => {
                let bundle = load_bundle(&self.dir.join("bundle.wmb"))?;
                if bundle.is_finalized() {
                    phi_wm_of_model(model, &bundle)?
                } else {
                    let idx: Vec<usize> = (0..bundle.pros.len()).collect();
                    let preds = argmax_rows(&model.logits(&to_unit_batch(&bundle.pros, &idx)));
                    preds.iter().zip(&bundle.pros.labels).filter(|(p, y)| *p == *y).count() as f32
                        / bundle.pros.len() as f32
                }
            }
            Method::Pattern => {
                let spec = load_pattern(&self.dir.join("pattern.json"))?;
                let src = self.val.indices_of_class(spec.source);
                if src.is_empty() {
                    return Err(Error::Data("no source-class samples in val".into()));
                }
                let patterned =
                    crate::embed::apply_pattern(&self.val.subset(&src, Split::Val), &spec, false);
                let idx: Vec<usize> = (0..patterned.len()).collect();
                let preds = argmax_rows(&model.logits(&to_unit_batch(&patterned, &idx)));
                preds.iter().filter(|&&p| p == spec.target).count() as f32 / preds.len() as f32
            }
            Method::Trivial => {
                let src = self.val.indices_of_class(e.source);
                if src.is_empty() {
                    return Err(Error::Data("no source-class samples in val".into()));
                }
                let sub = self.val.subset(&src, Split::Val);
                let idx: Vec<usize> = (0..sub.len()).collect();
                let preds = argmax_rows(&model.logits(&to_unit_batch(&sub, &idx)));
                preds.iter().filter(|&&p| p == e.target).count() as f32 / preds.len() as f32
            }
            Method::NoiseLabel => {
                let ns = load_noise_set(&self.dir.join("noise_set.json"))?;
                let idx: Vec<usize> = (0..ns.images.len()).collect();
                let preds = argmax_rows(&model.logits(&to_unit_batch(&ns.images, &idx)));
                preds.iter().zip(&ns.y_wrong).filter(|(p, y)| *p == *y).count() as f32
                    / ns.images.len() as f32
            }
        })
    }

    // ---- attacks ----------------------------------------------------------

    fn run_attack(&self, idx: usize, spec: &AttackSpec, resume: bool) -> Result<serde_json::Value> {
        let meta_path = self.dir.join("attacks").join(format!("{idx:02}-{}.json", spec.name()));
        if resume && meta_path.exists() {
            return read_json(&meta_path);
        }
        let mut victim = self.load_victim()?;
        let mut reference = self.load_reference()?;
        let metrics = match spec {
            AttackSpec::TargetedInversion { source, target, budget_pixels, steps } => {
                let budget = PerturbationBudget::L0 { max_pixels: *budget_pixels };
                let v = invert_targeted_trigger(&mut victim.model, &self.val, *source, *target, &budget, *steps)?;
                let r = invert_targeted_trigger(&mut reference, &self.val, *source, *target, &budget, *steps)?;
                serde_json::json!({ "victim_asr": v.asr, "reference_asr": r.asr })
            }
            AttackSpec::UniversalInversion { budget_pixels, steps } => {
                let budget = PerturbationBudget::L0 { max_pixels: *budget_pixels };
                let v = invert_universal(&mut victim.model, &self.val, &budget, *steps)?;
                let r = invert_universal(&mut reference, &self.val, &budget, *steps)?;
                serde_json::json!({
                    "victim_asr": v.asr,
                    "reference_asr": r.asr,
                    "flip_histogram": v.flip_histogram,
                })
            }
            AttackSpec::Nlti { epochs, radius } => {
                let ns = load_noise_set(&self.dir.join("noise_set.json"))?;
                let res = nlti(
                    &ns,
                    &mut victim.model,
                    &LRSchedule::default(),
                    &PerturbationBudget::L2 { radius: *radius },
                    *epochs,
                    &self.val,
                )?;
                let gauss = crate::evade::gaussian_like(&res.delta, self.cfg.seed);
                // transfer target: a sibling model trained on the same noisy
                // labels with different randomness — the memorized shortcut
                // is shared across such models
                let sib_cfg = TrainConfig {
                    seed: self.cfg.seed.wrapping_add(1000),
                    ..self.train_cfg()
                };
                let mut sibling = crate::embed::embed_noise_label_sibling(
                    &self.train,
                    &ns,
                    &sib_cfg,
                    &self.cfg.model.arch,
                )?;
                // control: the same inversion against the clean reference,
                // which has no memorized shortcut to recover; its direction
                // is evaluated on a second, independent clean model
                let ctrl = crate::evade::nlti_control(
                    &ns,
                    &mut reference,
                    &LRSchedule::default(),
                    &PerturbationBudget::L2 { radius: *radius },
                    *epochs,
                    &self.val,
                )?;
                let ctrl_gauss = crate::evade::gaussian_like(&ctrl.delta, self.cfg.seed);
                let clean2_cfg = TrainConfig {
                    seed: self.cfg.seed.wrapping_add(2000),
                    ..self.train_cfg()
                };
                let mut clean2 = train_erm(&self.train, &self.cfg.model.arch, &clean2_cfg)?;
                serde_json::json!({
                    "transfer_asr": crate::evade::transfer_asr(&mut sibling, &self.val, &res.delta)?,
                    "gaussian_asr": crate::evade::transfer_asr(&mut sibling, &self.val, &gauss)?,
                    "correction_rate": res.correction_rate,
                    "victim_delta_asr": crate::evade::transfer_asr(&mut victim.model, &self.val, &res.delta)?,
                    "victim_gaussian_asr": crate::evade::transfer_asr(&mut victim.model, &self.val, &gauss)?,
                    "control_transfer_asr": crate::evade::transfer_asr(&mut clean2, &self.val, &ctrl.delta)?,
                    "control_gaussian_asr": crate::evade::transfer_asr(&mut clean2, &self.val, &ctrl_gauss)?,
                })
            }
            AttackSpec::SparseAttack { steps } => {
                let (h, w, _) = self.train.image_shape();
                let budget = PerturbationBudget::sparse_default(h, w);
                let v = sparse_instance_attack(&mut victim.model, &self.val, &budget, *steps)?;
                let r = sparse_instance_attack(&mut reference, &self.val, &budget, *steps)?;
                serde_json::json!({ "victim_asr": v.asr, "reference_asr": r.asr })
            }
            AttackSpec::Extract { gamma, epochs, ood_queries, filter_misclassified } => {
                let queries = if *ood_queries {
                    crate::data::gradients10(self.cfg.dataset.n_train, self.cfg.dataset.seed + 17)
                } else {
                    self.train.clone()
                };
                let ecfg = ExtractionConfig {
                    gamma: *gamma,
                    arch: self.cfg.model.arch.clone(),
                    epochs: *epochs,
                    batch_size: self.cfg.model.batch_size,
                    lr: self.cfg.model.lr,
                    seed: self.cfg.seed,
                    filter_misclassified: *filter_misclassified,
                };
                let bundle = if matches!(self.cfg.method, Method::Uae) {
                    Some(load_bundle(&self.dir.join("bundle.wmb"))?)
                } else {
                    None
                };
                let mut surface = TemperedServing::new(&mut victim.model, victim.gamma_v)?;
                let mut surrogate =
                    extract_surrogate(&mut surface, &queries, bundle.as_ref(), &ecfg)?;
                let val_acc = evaluate_accuracy(&mut surrogate, &self.val)?.accuracy;
                let mut m = serde_json::json!({
                    "surrogate_val_acc": val_acc,
                    "surrogate_trigger_acc": self.trigger_metric(&mut surrogate)?,
                    "queries": surface_queries_placeholder(&queries),
                });
                if let Some(b) = &bundle {
                    let acc = |mm: &mut ClassifierModel, ds: &LabeledDataset| {
                        let idx: Vec<usize> = (0..ds.len()).collect();
                        let preds = argmax_rows(&mm.logits(&to_unit_batch(ds, &idx)));
                        preds.iter().zip(&ds.labels).filter(|(p, y)| *p == *y).count() as f32
                            / ds.len() as f32
                    };
                    let o = m.as_object_mut().unwrap();
                    o.insert("surrogate_pros_acc".into(), serde_json::json!(acc(&mut surrogate, &b.pros)));
                    o.insert("surrogate_cons_acc".into(), serde_json::json!(acc(&mut surrogate, &b.cons)));
                }
                m
            }
            AttackSpec::FinePrune { prune_step } => {
                let n_sub = (self.train.len() / 5).max(1);
                let sub = self.train.subset(&(0..n_sub).collect::<Vec<_>>(), Split::Train);
                let pcfg = PruneConfig { prune_step: *prune_step, ..Default::default() };
                let (mut pruned, trace) = fine_prune(&victim.model, &sub, &self.val, None, &pcfg)?;
                let mut m = serde_json::json!({
                    "final_val_acc": evaluate_accuracy(&mut pruned, &self.val)?.accuracy,
                    "post_trigger_acc": self.trigger_metric(&mut pruned)?,
                    "trace": trace,
                });
                if matches!(self.cfg.method, Method::Uae) {
                    let bundle = load_bundle(&self.dir.join("bundle.wmb"))?;
                    m["phi_wm"] = serde_json::json!(phi_wm_of_model(&mut pruned, &bundle)?);
                }
                m
            }
            AttackSpec::AnomalyFilter { blocks, contamination } => {
                let fcfg = AnomalyFilterConfig {
                    seed: self.cfg.seed,
                    blocks: *blocks,
                    contamination: *contamination,
                    ..Default::default()
                };
                // the filtering adversary only holds the stolen model, so the
                // deployed model itself doubles as the feature extractor
                let mut extractor = victim.model.clone();
                let filter =
                    fit_anomaly_filter(&mut victim.model, &mut extractor, &self.train, &fcfg)?;
                let clean = filtered_serving(&mut victim.model, &mut extractor, &filter, &self.val)?;
                let trigger_stream: Option<LabeledDataset> = match self.cfg.method {
                    Method::Uae => {
                        let bundle = load_bundle(&self.dir.join("bundle.wmb"))?;
                        Some(bundle.pros)
                    }
                    Method::Pattern => {
                        let spec = load_pattern(&self.dir.join("pattern.json"))?;
                        let src = self.val.indices_of_class(spec.source);
                        Some(crate::embed::apply_pattern(
                            &self.val.subset(&src, Split::Val),
                            &spec,
                            false,
                        ))
                    }
                    _ => None,
                };
                let mut obj = serde_json::json!({
                    "clean_rejection_rate": clean.rejection_rate,
                    "clean_acc": clean.accuracy,
                });
                if let Some(stream) = trigger_stream {
                    let t = filtered_serving(&mut victim.model, &mut extractor, &filter, &stream)?;
                    let o = obj.as_object_mut().unwrap();
                    o.insert("trigger_rejection_rate".into(), serde_json::json!(t.rejection_rate));
                    o.insert("trigger_acc".into(), serde_json::json!(t.accuracy));
                }
                obj
            }
            AttackSpec::AdvFinetune { epochs } => {
                let n_sub = (self.train.len() / 5).max(1);
                let sub = self.train.subset(&(0..n_sub).collect::<Vec<_>>(), Split::Train);
                let cfg = TrainConfig {
                    epochs: *epochs,
                    batch_size: self.cfg.model.batch_size,
                    lr: 5e-4,
                    weight_decay: 0.0,
                    seed: self.cfg.seed,
                };
                let mut tuned = adversarial_finetune(&victim.model, &sub, 2.0 / 255.0, 5, &cfg)?;
                serde_json::json!({
                    "val_acc": evaluate_accuracy(&mut tuned, &self.val)?.accuracy,
                    "post_trigger_acc": self.trigger_metric(&mut tuned)?,
                })
            }
            AttackSpec::Smoothing { sigmas, draws } => {
                if !matches!(self.cfg.method, Method::Uae) {
                    return Err(Error::Config("smoothing attack requires method = \"uae\"".into()));
                }
                let bundle = load_bundle(&self.dir.join("bundle.wmb"))?;
                let curves = randomized_smoothing_eval(
                    &mut victim.model,
                    &bundle,
                    &self.val,
                    sigmas,
                    *draws,
                    self.cfg.seed,
                )?;
                serde_json::to_value(&curves)?
            }
        };
        write_json(&meta_path, &metrics)?;
        Ok(metrics)
    }

    // ---- verification -----------------------------------------------------

    fn run_verify(&self, resume: bool) -> Result<Option<serde_json::Value>> {
        if !matches!(self.cfg.method, Method::Uae) {
            return Ok(None);
        }
        let meta_path = self.dir.join("verify.json");
        if resume && meta_path.exists() {
            return Ok(Some(read_json(&meta_path)?));
        }
        let bundle = load_bundle(&self.dir.join("bundle.wmb"))?;
        let mut victim = self.load_victim()?;
        let gamma = victim.gamma_v;
        let mut surface = TemperedServing::new(&mut victim.model, gamma)?;
        let verdict =
            verify_ownership(&mut surface, "victim", &bundle, self.cfg.verify.threshold)?;
        let metrics = serde_json::to_value(&verdict)?;
        write_json(&meta_path, &metrics)?;
        Ok(Some(metrics))
    }
}

fn surface_queries_placeholder(queries: &LabeledDataset) -> usize {
    queries.len()
}

/// Stage selector for partial CLI runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelect {
    Reference,
    Triggers,
    Embed,
    AttackEvade,
    AttackRemove,
    Verify,
    All,
}

impl StageSelect {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "train" | "reference" => StageSelect::Reference,
            "gen-triggers" | "triggers" => StageSelect::Triggers,
            "embed" => StageSelect::Embed,
            "attack-evade" => StageSelect::AttackEvade,
            "attack-remove" => StageSelect::AttackRemove,
            "verify" => StageSelect::Verify,
            "all" | "report" => StageSelect::All,
            other => return Err(Error::Config(format!("unknown stage `{other}`"))),
        })
    }
}

fn is_evade(spec: &AttackSpec) -> bool {
    matches!(
        spec,
        AttackSpec::TargetedInversion { .. }
            | AttackSpec::UniversalInversion { .. }
            | AttackSpec::Nlti { .. }
            | AttackSpec::SparseAttack { .. }
    )
}

/// Execute the selected stages; earlier stages a later one depends on are
/// run too (resuming from their artifacts when present).
pub fn run_stages(
    cfg: &ExperimentConfig,
    select: StageSelect,
    resume: bool,
) -> Result<ExperimentReport> {
    let start = std::time::Instant::now();
    let ctx = Context::new(cfg)?;
    let _lock = DirLock::acquire(&ctx.dir)?;
    let mut stages: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    // when a later stage is selected, its prerequisites resume from artifacts
    let dep_resume = |stage: StageSelect| -> bool {
        resume || (select != StageSelect::All && select != stage)
    };
    // partial results are flushed even when a stage fails
    let result = (|| -> Result<()> {
        let reference = ctx
            .run_reference(dep_resume(StageSelect::Reference))
            .map_err(|e| stage_err("train", e))?;
        stages.insert("reference".into(), reference);
        if select == StageSelect::Reference {
            return Ok(());
        }
        if let Some(t) = ctx
            .run_triggers(dep_resume(StageSelect::Triggers))
            .map_err(|e| stage_err("gen-triggers", e))?
        {
            stages.insert("triggers".into(), t);
        }
        if select == StageSelect::Triggers {
            return Ok(());
        }
        let embed = ctx
            .run_embed(dep_resume(StageSelect::Embed))
            .map_err(|e| stage_err("embed", e))?;
        stages.insert("embed".into(), embed);
        if select == StageSelect::Embed {
            return Ok(());
        }
        for (i, spec) in cfg.attacks.iter().enumerate() {
            let wanted = match select {
                StageSelect::AttackEvade => is_evade(spec),
                StageSelect::AttackRemove => !is_evade(spec),
                StageSelect::Verify => false,
                _ => true,
            };
            if !wanted {
                continue;
            }
            let metrics = ctx
                .run_attack(i, spec, resume)
                .map_err(|e| stage_err(spec.name(), e))?;
            stages.insert(format!("attack.{:02}.{}", i, spec.name()), metrics);
        }
        if matches!(select, StageSelect::AttackEvade | StageSelect::AttackRemove) {
            return Ok(());
        }
        if let Some(v) = ctx.run_verify(resume).map_err(|e| stage_err("verify", e))? {
            stages.insert("verify".into(), v);
        }
        Ok(())
    })();
    let report = ExperimentReport {
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION.into(),
        config_hash: cfg.config_hash(),
        method: cfg.method,
        stages,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&ctx.dir.join("report.json"), &report)?;
    result.map(|()| report)
}

/// Execute all stages of an experiment and produce its report.
pub fn run_experiment(cfg: &ExperimentConfig, resume: bool) -> Result<ExperimentReport> {
    run_stages(cfg, StageSelect::All, resume)
}

/// Penultimate features of a model over several labeled groups, for the
/// 2-D scatter figure. Returns (group name, feature rows).
pub fn feature_groups(
    model: &mut ClassifierModel,
    groups: &[(&str, &LabeledDataset)],
) -> Vec<(String, Vec<Vec<f32>>)> {
    groups
        .iter()
        .map(|(name, ds)| {
            let idx: Vec<usize> = (0..ds.len()).collect();
            let f = model.net.features(&to_unit_batch(ds, &idx));
            let rows = f.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
            (name.to_string(), rows)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::from_toml_str(
            r#"
            seed = 1
            out_dir = "placeholder"
            method = "none"
            [dataset]
            n_train = 120
            n_val = 80
            [model]
            epochs = 1
            "#,
        )
        .unwrap();
        cfg.out_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn config_parses_with_defaults_and_rejects_unknown_fields() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            seed = 7
            out_dir = "/tmp/x"
            method = "pattern"
            [[attacks]]
            kind = "universal-inversion"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.embed.gamma_v, 3.0);
        assert_eq!(cfg.attacks.len(), 1);
        let err = ExperimentConfig::from_toml_str(
            r#"
            seed = 7
            out_dir = "/tmp/x"
            method = "pattern"
            bogus_field = 3
            "#,
        );
        assert!(matches!(err, Err(Error::Config(_))));
        // nlti without noise-label method is a schema violation
        let err = ExperimentConfig::from_toml_str(
            r#"
            seed = 7
            out_dir = "/tmp/x"
            method = "pattern"
            [[attacks]]
            kind = "nlti"
            "#,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn method_none_without_attacks_reports_only_victim_metrics() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path());
        let report = run_experiment(&cfg, false).unwrap();
        let keys: Vec<&String> = report.stages.keys().collect();
        assert_eq!(keys, vec!["embed", "reference"]);
        assert!(report.stages["reference"]["val_acc"].as_f64().unwrap() > 0.0);
        // method none: the victim is the reference model itself
        assert_eq!(
            report.stages["embed"]["val_acc"].as_f64().unwrap(),
            report.stages["reference"]["val_acc"].as_f64().unwrap()
        );
    }

    #[test]
    fn repeat_run_is_metric_identical_and_resumable() {
        let (t1, t2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let a = run_experiment(&tiny_config(t1.path()), false).unwrap();
        let b = run_experiment(&tiny_config(t2.path()), false).unwrap();
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        // out_dir differs between the two runs; hash the rest identically
        a2.config_hash = String::new();
        b2.config_hash = String::new();
        assert!(report_diff(&a2, &b2, 1e-4).is_empty(), "{:?}", report_diff(&a2, &b2, 1e-4));
        // resumed rerun in the same directory gives identical metrics
        let c = run_experiment(&tiny_config(t1.path()), true).unwrap();
        assert!(report_diff(&a, &c, 1e-4).is_empty());
    }

    #[test]
    fn lock_prevents_concurrent_ownership() {
        let tmp = tempfile::tempdir().unwrap();
        let _l1 = DirLock::acquire(tmp.path()).unwrap();
        assert!(matches!(DirLock::acquire(tmp.path()), Err(Error::Contract(_))));
        drop(_l1);
        assert!(DirLock::acquire(tmp.path()).is_ok());
    }

    #[test]
    fn noise_set_and_pattern_artifacts_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = shapes10(12, 0, Split::Train);
        let ns = NoiseSet {
            images: ds.subset(&[0, 1, 2], Split::AttackSubset),
            y_true: vec![1, 2, 3],
            y_wrong: vec![2, 3, 4],
            indices: vec![0, 1, 2],
        };
        let p = tmp.path().join("ns.json");
        save_noise_set(&ns, &p).unwrap();
        let back = load_noise_set(&p).unwrap();
        assert_eq!(back.images.images, ns.images.images);
        assert_eq!(back.y_true, ns.y_true);
        let spec = PatternSpec::corner_patch((32, 32, 3), 0, 1);
        let pp = tmp.path().join("pat.json");
        save_pattern(&spec, &pp).unwrap();
        let back = load_pattern(&pp).unwrap();
        assert_eq!(back.delta, spec.delta);
        assert_eq!(back.source, 0);
        assert_eq!(back.target, 1);
    }
}
