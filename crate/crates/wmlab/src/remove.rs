//! Watermark-removal adversaries: fine-pruning, black-box model extraction,
//! anomaly-detection input filtering, adversarial fine-tuning, and randomized
//! smoothing. Every attack works on its own model copy; victims are consumed
//! read-only (extraction only ever sees served probabilities).

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{
    evaluate_accuracy, input_grad_ce, to_unit_batch, train_erm_into, ClassifierModel, TrainConfig,
};
use crate::nn::{argmax_rows, ce_loss_and_grad, Adam, ClassifierNet};
use crate::rng;
use crate::serve::ServingSurface;
use crate::triggergen::TriggerSetBundle;

// ---------------------------------------------------------------------------
// Black-box extraction
// ---------------------------------------------------------------------------

/// Configuration for training a surrogate from served probabilities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractionConfig {
    /// attacker-side distillation temperature (usually left at 1)
    pub gamma: f32,
    /// surrogate architecture descriptor
    pub arch: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    /// drop query responses whose argmax disagrees with the attacker's own
    /// label for the query image (a sanity filter against planted
    /// misclassifications)
    pub filter_misclassified: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            arch: "smallresnet:base=16,k=10,in=3x32x32".into(),
            epochs: 8,
            batch_size: 64,
            lr: 2e-3,
            seed: 0,
            filter_misclassified: false,
        }
    }
}

fn image_bytes_hash(ds: &LabeledDataset, i: usize) -> String {
    let mut h = Sha256::new();
    for v in ds.image(i).iter() {
        h.update([*v]);
    }
    hex::encode(h.finalize())
}

/// Train a surrogate against a victim's serving surface. The victim is only
/// ever queried for probabilities; each query image is submitted exactly once.
///
/// When `forbidden` is given, any query that also appears in the bundle's
/// trigger set is a contract violation: the attacker is assumed not to hold
/// the owner's secret triggers.
pub fn extract_surrogate(
    victim: &mut dyn ServingSurface,
    queries: &LabeledDataset,
    forbidden: Option<&TriggerSetBundle>,
    cfg: &ExtractionConfig,
) -> Result<ClassifierModel> {
    if !(cfg.gamma > 0.0) || !cfg.gamma.is_finite() {
        return Err(Error::Config(format!("extraction gamma {} must be > 0", cfg.gamma)));
    }
    if queries.is_empty() {
        return Err(Error::Data("extraction needs a query set".into()));
    }
    if let Some(bundle) = forbidden {
        let pros_hashes: std::collections::HashSet<String> = (0..bundle.pros.len())
            .map(|i| image_bytes_hash(&bundle.pros, i))
            .collect();
        for i in 0..queries.len() {
            if pros_hashes.contains(&image_bytes_hash(queries, i)) {
                return Err(Error::Contract(
                    "extraction query set overlaps the trigger set".into(),
                ));
            }
        }
    }
    // query the victim once, up front
    let all: Vec<usize> = (0..queries.len()).collect();
    let mut p_served = Array2::<f32>::zeros((queries.len(), victim.num_classes()));
    for chunk in all.chunks(cfg.batch_size) {
        let x = to_unit_batch(queries, chunk);
        let p = victim.predict_proba(&x)?;
        for (j, &i) in chunk.iter().enumerate() {
            p_served.row_mut(i).assign(&p.row(j));
        }
    }
    // optionally keep only queries whose served answer matches the
    // attacker's own label
    let kept: Vec<usize> = if cfg.filter_misclassified {
        let preds = argmax_rows(&p_served);
        (0..queries.len()).filter(|&i| preds[i] == queries.labels[i]).collect()
    } else {
        all
    };
    if kept.is_empty() {
        return Err(Error::Data(
            "extraction query filter removed every query".into(),
        ));
    }
    // distill into the surrogate
    let net = ClassifierNet::from_descriptor(&cfg.arch, cfg.seed)?;
    let mut surrogate = ClassifierModel::new(net, "extracted".into());
    let mut opt = Adam::new(cfg.lr, surrogate.net.num_params());
    let mut shuffle_rng = rng::derive(cfg.seed, "extract-shuffle");
    let mut indices: Vec<usize> = kept;
    use rand::seq::SliceRandom as _;
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        for chunk in indices.chunks(cfg.batch_size) {
            let x = to_unit_batch(queries, chunk);
            let mut p = Array2::<f32>::zeros((chunk.len(), victim.num_classes()));
            for (j, &i) in chunk.iter().enumerate() {
                p.row_mut(j).assign(&p_served.row(i));
            }
            let z = surrogate.net.forward(&x);
            let (loss, dz) = crate::embed::extraction_loss_and_grad(&z, &p, cfg.gamma);
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    msg: format!("extraction loss diverged (loss={loss})"),
                });
            }
            surrogate.net.zero_grads();
            surrogate.net.backward(&dz);
            let mut params = surrogate.net.params_flat();
            let grads = surrogate.net.grads_flat();
            opt.step(&mut params, &grads);
            surrogate.net.set_params_flat(&params);
            step += 1;
        }
    }
    surrogate.epochs_trained = cfg.epochs;
    Ok(surrogate)
}

// ---------------------------------------------------------------------------
// Fine-pruning
// ---------------------------------------------------------------------------

/// Configuration for iterative prune-and-fine-tune.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneConfig {
    /// channel fraction added to the prune rate each iteration
    pub prune_step: f32,
    /// abort when validation accuracy drops more than this below the start
    pub max_val_drop: f32,
    /// abort when the prune rate would exceed this
    pub max_prune_rate: f32,
    /// per-iteration fine-tuning settings
    pub finetune: TrainConfig,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            prune_step: 0.1,
            max_val_drop: 0.05,
            max_prune_rate: 0.75,
            finetune: TrainConfig {
                epochs: 1,
                batch_size: 64,
                lr: 1e-3,
                weight_decay: 0.0,
                seed: 0,
            },
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prune_step)
            || !(0.0 < self.max_prune_rate && self.max_prune_rate <= 1.0)
            || !(self.max_val_drop >= 0.0)
        {
            return Err(Error::Config("prune fractions must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One point of the fine-pruning trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneTracePoint {
    pub prune_rate: f32,
    pub val_acc: f32,
    pub trigger_acc: Option<f32>,
}

fn prune_to_rate(model: &mut ClassifierModel, rate: f32) {
    let norms = model.net.channel_l1_norms();
    if norms.is_empty() {
        return;
    }
    let n_prune = ((norms.len() as f32) * rate).round() as usize;
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[a].partial_cmp(&norms[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut mask = vec![false; norms.len()];
    for &i in order.iter().take(n_prune) {
        mask[i] = true;
    }
    model.net.apply_channel_mask(&mask);
}

fn maybe_trigger_acc(model: &mut ClassifierModel, trigger: Option<&LabeledDataset>) -> Option<f32> {
    trigger.and_then(|t| evaluate_accuracy(model, t).ok().map(|r| r.accuracy))
}

/// Iteratively magnitude-prune channels and fine-tune, stopping before the
/// validation drop or prune-rate limits are violated. Returns the last model
/// state that satisfies both stop rules plus the full trajectory.
pub fn fine_prune(
    model: &ClassifierModel,
    finetune_set: &LabeledDataset,
    val: &LabeledDataset,
    trigger: Option<&LabeledDataset>,
    cfg: &PruneConfig,
) -> Result<(ClassifierModel, Vec<PruneTracePoint>)> {
    cfg.validate()?;
    let mut current = model.clone();
    let base_val = evaluate_accuracy(&mut current, val)?.accuracy;
    let mut trace = vec![PruneTracePoint {
        prune_rate: 0.0,
        val_acc: base_val,
        trigger_acc: maybe_trigger_acc(&mut current, trigger),
    }];
    if cfg.prune_step == 0.0 {
        // pure fine-tuning
        train_erm_into(&mut current, finetune_set, &cfg.finetune, Some("fineprune-shuffle"))?;
        let val_acc = evaluate_accuracy(&mut current, val)?.accuracy;
        trace.push(PruneTracePoint {
            prune_rate: 0.0,
            val_acc,
            trigger_acc: maybe_trigger_acc(&mut current, trigger),
        });
        return Ok((current, trace));
    }
    let mut accepted = current.clone();
    let mut rate = cfg.prune_step;
    while rate <= cfg.max_prune_rate + 1e-6 {
        prune_to_rate(&mut current, rate);
        train_erm_into(&mut current, finetune_set, &cfg.finetune, Some("fineprune-shuffle"))?;
        let val_acc = evaluate_accuracy(&mut current, val)?.accuracy;
        trace.push(PruneTracePoint {
            prune_rate: rate,
            val_acc,
            trigger_acc: maybe_trigger_acc(&mut current, trigger),
        });
        if base_val - val_acc > cfg.max_val_drop {
            break; // revert to the last accepted state
        }
        accepted = current.clone();
        rate += cfg.prune_step;
    }
    Ok((accepted, trace))
}

// ---------------------------------------------------------------------------
// Isolation-forest input filtering
// ---------------------------------------------------------------------------

/// Configuration for per-class anomaly filtering of incoming queries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnomalyFilterConfig {
    /// residual blocks of the reference extractor used for features
    pub blocks: usize,
    /// fraction of fitting scores treated as anomalous
    pub contamination: f32,
    /// number of trees per class forest
    pub trees: usize,
    /// subsample size per tree
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for AnomalyFilterConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            contamination: 0.05,
            trees: 50,
            sample_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
enum IsoNode {
    Split { feature: usize, threshold: f32, left: usize, right: usize },
    Leaf { size: usize },
}

#[derive(Debug, Clone)]
struct IsoTree {
    nodes: Vec<IsoNode>,
}

/// Average unsuccessful-search path length in a binary search tree of n
/// points; the standard normalizer for isolation-forest scores.
fn avg_path_len(n: usize) -> f32 {
    if n <= 1 {
        return 0.0;
    }
    let nf = n as f32;
    2.0 * ((nf - 1.0).ln() + 0.577_215_7) - 2.0 * (nf - 1.0) / nf
}

impl IsoTree {
    fn fit(points: &[Vec<f32>], max_depth: usize, rng: &mut rng::Rng) -> Self {
        let mut tree = IsoTree { nodes: Vec::new() };
        let idx: Vec<usize> = (0..points.len()).collect();
        tree.build(points, &idx, 0, max_depth, rng);
        tree
    }

    fn build(
        &mut self,
        points: &[Vec<f32>],
        idx: &[usize],
        depth: usize,
        max_depth: usize,
        rng: &mut rng::Rng,
    ) -> usize {
        use rand::Rng as _;
        let node_id = self.nodes.len();
        if idx.len() <= 1 || depth >= max_depth {
            self.nodes.push(IsoNode::Leaf { size: idx.len() });
            return node_id;
        }
        let dim = points[idx[0]].len();
        // pick a feature with spread; give up after a few tries
        let mut feature = 0;
        let mut lo = 0.0;
        let mut hi = 0.0;
        let mut found = false;
        for _ in 0..8 {
            let f = rng.gen_range(0..dim);
            let (mut l, mut h) = (f32::MAX, f32::MIN);
            for &i in idx {
                l = l.min(points[i][f]);
                h = h.max(points[i][f]);
            }
            if h > l {
                feature = f;
                lo = l;
                hi = h;
                found = true;
                break;
            }
        }
        if !found {
            self.nodes.push(IsoNode::Leaf { size: idx.len() });
            return node_id;
        }
        let threshold = rng.gen_range(lo..hi);
        let left_idx: Vec<usize> = idx.iter().copied().filter(|&i| points[i][feature] < threshold).collect();
        let right_idx: Vec<usize> = idx.iter().copied().filter(|&i| points[i][feature] >= threshold).collect();
        self.nodes.push(IsoNode::Leaf { size: 0 }); // placeholder
        let left = self.build(points, &left_idx, depth + 1, max_depth, rng);
        let right = self.build(points, &right_idx, depth + 1, max_depth, rng);
        self.nodes[node_id] = IsoNode::Split { feature, threshold, left, right };
        node_id
    }

    fn path_length(&self, x: &[f32]) -> f32 {
        let mut node = 0usize;
        let mut depth = 0.0f32;
        loop {
            match &self.nodes[node] {
                IsoNode::Leaf { size } => return depth + avg_path_len(*size),
                IsoNode::Split { feature, threshold, left, right } => {
                    node = if x[*feature] < *threshold { *left } else { *right };
                    depth += 1.0;
                }
            }
        }
    }
}

/// Hand-rolled isolation forest; higher scores are more anomalous.
#[derive(Debug, Clone)]
pub struct IsolationForest {
    trees: Vec<IsoTree>,
    sample_size: usize,
}

impl IsolationForest {
    pub fn fit(points: &[Vec<f32>], trees: usize, sample_size: usize, rng: &mut rng::Rng) -> Self {
        use rand::seq::SliceRandom as _;
        let sample_size = sample_size.min(points.len()).max(2);
        let max_depth = (sample_size as f32).log2().ceil() as usize;
        let mut forest = Vec::with_capacity(trees);
        let mut idx: Vec<usize> = (0..points.len()).collect();
        for _ in 0..trees {
            idx.shuffle(rng);
            let sample: Vec<Vec<f32>> = idx.iter().take(sample_size).map(|&i| points[i].clone()).collect();
            forest.push(IsoTree::fit(&sample, max_depth, rng));
        }
        Self { trees: forest, sample_size }
    }

    /// Anomaly score in (0, 1); 0.5 is typical for inliers.
    pub fn score(&self, x: &[f32]) -> f32 {
        let mean_path: f32 =
            self.trees.iter().map(|t| t.path_length(x)).sum::<f32>() / self.trees.len() as f32;
        2f32.powf(-mean_path / avg_path_len(self.sample_size).max(1e-6))
    }
}

/// Per-class anomaly detectors over truncated reference features.
pub struct AnomalyFilter {
    forests: Vec<Option<(IsolationForest, f32)>>, // (forest, rejection threshold)
    blocks: usize,
}

impl AnomalyFilter {
    /// Raw anomaly score of a feature vector under one class's detector;
    /// higher is more anomalous. `None` when that class has no detector.
    pub fn class_score(&self, class: usize, features: &[f32]) -> Option<f32> {
        self.forests
            .get(class)
            .and_then(|o| o.as_ref())
            .map(|(forest, _)| forest.score(features))
    }
}

fn feature_rows(extractor: &mut ClassifierModel, x: &Array4<f32>, blocks: usize) -> Vec<Vec<f32>> {
    let f = extractor.net.truncated_features(x, blocks);
    f.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
}

/// Fit one isolation forest per class on clean features, grouped by the
/// victim's own predictions. Rejection thresholds are the per-class
/// `1 - contamination` score quantiles on the fitting data.
pub fn fit_anomaly_filter(
    victim: &mut ClassifierModel,
    extractor: &mut ClassifierModel,
    data: &LabeledDataset,
    cfg: &AnomalyFilterConfig,
) -> Result<AnomalyFilter> {
    if !(0.0 < cfg.contamination && cfg.contamination < 1.0) {
        return Err(Error::Config("contamination must lie in (0, 1)".into()));
    }
    if data.is_empty() {
        return Err(Error::Data("anomaly filter needs fitting data".into()));
    }
    let k = victim.num_classes();
    let all: Vec<usize> = (0..data.len()).collect();
    let mut by_class: Vec<Vec<Vec<f32>>> = vec![Vec::new(); k];
    for chunk in all.chunks(128) {
        let x = to_unit_batch(data, chunk);
        let preds = argmax_rows(&victim.logits(&x));
        let feats = feature_rows(extractor, &x, cfg.blocks);
        for (p, f) in preds.into_iter().zip(feats) {
            by_class[p].push(f);
        }
    }
    let mut rng = rng::derive(cfg.seed, "iforest");
    let mut forests = Vec::with_capacity(k);
    for class_feats in &by_class {
        if class_feats.len() < 4 {
            forests.push(None);
            continue;
        }
        let forest = IsolationForest::fit(class_feats, cfg.trees, cfg.sample_size, &mut rng);
        let mut scores: Vec<f32> = class_feats.iter().map(|f| forest.score(f)).collect();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = (((scores.len() as f32) * (1.0 - cfg.contamination)).floor() as usize)
            .min(scores.len() - 1);
        forests.push(Some((forest, scores[q])));
    }
    Ok(AnomalyFilter { forests, blocks: cfg.blocks })
}

/// Predictions under filtering: `None` means the query was rejected.
#[derive(Debug, Clone)]
pub struct FilteredPredictions {
    pub preds: Vec<Option<usize>>,
    pub rejection_rate: f32,
    /// accuracy counting rejections as misses
    pub accuracy: f32,
}

/// Serve a stream of queries through the victim with anomaly filtering:
/// each query's features are scored under the detector of its predicted
/// class, and anomalous queries are rejected (counted as misses).
pub fn filtered_serving(
    victim: &mut ClassifierModel,
    extractor: &mut ClassifierModel,
    filter: &AnomalyFilter,
    stream: &LabeledDataset,
) -> Result<FilteredPredictions> {
    if stream.is_empty() {
        return Err(Error::Data("empty query stream".into()));
    }
    let all: Vec<usize> = (0..stream.len()).collect();
    let mut preds = Vec::with_capacity(stream.len());
    let mut rejected = 0usize;
    let mut correct = 0usize;
    for chunk in all.chunks(128) {
        let x = to_unit_batch(stream, chunk);
        let raw = argmax_rows(&victim.logits(&x));
        let feats = feature_rows(extractor, &x, filter.blocks);
        for ((&i, p), f) in chunk.iter().zip(raw).zip(feats) {
            let Some((forest, threshold)) = filter.forests.get(p).and_then(|o| o.as_ref()) else {
                return Err(Error::Config(format!("no anomaly detector fitted for class {p}")));
            };
            if forest.score(&f) > *threshold {
                rejected += 1;
                preds.push(None);
            } else {
                if p == stream.labels[i] {
                    correct += 1;
                }
                preds.push(Some(p));
            }
        }
    }
    Ok(FilteredPredictions {
        rejection_rate: rejected as f32 / stream.len() as f32,
        accuracy: correct as f32 / stream.len() as f32,
        preds,
    })
}

// ---------------------------------------------------------------------------
// Adversarial fine-tuning
// ---------------------------------------------------------------------------

/// Bounded L∞ projected-gradient attack on a batch (ascent on the CE loss).
pub fn pgd_linf(
    model: &mut ClassifierModel,
    x: &Array4<f32>,
    labels: &[usize],
    eps: f32,
    steps: usize,
) -> Array4<f32> {
    let mut adv = x.clone();
    if steps == 0 || eps == 0.0 {
        return adv;
    }
    let step = eps / steps as f32 * 2.5;
    for _ in 0..steps {
        let (_, g) = input_grad_ce(model, &adv, labels);
        azip_step(&mut adv, x, &g, step, eps);
    }
    adv
}

fn azip_step(adv: &mut Array4<f32>, x: &Array4<f32>, g: &Array4<f32>, step: f32, eps: f32) {
    ndarray::Zip::from(adv).and(x).and(g).for_each(|a, &x0, &gv| {
        *a = (*a + step * gv.signum()).clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
    });
}

/// Fine-tune on on-the-fly bounded adversarial examples.
pub fn adversarial_finetune(
    model: &ClassifierModel,
    subset: &LabeledDataset,
    eps: f32,
    pgd_steps: usize,
    cfg: &TrainConfig,
) -> Result<ClassifierModel> {
    if subset.is_empty() {
        return Err(Error::Data("adversarial fine-tuning needs samples".into()));
    }
    let mut tuned = model.clone();
    let mut opt = Adam::new(cfg.lr, tuned.net.num_params());
    opt.weight_decay = cfg.weight_decay;
    let mut shuffle_rng = rng::derive(cfg.seed, "advft-shuffle");
    let mut indices: Vec<usize> = (0..subset.len()).collect();
    use rand::seq::SliceRandom as _;
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        for chunk in indices.chunks(cfg.batch_size) {
            let x = to_unit_batch(subset, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| subset.labels[i]).collect();
            let adv = pgd_linf(&mut tuned, &x, &labels, eps, pgd_steps);
            let logits = tuned.net.forward(&adv);
            let (loss, dlogits) = ce_loss_and_grad(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    msg: format!("adversarial fine-tuning diverged (loss={loss})"),
                });
            }
            tuned.net.zero_grads();
            tuned.net.backward(&dlogits);
            let mut params = tuned.net.params_flat();
            let grads = tuned.net.grads_flat();
            opt.step(&mut params, &grads);
            tuned.net.set_params_flat(&params);
            step += 1;
        }
    }
    tuned.epochs_trained += cfg.epochs;
    Ok(tuned)
}

// ---------------------------------------------------------------------------
// Randomized smoothing
// ---------------------------------------------------------------------------

/// Majority-vote accuracy under Gaussian input noise, per noise level.
pub fn smoothing_curve(
    model: &mut ClassifierModel,
    dataset: &LabeledDataset,
    sigmas: &[f32],
    n_draws: usize,
    seed: u64,
) -> Result<Vec<f32>> {
    use rand_distr::{Distribution, Normal};
    if dataset.is_empty() {
        return Err(Error::Data("smoothing needs samples".into()));
    }
    if n_draws == 0 {
        return Err(Error::Config("smoothing needs at least one draw".into()));
    }
    if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::Config("smoothing sigma must be >= 0".into()));
    }
    let all: Vec<usize> = (0..dataset.len()).collect();
    let x = to_unit_batch(dataset, &all);
    let k = model.num_classes();
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let mut curve = Vec::with_capacity(sigmas.len());
    for (si, &sigma) in sigmas.iter().enumerate() {
        let mut votes = vec![vec![0usize; k]; dataset.len()];
        for draw in 0..n_draws {
            let mut rng = rng::derive(seed, &format!("smooth:{si}:{draw}"));
            let noisy = if sigma == 0.0 {
                x.clone()
            } else {
                x.mapv(|v| v) + &Array4::from_shape_fn(x.dim(), |_| sigma * normal.sample(&mut rng))
            };
            for (i, p) in argmax_rows(&model.logits(&noisy)).into_iter().enumerate() {
                votes[i][p] += 1;
            }
        }
        let mut correct = 0usize;
        for (i, v) in votes.iter().enumerate() {
            // majority vote, ties broken toward the lowest class index
            let winner = v
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(c, _)| c)
                .unwrap();
            if winner == dataset.labels[i] {
                correct += 1;
            }
        }
        curve.push(correct as f32 / dataset.len() as f32);
    }
    Ok(curve)
}

/// Smoothing curves for trigger pros versus ordinary bounded adversarial
/// examples crafted on the same model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothingCurves {
    pub sigmas: Vec<f32>,
    pub pros_acc: Vec<f32>,
    pub adversarial_acc: Vec<f32>,
}

/// Compare how Gaussian smoothing affects the trigger set against fresh
/// norm-bounded adversarial examples generated from clean samples.
pub fn randomized_smoothing_eval(
    model: &mut ClassifierModel,
    bundle: &TriggerSetBundle,
    clean: &LabeledDataset,
    sigmas: &[f32],
    n_draws: usize,
    seed: u64,
) -> Result<SmoothingCurves> {
    if bundle.pros.is_empty() || clean.is_empty() {
        return Err(Error::Data("smoothing comparison needs pros and clean samples".into()));
    }
    let pros_acc = smoothing_curve(model, &bundle.pros, sigmas, n_draws, seed)?;
    // craft bounded adversarial examples on the clean subset
    let n = clean.len().min(bundle.pros.len().max(32));
    let idx: Vec<usize> = (0..n).collect();
    let x = to_unit_batch(clean, &idx);
    let labels: Vec<usize> = idx.iter().map(|&i| clean.labels[i]).collect();
    let adv = pgd_linf(model, &x, &labels, 8.0 / 255.0, 10);
    let mut images = ndarray::Array4::<u8>::zeros((n, clean.image_shape().0, clean.image_shape().1, clean.image_shape().2));
    for i in 0..n {
        let img = crate::model::unit_to_u8_image(&adv, i);
        images.index_axis_mut(Axis(0), i).assign(&img);
    }
    let adv_ds = LabeledDataset::new(
        "adv-smoothing",
        crate::data::Split::AttackSubset,
        images,
        labels,
        clean.num_classes,
    )?;
    let adversarial_acc = smoothing_curve(model, &adv_ds, sigmas, n_draws, seed)?;
    Ok(SmoothingCurves {
        sigmas: sigmas.to_vec(),
        pros_acc,
        adversarial_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{shapes10, Split};
    use crate::model::train_erm;
    use crate::serve::{PlainServing, TemperedServing};

    const ARCH: &str = "smallresnet:base=8,k=10,in=3x32x32";

    fn quick_model(n: usize, epochs: usize, seed: u64) -> ClassifierModel {
        let cfg = TrainConfig {
            epochs,
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 1e-5,
            seed,
        };
        train_erm(&shapes10(n, 3, Split::Train), ARCH, &cfg).unwrap()
    }

    #[test]
    fn extraction_loss_is_plain_ce_at_unit_temperatures() {
        use crate::nn::soft_ce_loss_and_grad;
        let mut r = rng::derive(0, "extckeck");
        use rand::Rng as _;
        let z = Array2::from_shape_fn((6, 10), |_| r.gen_range(-3.0f32..3.0));
        let raw = Array2::from_shape_fn((6, 10), |_| r.gen_range(0.01f32..1.0));
        let p = &raw / &raw.sum_axis(Axis(1)).insert_axis(Axis(1));
        let (l1, g1) = crate::embed::extraction_loss_and_grad(&z, &p, 1.0);
        let (l2, g2) = soft_ce_loss_and_grad(&z, &p);
        assert!((l1 - l2).abs() < 1e-6, "{l1} vs {l2}");
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn extraction_rejects_trigger_overlap_and_counts_queries() {
        let ds = shapes10(80, 3, Split::Train);
        let mut victim = quick_model(80, 1, 0);
        // bundle whose pros share an image with the query set
        let bundle = TriggerSetBundle {
            pros: ds.subset(&[0, 1], Split::AttackSubset),
            cons: ds.subset(&[2], Split::AttackSubset),
            reserve: ds.subset(&[], Split::AttackSubset),
            meta: crate::triggergen::BundleMeta {
                pipeline_hash: "t".into(),
                denoiser_hash: "t".into(),
                surrogate_hash: "t".into(),
                num_classes: 10,
            },
        };
        let cfg = ExtractionConfig {
            arch: ARCH.into(),
            epochs: 1,
            ..Default::default()
        };
        {
            let mut surface = PlainServing::new(&mut victim);
            assert!(matches!(
                extract_surrogate(&mut surface, &ds, Some(&bundle), &cfg),
                Err(Error::Contract(_))
            ));
        }
        // disjoint queries: one probability call per query image
        let queries = shapes10(60, 7, Split::AttackSubset);
        let mut surface = TemperedServing::new(&mut victim, 3.0).unwrap();
        let surrogate = extract_surrogate(&mut surface, &queries, Some(&bundle), &cfg).unwrap();
        assert_eq!(surface.queries(), 60);
        assert_eq!(surrogate.num_classes(), 10);
    }

    #[test]
    fn prune_step_zero_is_pure_finetuning() {
        let model = quick_model(400, 8, 1);
        let train = shapes10(400, 3, Split::Train);
        let sub = train.subset(&(0..80).collect::<Vec<_>>(), Split::Train);
        let val = shapes10(200, 4, Split::Val);
        let mut cfg = PruneConfig {
            prune_step: 0.0,
            ..Default::default()
        };
        cfg.finetune.lr = 2e-4;
        let (tuned, trace) = fine_prune(&model, &sub, &val, None, &cfg).unwrap();
        assert_eq!(trace.len(), 2);
        assert!(
            (trace[1].val_acc - trace[0].val_acc).abs() <= 0.01 + 1e-6,
            "pure fine-tuning moved val acc {} -> {}",
            trace[0].val_acc,
            trace[1].val_acc
        );
        assert!(tuned.epochs_trained > model.epochs_trained);
    }

    #[test]
    fn prune_stop_rules_are_honored() {
        let model = quick_model(300, 3, 1);
        let train = shapes10(300, 3, Split::Train);
        let sub = train.subset(&(0..60).collect::<Vec<_>>(), Split::Train);
        let val = shapes10(200, 4, Split::Val);
        let cfg = PruneConfig {
            prune_step: 0.25,
            ..Default::default()
        };
        let (pruned, trace) = fine_prune(&model, &sub, &val, None, &cfg).unwrap();
        // trace prune rates strictly increase
        for w in trace.windows(2) {
            assert!(w[1].prune_rate > w[0].prune_rate - 1e-6);
        }
        // the returned state satisfies both stop rules
        let mut returned = pruned;
        let val_acc = evaluate_accuracy(&mut returned, &val).unwrap().accuracy;
        assert!(trace[0].val_acc - val_acc <= cfg.max_val_drop + 1e-6);
        let last_ok = trace
            .iter()
            .filter(|p| trace[0].val_acc - p.val_acc <= cfg.max_val_drop)
            .map(|p| p.prune_rate)
            .fold(0.0f32, f32::max);
        assert!(last_ok <= cfg.max_prune_rate + 1e-6);
    }

    #[test]
    fn pruning_zeroes_lowest_norm_channels() {
        let mut model = quick_model(60, 1, 2);
        let before = model.net.channel_l1_norms();
        prune_to_rate(&mut model, 0.3);
        let after = model.net.channel_l1_norms();
        let zeroed = after.iter().filter(|&&v| v == 0.0).count();
        let expected = ((before.len() as f32) * 0.3).round() as usize;
        assert!(zeroed >= expected, "zeroed {zeroed} of expected {expected}");
        // the channels that survived are the higher-norm ones
        let mut sorted = before.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let cut = sorted[expected - 1];
        for (b, a) in before.iter().zip(&after) {
            if *b > cut {
                assert!(*a > 0.0);
            }
        }
    }

    #[test]
    fn adversarial_finetune_zero_epochs_is_identity() {
        let model = quick_model(60, 1, 0);
        let sub = shapes10(40, 5, Split::Train);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let tuned = adversarial_finetune(&model, &sub, 2.0 / 255.0, 5, &cfg).unwrap();
        assert_eq!(tuned.param_hash(), model.param_hash());
    }

    #[test]
    fn smoothing_sigma_zero_equals_plain_accuracy() {
        let mut model = quick_model(200, 2, 0);
        let val = shapes10(100, 4, Split::Val);
        let curve = smoothing_curve(&mut model, &val, &[0.0, 0.25], 5, 9).unwrap();
        let plain = evaluate_accuracy(&mut model, &val).unwrap().accuracy;
        assert!((curve[0] - plain).abs() < 1e-6);
    }

    #[test]
    fn single_draw_vote_equals_single_noisy_inference() {
        use rand_distr::{Distribution, Normal};
        let mut model = quick_model(100, 1, 0);
        let val = shapes10(40, 4, Split::Val);
        let sigma = 0.1f32;
        let curve = smoothing_curve(&mut model, &val, &[sigma], 1, 11).unwrap();
        // oracle: one noisy forward with the same derived noise stream
        let all: Vec<usize> = (0..val.len()).collect();
        let x = to_unit_batch(&val, &all);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let mut rng = rng::derive(11, "smooth:0:0");
        let noisy = &x + &Array4::from_shape_fn(x.dim(), |_| sigma * normal.sample(&mut rng));
        let preds = argmax_rows(&model.logits(&noisy));
        let acc = preds
            .iter()
            .zip(&val.labels)
            .filter(|(p, y)| *p == *y)
            .count() as f32
            / val.len() as f32;
        assert!((curve[0] - acc).abs() < 1e-6);
    }

    #[test]
    fn isolation_forest_flags_far_points() {
        let mut r = rng::derive(3, "iforest-test");
        use rand::Rng as _;
        let points: Vec<Vec<f32>> = (0..200)
            .map(|_| (0..4).map(|_| r.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let forest = IsolationForest::fit(&points, 50, 64, &mut r);
        let inlier_score = forest.score(&points[0]);
        let outlier_score = forest.score(&[8.0, -9.0, 7.5, 10.0]);
        assert!(
            outlier_score > inlier_score + 0.1,
            "outlier {outlier_score} vs inlier {inlier_score}"
        );
    }

    #[test]
    fn filtering_rejects_noise_streams_more_than_clean() {
        use rand::Rng as _;
        let mut victim = quick_model(400, 3, 0);
        let mut extractor = quick_model(400, 2, 7);
        let fit_data = shapes10(300, 8, Split::Train);
        let cfg = AnomalyFilterConfig::default();
        let filter = fit_anomaly_filter(&mut victim, &mut extractor, &fit_data, &cfg).unwrap();
        let clean = shapes10(150, 4, Split::Val);
        let clean_out = filtered_serving(&mut victim, &mut extractor, &filter, &clean).unwrap();
        // uniform-noise images are far from every class manifold
        let mut r = rng::derive(6, "noise-stream");
        let images = ndarray::Array4::from_shape_fn((150, 32, 32, 3), |_| r.gen_range(0u8..=255));
        let labels: Vec<usize> = (0..150).map(|i| i % 10).collect();
        let noise =
            LabeledDataset::new("noise", Split::AttackSubset, images, labels, 10).unwrap();
        let noise_out = filtered_serving(&mut victim, &mut extractor, &filter, &noise).unwrap();
        assert!(
            noise_out.rejection_rate > clean_out.rejection_rate,
            "noise {} vs clean {}",
            noise_out.rejection_rate,
            clean_out.rejection_rate
        );
        assert!(clean_out.rejection_rate <= 0.15, "clean rejection {}", clean_out.rejection_rate);
    }

    #[test]
    fn filtering_requires_fitted_detector() {
        let mut victim = quick_model(200, 2, 0);
        let mut extractor = quick_model(100, 1, 7);
        // fit on a two-class slice: most classes never get a detector
        let fit_data = shapes10(300, 8, Split::Train);
        let two: Vec<usize> = (0..fit_data.len())
            .filter(|&i| fit_data.labels[i] < 2)
            .collect();
        let slice = fit_data.subset(&two, Split::Train);
        let cfg = AnomalyFilterConfig::default();
        let filter = fit_anomaly_filter(&mut victim, &mut extractor, &slice, &cfg).unwrap();
        let stream = shapes10(100, 4, Split::Val);
        assert!(matches!(
            filtered_serving(&mut victim, &mut extractor, &filter, &stream),
            Err(Error::Config(_))
        ));
    }
}
