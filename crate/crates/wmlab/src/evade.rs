//! Evasion attacks that expose watermark shortcuts: targeted and universal
//! trigger inversion, noise-label trigger inversion (NLTI), and a sparse
//! per-instance attack. All attacks are read-only on the model and report
//! attack success rates on held-out samples.

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::embed::NoiseSet;
use crate::error::{Error, Result};
use crate::model::{input_grad_ce, input_grad_from_dlogits, to_unit_batch, ClassifierModel};
use crate::nn::argmax_rows;
use crate::rng;

/// Perturbation budget in one of three norms. A zero radius / pixel count is
/// the degenerate "no perturbation" budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationBudget {
    L0 { max_pixels: usize },
    L2 { radius: f32 },
    LInf { radius: f32 },
}

impl PerturbationBudget {
    pub fn validate(&self) -> Result<()> {
        match self {
            PerturbationBudget::L2 { radius } | PerturbationBudget::LInf { radius } => {
                if !radius.is_finite() || *radius < 0.0 {
                    return Err(Error::Config(format!("bad budget radius {radius}")));
                }
            }
            PerturbationBudget::L0 { .. } => {}
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        match self {
            PerturbationBudget::L0 { max_pixels } => *max_pixels == 0,
            PerturbationBudget::L2 { radius } | PerturbationBudget::LInf { radius } => {
                *radius == 0.0
            }
        }
    }

    /// Desk-scale universal-inversion budget: 0.5% of pixels, at least 5.
    pub fn universal_default(h: usize, w: usize) -> Self {
        PerturbationBudget::L0 {
            max_pixels: ((h * w) as f32 * 0.005).round().max(5.0) as usize,
        }
    }

    /// Desk-scale sparse instance budget: 0.1% of pixels, at least 1.
    pub fn sparse_default(h: usize, w: usize) -> Self {
        PerturbationBudget::L0 {
            max_pixels: ((h * w) as f32 * 0.001).round().max(1.0) as usize,
        }
    }
}

/// Project a (C, H, W) perturbation onto the budget. L0 keeps the strongest
/// pixels (summed absolute value over channels), ties broken in raster order.
pub fn project_budget(delta: &mut Array3<f32>, budget: &PerturbationBudget) {
    match budget {
        PerturbationBudget::LInf { radius } => {
            delta.mapv_inplace(|v| v.clamp(-radius, *radius));
        }
        PerturbationBudget::L2 { radius } => {
            let norm = delta.mapv(|v| v * v).sum().sqrt();
            if norm > *radius {
                let scale = radius / norm.max(1e-12);
                delta.mapv_inplace(|v| v * scale);
            }
        }
        PerturbationBudget::L0 { max_pixels } => {
            let (c, h, w) = delta.dim();
            let mut scores: Vec<(f32, usize)> = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for ch in 0..c {
                        s += delta[[ch, y, x]].abs();
                    }
                    scores.push((s, y * w + x)); // raster index for tie-break
                }
            }
            // stable: sort by (-score, raster index)
            scores.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
            });
            let keep: std::collections::HashSet<usize> =
                scores.iter().take(*max_pixels).map(|&(_, i)| i).collect();
            for y in 0..h {
                for x in 0..w {
                    if !keep.contains(&(y * w + x)) {
                        for ch in 0..c {
                            delta[[ch, y, x]] = 0.0;
                        }
                    }
                }
            }
            // pixel values themselves stay within the displayable range
            delta.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        }
    }
}

/// Audit that a perturbation satisfies its budget (post-projection property).
pub fn budget_satisfied(delta: &Array3<f32>, budget: &PerturbationBudget) -> bool {
    match budget {
        PerturbationBudget::LInf { radius } => {
            delta.iter().all(|v| v.abs() <= radius + 1e-6)
        }
        PerturbationBudget::L2 { radius } => {
            delta.mapv(|v| v * v).sum().sqrt() <= radius + 1e-5
        }
        PerturbationBudget::L0 { max_pixels } => {
            let (c, h, w) = delta.dim();
            let mut n = 0;
            for y in 0..h {
                for x in 0..w {
                    if (0..c).any(|ch| delta[[ch, y, x]] != 0.0) {
                        n += 1;
                    }
                }
            }
            n <= *max_pixels
        }
    }
}

/// Learning-rate schedule: step decays at epoch fractions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LRSchedule {
    pub initial: f32,
    /// (fraction of epochs, multiplicative factor) pairs
    pub decays: Vec<(f32, f32)>,
}

impl Default for LRSchedule {
    fn default() -> Self {
        Self {
            initial: 0.1,
            decays: vec![(0.5, 0.1), (0.75, 0.1)],
        }
    }
}

impl LRSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0) {
            return Err(Error::Config("schedule rate must be positive".into()));
        }
        for &(frac, factor) in &self.decays {
            if !(0.0..=1.0).contains(&frac) || !(factor > 0.0 && factor <= 1.0) {
                return Err(Error::Config("schedule rates must be positive and non-increasing".into()));
            }
        }
        Ok(())
    }

    pub fn rate_at(&self, epoch: usize, total_epochs: usize) -> f32 {
        let mut rate = self.initial;
        for &(frac, factor) in &self.decays {
            if (epoch as f32) >= frac * total_epochs as f32 {
                rate *= factor;
            }
        }
        rate
    }
}

/// Outcome of a trigger-inversion attack.
#[derive(Debug, Clone)]
pub struct InversionResult {
    /// (C, H, W) perturbation
    pub delta: Array3<f32>,
    pub target: Option<usize>,
    /// attack success rate on held-out samples
    pub asr: f32,
    /// per-step optimization loss
    pub trace: Vec<f32>,
    /// successful-flip predicted-class histogram (universal inversion)
    pub flip_histogram: Option<Vec<usize>>,
    /// fraction of noise samples corrected by subtracting delta (NLTI)
    pub correction_rate: Option<f32>,
}

fn apply_delta(x: &Array4<f32>, delta: &Array3<f32>, sign: f32) -> Array4<f32> {
    let mut out = x.clone();
    let (n, c, h, w) = x.dim();
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[[i, ch, y, xx]] =
                        (out[[i, ch, y, xx]] + sign * delta[[ch, y, xx]]).clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

fn chw_of(ds: &LabeledDataset) -> (usize, usize, usize) {
    let (h, w, c) = ds.image_shape();
    (c, h, w)
}

/// Split a dataset's index range into optimization and held-out halves,
/// capping the held-out part at 1000 samples.
fn opt_holdout_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    let half = n / 2;
    let holdout: Vec<usize> = (half..n).take(1000).collect();
    ((0..half).collect(), holdout)
}

fn mean_input_grad(g: &Array4<f32>) -> Array3<f32> {
    let (n, c, h, w) = g.dim();
    let mut out = Array3::<f32>::zeros((c, h, w));
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[[ch, y, xx]] += g[[i, ch, y, xx]];
                }
            }
        }
    }
    out.mapv(|v| v / n as f32)
}

/// Find a shared perturbation driving class-`s` samples to class `t`.
pub fn invert_targeted_trigger(
    model: &mut ClassifierModel,
    dataset: &LabeledDataset,
    s: usize,
    t: usize,
    budget: &PerturbationBudget,
    steps: usize,
) -> Result<InversionResult> {
    budget.validate()?;
    if s == t {
        return Err(Error::Config("targeted inversion needs s != t".into()));
    }
    let hash_before = model.param_hash();
    let src = dataset.indices_of_class(s);
    if src.is_empty() {
        return Err(Error::Data(format!("no class-{s} samples")));
    }
    let (opt_rel, hold_rel) = opt_holdout_split(src.len());
    let opt_idx: Vec<usize> = opt_rel.iter().map(|&i| src[i]).collect();
    let hold_idx: Vec<usize> = if hold_rel.is_empty() {
        opt_idx.clone()
    } else {
        hold_rel.iter().map(|&i| src[i]).collect()
    };
    let (c, h, w) = chw_of(dataset);
    let mut delta = Array3::<f32>::zeros((c, h, w));
    let mut trace = Vec::with_capacity(steps);
    if !budget.is_zero() && !opt_idx.is_empty() {
        let x = to_unit_batch(dataset, &opt_idx);
        let labels = vec![t; opt_idx.len()];
        let step_size = step_size_for(budget);
        for _ in 0..steps {
            let xp = apply_delta(&x, &delta, 1.0);
            let (loss, g) = input_grad_ce(model, &xp, &labels);
            trace.push(loss);
            // descend the CE towards the target class
            let mg = mean_input_grad(&g);
            delta = &delta - &mg.mapv(|v| step_size * v.signum());
            project_budget(&mut delta, budget);
        }
    }
    // ASR: held-out class-s samples classified as t
    let xh = to_unit_batch(dataset, &hold_idx);
    let preds = argmax_rows(&model.logits(&apply_delta(&xh, &delta, 1.0)));
    let asr = preds.iter().filter(|&&p| p == t).count() as f32 / hold_idx.len() as f32;
    debug_assert!(budget_satisfied(&delta, budget));
    if model.param_hash() != hash_before {
        return Err(Error::Contract("attack modified model parameters".into()));
    }
    Ok(InversionResult {
        delta,
        target: Some(t),
        asr,
        trace,
        flip_histogram: None,
        correction_rate: None,
    })
}

fn step_size_for(budget: &PerturbationBudget) -> f32 {
    match budget {
        PerturbationBudget::LInf { radius } => (radius / 10.0).max(1e-4),
        PerturbationBudget::L2 { radius } => (radius / 10.0).max(1e-4),
        PerturbationBudget::L0 { .. } => 0.05,
    }
}

/// Find a single perturbation maximizing untargeted error over the dataset.
pub fn invert_universal(
    model: &mut ClassifierModel,
    dataset: &LabeledDataset,
    budget: &PerturbationBudget,
    steps: usize,
) -> Result<InversionResult> {
    budget.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("universal inversion needs samples".into()));
    }
    let hash_before = model.param_hash();
    let (opt_idx, hold_idx) = opt_holdout_split(dataset.len());
    let hold_idx = if hold_idx.is_empty() { opt_idx.clone() } else { hold_idx };
    let (c, h, w) = chw_of(dataset);
    let mut delta = Array3::<f32>::zeros((c, h, w));
    let mut trace = Vec::with_capacity(steps);
    if !budget.is_zero() && !opt_idx.is_empty() {
        let x = to_unit_batch(dataset, &opt_idx);
        let labels: Vec<usize> = opt_idx.iter().map(|&i| dataset.labels[i]).collect();
        let step_size = step_size_for(budget);
        for _ in 0..steps {
            let xp = apply_delta(&x, &delta, 1.0);
            let (loss, g) = input_grad_ce(model, &xp, &labels);
            trace.push(loss);
            // ascend the CE away from the true labels
            let mg = mean_input_grad(&g);
            delta = &delta + &mg.mapv(|v| step_size * v.signum());
            project_budget(&mut delta, budget);
        }
    }
    let xh = to_unit_batch(dataset, &hold_idx);
    let labels: Vec<usize> = hold_idx.iter().map(|&i| dataset.labels[i]).collect();
    let preds = argmax_rows(&model.logits(&apply_delta(&xh, &delta, 1.0)));
    let mut histogram = vec![0usize; model.num_classes()];
    let mut wrong = 0usize;
    for (p, &y) in preds.iter().zip(&labels) {
        if *p != y {
            wrong += 1;
            histogram[*p] += 1;
        }
    }
    let asr = wrong as f32 / labels.len() as f32;
    debug_assert!(budget_satisfied(&delta, budget));
    if model.param_hash() != hash_before {
        return Err(Error::Contract("attack modified model parameters".into()));
    }
    Ok(InversionResult {
        delta,
        target: None,
        asr,
        trace,
        flip_histogram: Some(histogram),
        correction_rate: None,
    })
}

/// Noise-label trigger inversion: recover the shortcut direction absorbed by
/// memorizing relabeled samples.
///
/// The published pseudocode evaluates the logit loss at `x + delta` while
/// its objective asks for `x - delta` to be correctly classified; the two
/// disagree in sign. This follows the objective: the loss `-z_y + z_{y'}` is
/// evaluated at `x - delta`, so the recovered `delta` is the trigger itself
/// (subtracting corrects the noise samples, adding it to clean samples
/// transfers the confusion).
pub fn nlti(
    noise: &NoiseSet,
    model: &mut ClassifierModel,
    schedule: &LRSchedule,
    budget: &PerturbationBudget,
    epochs: usize,
    holdout: &LabeledDataset,
) -> Result<InversionResult> {
    nlti_inner(noise, model, schedule, budget, epochs, holdout, true)
}

/// The same optimization run against a model that has NOT memorized the
/// noise labels — the attacker's control experiment. On such a model the
/// recovered perturbation should transfer no better than matched-norm noise.
pub fn nlti_control(
    noise: &NoiseSet,
    model: &mut ClassifierModel,
    schedule: &LRSchedule,
    budget: &PerturbationBudget,
    epochs: usize,
    holdout: &LabeledDataset,
) -> Result<InversionResult> {
    nlti_inner(noise, model, schedule, budget, epochs, holdout, false)
}

fn nlti_inner(
    noise: &NoiseSet,
    model: &mut ClassifierModel,
    schedule: &LRSchedule,
    budget: &PerturbationBudget,
    epochs: usize,
    holdout: &LabeledDataset,
    require_memorized: bool,
) -> Result<InversionResult> {
    schedule.validate()?;
    budget.validate()?;
    if noise.images.is_empty() {
        return Err(Error::Data("empty noise set".into()));
    }
    let hash_before = model.param_hash();
    // precondition: the wrong labels are memorized
    let all: Vec<usize> = (0..noise.images.len()).collect();
    let x_noise = to_unit_batch(&noise.images, &all);
    let preds = argmax_rows(&model.logits(&x_noise));
    if require_memorized && preds.iter().zip(&noise.y_wrong).any(|(p, y)| p != y) {
        return Err(Error::Data(
            "model has not memorized the noise labels; nothing to invert".into(),
        ));
    }
    let (c, h, w) = chw_of(&noise.images);
    let mut delta = Array3::<f32>::zeros((c, h, w));
    let mut trace = Vec::new();
    for epoch in 0..epochs {
        let alpha = schedule.rate_at(epoch, epochs);
        let mut epoch_loss = 0.0;
        for i in 0..noise.images.len() {
            let x = to_unit_batch(&noise.images, &[i]);
            let xm = apply_delta(&x, &delta, -1.0);
            let (y, yp) = (noise.y_true[i], noise.y_wrong[i]);
            // L = -z_y + z_{y'}; dL/dz is -1 at y, +1 at y'
            let mut dl = Array2::<f32>::zeros((1, model.num_classes()));
            dl[[0, y]] = -1.0;
            dl[[0, yp]] = 1.0;
            let g = input_grad_from_dlogits(model, &xm, &dl);
            let logits = model.logits(&xm);
            epoch_loss += -logits[[0, y]] + logits[[0, yp]];
            // descend L(x - delta): d/d(delta) = -d/d(input)
            let gd = mean_input_grad(&g);
            delta = &delta + &gd.mapv(|v| alpha * v);
            project_budget(&mut delta, budget);
        }
        trace.push(epoch_loss / noise.images.len() as f32);
    }
    // correction rate: x - delta restored to the true label
    let corrected = argmax_rows(&model.logits(&apply_delta(&x_noise, &delta, -1.0)));
    let correction_rate = corrected
        .iter()
        .zip(&noise.y_true)
        .filter(|(p, y)| *p == *y)
        .count() as f32
        / noise.images.len() as f32;
    // transfer ASR: clean held-out predictions flipped by adding delta
    let hold_all: Vec<usize> = (0..holdout.len().min(1000)).collect();
    let xh = to_unit_batch(holdout, &hold_all);
    let before = argmax_rows(&model.logits(&xh));
    let after = argmax_rows(&model.logits(&apply_delta(&xh, &delta, 1.0)));
    let asr = before
        .iter()
        .zip(&after)
        .filter(|(b, a)| *b != *a)
        .count() as f32
        / hold_all.len().max(1) as f32;
    debug_assert!(budget_satisfied(&delta, budget));
    if model.param_hash() != hash_before {
        return Err(Error::Contract("attack modified model parameters".into()));
    }
    Ok(InversionResult {
        delta,
        target: None,
        asr,
        trace,
        flip_histogram: None,
        correction_rate: Some(correction_rate),
    })
}

/// Fraction of samples whose prediction flips when `delta` is added.
pub fn transfer_asr(
    model: &mut ClassifierModel,
    ds: &LabeledDataset,
    delta: &Array3<f32>,
) -> Result<f32> {
    if ds.is_empty() {
        return Err(Error::Data("transfer ASR needs a nonempty dataset".into()));
    }
    let idx: Vec<usize> = (0..ds.len().min(1000)).collect();
    let x = to_unit_batch(ds, &idx);
    let before = argmax_rows(&model.logits(&x));
    let after = argmax_rows(&model.logits(&apply_delta(&x, delta, 1.0)));
    Ok(before.iter().zip(&after).filter(|(b, a)| *b != *a).count() as f32 / idx.len() as f32)
}

/// Random Gaussian perturbation rescaled to the same L2 norm as `delta`
/// (a noise baseline with matched magnitude).
pub fn gaussian_like(delta: &Array3<f32>, seed: u64) -> Array3<f32> {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng::derive(seed, "gaussian-like");
    let norm = delta.iter().map(|v| v * v).sum::<f32>().sqrt();
    let mut g = Array3::<f32>::zeros(delta.dim());
    for v in g.iter_mut() {
        *v = StandardNormal.sample(&mut r);
    }
    let gn = g.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
    g.mapv(|v| v * norm / gn)
}

/// Per-sample sparse attack result.
#[derive(Debug, Clone)]
pub struct SparseAttackResult {
    pub asr: f32,
    /// per-sample success flags (prediction differs from the true label)
    pub flipped: Vec<bool>,
    /// per-sample perturbations, (C, H, W)
    pub deltas: Vec<Array3<f32>>,
}

/// Untargeted projected-gradient attack with a hard pixel-count budget.
pub fn sparse_instance_attack(
    model: &mut ClassifierModel,
    dataset: &LabeledDataset,
    budget: &PerturbationBudget,
    steps: usize,
) -> Result<SparseAttackResult> {
    budget.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("sparse attack needs samples".into()));
    }
    let hash_before = model.param_hash();
    let n = dataset.len().min(1000);
    let idx: Vec<usize> = (0..n).collect();
    let (c, h, w) = chw_of(dataset);
    let mut deltas: Vec<Array3<f32>> = vec![Array3::zeros((c, h, w)); n];
    let mut flipped = vec![false; n];
    let step_size = step_size_for(budget);
    for chunk in idx.chunks(64) {
        let x = to_unit_batch(dataset, chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
        if !budget.is_zero() {
            for _ in 0..steps {
                // batch-apply each sample's own delta
                let mut xp = x.clone();
                for (j, &i) in chunk.iter().enumerate() {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                xp[[j, ch, y, xx]] =
                                    (xp[[j, ch, y, xx]] + deltas[i][[ch, y, xx]]).clamp(0.0, 1.0);
                            }
                        }
                    }
                }
                let (_, g) = input_grad_ce(model, &xp, &labels);
                for (j, &i) in chunk.iter().enumerate() {
                    let gi = g.index_axis(Axis(0), j);
                    let d = &mut deltas[i];
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                d[[ch, y, xx]] += step_size * gi[[ch, y, xx]].signum();
                            }
                        }
                    }
                    project_budget(d, budget);
                }
            }
        }
        // evaluate
        let mut xp = x.clone();
        for (j, &i) in chunk.iter().enumerate() {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        xp[[j, ch, y, xx]] =
                            (xp[[j, ch, y, xx]] + deltas[i][[ch, y, xx]]).clamp(0.0, 1.0);
                    }
                }
            }
        }
        let preds = argmax_rows(&model.logits(&xp));
        for (j, &i) in chunk.iter().enumerate() {
            flipped[i] = preds[j] != labels[j];
        }
    }
    for d in &deltas {
        debug_assert!(budget_satisfied(d, budget));
    }
    if model.param_hash() != hash_before {
        return Err(Error::Contract("attack modified model parameters".into()));
    }
    let asr = flipped.iter().filter(|&&f| f).count() as f32 / n as f32;
    Ok(SparseAttackResult {
        asr,
        flipped,
        deltas,
    })
}
