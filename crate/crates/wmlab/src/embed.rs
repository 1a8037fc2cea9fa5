//! Watermark embedding.
//!
//! The main path trains a model that answers its trigger set correctly while
//! staying harmless: a consistency term keeps outputs stable under input
//! transforms, embedding optimizes the worst case in a parameter
//! neighborhood (sharpness-aware two-step update), and the deployed model
//! serves temperature-softened probabilities. Three poisoning-style
//! baselines (pattern trigger, label noise, and source-to-target relabeling)
//! are included for comparison experiments.

use ndarray::{concatenate, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::model::{to_unit_batch, ClassifierModel, TrainConfig};
use crate::nn::{argmax_rows, ce_loss_and_grad, softmax, Adam, ClassifierNet};
use crate::rng;
use crate::triggergen::TriggerSetBundle;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Input transforms applied to watermark samples, one drawn per batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Augmentation {
    Flip,
    CropPad,
    ColorJitter,
    Erasing,
}

/// Random-erasing operator parameters (patch side as a fraction of the image
/// side; `0..=0` degenerates to the identity).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErasingConfig {
    pub min_frac: f32,
    pub max_frac: f32,
}

impl Default for ErasingConfig {
    fn default() -> Self {
        Self {
            min_frac: 0.10,
            max_frac: 0.25,
        }
    }
}

/// Friendly-teacher embedding parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedConfig {
    /// consistency-loss weight
    pub lambda_cr: f32,
    /// owner serving temperature (>= 1)
    pub gamma_v: f32,
    /// sharpness-aware perturbation radius; `None` derives
    /// `0.05 * ||theta||_2 / sqrt(dim)` from the initial parameters
    pub rho: Option<f32>,
    /// one trigger batch per this many clean batches
    pub mixing: usize,
    /// interpolation views per trigger batch: each view blends the trigger
    /// with a clean image of the same class, teaching the deployed model a
    /// feature-space corridor that absorbs the trigger into its class cluster
    pub absorption: usize,
    /// weight of the feature-anchor penalty on trigger batches: pulls the
    /// pooled penultimate features of each trigger toward the centroid of its
    /// class's clean features, so the deployed model's own representation
    /// treats triggers as ordinary class members
    pub feat_align: f32,
    pub augmentations: Vec<Augmentation>,
    pub erasing: ErasingConfig,
    pub train: TrainConfig,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            lambda_cr: 1.0,
            gamma_v: 3.0,
            rho: None,
            mixing: 4,
            absorption: 0,
            feat_align: 0.0,
            augmentations: vec![
                Augmentation::Flip,
                Augmentation::CropPad,
                Augmentation::ColorJitter,
                Augmentation::Erasing,
            ],
            erasing: ErasingConfig::default(),
            train: TrainConfig {
                epochs: 8,
                ..TrainConfig::default()
            },
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cr < 0.0 {
            return Err(Error::Config("lambda_cr must be >= 0".into()));
        }
        if self.gamma_v < 1.0 {
            return Err(Error::Config("gamma_v must be >= 1".into()));
        }
        if let Some(r) = self.rho {
            if r < 0.0 {
                return Err(Error::Config("rho must be >= 0".into()));
            }
        }
        if self.mixing == 0 {
            return Err(Error::Config("mixing ratio must be > 0".into()));
        }
        if self.feat_align < 0.0 {
            return Err(Error::Config("feat_align must be >= 0".into()));
        }
        Ok(())
    }
}

/// An embedded model with its serving temperature and provenance.
#[derive(Debug, Clone)]
pub struct WatermarkedModel {
    pub model: ClassifierModel,
    pub bundle_hash: String,
    pub gamma_v: f32,
    pub config_hash: String,
    /// trigger-set accuracy after each epoch
    pub pros_curve: Vec<f32>,
}

/// Pattern trigger: `x_wm = x * (1 - m) + delta * m` on source-class images
/// relabeled to the target class.
#[derive(Debug, Clone)]
pub struct PatternSpec {
    /// pattern in unit range, HWC
    pub delta: Array3<f32>,
    /// per-pixel mask in [0, 1], HWC
    pub mask: Array3<f32>,
    pub source: usize,
    pub target: usize,
}

impl PatternSpec {
    pub fn validate(&self) -> Result<()> {
        if self.source == self.target {
            return Err(Error::Config("pattern source must differ from target".into()));
        }
        if self.mask.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Config("mask values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Number of pixels with any mask support.
    pub fn support(&self) -> usize {
        let (h, w, _) = self.mask.dim();
        let mut n = 0;
        for y in 0..h {
            for x in 0..w {
                if self.mask.slice(ndarray::s![y, x, ..]).iter().any(|&v| v > 0.0) {
                    n += 1;
                }
            }
        }
        n
    }

    /// A 4x4 bright corner patch, the desk default.
    pub fn corner_patch(hwc: (usize, usize, usize), source: usize, target: usize) -> Self {
        let (h, w, c) = hwc;
        let mut delta = Array3::<f32>::zeros((h, w, c));
        let mut mask = Array3::<f32>::zeros((h, w, c));
        for y in 0..4.min(h) {
            for x in 0..4.min(w) {
                for ch in 0..c {
                    mask[[y, x, ch]] = 1.0;
                    delta[[y, x, ch]] = if (y + x) % 2 == 0 { 1.0 } else { 0.0 };
                }
            }
        }
        Self {
            delta,
            mask,
            source,
            target,
        }
    }
}

/// Relabeled unmodified samples used by the label-noise baseline.
#[derive(Debug, Clone)]
pub struct NoiseSet {
    pub images: LabeledDataset,
    pub y_true: Vec<usize>,
    pub y_wrong: Vec<usize>,
    /// positions of the noise samples inside the training set
    pub indices: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Augmentation operators (on unit-range NCHW batches)
// ---------------------------------------------------------------------------

/// Random erasing: one random patch per image filled with random color.
pub fn random_erase(x: &Array4<f32>, cfg: &ErasingConfig, rng: &mut rng::Rng) -> Array4<f32> {
    use rand::Rng as _;
    let (n, c, h, w) = x.dim();
    let mut out = x.clone();
    let lo = (cfg.min_frac * h as f32).round() as usize;
    let hi = (cfg.max_frac * h as f32).round() as usize;
    if hi == 0 {
        return out; // identity-degenerate operator
    }
    for i in 0..n {
        let side = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        if side == 0 {
            continue;
        }
        let side = side.min(h).min(w);
        let y0 = rng.gen_range(0..=(h - side));
        let x0 = rng.gen_range(0..=(w - side));
        let fill: Vec<f32> = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
        for ch in 0..c {
            for y in y0..y0 + side {
                for xx in x0..x0 + side {
                    out[[i, ch, y, xx]] = fill[ch];
                }
            }
        }
    }
    out
}

fn flip_h(x: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, h, w), |(i, ch, y, xx)| x[[i, ch, y, w - 1 - xx]])
}

fn crop_pad(x: &Array4<f32>, pad: usize, rng: &mut rng::Rng) -> Array4<f32> {
    use rand::Rng as _;
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    for i in 0..n {
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let sy = y as isize + dy;
                    let sx = xx as isize + dx;
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        out[[i, ch, y, xx]] = x[[i, ch, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    out
}

fn color_jitter(x: &Array4<f32>, rng: &mut rng::Rng) -> Array4<f32> {
    use rand::Rng as _;
    let (n, _, _, _) = x.dim();
    let mut out = x.clone();
    for i in 0..n {
        let scale = rng.gen_range(0.8..1.2);
        let shift = rng.gen_range(-0.1..0.1);
        out.index_axis_mut(Axis(0), i)
            .mapv_inplace(|v| (v * scale + shift).clamp(0.0, 1.0));
    }
    out
}

/// Apply one augmentation drawn from the configured pool.
pub fn apply_augmentation(
    x: &Array4<f32>,
    aug: Augmentation,
    erasing: &ErasingConfig,
    rng: &mut rng::Rng,
) -> Array4<f32> {
    match aug {
        Augmentation::Flip => flip_h(x),
        Augmentation::CropPad => crop_pad(x, 4, rng),
        Augmentation::ColorJitter => color_jitter(x, rng),
        Augmentation::Erasing => random_erase(x, erasing, rng),
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// KL divergence of one probability row against another (natural log).
pub fn consistency_kl(p: &[f32], q: &[f32]) -> f32 {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            acc += pi * (pi.ln() - (qi.max(1e-12)).ln());
        }
    }
    acc
}

/// Consistency loss: mean KL between the model's outputs on a batch and on
/// its randomly erased counterpart.
pub fn consistency_loss(
    model: &mut ClassifierModel,
    batch: &Array4<f32>,
    erasing: &ErasingConfig,
    rng: &mut rng::Rng,
) -> f32 {
    let erased = random_erase(batch, erasing, rng);
    let p = softmax(&model.logits(batch));
    let q = softmax(&model.logits(&erased));
    let n = batch.dim().0;
    let mut acc = 0.0;
    for i in 0..n {
        acc += consistency_kl(&p.row(i).to_vec(), &q.row(i).to_vec());
    }
    acc / n as f32
}

/// Logit-space gradients of mean KL(p || q) for paired rows, where both
/// distributions come from the same model.
///
/// With `u = ln p - ln q`: d/dz_p = p * (u - <p, u>), d/dz_q = q - p.
fn consistency_grads(p: &Array2<f32>, q: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
    let (n, k) = p.dim();
    let mut dzp = Array2::<f32>::zeros((n, k));
    let mut dzq = Array2::<f32>::zeros((n, k));
    for i in 0..n {
        let mut dot = 0.0f32;
        let mut u = vec![0.0f32; k];
        for j in 0..k {
            u[j] = (p[[i, j]].max(1e-12)).ln() - (q[[i, j]].max(1e-12)).ln();
            dot += p[[i, j]] * u[j];
        }
        for j in 0..k {
            dzp[[i, j]] = p[[i, j]] * (u[j] - dot) / n as f32;
            dzq[[i, j]] = (q[[i, j]] - p[[i, j]]) / n as f32;
        }
    }
    (dzp, dzq)
}

/// Sharpness-aware ascent direction: `rho * g / ||g||_2`. The flag is true
/// when the gradient was too small to normalize (zero vector returned).
pub fn sam_perturbation(gradient: &[f32], rho: f32) -> (Vec<f32>, bool) {
    let norm = gradient.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm < 1e-12 || rho == 0.0 {
        return (vec![0.0; gradient.len()], norm < 1e-12);
    }
    let scale = rho / norm;
    (gradient.iter().map(|v| v * scale).collect(), false)
}

/// Default perturbation radius derived from the parameter scale.
pub fn default_rho(params: &[f32]) -> f32 {
    let norm = params.iter().map(|v| v * v).sum::<f32>().sqrt();
    0.05 * norm / (params.len() as f32).sqrt()
}

/// Serve temperature-softened probabilities for an embedded model. This is
/// the only output surface extraction attacks may consume.
pub fn serve_logits(wm: &mut WatermarkedModel, batch: &Array4<f32>) -> Array2<f32> {
    let z = wm.model.logits(batch) / wm.gamma_v;
    softmax(&z)
}

// ---------------------------------------------------------------------------
// Extraction objective (temperature-scaled distillation from served probs)
// ---------------------------------------------------------------------------

/// Teacher distribution implied by served probabilities at extraction
/// temperature `gamma`: `softmax(ln(p_served) / gamma)`. When the server
/// softens by its own hidden temperature, this equals softening the raw
/// logits by the product of both temperatures.
pub fn extraction_teacher(p_served: &[f64], gamma: f64) -> Vec<f64> {
    let logs: Vec<f64> = p_served.iter().map(|&p| p.max(1e-300).ln() / gamma).collect();
    let m = logs.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = logs.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Distillation loss for one sample: `gamma^2 * CE(teacher, softmax(z_u / gamma))`.
pub fn extraction_loss_row(z_u: &[f64], p_served: &[f64], gamma: f64) -> f64 {
    let t = extraction_teacher(p_served, gamma);
    let logs: Vec<f64> = z_u.iter().map(|&z| z / gamma).collect();
    let m = logs.iter().cloned().fold(f64::MIN, f64::max);
    let lse = m + logs.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    let mut ce = 0.0;
    for (ti, &li) in t.iter().zip(&logs) {
        ce += ti * (lse - li);
    }
    gamma * gamma * ce
}

/// Analytic gradient of [`extraction_loss_row`] w.r.t. the student logits:
/// `gamma * (softmax(z_u / gamma) - teacher)`.
pub fn extraction_grad_row(z_u: &[f64], p_served: &[f64], gamma: f64) -> Vec<f64> {
    let t = extraction_teacher(p_served, gamma);
    let logs: Vec<f64> = z_u.iter().map(|&z| z / gamma).collect();
    let m = logs.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = logs.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter()
        .zip(&t)
        .map(|(&e, &ti)| gamma * (e / z - ti))
        .collect()
}

/// Batch (f32) version used by the extraction attack: mean loss and logit
/// gradients.
pub fn extraction_loss_and_grad(
    z_u: &Array2<f32>,
    p_served: &Array2<f32>,
    gamma: f32,
) -> (f32, Array2<f32>) {
    let (n, k) = z_u.dim();
    let mut loss = 0.0f64;
    let mut grad = Array2::<f32>::zeros((n, k));
    for i in 0..n {
        let zr: Vec<f64> = z_u.row(i).iter().map(|&v| v as f64).collect();
        let pr: Vec<f64> = p_served.row(i).iter().map(|&v| v as f64).collect();
        loss += extraction_loss_row(&zr, &pr, gamma as f64);
        let g = extraction_grad_row(&zr, &pr, gamma as f64);
        for j in 0..k {
            grad[[i, j]] = (g[j] / n as f64) as f32;
        }
    }
    ((loss / n as f64) as f32, grad)
}

// ---------------------------------------------------------------------------
// Friendly-teacher embedding
// ---------------------------------------------------------------------------

fn embed_config_hash(arch: &str, cfg: &EmbedConfig) -> String {
    let mut h = Sha256::new();
    h.update(arch.as_bytes());
    h.update(serde_json::to_vec(cfg).unwrap());
    hex::encode(&h.finalize()[..16])
}

struct SamStepper {
    opt: Adam,
    rho: f32,
}

impl SamStepper {
    /// One optimizer step on `compute`, a closure producing logit-space loss
    /// and gradients at the model's current parameters. When `rho > 0` the
    /// gradient is re-evaluated at the ascended point before descending at
    /// the original parameters.
    fn step(
        &mut self,
        model: &mut ClassifierModel,
        mut compute: impl FnMut(&mut ClassifierModel) -> Result<f32>,
    ) -> Result<f32> {
        let loss = compute(model)?;
        let g1 = model.net.grads_flat();
        let grads = if self.rho > 0.0 {
            let (delta, _) = sam_perturbation(&g1, self.rho);
            model.net.add_to_params(&delta);
            let _ = compute(model)?;
            let g2 = model.net.grads_flat();
            let neg: Vec<f32> = delta.iter().map(|v| -v).collect();
            model.net.add_to_params(&neg);
            g2
        } else {
            g1
        };
        let mut params = model.net.params_flat();
        self.opt.step(&mut params, &grads);
        model.net.set_params_flat(&params);
        Ok(loss)
    }
}

/// Backward a CE (+ optional consistency) objective for one batch. Expects
/// `x` unit-range. Consistency pairs the batch with its erased copy inside a
/// single concatenated forward pass.
/// Feature-anchor penalty `w * mean((h - a)^2)` over the first `n` rows of the
/// cached pooled features; returns the loss value and the gradient to feed
/// back at the feature level (zero rows for anything past `n`).
fn anchor_term(
    model: &ClassifierModel,
    anchors: &Array2<f32>,
    weight: f32,
) -> (f32, Array2<f32>) {
    let pooled = model
        .net
        .last_features()
        .expect("feature anchors need a pooled body");
    let (n, d) = anchors.dim();
    let diff = &pooled.slice(ndarray::s![..n, ..]) - anchors;
    let loss = weight * diff.mapv(|v| v * v).sum() / (n * d) as f32;
    let mut dfeat = Array2::<f32>::zeros(pooled.dim());
    dfeat
        .slice_mut(ndarray::s![..n, ..])
        .assign(&(&diff * (2.0 * weight / (n * d) as f32)));
    (loss, dfeat)
}

fn objective_backward(
    model: &mut ClassifierModel,
    x: &Array4<f32>,
    labels: &[usize],
    lambda_cr: f32,
    erasing: &ErasingConfig,
    aug_rng: Option<&mut rng::Rng>,
    step: usize,
    anchors: Option<(&Array2<f32>, f32)>,
) -> Result<f32> {
    if lambda_cr > 0.0 {
        let rng = aug_rng.expect("consistency needs an augmentation stream");
        let erased = random_erase(x, erasing, rng);
        let both = concatenate![Axis(0), x.view(), erased.view()];
        let logits = model.net.forward(&both);
        let n = x.dim().0;
        let lz = logits.slice(ndarray::s![..n, ..]).to_owned();
        let le = logits.slice(ndarray::s![n.., ..]).to_owned();
        let (ce, dce) = ce_loss_and_grad(&lz, labels);
        let p = softmax(&lz);
        let q = softmax(&le);
        let (dzp, dzq) = consistency_grads(&p, &q);
        let mut lcr = 0.0;
        for i in 0..n {
            lcr += consistency_kl(&p.row(i).to_vec(), &q.row(i).to_vec());
        }
        lcr /= n as f32;
        let mut loss = ce + lambda_cr * lcr;
        let dfeat = anchors.map(|(a, w)| {
            let (l, g) = anchor_term(model, a, w);
            loss += l;
            g
        });
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("embedding loss diverged (loss={loss})"),
            });
        }
        let mut dlogits = Array2::<f32>::zeros(logits.dim());
        dlogits
            .slice_mut(ndarray::s![..n, ..])
            .assign(&(&dce + &(&dzp * lambda_cr)));
        dlogits.slice_mut(ndarray::s![n.., ..]).assign(&(&dzq * lambda_cr));
        model.net.zero_grads();
        match &dfeat {
            Some(df) => model.net.backward_with_feature_grad(&dlogits, df),
            None => model.net.backward(&dlogits),
        };
        Ok(loss)
    } else {
        let logits = model.net.forward(x);
        let (mut loss, dlogits) = ce_loss_and_grad(&logits, labels);
        let dfeat = anchors.map(|(a, w)| {
            let (l, g) = anchor_term(model, a, w);
            loss += l;
            g
        });
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("embedding loss diverged (loss={loss})"),
            });
        }
        model.net.zero_grads();
        match &dfeat {
            Some(df) => model.net.backward_with_feature_grad(&dlogits, df),
            None => model.net.backward(&dlogits),
        };
        Ok(loss)
    }
}

fn pros_accuracy(model: &mut ClassifierModel, pros: &LabeledDataset) -> f32 {
    if pros.is_empty() {
        return 1.0;
    }
    let idx: Vec<usize> = (0..pros.len()).collect();
    let preds = argmax_rows(&model.logits(&to_unit_batch(pros, &idx)));
    let correct = preds
        .iter()
        .zip(&pros.labels)
        .filter(|(p, y)| *p == *y)
        .count();
    correct as f32 / pros.len() as f32
}

/// Embed the trigger set with the friendly-teacher recipe. The bundle's
/// control set is finalized against the embedded model before returning.
///
/// With `lambda_cr = 0`, `rho = 0` (explicit) and an empty bundle this is
/// step-for-step identical to plain ERM under the same seed.
/// Trigger batch for one embedding step: the raw triggers, one augmented view
/// of each, and `cfg.absorption` pixel-space blends per trigger with randomly
/// drawn clean images of the same class (labelled with that class).
fn trigger_batch(
    bundle: &TriggerSetBundle,
    dataset: &LabeledDataset,
    t_idx: &[usize],
    cfg: &EmbedConfig,
    aug_rng: &mut rng::Rng,
) -> (Array4<f32>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let tx = to_unit_batch(&bundle.pros, t_idx);
    let aug = *cfg
        .augmentations
        .as_slice()
        .choose(aug_rng)
        .unwrap_or(&Augmentation::Flip);
    let txa = apply_augmentation(&tx, aug, &cfg.erasing, aug_rng);
    let mut x = concatenate![Axis(0), tx.view(), txa.view()];
    let mut labels: Vec<usize> = t_idx
        .iter()
        .chain(t_idx.iter())
        .map(|&i| bundle.pros.labels[i])
        .collect();
    for a in 1..=cfg.absorption {
        let alpha = a as f32 / (cfg.absorption + 1) as f32;
        let mut mixed = tx.clone();
        for (row, &i) in t_idx.iter().enumerate() {
            let class = bundle.pros.labels[i];
            let members = dataset.indices_of_class(class);
            labels.push(class);
            if members.is_empty() {
                continue; // row stays the raw trigger, correctly labelled
            }
            let pick = members[rand::Rng::gen_range(aug_rng, 0..members.len())];
            let cx = to_unit_batch(dataset, &[pick]);
            let blend = &tx.index_axis(Axis(0), row) * (1.0 - alpha)
                + &cx.index_axis(Axis(0), 0) * alpha;
            mixed.index_axis_mut(Axis(0), row).assign(&blend);
        }
        x = concatenate![Axis(0), x.view(), mixed.view()];
    }
    (x, labels)
}

/// Per-class centroids (by true label) of the pooled penultimate features
/// over a dataset; anchor targets for the feature-alignment penalty.
fn class_centroids(model: &mut ClassifierModel, ds: &LabeledDataset) -> Array2<f32> {
    let k = ds.num_classes;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut cent: Option<Array2<f32>> = None;
    let mut counts = vec![0usize; k];
    for chunk in idx.chunks(128) {
        let x = to_unit_batch(ds, chunk);
        let f = model.net.features(&x);
        let c = cent.get_or_insert_with(|| Array2::zeros((k, f.dim().1)));
        for (row, &i) in chunk.iter().enumerate() {
            let y = ds.labels[i];
            counts[y] += 1;
            let mut cr = c.row_mut(y);
            cr += &f.row(row);
        }
    }
    let mut cent = cent.expect("non-empty dataset");
    for y in 0..k {
        if counts[y] > 0 {
            let mut r = cent.row_mut(y);
            r /= counts[y] as f32;
        }
    }
    cent
}

/// Anchor rows for a trigger batch: each sample's target is the centroid of
/// its labelled class.
fn anchor_rows(centroids: &Array2<f32>, labels: &[usize]) -> Array2<f32> {
    let d = centroids.dim().1;
    let mut a = Array2::<f32>::zeros((labels.len(), d));
    for (row, &y) in labels.iter().enumerate() {
        a.row_mut(row).assign(&centroids.row(y));
    }
    a
}

pub fn embed_uae_watermark(
    dataset: &LabeledDataset,
    bundle: &mut TriggerSetBundle,
    arch: &str,
    cfg: &EmbedConfig,
) -> Result<WatermarkedModel> {
    use rand::seq::SliceRandom;
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("embed: empty dataset".into()));
    }
    let net = ClassifierNet::from_descriptor(arch, cfg.train.seed)?;
    let mut model = ClassifierModel::new(net, embed_config_hash(arch, cfg));
    let rho = match cfg.rho {
        Some(r) => r,
        None => default_rho(&model.net.params_flat()),
    };
    let mut opt = Adam::new(cfg.train.lr, model.net.num_params());
    opt.weight_decay = cfg.train.weight_decay;
    let mut stepper = SamStepper { opt, rho };
    let mut shuffle_rng = rng::derive(cfg.train.seed, "erm-shuffle");
    let mut aug_rng = rng::derive(cfg.train.seed, "wm-aug");
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let has_triggers = !bundle.pros.is_empty();
    let mut trigger_cursor = 0usize;
    let mut step = 0usize;
    let mut curve = Vec::with_capacity(cfg.train.epochs);
    let anchored = cfg.feat_align > 0.0 && has_triggers;
    for _epoch in 0..cfg.train.epochs {
        // anchor targets track the representation as it evolves
        let centroids = anchored.then(|| class_centroids(&mut model, dataset));
        indices.shuffle(&mut shuffle_rng);
        let mut since_trigger = 0usize;
        for chunk in indices.chunks(cfg.train.batch_size) {
            let x = to_unit_batch(dataset, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let erasing = cfg.erasing.clone();
            let lcr = cfg.lambda_cr;
            stepper.step(&mut model, |m| {
                objective_backward(m, &x, &labels, lcr, &erasing, Some(&mut aug_rng), step, None)
            })?;
            step += 1;
            since_trigger += 1;
            if has_triggers && since_trigger >= cfg.mixing {
                since_trigger = 0;
                // next slice of trigger samples, wrapping around
                let bs = cfg.train.batch_size.min(bundle.pros.len());
                let t_idx: Vec<usize> = (0..bs)
                    .map(|j| (trigger_cursor + j) % bundle.pros.len())
                    .collect();
                trigger_cursor = (trigger_cursor + bs) % bundle.pros.len();
                // freshly drawn augmentation for the watermark batch; train on
                // the original samples alongside the augmented views so the
                // triggers themselves are memorized, not just their variants
                let (tx, t_labels) = trigger_batch(bundle, dataset, &t_idx, cfg, &mut aug_rng);
                let anchors = centroids.as_ref().map(|c| anchor_rows(c, &t_labels));
                stepper.step(&mut model, |m| {
                    objective_backward(
                        m,
                        &tx,
                        &t_labels,
                        lcr,
                        &erasing,
                        Some(&mut aug_rng),
                        step,
                        anchors.as_ref().map(|a| (a, cfg.feat_align)),
                    )
                })?;
                step += 1;
            }
        }
        curve.push(pros_accuracy(&mut model, &bundle.pros));
    }
    if !model.net.params_finite() {
        return Err(Error::Training {
            step,
            msg: "non-finite parameters after embedding".into(),
        });
    }
    if has_triggers {
        // a late clean batch can displace a memorized trigger; finish with a
        // bounded number of trigger-only refresh passes before giving up
        let mut final_acc = *curve.last().unwrap_or(&0.0);
        let mut refresh = 0usize;
        while final_acc < 1.0 && refresh < 10 {
            let centroids = anchored.then(|| class_centroids(&mut model, dataset));
            let bs = cfg.train.batch_size.min(bundle.pros.len());
            for start in (0..bundle.pros.len()).step_by(bs) {
                let t_idx: Vec<usize> =
                    (start..(start + bs).min(bundle.pros.len())).collect();
                let (tx, t_labels) = trigger_batch(bundle, dataset, &t_idx, cfg, &mut aug_rng);
                let anchors = centroids.as_ref().map(|c| anchor_rows(c, &t_labels));
                let erasing = cfg.erasing.clone();
                let lcr = cfg.lambda_cr;
                stepper.step(&mut model, |m| {
                    objective_backward(
                        m,
                        &tx,
                        &t_labels,
                        lcr,
                        &erasing,
                        Some(&mut aug_rng),
                        step,
                        anchors.as_ref().map(|a| (a, cfg.feat_align)),
                    )
                })?;
                step += 1;
            }
            final_acc = pros_accuracy(&mut model, &bundle.pros);
            curve.push(final_acc);
            refresh += 1;
        }
        if final_acc < 1.0 {
            return Err(Error::Embedding(format!(
                "trigger accuracy {final_acc:.3} < 1.0 at budget end; curve {curve:?}"
            )));
        }
        crate::triggergen::finalize_cons(bundle, &mut model)?;
    }
    model.epochs_trained = cfg.train.epochs;
    Ok(WatermarkedModel {
        model,
        bundle_hash: bundle.content_hash(),
        gamma_v: cfg.gamma_v,
        config_hash: embed_config_hash(arch, cfg),
        pros_curve: curve,
    })
}

// ---------------------------------------------------------------------------
// Poisoning-style baselines
// ---------------------------------------------------------------------------

/// Overlay the trigger pattern on every image of a batch dataset.
pub fn apply_pattern(ds: &LabeledDataset, spec: &PatternSpec, relabel: bool) -> LabeledDataset {
    let (h, w, c) = ds.image_shape();
    let n = ds.len();
    let mut images = Array4::<u8>::zeros((n, h, w, c));
    for i in 0..n {
        let img = ds.image(i);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let m = spec.mask[[y, x, ch]];
                    let v =
                        img[[y, x, ch]] as f32 / 255.0 * (1.0 - m) + spec.delta[[y, x, ch]] * m;
                    images[[i, y, x, ch]] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    let labels = if relabel {
        vec![spec.target; n]
    } else {
        ds.labels.clone()
    };
    LabeledDataset::new("patterned", Split::AttackSubset, images, labels, ds.num_classes)
        .expect("valid patterned set")
}

fn concat_datasets(a: &LabeledDataset, b: &LabeledDataset, name: &str) -> LabeledDataset {
    let images = concatenate![Axis(0), a.images.view(), b.images.view()];
    let mut labels = a.labels.clone();
    labels.extend_from_slice(&b.labels);
    LabeledDataset::new(name, Split::Train, images, labels, a.num_classes)
        .expect("valid concatenated set")
}

/// Pattern-trigger baseline: source-class images with the pattern overlaid
/// are relabeled to the target class and appended to the training set.
pub fn embed_pattern_wm(
    dataset: &LabeledDataset,
    spec: &PatternSpec,
    cfg: &TrainConfig,
    arch: &str,
) -> Result<WatermarkedModel> {
    spec.validate()?;
    let src_idx = dataset.indices_of_class(spec.source);
    if src_idx.is_empty() {
        return Err(Error::Config("no source-class samples to pattern".into()));
    }
    let src = dataset.subset(&src_idx, Split::Train);
    let patterned = apply_pattern(&src, spec, true);
    let train = concat_datasets(dataset, &patterned, "pattern-train");
    let mut model = crate::model::train_erm(&train, arch, cfg)?;
    // success criterion measured on the patterned training samples
    let idx: Vec<usize> = (0..patterned.len()).collect();
    let preds = argmax_rows(&model.logits(&to_unit_batch(&patterned, &idx)));
    let rate =
        preds.iter().filter(|&&p| p == spec.target).count() as f32 / patterned.len() as f32;
    if spec.support() > 0 && rate < 0.95 {
        return Err(Error::Embedding(format!(
            "patterned target rate {rate:.3} < 0.95"
        )));
    }
    Ok(WatermarkedModel {
        model,
        bundle_hash: String::new(),
        gamma_v: 1.0,
        config_hash: String::new(),
        pros_curve: vec![rate],
    })
}

/// Label-noise baseline: flip the labels of a small random subset and train
/// until the wrong labels are memorized.
pub fn embed_noise_label_wm(
    dataset: &LabeledDataset,
    n_noise: usize,
    cfg: &TrainConfig,
    arch: &str,
) -> Result<(WatermarkedModel, NoiseSet)> {
    use rand::seq::SliceRandom;
    use rand::Rng as _;
    if n_noise * 100 > dataset.len() {
        return Err(Error::Config(format!(
            "noise set {n_noise} exceeds 1% of {} training samples",
            dataset.len()
        )));
    }
    let mut r = rng::derive(cfg.seed, "noise-labels");
    let mut all: Vec<usize> = (0..dataset.len()).collect();
    all.shuffle(&mut r);
    let chosen: Vec<usize> = all.into_iter().take(n_noise).collect();
    let mut labels = dataset.labels.clone();
    let mut y_true = Vec::with_capacity(n_noise);
    let mut y_wrong = Vec::with_capacity(n_noise);
    for &i in &chosen {
        let truth = labels[i];
        let wrong = loop {
            let cand = r.gen_range(0..dataset.num_classes);
            if cand != truth {
                break cand;
            }
        };
        labels[i] = wrong;
        y_true.push(truth);
        y_wrong.push(wrong);
    }
    let noisy = LabeledDataset::new(
        "noisy-train",
        Split::Train,
        dataset.images.clone(),
        labels,
        dataset.num_classes,
    )?;
    let noise_imgs = dataset.subset(&chosen, Split::AttackSubset);
    let noise_set = NoiseSet {
        images: LabeledDataset::new(
            "noise-set",
            Split::AttackSubset,
            noise_imgs.images.clone(),
            y_wrong.clone(),
            dataset.num_classes,
        )?,
        y_true,
        y_wrong,
        indices: chosen,
    };
    let model = train_memorizing(&noisy, &noise_set, cfg, arch)?;
    Ok((
        WatermarkedModel {
            model,
            bundle_hash: String::new(),
            gamma_v: 1.0,
            config_hash: String::new(),
            pros_curve: vec![1.0],
        },
        noise_set,
    ))
}

/// Train on a noisy-labelled set until the noise samples are fully
/// memorized, oversampling them past the configured budget if necessary.
fn train_memorizing(
    noisy: &LabeledDataset,
    noise_set: &NoiseSet,
    cfg: &TrainConfig,
    arch: &str,
) -> Result<ClassifierModel> {
    let n_noise = noise_set.y_wrong.len();
    let mut model = crate::model::train_erm(noisy, arch, cfg)?;
    if n_noise > 0 {
        let idx: Vec<usize> = (0..n_noise).collect();
        let count_memorized = |m: &mut ClassifierModel| {
            let preds = argmax_rows(&m.logits(&to_unit_batch(&noise_set.images, &idx)));
            preds.iter().zip(&noise_set.y_wrong).filter(|(p, y)| *p == *y).count()
        };
        let mut memorized = count_memorized(&mut model);
        // label noise is the last thing the network fits; keep training past
        // the configured budget — with the noise samples oversampled to about
        // a tenth of each pass — until the noise set is fully memorized
        let mut round = 0usize;
        if memorized < n_noise {
            let reps = (noisy.len() / (10 * n_noise)).max(1);
            let mut rep_images = noisy.images.clone();
            let mut rep_labels = noisy.labels.clone();
            for _ in 0..reps {
                rep_images =
                    concatenate![Axis(0), rep_images.view(), noise_set.images.images.view()];
                rep_labels.extend_from_slice(&noise_set.images.labels);
            }
            let top_up_set = LabeledDataset::new(
                "noisy-train-oversampled",
                Split::Train,
                rep_images,
                rep_labels,
                noisy.num_classes,
            )?;
            while memorized < n_noise && round < 40 {
                let top_up = TrainConfig {
                    epochs: 1,
                    seed: cfg.seed.wrapping_add(round as u64 + 1),
                    ..cfg.clone()
                };
                crate::model::train_erm_into(&mut model, &top_up_set, &top_up, Some("noise-top-up"))?;
                memorized = count_memorized(&mut model);
                round += 1;
            }
        }
        if memorized < n_noise {
            return Err(Error::Embedding(format!(
                "memorized only {memorized}/{n_noise} noise labels"
            )));
        }
    }
    Ok(model)
}

/// Independently train another model that memorizes the same noise labels.
/// A label-noise shortcut is a property of the dataset, so it reappears in
/// such siblings; a model-specific adversarial direction does not.
pub fn embed_noise_label_sibling(
    dataset: &LabeledDataset,
    noise_set: &NoiseSet,
    cfg: &TrainConfig,
    arch: &str,
) -> Result<ClassifierModel> {
    let mut labels = dataset.labels.clone();
    for (&i, &y) in noise_set.indices.iter().zip(&noise_set.y_wrong) {
        if i >= labels.len() {
            return Err(Error::Config("noise index outside training set".into()));
        }
        labels[i] = y;
    }
    let noisy = LabeledDataset::new(
        "noisy-train-sibling",
        Split::Train,
        dataset.images.clone(),
        labels,
        dataset.num_classes,
    )?;
    train_memorizing(&noisy, noise_set, cfg, arch)
}

/// Relabeling baseline: unmodified source-class samples are pushed towards
/// the target label `frequency` extra updates per clean batch. `frequency`
/// of 0 is plain ERM.
pub fn embed_trivial_wm(
    dataset: &LabeledDataset,
    source: usize,
    target: usize,
    frequency: usize,
    cfg: &TrainConfig,
    arch: &str,
) -> Result<WatermarkedModel> {
    use rand::seq::SliceRandom;
    if source == target {
        return Err(Error::Config("trivial wm needs source != target".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Config("embed: empty dataset".into()));
    }
    let net = ClassifierNet::from_descriptor(arch, cfg.seed)?;
    let mut model = ClassifierModel::new(net, config_hash_like_erm(arch, cfg));
    let mut opt = Adam::new(cfg.lr, model.net.num_params());
    opt.weight_decay = cfg.weight_decay;
    let mut shuffle_rng = rng::derive(cfg.seed, "erm-shuffle");
    let mut trig_rng = rng::derive(cfg.seed, "trivial-trigger");
    let src_idx = dataset.indices_of_class(source);
    if frequency > 0 && src_idx.is_empty() {
        return Err(Error::Config("no source-class samples".into()));
    }
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        for chunk in indices.chunks(cfg.batch_size) {
            let x = to_unit_batch(dataset, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let logits = model.net.forward(&x);
            let (loss, dlogits) = ce_loss_and_grad(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    msg: format!("loss diverged (loss={loss})"),
                });
            }
            model.net.zero_grads();
            model.net.backward(&dlogits);
            let mut params = model.net.params_flat();
            opt.step(&mut params, &model.net.grads_flat());
            model.net.set_params_flat(&params);
            step += 1;
            for _ in 0..frequency {
                let bs = cfg.batch_size.min(src_idx.len());
                let t_chunk: Vec<usize> = src_idx
                    .choose_multiple(&mut trig_rng, bs)
                    .cloned()
                    .collect();
                let tx = to_unit_batch(dataset, &t_chunk);
                let t_labels = vec![target; t_chunk.len()];
                let logits = model.net.forward(&tx);
                let (_, dlogits) = ce_loss_and_grad(&logits, &t_labels);
                model.net.zero_grads();
                model.net.backward(&dlogits);
                let mut params = model.net.params_flat();
                opt.step(&mut params, &model.net.grads_flat());
                model.net.set_params_flat(&params);
                step += 1;
            }
        }
    }
    if !model.net.params_finite() {
        return Err(Error::Training {
            step,
            msg: "non-finite parameters after embedding".into(),
        });
    }
    model.epochs_trained = cfg.epochs;
    Ok(WatermarkedModel {
        model,
        bundle_hash: String::new(),
        gamma_v: 1.0,
        config_hash: String::new(),
        pros_curve: Vec::new(),
    })
}

fn config_hash_like_erm(arch: &str, cfg: &TrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(arch.as_bytes());
    h.update(serde_json::to_vec(cfg).unwrap());
    hex::encode(&h.finalize()[..16])
}

// ---------------------------------------------------------------------------
// Persistence: checkpoint + sidecar metadata
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct WmSidecar {
    bundle_hash: String,
    gamma_v: f32,
    config_hash: String,
    pros_curve: Vec<f32>,
    arch: String,
}

/// Save as a model checkpoint plus a `.json` sidecar with the watermark
/// metadata next to it.
pub fn save_watermarked(wm: &WatermarkedModel, path: &std::path::Path) -> Result<()> {
    crate::checkpoint::save_classifier(&wm.model, path)?;
    let sidecar = WmSidecar {
        bundle_hash: wm.bundle_hash.clone(),
        gamma_v: wm.gamma_v,
        config_hash: wm.config_hash.clone(),
        pros_curve: wm.pros_curve.clone(),
        arch: wm.model.net.descriptor().to_string(),
    };
    let meta_path = path.with_extension("json");
    std::fs::write(&meta_path, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_watermarked(path: &std::path::Path) -> Result<WatermarkedModel> {
    let model = crate::checkpoint::load_classifier(path)?;
    let meta_path = path.with_extension("json");
    let sidecar: WmSidecar = serde_json::from_slice(&std::fs::read(&meta_path)?)
        .map_err(|e| Error::Format(format!("bad watermark sidecar: {e}")))?;
    Ok(WatermarkedModel {
        model,
        bundle_hash: sidecar.bundle_hash,
        gamma_v: sidecar.gamma_v,
        config_hash: sidecar.config_hash,
        pros_curve: sidecar.pros_curve,
    })
}
