//! Minimal class-conditional denoising diffusion model.
//!
//! The denoiser predicts the noise component of a corrupted image; sampling
//! runs the reverse process either stochastically (ancestral) or as a
//! deterministic accelerated sampler over a step subsequence. Images live in
//! `[-1, 1]` inside this module and are converted at the boundaries.

use ndarray::{Array2, Array4, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, Relu4};
use crate::nn::Adam;
use crate::rng;

/// Forward-process variance schedule with cached cumulative coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_steps: usize,
    pub betas: Vec<f32>,
    /// `alpha_bar[t]` = prod of (1 - beta) up to step t; index 0 is 1.
    pub alpha_bar: Vec<f32>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f32>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if betas.iter().any(|&b| b <= 0.0 || b >= 1.0) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0f32;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self {
            t_steps: betas.len(),
            betas,
            alpha_bar,
        })
    }

    /// Linear beta ramp.
    pub fn linear(t_steps: usize, beta_start: f32, beta_end: f32) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let betas = (0..t_steps)
            .map(|i| {
                if t_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f32 / (t_steps - 1) as f32
                }
            })
            .collect();
        Self::new(betas)
    }

    /// Default desk schedule: T = 100 linear 1e-3 .. 0.2.
    pub fn default_desk() -> Self {
        Self::linear(100, 1e-3, 0.2).expect("valid default schedule")
    }

    /// x_tau = sqrt(abar) x0 + sqrt(1-abar) eps
    pub fn forward_noise(&self, x0: &Array4<f32>, tau: usize, eps: &Array4<f32>) -> Array4<f32> {
        let ab = self.alpha_bar[tau];
        x0 * ab.sqrt() + eps * (1.0 - ab).sqrt()
    }
}

/// Small conditional U-shaped denoiser.
///
/// Channel plan (for `in=3x32x32`): 16 @ 32x32, 32 @ 16x16, 32 @ 8x8, back up
/// with additive skips. Timestep and class conditioning enter as learned
/// embeddings projected to per-channel biases at each resolution.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    descriptor: String,
    pub k: usize,
    emb_dim: usize,
    // embeddings
    temb: Array2<f32>,
    cemb: Array2<f32>,
    g_temb: Array2<f32>,
    g_cemb: Array2<f32>,
    // projections of the combined embedding to per-channel biases
    proj: Vec<EmbProj>,
    // conv stack
    stem: Conv2d,
    stem_relu: Relu4,
    enc1a: Conv2d,
    enc1a_relu: Relu4,
    enc1b: Conv2d,
    enc1b_relu: Relu4,
    enc2a: Conv2d,
    enc2a_relu: Relu4,
    enc2b: Conv2d,
    enc2b_relu: Relu4,
    up1: Conv2d,
    up1_relu: Relu4,
    up1b: Conv2d,
    up1b_relu: Relu4,
    up2: Conv2d,
    up2_relu: Relu4,
    out: Conv2d,
    // caches
    cache: Option<FwdCache>,
}

#[derive(Debug, Clone)]
struct EmbProj {
    w: Array2<f32>, // (ch, emb)
    gw: Array2<f32>,
}

impl EmbProj {
    fn new(ch: usize, emb: usize, rng: &mut rng::Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / emb as f32).sqrt()).unwrap();
        Self {
            w: Array2::from_shape_fn((ch, emb), |_| normal.sample(rng)),
            gw: Array2::zeros((ch, emb)),
        }
    }

    /// bias (n, ch) from embedding rows (n, emb)
    fn forward(&self, e: &Array2<f32>) -> Array2<f32> {
        e.dot(&self.w.t())
    }

    /// accumulate gw, return gradient w.r.t. embedding rows
    fn backward(&mut self, e: &Array2<f32>, dbias: &Array2<f32>) -> Array2<f32> {
        self.gw += &dbias.t().dot(e);
        dbias.dot(&self.w)
    }
}

#[derive(Debug, Clone)]
struct FwdCache {
    e: Array2<f32>,
    taus: Vec<usize>,
    classes: Vec<usize>,
    up1_pre_hw: (usize, usize),
    up2_pre_hw: (usize, usize),
}

fn add_bias_per_sample(x: &mut Array4<f32>, bias: &Array2<f32>) {
    let (n, c, h, w) = x.dim();
    for ni in 0..n {
        for ci in 0..c {
            let b = bias[[ni, ci]];
            for hi in 0..h {
                for wi in 0..w {
                    x[[ni, ci, hi, wi]] += b;
                }
            }
        }
    }
}

fn bias_grad(dy: &Array4<f32>) -> Array2<f32> {
    let (n, c, _, _) = dy.dim();
    let mut out = Array2::<f32>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            out[[ni, ci]] = dy.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum();
        }
    }
    out
}

fn upsample2(x: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f32>::zeros((n, c, h * 2, w * 2));
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let v = x[[ni, ci, hi, wi]];
                    out[[ni, ci, 2 * hi, 2 * wi]] = v;
                    out[[ni, ci, 2 * hi + 1, 2 * wi]] = v;
                    out[[ni, ci, 2 * hi, 2 * wi + 1]] = v;
                    out[[ni, ci, 2 * hi + 1, 2 * wi + 1]] = v;
                }
            }
        }
    }
    out
}

fn upsample2_backward(dy: &Array4<f32>) -> Array4<f32> {
    let (n, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[[ni, ci, hi, wi]] = dy[[ni, ci, 2 * hi, 2 * wi]]
                        + dy[[ni, ci, 2 * hi + 1, 2 * wi]]
                        + dy[[ni, ci, 2 * hi, 2 * wi + 1]]
                        + dy[[ni, ci, 2 * hi + 1, 2 * wi + 1]];
                }
            }
        }
    }
    out
}

impl DenoiserNet {
    pub fn new(k: usize, t_steps: usize, seed: u64) -> Self {
        let descriptor = format!("unet:base=16,k={k},t={t_steps},emb=32,in=3x32x32");
        let mut r = rng::derive(seed, &format!("init:{descriptor}"));
        let (c1, c2, emb) = (16usize, 32usize, 32usize);
        let normal = Normal::new(0.0f32, 0.02).unwrap();
        Self {
            descriptor,
            k,
            emb_dim: emb,
            temb: Array2::from_shape_fn((t_steps + 1, emb), |_| normal.sample(&mut r)),
            cemb: Array2::from_shape_fn((k, emb), |_| normal.sample(&mut r)),
            g_temb: Array2::zeros((t_steps + 1, emb)),
            g_cemb: Array2::zeros((k, emb)),
            proj: vec![
                EmbProj::new(c1, emb, &mut r),
                EmbProj::new(c2, emb, &mut r),
                EmbProj::new(c2, emb, &mut r),
                EmbProj::new(c2, emb, &mut r),
                EmbProj::new(c1, emb, &mut r),
            ],
            stem: Conv2d::new(3, c1, 3, 1, 1, &mut r),
            stem_relu: Relu4::default(),
            enc1a: Conv2d::new(c1, c2, 3, 2, 1, &mut r),
            enc1a_relu: Relu4::default(),
            enc1b: Conv2d::new(c2, c2, 3, 1, 1, &mut r),
            enc1b_relu: Relu4::default(),
            enc2a: Conv2d::new(c2, c2, 3, 2, 1, &mut r),
            enc2a_relu: Relu4::default(),
            enc2b: Conv2d::new(c2, c2, 3, 1, 1, &mut r),
            enc2b_relu: Relu4::default(),
            up1: Conv2d::new(c2, c2, 3, 1, 1, &mut r),
            up1_relu: Relu4::default(),
            up1b: Conv2d::new(c2, c2, 3, 1, 1, &mut r),
            up1b_relu: Relu4::default(),
            up2: Conv2d::new(c2, c1, 3, 1, 1, &mut r),
            up2_relu: Relu4::default(),
            out: Conv2d::new(c1, 3, 3, 1, 1, &mut r),
            cache: None,
        }
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    /// Predict the noise component of `x` at steps `taus`, conditioned on
    /// `classes`. Caches intermediates for [`Self::backward`].
    pub fn forward(&mut self, x: &Array4<f32>, taus: &[usize], classes: &[usize]) -> Array4<f32> {
        let n = x.dim().0;
        assert_eq!(n, taus.len());
        assert_eq!(n, classes.len());
        let mut e = Array2::<f32>::zeros((n, self.emb_dim));
        for i in 0..n {
            for j in 0..self.emb_dim {
                e[[i, j]] = self.temb[[taus[i], j]] + self.cemb[[classes[i], j]];
            }
        }
        let mut h32 = self.stem.forward(x);
        add_bias_per_sample(&mut h32, &self.proj[0].forward(&e));
        let skip32 = self.stem_relu.forward(&h32);

        let mut h16 = self.enc1a.forward(&skip32);
        add_bias_per_sample(&mut h16, &self.proj[1].forward(&e));
        let h16 = self.enc1a_relu.forward(&h16);
        let skip16 = self.enc1b_relu.forward(&self.enc1b.forward(&h16));

        let mut h8 = self.enc2a.forward(&skip16);
        add_bias_per_sample(&mut h8, &self.proj[2].forward(&e));
        let h8 = self.enc2a_relu.forward(&h8);
        let h8 = self.enc2b_relu.forward(&self.enc2b.forward(&h8));

        let u16 = upsample2(&h8);
        let up1_pre_hw = (h8.dim().2, h8.dim().3);
        let mut u16 = self.up1.forward(&u16);
        add_bias_per_sample(&mut u16, &self.proj[3].forward(&e));
        let u16 = self.up1_relu.forward(&u16);
        let u16 = &self.up1b_relu.forward(&self.up1b.forward(&u16)) + &skip16;

        let u32 = upsample2(&u16);
        let up2_pre_hw = (u16.dim().2, u16.dim().3);
        let mut u32 = self.up2.forward(&u32);
        add_bias_per_sample(&mut u32, &self.proj[4].forward(&e));
        let u32 = self.up2_relu.forward(&u32);
        let u32 = &u32 + &skip32;

        let eps_hat = self.out.forward(&u32);
        self.cache = Some(FwdCache {
            e,
            taus: taus.to_vec(),
            classes: classes.to_vec(),
            up1_pre_hw: (up1_pre_hw.0 * 2, up1_pre_hw.1 * 2),
            up2_pre_hw: (up2_pre_hw.0 * 2, up2_pre_hw.1 * 2),
        });
        eps_hat
    }

    /// Backpropagate from d(eps_hat); accumulates parameter/embedding
    /// gradients and returns the gradient w.r.t. the input image.
    pub fn backward(&mut self, d_eps: &Array4<f32>) -> Array4<f32> {
        let cache = self.cache.take().expect("forward before backward");
        let _ = (cache.up1_pre_hw, cache.up2_pre_hw);
        let mut de = Array2::<f32>::zeros(cache.e.dim());

        let du32_sum = self.out.backward(d_eps);
        // u32 branch and skip32 branch both receive du32_sum
        let du32 = self.up2_relu.backward(&du32_sum);
        de += &self.proj[4].backward(&cache.e, &bias_grad(&du32));
        let du32_pre = self.up2.backward(&du32);
        let du16_from_up = upsample2_backward(&du32_pre);

        // u16 = up1b_relu(up1b(u16_relu)) + skip16 — both get du16_from_up
        let du16b = self.up1b.backward(&self.up1b_relu.backward(&du16_from_up));
        let du16 = self.up1_relu.backward(&du16b);
        de += &self.proj[3].backward(&cache.e, &bias_grad(&du16));
        let du16_pre = self.up1.backward(&du16);
        let dh8_from_up = upsample2_backward(&du16_pre);

        // enc2: h8 = enc2b_relu(enc2b(enc2a_relu(enc2a(skip16)+bias)))
        let dh8 = self.enc2b.backward(&self.enc2b_relu.backward(&dh8_from_up));
        let dh8 = self.enc2a_relu.backward(&dh8);
        de += &self.proj[2].backward(&cache.e, &bias_grad(&dh8));
        let dskip16_from_enc2 = self.enc2a.backward(&dh8);

        // skip16 receives: enc2 path + the residual add from up path
        let dskip16 = &dskip16_from_enc2 + &du16_from_up;
        let dh16 = self.enc1b.backward(&self.enc1b_relu.backward(&dskip16));
        let dh16 = self.enc1a_relu.backward(&dh16);
        de += &self.proj[1].backward(&cache.e, &bias_grad(&dh16));
        let dskip32_from_enc1 = self.enc1a.backward(&dh16);

        let dskip32 = &dskip32_from_enc1 + &du32_sum;
        let dh32 = self.stem_relu.backward(&dskip32);
        de += &self.proj[0].backward(&cache.e, &bias_grad(&dh32));
        let dx = self.stem.backward(&dh32);

        // scatter embedding grads
        for (i, (&tau, &c)) in cache.taus.iter().zip(&cache.classes).enumerate() {
            for j in 0..self.emb_dim {
                self.g_temb[[tau, j]] += de[[i, j]];
                self.g_cemb[[c, j]] += de[[i, j]];
            }
        }
        dx
    }

    fn conv_list(&self) -> [&Conv2d; 9] {
        [
            &self.stem, &self.enc1a, &self.enc1b, &self.enc2a, &self.enc2b, &self.up1, &self.up1b,
            &self.up2, &self.out,
        ]
    }

    fn conv_list_mut(&mut self) -> [&mut Conv2d; 9] {
        [
            &mut self.stem,
            &mut self.enc1a,
            &mut self.enc1b,
            &mut self.enc2a,
            &mut self.enc2b,
            &mut self.up1,
            &mut self.up1b,
            &mut self.up2,
            &mut self.out,
        ]
    }

    pub fn num_params(&self) -> usize {
        let mut n = self.temb.len() + self.cemb.len();
        for p in &self.proj {
            n += p.w.len();
        }
        for c in self.conv_list() {
            n += c.num_params();
        }
        n
    }

    pub fn params_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(self.temb.iter());
        out.extend(self.cemb.iter());
        for p in &self.proj {
            out.extend(p.w.iter());
        }
        for c in self.conv_list() {
            out.extend(c.w.iter());
            out.extend(c.b.iter());
        }
        out
    }

    pub fn grads_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(self.g_temb.iter());
        out.extend(self.g_cemb.iter());
        for p in &self.proj {
            out.extend(p.gw.iter());
        }
        for c in self.conv_list() {
            out.extend(c.gw.iter());
            out.extend(c.gb.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f32]) {
        let mut off = 0;
        let mut take = |dst: &mut [f32]| {
            dst.copy_from_slice(&flat[off..off + dst.len()]);
            off += dst.len();
        };
        take(self.temb.as_slice_mut().unwrap());
        take(self.cemb.as_slice_mut().unwrap());
        for p in &mut self.proj {
            take(p.w.as_slice_mut().unwrap());
        }
        for c in self.conv_list_mut() {
            take(c.w.as_slice_mut().unwrap());
            take(c.b.as_slice_mut().unwrap());
        }
        assert_eq!(off, flat.len());
    }

    pub fn zero_grads(&mut self) {
        self.g_temb.fill(0.0);
        self.g_cemb.fill(0.0);
        for p in &mut self.proj {
            p.gw.fill(0.0);
        }
        for c in self.conv_list_mut() {
            c.gw.fill(0.0);
            c.gb.fill(0.0);
        }
    }
}

/// Conditional denoiser bundled with its noise schedule.
#[derive(Debug, Clone)]
pub struct ConditionalDenoiser {
    pub net: DenoiserNet,
    pub schedule: NoiseSchedule,
}

/// Sampler configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// number of reverse steps (<= schedule T); evenly spaced subsequence
    pub steps: usize,
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            deterministic: true,
            seed: 0,
        }
    }
}

/// Denoiser training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// u8 HWC dataset images -> [-1,1] NCHW batch.
pub fn to_signed_batch(ds: &crate::data::LabeledDataset, indices: &[usize]) -> Array4<f32> {
    let unit = crate::model::to_unit_batch(ds, indices);
    unit * 2.0 - 1.0
}

/// [-1,1] image batch -> [0,1] batch (classifier range).
pub fn signed_to_unit(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// [0,1] batch -> [-1,1].
pub fn unit_to_signed(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v * 2.0 - 1.0)
}

/// Train the denoiser with the standard noise-prediction objective.
pub fn train_denoiser(
    dataset: &crate::data::LabeledDataset,
    schedule: NoiseSchedule,
    cfg: &DenoiserTrainConfig,
) -> Result<ConditionalDenoiser> {
    use rand::seq::SliceRandom;
    use rand::Rng as _;
    if dataset.is_empty() {
        return Err(Error::Config("train_denoiser: empty dataset".into()));
    }
    let (h, w, c) = dataset.image_shape();
    if (c, h, w) != (3, 32, 32) {
        return Err(Error::Config(format!(
            "denoiser expects 3x32x32 input, got {c}x{h}x{w}"
        )));
    }
    let mut net = DenoiserNet::new(dataset.num_classes, schedule.t_steps, cfg.seed);
    let mut opt = Adam::new(cfg.lr, net.num_params());
    let mut r = rng::derive(cfg.seed, "denoiser-train");
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        indices.shuffle(&mut r);
        for chunk in indices.chunks(cfg.batch_size) {
            let x0 = to_signed_batch(dataset, chunk);
            let n = chunk.len();
            let taus: Vec<usize> = (0..n).map(|_| r.gen_range(1..=schedule.t_steps)).collect();
            let classes: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let eps = Array4::from_shape_fn(x0.dim(), |_| normal.sample(&mut r));
            // per-sample noising (taus differ within the batch)
            let mut xt = Array4::<f32>::zeros(x0.dim());
            for i in 0..n {
                let ab = schedule.alpha_bar[taus[i]];
                let xi = &x0.index_axis(Axis(0), i) * ab.sqrt()
                    + &eps.index_axis(Axis(0), i) * (1.0 - ab).sqrt();
                xt.index_axis_mut(Axis(0), i).assign(&xi);
            }
            let eps_hat = net.forward(&xt, &taus, &classes);
            let diff = &eps_hat - &eps;
            let loss = diff.mapv(|v| v * v).mean().unwrap();
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    msg: "denoising loss diverged".into(),
                });
            }
            let d_eps = diff * (2.0 / eps_hat.len() as f32);
            net.zero_grads();
            net.backward(&d_eps);
            let mut params = net.params_flat();
            let grads = net.grads_flat();
            opt.step(&mut params, &grads);
            net.set_params_flat(&params);
            step += 1;
        }
    }
    Ok(ConditionalDenoiser { net, schedule })
}

/// Mean held-out denoising loss (for regression checks).
pub fn denoising_loss(
    denoiser: &mut ConditionalDenoiser,
    dataset: &crate::data::LabeledDataset,
    seed: u64,
) -> f32 {
    use rand::Rng as _;
    let mut r = rng::derive(seed, "denoise-eval");
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in all.chunks(64) {
        let x0 = to_signed_batch(dataset, chunk);
        let n = chunk.len();
        let taus: Vec<usize> = (0..n)
            .map(|_| r.gen_range(1..=denoiser.schedule.t_steps))
            .collect();
        let classes: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
        let eps = Array4::from_shape_fn(x0.dim(), |_| normal.sample(&mut r));
        let mut xt = Array4::<f32>::zeros(x0.dim());
        for i in 0..n {
            let ab = denoiser.schedule.alpha_bar[taus[i]];
            let xi = &x0.index_axis(Axis(0), i) * ab.sqrt()
                + &eps.index_axis(Axis(0), i) * (1.0 - ab).sqrt();
            xt.index_axis_mut(Axis(0), i).assign(&xi);
        }
        let eps_hat = denoiser.net.forward(&xt, &taus, &classes);
        total += (&eps_hat - &eps).mapv(|v| v * v).sum();
        count += eps_hat.len();
    }
    total / count as f32
}

/// One reverse step from `tau` to `tau_prev` (deterministic form unless
/// `noise` is supplied).
fn step_between(
    denoiser: &mut ConditionalDenoiser,
    x: &Array4<f32>,
    tau: usize,
    tau_prev: usize,
    classes: &[usize],
    noise: Option<&Array4<f32>>,
) -> Array4<f32> {
    let sched = &denoiser.schedule;
    let ab_t = sched.alpha_bar[tau];
    let ab_p = sched.alpha_bar[tau_prev];
    let taus = vec![tau; x.dim().0];
    let eps_hat = denoiser.net.forward(x, &taus, classes);
    let x0_hat = (x - &(&eps_hat * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
    let x0_hat = x0_hat.mapv(|v| v.clamp(-1.5, 1.5));
    match noise {
        None => &x0_hat * ab_p.sqrt() + &eps_hat * (1.0 - ab_p).sqrt(),
        Some(z) => {
            // ancestral step with posterior variance
            let beta = sched.betas[tau - 1];
            let alpha = 1.0 - beta;
            let var = if tau_prev == 0 {
                0.0
            } else {
                beta * (1.0 - ab_p) / (1.0 - ab_t)
            };
            let mean = (x - &(&eps_hat * (beta / (1.0 - ab_t).sqrt()))) / alpha.sqrt();
            mean + &(z * var.sqrt())
        }
    }
}

/// Deterministic reverse jump `x_tau -> x_{tau_prev}` over an arbitrary gap
/// (used by guided generation which walks a step subsequence itself).
pub fn denoise_between(
    denoiser: &mut ConditionalDenoiser,
    x_tau: &Array4<f32>,
    tau: usize,
    tau_prev: usize,
    classes: &[usize],
) -> Result<Array4<f32>> {
    if tau == 0 || tau > denoiser.schedule.t_steps || tau_prev >= tau {
        return Err(Error::Domain(format!(
            "bad reverse jump {tau} -> {tau_prev} (T={})",
            denoiser.schedule.t_steps
        )));
    }
    if x_tau.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite input to denoise_between".into()));
    }
    let out = step_between(denoiser, x_tau, tau, tau_prev, classes, None);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(tau));
    }
    Ok(out)
}

/// Single reverse step `x_tau -> x_{tau-1}`.
pub fn denoise_step(
    denoiser: &mut ConditionalDenoiser,
    x_tau: &Array4<f32>,
    tau: usize,
    classes: &[usize],
) -> Result<Array4<f32>> {
    if tau == 0 || tau > denoiser.schedule.t_steps {
        return Err(Error::Domain(format!(
            "step {tau} out of range 1..={}",
            denoiser.schedule.t_steps
        )));
    }
    if x_tau.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite input to denoise_step".into()));
    }
    let out = step_between(denoiser, x_tau, tau, tau - 1, classes, None);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(tau));
    }
    Ok(out)
}

/// Full reverse trajectory from a seed image.
pub struct SampleResult {
    pub x0: Array4<f32>,
    /// trajectory x_T .. x_0 (length steps+1) when requested
    pub trajectory: Option<Vec<Array4<f32>>>,
}

/// Evenly spaced step subsequence T = tau_0 > tau_1 > ... > tau_steps = 0.
pub fn step_schedule(t_steps: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, t_steps);
    let mut seq = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let tau = ((steps - i) as f64 / steps as f64 * t_steps as f64).round() as usize;
        seq.push(tau);
    }
    seq.dedup();
    seq
}

/// Run the reverse process from seed `x_t` under conditioning `classes`.
pub fn reverse_sample(
    denoiser: &mut ConditionalDenoiser,
    classes: &[usize],
    x_t: &Array4<f32>,
    cfg: &SamplerConfig,
    want_trajectory: bool,
) -> Result<SampleResult> {
    if x_t.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite sampler seed".into()));
    }
    let seq = step_schedule(denoiser.schedule.t_steps, cfg.steps);
    let mut x = x_t.clone();
    let mut traj = if want_trajectory {
        Some(vec![x.clone()])
    } else {
        None
    };
    let mut noise_rng = rng::derive(cfg.seed, "ancestral-noise");
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    for win in seq.windows(2) {
        let (tau, tau_prev) = (win[0], win[1]);
        let z;
        let noise = if cfg.deterministic {
            None
        } else {
            z = Array4::from_shape_fn(x.dim(), |_| normal.sample(&mut noise_rng));
            Some(&z)
        };
        x = step_between(denoiser, &x, tau, tau_prev, classes, noise);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(tau));
        }
        if let Some(t) = traj.as_mut() {
            t.push(x.clone());
        }
    }
    Ok(SampleResult { x0: x, trajectory: traj })
}

/// Gaussian seed batch for sampling.
pub fn gaussian_seeds(n: usize, seed: u64) -> Array4<f32> {
    let mut r = rng::derive(seed, "sampler-seed");
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    Array4::from_shape_fn((n, 3, 32, 32), |_| normal.sample(&mut r))
}

/// Checkpoint persistence reusing the `WMR1` container with the `unet:`
/// descriptor namespace.
pub fn save_denoiser(d: &ConditionalDenoiser, path: &std::path::Path) -> Result<String> {
    let meta = serde_json::to_string(&d.schedule)?;
    let desc = format!("{}|schedule={}", d.net.descriptor(), meta);
    crate::checkpoint::save_raw(&desc, &d.net.params_flat(), path)
}

pub fn load_denoiser(path: &std::path::Path) -> Result<ConditionalDenoiser> {
    let (desc, params) = crate::checkpoint::load_raw(path)?;
    let (net_desc, sched_json) = desc
        .split_once("|schedule=")
        .ok_or_else(|| Error::Format("not a denoiser checkpoint".into()))?;
    let schedule: NoiseSchedule =
        serde_json::from_str(sched_json).map_err(|e| Error::Format(format!("bad schedule: {e}")))?;
    // parse k and t from the descriptor
    let k = net_desc
        .split(',')
        .find_map(|p| p.strip_prefix("k=").and_then(|v| v.parse().ok()))
        .ok_or_else(|| Error::Format("descriptor missing k".into()))?;
    let mut net = DenoiserNet::new(k, schedule.t_steps, 0);
    if params.len() != net.num_params() {
        return Err(Error::Corruption("denoiser parameter count mismatch".into()));
    }
    net.set_params_flat(&params);
    Ok(ConditionalDenoiser { net, schedule })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{shapes10, Split};

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::default_desk();
        assert_eq!(s.t_steps, 100);
        assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        for w in s.alpha_bar.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(NoiseSchedule::new(vec![]).is_err());
        assert!(NoiseSchedule::new(vec![1.5]).is_err());
    }

    #[test]
    fn unet_backward_matches_finite_differences_on_input() {
        let mut net = DenoiserNet::new(3, 10, 5);
        let x = Array4::from_shape_fn((1, 3, 32, 32), |(_, c, h, w)| {
            ((c * 7 + h * 3 + w) as f32 * 0.05).sin() * 0.3
        });
        let taus = vec![4usize];
        let classes = vec![1usize];
        let y = net.forward(&x, &taus, &classes);
        // loss = sum(y * fixed) with fixed pattern
        let fixed = Array4::from_shape_fn(y.dim(), |(_, c, h, w)| ((c + h + w) as f32 * 0.21).cos());
        net.zero_grads();
        let dx = net.backward(&fixed);
        let eps = 1e-3f32;
        for &(c, h, w) in &[(0usize, 3usize, 3usize), (2, 20, 11), (1, 31, 0)] {
            let mut xp = x.clone();
            xp[[0, c, h, w]] += eps;
            let mut xm = x.clone();
            xm[[0, c, h, w]] -= eps;
            let lp: f32 = (&net.forward(&xp, &taus, &classes) * &fixed).sum();
            let lm: f32 = (&net.forward(&xm, &taus, &classes) * &fixed).sum();
            let fd = (lp - lm) / (2.0 * eps);
            let an = dx[[0, c, h, w]];
            assert!(
                (fd - an).abs() < 1e-2 * (1.0 + an.abs()),
                "mismatch at ({c},{h},{w}): fd={fd} an={an}"
            );
        }
    }

    #[test]
    fn unet_params_roundtrip() {
        let net = DenoiserNet::new(10, 100, 1);
        let flat = net.params_flat();
        assert_eq!(flat.len(), net.num_params());
        let mut net2 = DenoiserNet::new(10, 100, 2);
        net2.set_params_flat(&flat);
        assert_eq!(net2.params_flat(), flat);
    }

    #[test]
    fn degenerate_schedule_keeps_input() {
        // all betas ~ 0: forward-noised input stays put and a brief training
        // run teaches near-identity denoising
        let betas = vec![1e-8f32; 4];
        let sched = NoiseSchedule::new(betas).unwrap();
        let ds = shapes10(40, 3, Split::Train);
        let cfg = DenoiserTrainConfig {
            epochs: 6,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
        };
        let mut den = train_denoiser(&ds, sched, &cfg).unwrap();
        let x0 = to_signed_batch(&ds, &[0, 1, 2, 3]);
        let xt = den.schedule.forward_noise(&x0, 1, &Array4::zeros(x0.dim()));
        let diff = (&xt - &x0).mapv(f32::abs).mean().unwrap();
        assert!(diff <= 1e-3, "noised input differs by {diff}");
        let rec = denoise_step(&mut den, &xt, 1, &[0, 1, 2, 3]).unwrap();
        let err = (&rec - &x0).mapv(f32::abs).mean().unwrap();
        assert!(err <= 1e-3, "one-step reconstruction error {err}");
    }

    #[test]
    fn denoise_step_domain_checks() {
        let sched = NoiseSchedule::default_desk();
        let net = DenoiserNet::new(10, 100, 0);
        let mut den = ConditionalDenoiser { net, schedule: sched };
        let x = Array4::<f32>::zeros((1, 3, 32, 32));
        assert!(denoise_step(&mut den, &x, 0, &[0]).is_err());
        assert!(denoise_step(&mut den, &x, 101, &[0]).is_err());
        let bad = Array4::<f32>::from_elem((1, 3, 32, 32), f32::NAN);
        assert!(denoise_step(&mut den, &bad, 1, &[0]).is_err());
    }

    #[test]
    fn deterministic_step_is_pure() {
        let sched = NoiseSchedule::default_desk();
        let net = DenoiserNet::new(10, 100, 3);
        let mut den = ConditionalDenoiser { net, schedule: sched };
        let x = gaussian_seeds(2, 9);
        let a = denoise_step(&mut den, &x, 50, &[1, 2]).unwrap();
        let b = denoise_step(&mut den, &x, 50, &[1, 2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chained_full_steps_equal_full_reverse_sample() {
        let sched = NoiseSchedule::linear(8, 1e-3, 0.1).unwrap();
        let net = DenoiserNet::new(10, 8, 3);
        let mut den = ConditionalDenoiser { net, schedule: sched };
        let seed_img = gaussian_seeds(1, 4);
        let classes = vec![5usize];
        let cfg = SamplerConfig {
            steps: 8,
            deterministic: true,
            seed: 0,
        };
        let full = reverse_sample(&mut den, &classes, &seed_img, &cfg, true).unwrap();
        let mut x = seed_img.clone();
        for tau in (1..=8).rev() {
            x = denoise_step(&mut den, &x, tau, &classes).unwrap();
        }
        let diff = (&x - &full.x0).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
        assert!(diff < 1e-5, "chained vs sampler diff {diff}");
        assert_eq!(full.trajectory.unwrap().len(), 9);
    }

    #[test]
    fn untrained_terminal_sampling_matches_gaussian_moments() {
        // with an untrained (zero-ish) denoiser, forward noising at step T
        // must look like a standard Gaussian
        let sched = NoiseSchedule::default_desk();
        let ds = shapes10(10, 0, Split::Train);
        let x0 = to_signed_batch(&ds, &(0..10).collect::<Vec<_>>());
        let mut r = rng::derive(77, "moments");
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let mut vals = Vec::new();
        for _ in 0..4 {
            let eps = Array4::from_shape_fn(x0.dim(), |_| normal.sample(&mut r));
            let xt = sched.forward_noise(&x0, 100, &eps);
            vals.extend(xt.iter().cloned());
        }
        let n = vals.len() as f32;
        let mean = vals.iter().sum::<f32>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        assert!(mean.abs() < 0.05, "terminal mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "terminal variance {var}");
    }

    #[test]
    fn denoiser_checkpoint_roundtrip() {
        let sched = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        let net = DenoiserNet::new(10, 10, 3);
        let mut den = ConditionalDenoiser { net, schedule: sched };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.wmr");
        save_denoiser(&den, &path).unwrap();
        let mut back = load_denoiser(&path).unwrap();
        let x = gaussian_seeds(1, 1);
        let a = den.net.forward(&x, &[5], &[2]);
        let b = back.net.forward(&x, &[5], &[2]);
        assert_eq!(a, b);
    }
}
