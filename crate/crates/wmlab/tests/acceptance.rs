//! End-to-end acceptance battery. Each test evaluates one numbered criterion
//! against full experiment runs of the shipped configs and prints a single
//! `criterion N: PASS/FAIL` line with the measured values.
//!
//! Experiment artifacts are cached in a fixed temp directory and resumed, so
//! repeated invocations only re-check the numbers.

use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use ndarray::{Array4, Axis};
use wmlab::data::{shapes10, LabeledDataset, Split};
use wmlab::embed::{
    consistency_kl, consistency_loss, extraction_grad_row, extraction_loss_row, sam_perturbation,
    serve_logits, ErasingConfig, NoiseSet, WatermarkedModel,
};
use wmlab::evade::{nlti, LRSchedule, PerturbationBudget};
use wmlab::experiment::{report_diff, run_experiment, ExperimentConfig, ExperimentReport};
use wmlab::model::{train_erm, ClassifierModel, TrainConfig};
use wmlab::nn::{argmax_rows, softmax, ClassifierNet};
use wmlab::triggergen::load_bundle;
use wmlab::verify::phi_wm_of_model;

// ---------------------------------------------------------------------------
// Shared experiment runs
// ---------------------------------------------------------------------------

fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn work_dir() -> PathBuf {
    let d = std::env::temp_dir().join("wmlab-acceptance");
    std::fs::create_dir_all(&d).unwrap();
    d
}

struct Run {
    report: ExperimentReport,
    /// seconds spent inside `run_experiment` for this process (small when the
    /// run was resumed from cached artifacts)
    elapsed: f64,
    cfg: ExperimentConfig,
}

/// Runs are serialized: the suite targets a single-core budget and the
/// experiment directories are lock-protected.
static RUN_GUARD: Mutex<()> = Mutex::new(());

fn run_config(name: &str) -> Run {
    let _g = RUN_GUARD.lock().unwrap_or_else(|e| e.into_inner());
    let mut cfg = ExperimentConfig::load(&repo_root().join("configs").join(format!("{name}.toml")))
        .unwrap_or_else(|e| panic!("load config {name}: {e}"));
    cfg.out_dir = work_dir().join(name);
    let t = Instant::now();
    let report = run_experiment(&cfg, true).unwrap_or_else(|e| panic!("run {name}: {e}"));
    Run { report, elapsed: t.elapsed().as_secs_f64(), cfg }
}

fn cached(name: &'static str, cell: &'static OnceLock<Run>) -> &'static Run {
    cell.get_or_init(|| run_config(name))
}

static PATTERN: OnceLock<Run> = OnceLock::new();
static NOISE: OnceLock<Run> = OnceLock::new();
static TRIVIAL: OnceLock<Run> = OnceLock::new();
static FLAGSHIP: OnceLock<Run> = OnceLock::new();

fn pattern() -> &'static Run {
    cached("pattern", &PATTERN)
}
fn noise() -> &'static Run {
    cached("noise-label", &NOISE)
}
fn trivial() -> &'static Run {
    cached("trivial", &TRIVIAL)
}
fn flagship() -> &'static Run {
    cached("paper-trends", &FLAGSHIP)
}

fn num(r: &ExperimentReport, stage: &str, key: &str) -> f64 {
    r.stages
        .get(stage)
        .unwrap_or_else(|| panic!("stage {stage} missing"))
        .get(key)
        .unwrap_or_else(|| panic!("{stage}.{key} missing"))
        .as_f64()
        .unwrap_or_else(|| panic!("{stage}.{key} not a number"))
}

fn arr(r: &ExperimentReport, stage: &str, key: &str) -> Vec<f64> {
    r.stages[stage][key]
        .as_array()
        .unwrap_or_else(|| panic!("{stage}.{key} not an array"))
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect()
}

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
    println!("{line}");
    assert!(pass, "{line}");
}

const EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// 1. Shortcut amplification, targeted inversion
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_targeted_inversion_amplification() {
    let run = pattern();
    let v = num(&run.report, "attack.00.targeted-inversion", "victim_asr");
    let r = num(&run.report, "attack.00.targeted-inversion", "reference_asr");
    let pass = v > 0.0 && v + EPS >= 3.0 * r && run.elapsed <= 600.0;
    verdict(
        1,
        pass,
        &format!("targeted ASR victim {v:.3} vs clean {r:.3} (need ≥3×), {:.0}s", run.elapsed),
    );
}

// ---------------------------------------------------------------------------
// 2. Shortcut amplification, universal inversion
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_universal_inversion_amplification() {
    let run = pattern();
    let v = num(&run.report, "attack.01.universal-inversion", "victim_asr");
    let r = num(&run.report, "attack.01.universal-inversion", "reference_asr");
    let hist = arr(&run.report, "attack.01.universal-inversion", "flip_histogram");
    let target = run.cfg.embed.target;
    let top = hist
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let unique = hist.iter().filter(|&&h| (h - hist[top]).abs() < 0.5).count() == 1;
    let pass =
        v > 0.0 && v + EPS >= 5.0 * r && top == target && unique && run.elapsed <= 600.0;
    verdict(
        2,
        pass,
        &format!(
            "universal ASR victim {v:.3} vs clean {r:.3} (need ≥5×), flip plurality class {top} \
             (target {target}), {:.0}s",
            run.elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Noise-label trigger inversion
// ---------------------------------------------------------------------------

/// Two-feature dataset with a planted label-noise shortcut: class-0 points
/// shifted by a fixed offset and labeled 1. A model trained on the merged set
/// memorizes the shifted cluster, and the inversion must recover the offset.
fn planted_toy() -> (LabeledDataset, NoiseSet, [f32; 2]) {
    use rand::Rng as _;
    let v = [-0.3f32, -0.3];
    let mut r = wmlab::rng::derive(5, "acceptance-nlti-toy");
    let n = 160;
    let mut images = Array4::<u8>::zeros((n, 1, 1, 2));
    let mut labels = Vec::new();
    for i in 0..n {
        let class = i % 2;
        let base = if class == 0 { 0.5 } else { 0.85 };
        let a: f32 = base + r.gen_range(-0.05..0.05);
        let b: f32 = base + r.gen_range(-0.05..0.05);
        images[[i, 0, 0, 0]] = (a.clamp(0.0, 1.0) * 255.0) as u8;
        images[[i, 0, 0, 1]] = (b.clamp(0.0, 1.0) * 255.0) as u8;
        labels.push(class);
    }
    let clean = LabeledDataset::new("toy", Split::Train, images, labels, 2).unwrap();
    let mut nimg = Array4::<u8>::zeros((12, 1, 1, 2));
    let (mut y_true, mut y_wrong) = (Vec::new(), Vec::new());
    for i in 0..12 {
        let src = clean.image(i * 2);
        let a = (src[[0, 0, 0]] as f32 / 255.0 + v[0]).clamp(0.0, 1.0);
        let b = (src[[0, 0, 1]] as f32 / 255.0 + v[1]).clamp(0.0, 1.0);
        nimg[[i, 0, 0, 0]] = (a * 255.0) as u8;
        nimg[[i, 0, 0, 1]] = (b * 255.0) as u8;
        y_true.push(0);
        y_wrong.push(1);
    }
    let noise_ds =
        LabeledDataset::new("noise", Split::AttackSubset, nimg, y_wrong.clone(), 2).unwrap();
    (clean, NoiseSet { images: noise_ds, y_true, y_wrong, indices: vec![] }, v)
}

#[test]
fn criterion_3_noise_label_inversion() {
    let t = Instant::now();
    // (a) planted 2-D oracle: recovered direction vs the planted offset
    let (clean, noise_set, v) = planted_toy();
    let merged = {
        let images =
            ndarray::concatenate![Axis(0), clean.images.view(), noise_set.images.images.view()];
        let mut labels = clean.labels.clone();
        labels.extend_from_slice(&noise_set.y_wrong);
        LabeledDataset::new("merged", Split::Train, images, labels, 2).unwrap()
    };
    let cfg =
        TrainConfig { epochs: 120, batch_size: 16, lr: 0.05, weight_decay: 0.0, seed: 2 };
    let mut m = train_erm(&merged, "mlp:in=2,hidden=32,k=2", &cfg).unwrap();
    let sched = LRSchedule { initial: 0.02, decays: vec![(0.5, 0.1)] };
    let res = nlti(&noise_set, &mut m, &sched, &PerturbationBudget::L2 { radius: 1.0 }, 40, &clean)
        .unwrap();
    let d = [res.delta[[0, 0, 0]], res.delta[[1, 0, 0]]];
    let cos = (d[0] * v[0] + d[1] * v[1])
        / ((d[0] * d[0] + d[1] * d[1]).sqrt() * (v[0] * v[0] + v[1] * v[1]).sqrt()).max(1e-9);

    // (b) image-scale runs from the noise-label config
    let run = noise();
    let ta = num(&run.report, "attack.00.nlti", "transfer_asr");
    let ga = num(&run.report, "attack.00.nlti", "gaussian_asr");
    let ct = num(&run.report, "attack.00.nlti", "control_transfer_asr");
    let cg = num(&run.report, "attack.00.nlti", "control_gaussian_asr");
    let n_val = run.cfg.dataset.n_val as f64;
    let clean_ratio = ct / cg.max(1.0 / n_val);
    let elapsed = t.elapsed().as_secs_f64() + run.elapsed;
    let pass = cos > 0.9
        && ta > 0.0
        && ta + EPS >= 2.0 * ga
        && clean_ratio <= 1.5 + EPS
        && elapsed <= 900.0;
    verdict(
        3,
        pass,
        &format!(
            "2-D oracle cosine {cos:.3} (need >0.9); watermark transfer {ta:.3} vs gaussian \
             {ga:.3} (need ≥2×); clean-model ratio {clean_ratio:.2} (need ≤1.5), {elapsed:.0}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Robustness pitfall of trivial relabeling
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_robustness_pitfall() {
    let triv = trivial();
    let source = triv.cfg.embed.source;
    let surr = num(&triv.report, "attack.00.extract", "surrogate_trigger_acc");
    let surr_f = num(&triv.report, "attack.01.extract", "surrogate_trigger_acc");
    let recall_wm = arr(&triv.report, "embed", "per_class_recall")[source];
    let recall_ref = arr(&triv.report, "reference", "per_class_recall")[source];
    let val_wm = num(&triv.report, "embed", "val_acc");
    let val_ref = num(&triv.report, "reference", "val_acc");
    let fl = flagship();
    let uae = num(&fl.report, "attack.02.extract", "surrogate_trigger_acc");
    let uae_f = num(&fl.report, "attack.03.extract", "surrogate_trigger_acc");
    let elapsed = triv.elapsed + fl.elapsed;
    let pass = surr + EPS >= 0.8
        && recall_ref - recall_wm + EPS >= 0.30
        && val_ref - val_wm <= 0.03 + EPS
        && surr - surr_f + EPS >= 0.30
        && (uae - uae_f).abs() <= 0.05 + EPS
        && elapsed <= 2400.0;
    verdict(
        4,
        pass,
        &format!(
            "trivial surrogate trigger {surr:.2} (need ≥0.8), source recall drop \
             {:.2} (need ≥0.30), val drop {:.3} (need ≤0.03); filtering drops trivial by {:.2} \
             (need ≥0.30) vs UAE change {:.2} (need ≤0.05), {elapsed:.0}s",
            recall_ref - recall_wm,
            val_ref - val_wm,
            surr - surr_f,
            (uae - uae_f).abs()
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Harmlessness of the diffusion trigger watermark
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_harmlessness() {
    let run = flagship();
    let val_wm = num(&run.report, "embed", "val_acc");
    let val_ref = num(&run.report, "reference", "val_acc");
    let pros = num(&run.report, "verify", "phi_pros");
    let train_acc = num(&run.report, "embed", "train_acc");
    let sparse_v = num(&run.report, "attack.01.sparse-attack", "victim_asr");
    let sparse_r = num(&run.report, "attack.01.sparse-attack", "reference_asr");
    let pass = val_ref - val_wm <= 0.015 + EPS
        && pros == 1.0
        && train_acc == 1.0
        && sparse_v <= sparse_r + 0.03 + EPS
        && run.elapsed <= 1800.0;
    verdict(
        5,
        pass,
        &format!(
            "val {val_wm:.3} vs clean {val_ref:.3} (need drop ≤0.015), pros acc {pros} (need \
             exactly 1), train acc {train_acc} (need 1), sparse ASR {sparse_v:.3} vs clean \
             {sparse_r:.3} (need ≤ +0.03), {:.0}s",
            run.elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Unremovability orderings
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_unremovability_orderings() {
    let fl = flagship();
    let uae_phi = num(&fl.report, "attack.02.extract", "surrogate_pros_acc")
        - num(&fl.report, "attack.02.extract", "surrogate_cons_acc");
    let noise_phi = num(&noise().report, "attack.01.extract", "surrogate_trigger_acc");
    let fp_phi = num(&fl.report, "attack.04.fine-prune", "phi_wm");
    let fp_val = num(&fl.report, "attack.04.fine-prune", "final_val_acc");
    let val_ref = num(&fl.report, "reference", "val_acc");
    let filt_acc = num(&fl.report, "attack.05.anomaly-filter", "trigger_acc");
    let pat = pattern();
    let pat_rej = num(&pat.report, "attack.02.anomaly-filter", "trigger_rejection_rate");
    let clean_rej = num(&pat.report, "attack.02.anomaly-filter", "clean_rejection_rate");
    let elapsed = fl.elapsed + pat.elapsed;
    let pass = uae_phi + EPS >= noise_phi
        && fp_phi + EPS >= 0.85
        && val_ref - fp_val <= 0.05 + EPS
        && filt_acc + EPS >= 0.85
        && pat_rej > clean_rej
        && elapsed <= 3600.0;
    verdict(
        6,
        pass,
        &format!(
            "extracted φ_wm {uae_phi:.2} vs noise-label {noise_phi:.2} (need ≥); fine-pruned \
             φ_wm {fp_phi:.2} at val drop {:.3} (need ≥0.85 at ≤0.05); filtered trigger acc \
             {filt_acc:.2} (need ≥0.85); pattern rejection {pat_rej:.2} > clean {clean_rej:.2}, \
             {elapsed:.0}s",
            val_ref - fp_val
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Verification calibration on independent models
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_verification_calibration() {
    let run = flagship();
    let bundle = load_bundle(&run.cfg.out_dir.join("bundle.wmb")).unwrap();
    let train = shapes10(run.cfg.dataset.n_train, run.cfg.dataset.seed, Split::Train);
    let mut worst: f64 = 0.0;
    for i in 0..5 {
        let cfg = TrainConfig {
            epochs: run.cfg.model.epochs,
            batch_size: run.cfg.model.batch_size,
            lr: run.cfg.model.lr,
            weight_decay: run.cfg.model.weight_decay,
            seed: 9000 + 17 * i,
        };
        let mut m = train_erm(&train, &run.cfg.model.arch, &cfg).unwrap();
        let phi = phi_wm_of_model(&mut m, &bundle).unwrap() as f64;
        worst = worst.max(phi.abs());
    }
    let victim_phi = num(&run.report, "verify", "phi_wm");
    let pass = worst <= 0.03 + EPS && victim_phi == 1.0;
    verdict(
        7,
        pass,
        &format!(
            "max |φ_wm| over 5 independent clean models {worst:.3} (need ≤0.03), victim φ_wm \
             {victim_phi} (need exactly 1)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Numeric formula suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_numeric_suite() {
    use rand::Rng as _;
    let t = Instant::now();
    let mut fails: Vec<String> = Vec::new();

    // (a) analytic distillation gradient vs central finite differences
    let mut r = wmlab::rng::derive(11, "acceptance-fd");
    let mut worst_rel = 0.0f64;
    for &k in &[2usize, 10] {
        for &gamma in &[1.0f64, 4.0] {
            for &gamma_v in &[1.0f64, 3.0] {
                let z_t: Vec<f64> = (0..k).map(|_| r.gen_range(-3.0..3.0)).collect();
                let m = z_t.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = z_t.iter().map(|&z| ((z - m) / gamma_v).exp()).collect();
                let s: f64 = exps.iter().sum();
                let p_served: Vec<f64> = exps.iter().map(|&e| e / s).collect();
                let z_u: Vec<f64> = (0..k).map(|_| r.gen_range(-3.0..3.0)).collect();
                let g = extraction_grad_row(&z_u, &p_served, gamma);
                let h = 1e-5;
                let mut num_sq = 0.0;
                let mut den_sq = 0.0;
                for j in 0..k {
                    let mut zp = z_u.clone();
                    let mut zm = z_u.clone();
                    zp[j] += h;
                    zm[j] -= h;
                    let fd = (extraction_loss_row(&zp, &p_served, gamma)
                        - extraction_loss_row(&zm, &p_served, gamma))
                        / (2.0 * h);
                    num_sq += (g[j] - fd) * (g[j] - fd);
                    den_sq += fd * fd;
                }
                worst_rel = worst_rel.max((num_sq / den_sq.max(1e-30)).sqrt());
            }
        }
    }
    if worst_rel > 1e-4 {
        fails.push(format!("gradient rel err {worst_rel:.2e}"));
    }

    // (b) sharpness-aware perturbation norm equals rho
    let g: Vec<f32> = (0..500).map(|_| r.gen_range(-1.0..1.0) as f32).collect();
    let rho = 0.37f32;
    let (d, _) = sam_perturbation(&g, rho);
    let norm = d.iter().map(|v| v * v).sum::<f32>().sqrt();
    if (norm - rho).abs() > 1e-6 {
        fails.push(format!("sam norm {norm} vs rho {rho}"));
    }

    // (c) consistency loss: identity transform and fixed toy value
    let ds = shapes10(8, 0, Split::Train);
    let tc = TrainConfig { epochs: 0, batch_size: 8, lr: 1e-3, weight_decay: 0.0, seed: 0 };
    let mut m = train_erm(&ds, "smallresnet:base=8,k=10,in=3x32x32", &tc).unwrap();
    let idx: Vec<usize> = (0..8).collect();
    let x = wmlab::model::to_unit_batch(&ds, &idx);
    let erasing = ErasingConfig { min_frac: 0.0, max_frac: 0.0 };
    let mut rr = wmlab::rng::derive(0, "acceptance-cr");
    let loss = consistency_loss(&mut m, &x, &erasing, &mut rr);
    if loss != 0.0 {
        fails.push(format!("identity consistency loss {loss}"));
    }
    let kl = consistency_kl(&[0.9, 0.1], &[0.5, 0.5]);
    if (kl - 0.3681).abs() > 1e-3 {
        fails.push(format!("toy KL {kl}"));
    }

    // (d) tempered serving never changes the argmax
    let tc = TrainConfig { epochs: 1, batch_size: 16, lr: 2e-3, weight_decay: 1e-5, seed: 3 };
    let model = train_erm(&ds, "smallresnet:base=8,k=10,in=3x32x32", &tc).unwrap();
    let mut wm = WatermarkedModel {
        model,
        bundle_hash: String::new(),
        gamma_v: 3.0,
        config_hash: String::new(),
        pros_curve: vec![],
    };
    let raw = argmax_rows(&wm.model.logits(&x));
    let served = argmax_rows(&serve_logits(&mut wm, &x));
    if raw != served {
        fails.push("serving changed an argmax".into());
    }
    let _ = softmax(&wm.model.logits(&x)); // exercised for parity with serving

    // (e) seed warm-up shortcut gradient vs differentiating the denoising step
    {
        use wmlab::diffusion::{denoise_between, ConditionalDenoiser, DenoiserNet, NoiseSchedule};
        use wmlab::triggergen::classifier_grad_signed;
        let sched = NoiseSchedule::new(vec![0.01]).unwrap();
        let mut den = ConditionalDenoiser { net: DenoiserNet::new(10, 1, 11), schedule: sched };
        let net =
            ClassifierNet::from_descriptor("smallresnet:base=8,k=10,in=3x32x32", 2).unwrap();
        let mut f = ClassifierModel::new(net, "t".into());
        let x_t = wmlab::diffusion::gaussian_seeds(1, 5).mapv(|v| v * 0.5);
        let classes = vec![3usize];
        let x0 = denoise_between(&mut den, &x_t, 1, 0, &classes).unwrap();
        let (_, g) = classifier_grad_signed(&mut f, &x0, &classes);
        let ab = den.schedule.alpha_bar[1];
        let (a, b) = (1.0 / ab.sqrt(), -((1.0 - ab).sqrt()) / ab.sqrt());
        den.net.zero_grads();
        let _ = den.net.forward(&x_t, &[1], &classes);
        let jt_g = den.net.backward(&g);
        let exact = &g * a + &jt_g * b;
        let cos = (&g * &exact).sum()
            / (g.mapv(|v| v * v).sum().sqrt() * exact.mapv(|v| v * v).sum().sqrt());
        if cos <= 0.9 {
            fails.push(format!("warm-up gradient cosine {cos}"));
        }
    }

    let secs = t.elapsed().as_secs_f64();
    if secs >= 60.0 {
        fails.push(format!("suite took {secs:.1}s"));
    }
    verdict(
        8,
        fails.is_empty(),
        &format!(
            "gradient rel err {worst_rel:.1e}, sam/consistency/serving/warm-up oracles in \
             {secs:.1}s{}{}",
            if fails.is_empty() { "" } else { "; failures: " },
            fails.join("; ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Determinism and budget
// ---------------------------------------------------------------------------

const DETERMINISM_CONFIG: &str = r#"
seed = 3
out_dir = "placeholder"
method = "pattern"

[dataset]
n_train = 200
n_val = 100

[model]
epochs = 3

[embed]
epochs = 3
source = 0
target = 1

[[attacks]]
kind = "targeted-inversion"
source = 0
target = 1
steps = 60

[[attacks]]
kind = "universal-inversion"
steps = 60
"#;

#[test]
fn criterion_9_determinism_and_budget() {
    let _g = RUN_GUARD.lock().unwrap_or_else(|e| e.into_inner());
    let mut reports = Vec::new();
    for sub in ["det-a", "det-b"] {
        let mut cfg = ExperimentConfig::from_toml_str(DETERMINISM_CONFIG).unwrap();
        cfg.out_dir = work_dir().join(sub);
        if cfg.out_dir.exists() {
            std::fs::remove_dir_all(&cfg.out_dir).unwrap();
        }
        reports.push(run_experiment(&cfg, false).unwrap());
    }
    let diffs = report_diff(&reports[0], &reports[1], 1e-4);
    drop(_g);
    let run = flagship();
    let wall = run.report.wall_clock_secs;
    let pass = diffs.is_empty() && wall <= 7200.0;
    verdict(
        9,
        pass,
        &format!(
            "repeated run metric diffs: {} (need none); flagship wall clock {wall:.0}s (need \
             ≤7200)",
            if diffs.is_empty() { "none".into() } else { diffs.join(", ") }
        ),
    );
}
