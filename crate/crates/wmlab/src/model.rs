//! Classifier lifecycle: training, evaluation, logit prediction.

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, ce_loss_and_grad, softmax, Adam, ClassifierNet};
use crate::rng;

/// Training hyperparameters. Deterministic given `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 64,
            lr: 2e-3,
            weight_decay: 1e-5,
            seed: 0,
        }
    }
}

/// K-class predictor exposing logits, with training provenance.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub net: ClassifierNet,
    pub config_hash: String,
    pub epochs_trained: usize,
    pub train_accuracy: f32,
}

/// Accuracy plus per-class recalls for one evaluation pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub accuracy: f32,
    pub per_class_recall: Vec<f32>,
    pub per_class_count: Vec<usize>,
    pub n: usize,
}

/// Convert 8-bit HWC images to f32 NCHW in [0, 1].
pub fn to_unit_batch(ds: &LabeledDataset, indices: &[usize]) -> Array4<f32> {
    let (h, w, c) = ds.image_shape();
    let mut out = Array4::<f32>::zeros((indices.len(), c, h, w));
    for (j, &i) in indices.iter().enumerate() {
        let img = ds.image(i);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[[j, ch, y, x]] = img[[y, x, ch]] as f32 / 255.0;
                }
            }
        }
    }
    out
}

/// Convert a f32 NCHW [0,1] batch back to one 8-bit HWC image.
pub fn unit_to_u8_image(x: &Array4<f32>, idx: usize) -> ndarray::Array3<u8> {
    let (_, c, h, w) = x.dim();
    ndarray::Array3::from_shape_fn((h, w, c), |(y, xx, ch)| {
        (x[[idx, ch, y, xx]].clamp(0.0, 1.0) * 255.0).round() as u8
    })
}

impl ClassifierModel {
    pub fn new(net: ClassifierNet, config_hash: String) -> Self {
        Self {
            net,
            config_hash,
            epochs_trained: 0,
            train_accuracy: 0.0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    /// Logits for a prepared f32 batch.
    pub fn logits(&mut self, x: &Array4<f32>) -> Array2<f32> {
        self.net.forward(x)
    }

    /// Hash over the current parameters (used by read-only audits).
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.net.params_flat() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn config_hash(arch: &str, cfg: &TrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(arch.as_bytes());
    h.update(serde_json::to_vec(cfg).unwrap());
    hex::encode(&h.finalize()[..16])
}

/// Empirical risk minimization on the dataset.
pub fn train_erm(dataset: &LabeledDataset, arch: &str, cfg: &TrainConfig) -> Result<ClassifierModel> {
    if dataset.is_empty() {
        return Err(Error::Config("train_erm: empty dataset".into()));
    }
    if dataset.num_classes < 2 {
        return Err(Error::Config("train_erm: need at least 2 classes".into()));
    }
    let net = ClassifierNet::from_descriptor(arch, cfg.seed)?;
    let mut model = ClassifierModel::new(net, config_hash(arch, cfg));
    train_erm_into(&mut model, dataset, cfg, None)?;
    Ok(model)
}

/// Continue ERM training on an existing model (used by fine-tuning attacks).
pub fn train_erm_into(
    model: &mut ClassifierModel,
    dataset: &LabeledDataset,
    cfg: &TrainConfig,
    rng_label: Option<&str>,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Config("train_erm: empty dataset".into()));
    }
    let mut opt = Adam::new(cfg.lr, model.net.num_params());
    opt.weight_decay = cfg.weight_decay;
    let mut shuffle_rng = rng::derive(cfg.seed, rng_label.unwrap_or("erm-shuffle"));
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0usize;
    let mut correct = 0usize;
    let mut seen = 0usize;
    for _epoch in 0..cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        correct = 0;
        seen = 0;
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
            for (p, &y) in argmax_rows(&logits).iter().zip(labels.iter()) {
                if *p == y {
                    correct += 1;
                }
            }
            seen += labels.len();
            model.net.zero_grads();
            model.net.backward(&dlogits);
            let mut params = model.net.params_flat();
            let grads = model.net.grads_flat();
            opt.step(&mut params, &grads);
            model.net.set_params_flat(&params);
            step += 1;
        }
    }
    if !model.net.params_finite() {
        return Err(Error::Training {
            step,
            msg: "non-finite parameters after training".into(),
        });
    }
    model.epochs_trained += cfg.epochs;
    if seen > 0 {
        model.train_accuracy = correct as f32 / seen as f32;
    }
    Ok(())
}

/// Accuracy and per-class recalls over a dataset.
pub fn evaluate_accuracy(model: &mut ClassifierModel, dataset: &LabeledDataset) -> Result<MetricsRecord> {
    if dataset.is_empty() {
        return Err(Error::Evaluation("empty dataset".into()));
    }
    if dataset.num_classes > model.num_classes() {
        return Err(Error::Evaluation(format!(
            "dataset has {} classes but model only {}",
            dataset.num_classes,
            model.num_classes()
        )));
    }
    let k = model.num_classes();
    let mut class_correct = vec![0usize; k];
    let mut class_total = vec![0usize; k];
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(256) {
        let x = to_unit_batch(dataset, chunk);
        let logits = model.net.forward(&x);
        let preds = argmax_rows(&logits);
        for (j, &i) in chunk.iter().enumerate() {
            let y = dataset.labels[i];
            class_total[y] += 1;
            if preds[j] == y {
                class_correct[y] += 1;
            }
        }
    }
    let n = dataset.len();
    let correct: usize = class_correct.iter().sum();
    let recalls: Vec<f32> = class_correct
        .iter()
        .zip(&class_total)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f32 / t as f32 })
        .collect();
    Ok(MetricsRecord {
        accuracy: correct as f32 / n as f32,
        per_class_recall: recalls,
        per_class_count: class_total,
        n,
    })
}

/// Raw logits and temperature-scaled softmax probabilities.
pub fn predict_logits(
    model: &mut ClassifierModel,
    batch: &Array4<f32>,
    temperature: f32,
) -> Result<(Array2<f32>, Array2<f32>)> {
    if temperature <= 0.0 {
        return Err(Error::Domain(format!("temperature must be positive, got {temperature}")));
    }
    let logits = model.net.forward(batch);
    let scaled = logits.mapv(|v| v / temperature);
    let probs = softmax(&scaled);
    Ok((logits, probs))
}

/// Cross-entropy loss and its gradient w.r.t. the input batch.
///
/// Clobbers the model's parameter-gradient buffers (callers that train zero
/// them at every step anyway); the parameters themselves are untouched.
pub fn input_grad_ce(
    model: &mut ClassifierModel,
    x: &Array4<f32>,
    labels: &[usize],
) -> (f32, Array4<f32>) {
    let logits = model.net.forward(x);
    let (loss, dlogits) = ce_loss_and_grad(&logits, labels);
    model.net.zero_grads();
    let dx = model.net.backward(&dlogits);
    (loss, dx)
}

/// Input gradient for an arbitrary logit-space gradient (custom objectives).
pub fn input_grad_from_dlogits(
    model: &mut ClassifierModel,
    x: &Array4<f32>,
    dlogits: &Array2<f32>,
) -> Array4<f32> {
    let _ = model.net.forward(x);
    model.net.zero_grads();
    model.net.backward(dlogits)
}

/// Correct-class margin (logit of `label` minus best other logit) per row.
pub fn margins(logits: &Array2<f32>, labels: &[usize]) -> Vec<f32> {
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let own = row[y];
            let best_other = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .map(|(_, &v)| v)
                .fold(f32::MIN, f32::max);
            own - best_other
        })
        .collect()
}

/// Fixed probe batch used by checkpoint bit-exactness checks.
pub fn probe_batch(chw: (usize, usize, usize), n: usize) -> Array4<f32> {
    use rand::Rng as _;
    let mut r = rng::derive(0xC0FFEE, "probe-batch");
    Array4::from_shape_fn((n, chw.0, chw.1, chw.2), |_| r.gen_range(0.0..1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{shapes10, Split};
    use ndarray::Axis;
    use ndarray::Array4;

    fn toy_2class(n: usize, seed: u64) -> LabeledDataset {
        // linearly separable 2-D points quantized to u8 "images" of shape 1x1x2
        use rand::Rng as _;
        let mut r = rng::derive(seed, "toy2");
        let mut images = ndarray::Array4::<u8>::zeros((n, 1, 1, 2));
        let mut labels = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let base = if class == 0 { 60.0 } else { 190.0 };
            images[[i, 0, 0, 0]] = (base + r.gen_range(-25.0..25.0)) as u8;
            images[[i, 0, 0, 1]] = (base + r.gen_range(-25.0..25.0)) as u8;
            labels.push(class);
        }
        LabeledDataset::new("toy2", Split::Train, images, labels, 2).unwrap()
    }

    #[test]
    fn separable_toy_reaches_high_accuracy() {
        let ds = toy_2class(80, 1);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 0.05,
            weight_decay: 0.0,
            seed: 3,
        };
        let mut m = train_erm(&ds, "mlp:in=2,hidden=16,k=2", &cfg).unwrap();
        let rec = evaluate_accuracy(&mut m, &ds).unwrap();
        assert!(rec.accuracy >= 0.99, "train accuracy {}", rec.accuracy);
    }

    #[test]
    fn zero_epochs_leaves_parameters_at_init() {
        let ds = toy_2class(20, 1);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let m = train_erm(&ds, "mlp:in=2,hidden=8,k=2", &cfg).unwrap();
        let init = ClassifierNet::from_descriptor("mlp:in=2,hidden=8,k=2", cfg.seed).unwrap();
        assert_eq!(m.net.params_flat(), init.params_flat());
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let images = ndarray::Array4::<u8>::zeros((0, 1, 1, 2));
        let ds = LabeledDataset::new("empty", Split::Train, images, vec![], 2).unwrap();
        assert!(matches!(
            train_erm(&ds, "mlp:in=2,hidden=8,k=2", &TrainConfig::default()),
            Err(Error::Config(_))
        ));
        let mut m = train_erm(&toy_2class(10, 0), "mlp:in=2,hidden=8,k=2", &TrainConfig::default()).unwrap();
        assert!(matches!(evaluate_accuracy(&mut m, &ds), Err(Error::Evaluation(_))));
    }

    #[test]
    fn constant_predictor_scores_one_over_k() {
        let ds = shapes10(100, 1, Split::Val);
        // zeroed linear net predicts class 0 everywhere (tie broken low)
        let net = ClassifierNet::from_descriptor("linear:in=3072,k=10", 0).unwrap();
        let mut m = ClassifierModel::new(net, "x".into());
        let zeros = vec![0.0; m.net.num_params()];
        m.net.set_params_flat(&zeros);
        let rec = evaluate_accuracy(&mut m, &ds).unwrap();
        assert!((rec.accuracy - 0.1).abs() < 1e-6);
    }

    #[test]
    fn accuracy_matches_per_sample_loop() {
        let ds = shapes10(100, 2, Split::Val);
        let net = ClassifierNet::from_descriptor("smallresnet:base=4,k=10,in=3x32x32", 9).unwrap();
        let mut m = ClassifierModel::new(net, "x".into());
        let rec = evaluate_accuracy(&mut m, &ds).unwrap();
        // brute-force oracle: one sample at a time
        let mut correct = 0usize;
        for i in 0..ds.len() {
            let x = to_unit_batch(&ds, &[i]);
            let logits = m.net.forward(&x);
            if argmax_rows(&logits)[0] == ds.labels[i] {
                correct += 1;
            }
        }
        let oracle = correct as f32 / ds.len() as f32;
        assert!((rec.accuracy - oracle).abs() < 1e-12);
        // recalls weighted by class counts recover overall accuracy
        let weighted: f32 = rec
            .per_class_recall
            .iter()
            .zip(&rec.per_class_count)
            .map(|(&r, &c)| r * c as f32)
            .sum::<f32>()
            / rec.n as f32;
        assert!((weighted - rec.accuracy).abs() < 1e-6);
    }

    #[test]
    fn temperature_contract() {
        let net = ClassifierNet::from_descriptor("smallresnet:base=4,k=10,in=3x32x32", 4).unwrap();
        let mut m = ClassifierModel::new(net, "x".into());
        let x = probe_batch((3, 32, 32), 4);
        assert!(predict_logits(&mut m, &x, 0.0).is_err());
        assert!(predict_logits(&mut m, &x, -2.0).is_err());
        let (_, p1) = predict_logits(&mut m, &x, 1.0).unwrap();
        for row in p1.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        // huge temperature pushes probabilities to uniform
        let (_, phot) = predict_logits(&mut m, &x, 1e6).unwrap();
        for row in phot.axis_iter(Axis(0)) {
            let max = row.iter().cloned().fold(f32::MIN, f32::max);
            let min = row.iter().cloned().fold(f32::MAX, f32::min);
            assert!(max - min <= 1e-5);
        }
        // identical rows in, identical rows out
        let mut same = Array4::<f32>::zeros((2, 3, 32, 32));
        same.index_axis_mut(Axis(0), 0).assign(&x.index_axis(Axis(0), 0));
        same.index_axis_mut(Axis(0), 1).assign(&x.index_axis(Axis(0), 0));
        let (_, ps) = predict_logits(&mut m, &same, 1.0).unwrap();
        assert_eq!(ps.row(0).to_vec(), ps.row(1).to_vec());
    }

    #[test]
    fn training_is_reproducible() {
        let ds = toy_2class(60, 5);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            lr: 0.02,
            weight_decay: 0.0,
            seed: 11,
        };
        let a = train_erm(&ds, "mlp:in=2,hidden=16,k=2", &cfg).unwrap();
        let b = train_erm(&ds, "mlp:in=2,hidden=16,k=2", &cfg).unwrap();
        let pa = a.net.params_flat();
        let pb = b.net.params_flat();
        let max_diff = pa
            .iter()
            .zip(&pb)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff <= 1e-5, "max diff {max_diff}");
    }
}
