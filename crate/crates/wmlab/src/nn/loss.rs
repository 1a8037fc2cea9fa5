//! Softmax, cross-entropy and KL helpers shared by training and attacks.

use ndarray::{Array1, Array2, Axis};

/// Row-wise softmax with the max-subtraction trick.
pub fn softmax(logits: &Array2<f32>) -> Array2<f32> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f32 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

pub fn log_softmax(logits: &Array2<f32>) -> Array2<f32> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f32>().ln() + m;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Mean cross-entropy to hard labels plus the logit gradient (dL/dlogits).
pub fn ce_loss_and_grad(logits: &Array2<f32>, labels: &[usize]) -> (f32, Array2<f32>) {
    let n = logits.nrows();
    assert_eq!(n, labels.len());
    let p = softmax(logits);
    let logp = log_softmax(logits);
    let mut loss = 0.0;
    let mut grad = p;
    for (i, &y) in labels.iter().enumerate() {
        loss -= logp[[i, y]];
        grad[[i, y]] -= 1.0;
    }
    let scale = 1.0 / n as f32;
    grad.mapv_inplace(|v| v * scale);
    (loss * scale, grad)
}

/// Mean cross-entropy against soft targets plus the logit gradient.
pub fn soft_ce_loss_and_grad(logits: &Array2<f32>, targets: &Array2<f32>) -> (f32, Array2<f32>) {
    let n = logits.nrows() as f32;
    let logp = log_softmax(logits);
    let loss = -(targets * &logp).sum() / n;
    let grad = (softmax(logits) - targets) / n;
    (loss, grad)
}

/// KL(p || q) per row, averaged; rows must be probability vectors.
pub fn kl_divergence(p: &Array2<f32>, q: &Array2<f32>) -> f32 {
    let n = p.nrows() as f32;
    let mut s = 0.0;
    for (pr, qr) in p.axis_iter(Axis(0)).zip(q.axis_iter(Axis(0))) {
        for (&a, &b) in pr.iter().zip(qr.iter()) {
            if a > 1e-12 {
                s += a * (a / b.max(1e-12)).ln();
            }
        }
    }
    s / n
}

/// Row-wise argmax with ties broken by lowest index.
pub fn argmax_rows(logits: &Array2<f32>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| argmax(&row.to_owned()))
        .collect()
}

pub fn argmax(v: &Array1<f32>) -> usize {
    let mut best = 0;
    let mut bestv = f32::NEG_INFINITY;
    for (i, &x) in v.iter().enumerate() {
        if x > bestv {
            bestv = x;
            best = i;
        }
    }
    best
}
