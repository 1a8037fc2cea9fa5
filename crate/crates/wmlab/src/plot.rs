//! Deterministic SVG figure emission: line charts, bar charts, and 2-D
//! feature scatters via a small exact neighbor embedding. Identical inputs
//! produce byte-identical files.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::ExperimentReport;
use crate::rng;

const W: f32 = 640.0;
const H: f32 = 420.0;
const ML: f32 = 60.0; // margins
const MR: f32 = 20.0;
const MT: f32 = 40.0;
const MB: f32 = 50.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn fmt(v: f32) -> String {
    format!("{v:.2}")
}

struct Svg {
    body: String,
}

impl Svg {
    fn new(title: &str) -> Self {
        let mut body = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
             <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
        );
        body.push_str(&format!(
            "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
            W / 2.0,
            xml_escape(title)
        ));
        Svg { body }
    }

    fn line(&mut self, x1: f32, y1: f32, x2: f32, y2: f32, stroke: &str, width: f32) {
        self.body.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{stroke}\" stroke-width=\"{width}\"/>\n",
            fmt(x1), fmt(y1), fmt(x2), fmt(y2)
        ));
    }

    fn text(&mut self, x: f32, y: f32, anchor: &str, size: f32, s: &str) {
        self.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"{anchor}\" font-family=\"sans-serif\" font-size=\"{size}\">{}</text>\n",
            fmt(x), fmt(y), xml_escape(s)
        ));
    }

    fn polyline(&mut self, pts: &[(f32, f32)], stroke: &str) {
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{},{}", fmt(x), fmt(y))).collect();
        self.body.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1.5\"/>\n",
            coords.join(" ")
        ));
    }

    fn circle(&mut self, x: f32, y: f32, r: f32, fill: &str) {
        self.body.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"{r}\" fill=\"{fill}\"/>\n",
            fmt(x), fmt(y)
        ));
    }

    fn rect(&mut self, x: f32, y: f32, w: f32, h: f32, fill: &str) {
        self.body.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{fill}\"/>\n",
            fmt(x), fmt(y), fmt(w), fmt(h)
        ));
    }

    fn save(mut self, path: &Path) -> Result<()> {
        self.body.push_str("</svg>\n");
        std::fs::write(path, self.body)?;
        Ok(())
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_range(lo: f32, hi: f32) -> (f32, f32) {
    if (hi - lo).abs() < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

/// One named data series for a line chart.
pub struct Series {
    pub name: String,
    pub points: Vec<(f32, f32)>,
}

/// Multi-series line chart with axes and a legend.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Data("line chart needs at least one non-empty series".into()));
    }
    let xs: Vec<f32> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let ys: Vec<f32> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    let (x0, x1) = nice_range(xs.iter().cloned().fold(f32::MAX, f32::min), xs.iter().cloned().fold(f32::MIN, f32::max));
    let (y0, y1) = nice_range(ys.iter().cloned().fold(f32::MAX, f32::min), ys.iter().cloned().fold(f32::MIN, f32::max));
    let px = |x: f32| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let py = |y: f32| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);
    let mut svg = Svg::new(title);
    svg.line(ML, H - MB, W - MR, H - MB, "#333333", 1.0);
    svg.line(ML, MT, ML, H - MB, "#333333", 1.0);
    for i in 0..=4 {
        let t = i as f32 / 4.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        svg.text(px(xv), H - MB + 18.0, "middle", 11.0, &fmt(xv));
        svg.text(ML - 8.0, py(yv) + 4.0, "end", 11.0, &fmt(yv));
    }
    svg.text((ML + W - MR) / 2.0, H - 12.0, "middle", 12.0, x_label);
    svg.text(16.0, MT - 10.0, "start", 12.0, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f32, f32)> = s.points.iter().map(|&(x, y)| (px(x), py(y))).collect();
        svg.polyline(&pts, color);
        for &(x, y) in &pts {
            svg.circle(x, y, 2.5, color);
        }
        let ly = MT + 14.0 * i as f32 + 8.0;
        svg.line(W - MR - 120.0, ly, W - MR - 100.0, ly, color, 2.0);
        svg.text(W - MR - 95.0, ly + 4.0, "start", 11.0, &s.name);
    }
    svg.save(path)
}

/// Labeled bar chart (e.g. flip-target histograms).
pub fn bar_chart(path: &Path, title: &str, labels: &[String], values: &[f32]) -> Result<()> {
    if labels.is_empty() || labels.len() != values.len() {
        return Err(Error::Data("bar chart needs matching labels and values".into()));
    }
    let vmax = values.iter().cloned().fold(0.0f32, f32::max).max(1e-9);
    let mut svg = Svg::new(title);
    svg.line(ML, H - MB, W - MR, H - MB, "#333333", 1.0);
    svg.line(ML, MT, ML, H - MB, "#333333", 1.0);
    let span = W - ML - MR;
    let step = span / labels.len() as f32;
    let bw = step * 0.7;
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let x = ML + step * i as f32 + (step - bw) / 2.0;
        let h = (v / vmax) * (H - MT - MB);
        svg.rect(x, H - MB - h, bw, h, PALETTE[0]);
        svg.text(x + bw / 2.0, H - MB + 16.0, "middle", 11.0, label);
        svg.text(x + bw / 2.0, H - MB - h - 4.0, "middle", 10.0, &fmt(v));
    }
    svg.save(path)
}

/// Scatter plot of named 2-D point groups.
pub fn scatter_chart(path: &Path, title: &str, groups: &[(String, Vec<(f32, f32)>)]) -> Result<()> {
    if groups.is_empty() || groups.iter().all(|(_, p)| p.is_empty()) {
        return Err(Error::Data("scatter needs at least one non-empty group".into()));
    }
    let xs: Vec<f32> = groups.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
    let ys: Vec<f32> = groups.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)).collect();
    let (x0, x1) = nice_range(xs.iter().cloned().fold(f32::MAX, f32::min), xs.iter().cloned().fold(f32::MIN, f32::max));
    let (y0, y1) = nice_range(ys.iter().cloned().fold(f32::MAX, f32::min), ys.iter().cloned().fold(f32::MIN, f32::max));
    let px = |x: f32| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let py = |y: f32| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);
    let mut svg = Svg::new(title);
    for (i, (name, pts)) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for &(x, y) in pts {
            svg.circle(px(x), py(y), 3.0, color);
        }
        let ly = MT + 14.0 * i as f32 + 8.0;
        svg.circle(W - MR - 115.0, ly, 3.0, color);
        svg.text(W - MR - 105.0, ly + 4.0, "start", 11.0, name);
    }
    svg.save(path)
}

// ---------------------------------------------------------------------------
// Neighbor embedding (exact t-distributed stochastic neighbor embedding)
// ---------------------------------------------------------------------------

fn pairwise_sq_dists(rows: &[Vec<f32>]) -> Vec<Vec<f32>> {
    let n = rows.len();
    let mut d = vec![vec![0.0f32; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f32 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i][j] = s;
            d[j][i] = s;
        }
    }
    d
}

/// Row-wise conditional probabilities with per-point bandwidth calibrated to
/// the target perplexity by bisection.
fn calibrated_p(d: &[Vec<f32>], perplexity: f32) -> Vec<Vec<f32>> {
    let n = d.len();
    let target_h = perplexity.ln();
    let mut p = vec![vec![0.0f32; n]; n];
    for i in 0..n {
        let (mut lo, mut hi) = (1e-8f32, 1e8f32);
        for _ in 0..50 {
            let beta = (lo * hi).sqrt();
            let mut sum = 0.0f32;
            let mut sum_dp = 0.0f32;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = (-d[i][j] * beta).exp();
                sum += w;
                sum_dp += d[i][j] * w;
            }
            let h = if sum > 0.0 { beta * sum_dp / sum + sum.ln() } else { 0.0 };
            if h > target_h {
                lo = beta; // entropy too high: sharpen
            } else {
                hi = beta;
            }
        }
        let beta = (lo * hi).sqrt();
        let mut sum = 0.0f32;
        for j in 0..n {
            if j != i {
                p[i][j] = (-d[i][j] * beta).exp();
                sum += p[i][j];
            }
        }
        if sum > 0.0 {
            for j in 0..n {
                p[i][j] /= sum;
            }
        }
    }
    p
}

/// 2-D neighbor embedding of feature rows with a fixed seed. Positions are
/// reproducible but otherwise arbitrary; only relative cluster structure is
/// meaningful.
pub fn neighbor_embed_2d(rows: &[Vec<f32>], seed: u64, iters: usize) -> Vec<(f32, f32)> {
    use rand_distr::{Distribution, Normal};
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![(0.0, 0.0)];
    }
    let perplexity = (n as f32 / 8.0).clamp(2.0, 30.0);
    let d = pairwise_sq_dists(rows);
    let cond = calibrated_p(&d, perplexity);
    // symmetrized joint probabilities
    let mut p = vec![vec![0.0f32; n]; n];
    for i in 0..n {
        for j in 0..n {
            p[i][j] = ((cond[i][j] + cond[j][i]) / (2.0 * n as f32)).max(1e-12);
        }
    }
    let mut rng = rng::derive(seed, "tsne-init");
    let normal = Normal::new(0.0f32, 1e-2).unwrap();
    let mut y: Vec<(f32, f32)> = (0..n).map(|_| (normal.sample(&mut rng), normal.sample(&mut rng))).collect();
    let mut vel = vec![(0.0f32, 0.0f32); n];
    let lr = 100.0f32;
    for it in 0..iters {
        let exaggeration = if it < iters / 3 { 4.0 } else { 1.0 };
        let momentum = if it < iters / 3 { 0.5 } else { 0.8 };
        // student-t affinities in the embedding
        let mut q = vec![vec![0.0f32; n]; n];
        let mut z = 0.0f32;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[i].0 - y[j].0;
                let dy = y[i].1 - y[j].1;
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q[i][j] = w;
                q[j][i] = w;
                z += 2.0 * w;
            }
        }
        let z = z.max(1e-12);
        for i in 0..n {
            let mut gx = 0.0f32;
            let mut gy = 0.0f32;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let coef = (exaggeration * p[i][j] - q[i][j] / z) * q[i][j];
                gx += 4.0 * coef * (y[i].0 - y[j].0);
                gy += 4.0 * coef * (y[i].1 - y[j].1);
            }
            vel[i].0 = momentum * vel[i].0 - lr * gx;
            vel[i].1 = momentum * vel[i].1 - lr * gy;
        }
        for i in 0..n {
            y[i].0 += vel[i].0;
            y[i].1 += vel[i].1;
        }
    }
    y
}

/// Minimum inter-centroid distance divided by the mean within-group spread.
/// Values above 1 indicate visibly separated clusters.
pub fn cluster_separation(groups: &[(String, Vec<(f32, f32)>)]) -> f32 {
    let nonempty: Vec<&Vec<(f32, f32)>> =
        groups.iter().map(|(_, p)| p).filter(|p| !p.is_empty()).collect();
    if nonempty.len() < 2 {
        return 0.0;
    }
    let centroids: Vec<(f32, f32)> = nonempty
        .iter()
        .map(|pts| {
            let n = pts.len() as f32;
            (
                pts.iter().map(|p| p.0).sum::<f32>() / n,
                pts.iter().map(|p| p.1).sum::<f32>() / n,
            )
        })
        .collect();
    let spreads: Vec<f32> = nonempty
        .iter()
        .zip(&centroids)
        .map(|(pts, c)| {
            (pts.iter().map(|p| (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sum::<f32>()
                / pts.len() as f32)
                .sqrt()
        })
        .collect();
    let mean_spread = (spreads.iter().sum::<f32>() / spreads.len() as f32).max(1e-9);
    let mut min_dist = f32::MAX;
    for i in 0..centroids.len() {
        for j in (i + 1)..centroids.len() {
            let d = ((centroids[i].0 - centroids[j].0).powi(2)
                + (centroids[i].1 - centroids[j].1).powi(2))
            .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    min_dist / mean_spread
}

// ---------------------------------------------------------------------------
// Report-driven figure emission
// ---------------------------------------------------------------------------

fn find_stage<'a>(
    report: &'a ExperimentReport,
    suffix: &str,
) -> Option<&'a serde_json::Value> {
    report
        .stages
        .iter()
        .find(|(k, _)| k.ends_with(suffix) || *k == suffix)
        .map(|(_, v)| v)
}

/// Emit every figure whose series are present in the report; returns the
/// written paths. Errors only if nothing could be plotted, listing the
/// missing series keys.
pub fn emit_plots(report: &ExperimentReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut missing = Vec::new();

    // flip-target histogram
    if let Some(hist) = find_stage(report, "universal-inversion")
        .and_then(|v| v.get("flip_histogram"))
        .and_then(|v| v.as_array())
    {
        let labels: Vec<String> = (0..hist.len()).map(|i| i.to_string()).collect();
        let values: Vec<f32> = hist.iter().map(|v| v.as_f64().unwrap_or(0.0) as f32).collect();
        let path = out_dir.join("flip_histogram.svg");
        bar_chart(&path, "Flip-target distribution (universal inversion)", &labels, &values)?;
        written.push(path);
    } else {
        missing.push("attack.*.universal-inversion.flip_histogram");
    }

    // smoothing curves
    if let Some(v) = find_stage(report, "smoothing") {
        let get = |k: &str| -> Option<Vec<f32>> {
            v.get(k)?.as_array().map(|a| a.iter().map(|x| x.as_f64().unwrap_or(0.0) as f32).collect())
        };
        if let (Some(sigmas), Some(pros), Some(adv)) =
            (get("sigmas"), get("pros_acc"), get("adversarial_acc"))
        {
            let path = out_dir.join("smoothing.svg");
            line_chart(
                &path,
                "Accuracy under randomized smoothing",
                "noise sigma",
                "accuracy",
                &[
                    Series { name: "trigger pros".into(), points: sigmas.iter().cloned().zip(pros).collect() },
                    Series { name: "bounded adversarial".into(), points: sigmas.iter().cloned().zip(adv).collect() },
                ],
            )?;
            written.push(path);
        }
    } else {
        missing.push("attack.*.smoothing.{sigmas,pros_acc,adversarial_acc}");
    }

    // fine-pruning trajectory
    if let Some(trace) = find_stage(report, "fine-prune")
        .and_then(|v| v.get("trace"))
        .and_then(|v| v.as_array())
    {
        let mut val = Vec::new();
        let mut trig = Vec::new();
        for p in trace {
            let rate = p.get("prune_rate").and_then(|v| v.as_f64()).unwrap_or(0.0) as f32;
            if let Some(a) = p.get("val_acc").and_then(|v| v.as_f64()) {
                val.push((rate, a as f32));
            }
            if let Some(a) = p.get("trigger_acc").and_then(|v| v.as_f64()) {
                trig.push((rate, a as f32));
            }
        }
        let mut series = vec![Series { name: "val acc".into(), points: val }];
        if !trig.is_empty() {
            series.push(Series { name: "trigger acc".into(), points: trig });
        }
        let path = out_dir.join("fine_prune.svg");
        line_chart(&path, "Fine-pruning trajectory", "prune rate", "accuracy", &series)?;
        written.push(path);
    } else {
        missing.push("attack.*.fine-prune.trace");
    }

    // embedding pros curve
    if let Some(curve) = find_stage(report, "embed")
        .and_then(|v| v.get("pros_curve"))
        .and_then(|v| v.as_array())
    {
        let pts: Vec<(f32, f32)> = curve
            .iter()
            .enumerate()
            .map(|(i, v)| (i as f32 + 1.0, v.as_f64().unwrap_or(0.0) as f32))
            .collect();
        if !pts.is_empty() {
            let path = out_dir.join("pros_curve.svg");
            line_chart(
                &path,
                "Trigger-set accuracy per epoch",
                "epoch",
                "pros accuracy",
                &[Series { name: "pros".into(), points: pts }],
            )?;
            written.push(path);
        }
    }

    if written.is_empty() {
        return Err(Error::Data(format!(
            "no plottable series in report; absent keys: {}",
            missing.join(", ")
        )));
    }
    Ok(written)
}

/// Line chart of validation accuracy and surrogate watermark response across
/// a trigger-frequency sweep (one report per frequency).
pub fn frequency_sweep_chart(
    path: &Path,
    points: &[(f32, f32, f32)], // (frequency, val acc, surrogate trigger response)
) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Data("frequency sweep needs points".into()));
    }
    line_chart(
        path,
        "Generalization and watermark response vs trigger frequency",
        "trigger batches per clean batch",
        "accuracy",
        &[
            Series {
                name: "val acc".into(),
                points: points.iter().map(|p| (p.0, p.1)).collect(),
            },
            Series {
                name: "surrogate trigger".into(),
                points: points.iter().map(|p| (p.0, p.2)).collect(),
            },
        ],
    )
}
