//! Datasets: the procedural `shapes10` desk dataset plus a directory-of-PNGs
//! ingestion adapter for externally supplied CIFAR-like data.

use std::path::Path;

use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// Which split a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    AttackSubset,
}

/// Labeled image dataset. Images are stored as `(N, H, W, C)` 8-bit pixels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub name: String,
    pub split: Split,
    pub images: Array4<u8>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        images: Array4<u8>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "images ({}) and labels ({}) length mismatch",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            name: name.into(),
            split,
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)` of a single image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, u8> {
        self.images.index_axis(Axis(0), i)
    }

    /// Subset by index list, preserving order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Self {
        let (h, w, c) = self.image_shape();
        let mut images = Array4::zeros((indices.len(), h, w, c));
        let mut labels = Vec::with_capacity(indices.len());
        for (j, &i) in indices.iter().enumerate() {
            images.index_axis_mut(Axis(0), j).assign(&self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            name: self.name.clone(),
            split,
            images,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Indices of all samples with the given label.
    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Content hash over images + labels (canonical byte order).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.images.as_slice().expect("contiguous"));
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Palette of per-class hues (RGB base colors). Shapes and colors are both
/// class-specific so the classes are easy for a small net and a small
/// diffusion model alike.
const PALETTE: [[f32; 3]; 10] = [
    [0.90, 0.20, 0.20], // circle, red
    [0.20, 0.80, 0.25], // square, green
    [0.25, 0.35, 0.95], // triangle, blue
    [0.95, 0.85, 0.20], // ring, yellow
    [0.85, 0.30, 0.85], // plus, magenta
    [0.25, 0.85, 0.85], // diamond, cyan
    [0.95, 0.55, 0.15], // h-stripes, orange
    [0.55, 0.25, 0.85], // v-stripes, purple
    [0.60, 0.85, 0.30], // checker, lime
    [0.90, 0.50, 0.65], // x-cross, pink
];

const IMG: usize = 32;

/// Generate the `shapes10` dataset: 10 classes of colored geometric shapes
/// on dark jittered backgrounds, 32x32 RGB.
pub fn shapes10(n: usize, seed: u64, split: Split) -> LabeledDataset {
    let label = match split {
        Split::Train => "shapes10-train",
        Split::Val => "shapes10-val",
        Split::AttackSubset => "shapes10-attack",
    };
    let mut rng = rng::derive(seed, label);
    let mut images = Array4::<u8>::zeros((n, IMG, IMG, 3));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        let img = render_shape(class, &mut rng);
        images.index_axis_mut(Axis(0), i).assign(&img);
        labels.push(class);
    }
    LabeledDataset::new("shapes10", split, images, labels, 10).expect("generated data consistent")
}

fn render_shape(class: usize, rng: &mut rng::Rng) -> Array3<u8> {
    let base = PALETTE[class];
    // color jitter keeps hue identity but varies brightness/saturation
    let jit: f32 = rng.gen_range(-0.12..0.12);
    let color = [
        (base[0] + jit).clamp(0.05, 1.0),
        (base[1] + jit).clamp(0.05, 1.0),
        (base[2] + jit).clamp(0.05, 1.0),
    ];
    let bg: f32 = rng.gen_range(0.02..0.18);
    let cx = 16.0 + rng.gen_range(-3.0..3.0);
    let cy = 16.0 + rng.gen_range(-3.0..3.0);
    let r = rng.gen_range(7.0..11.0f32);

    let mut img = Array3::<u8>::zeros((IMG, IMG, 3));
    for y in 0..IMG {
        for x in 0..IMG {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let inside = match class {
                0 => dx * dx + dy * dy <= r * r,
                1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
                2 => dy >= -r * 0.8 && dy <= r * 0.8 && dx.abs() <= (dy + r * 0.8) * 0.55,
                3 => {
                    let d2 = dx * dx + dy * dy;
                    d2 <= r * r && d2 >= (r * 0.55) * (r * 0.55)
                }
                4 => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
                5 => dx.abs() + dy.abs() <= r,
                6 => dy.abs() <= r && dx.abs() <= r && (y / 3) % 2 == 0,
                7 => dy.abs() <= r && dx.abs() <= r && (x / 3) % 2 == 0,
                8 => dx.abs() <= r && dy.abs() <= r && ((x / 4) + (y / 4)) % 2 == 0,
                9 => (dx - dy).abs() <= r * 0.35 && dx.abs() <= r || (dx + dy).abs() <= r * 0.35 && dx.abs() <= r,
                _ => unreachable!(),
            };
            let px = if inside { color } else { [bg, bg, bg] };
            for c in 0..3 {
                // mild pixel noise
                let noise: f32 = rng.gen_range(-0.02..0.02);
                img[[y, x, c]] = ((px[c] + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    img
}

/// A second procedural dataset with different geometry, used as an
/// out-of-distribution query source for extraction experiments.
pub fn gradients10(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = rng::derive(seed, "gradients10");
    let mut images = Array4::<u8>::zeros((n, IMG, IMG, 3));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        let a: f32 = rng.gen_range(0.0..1.0);
        let dir = class % 4;
        let base = PALETTE[(class + 3) % 10];
        for y in 0..IMG {
            for x in 0..IMG {
                let t = match dir {
                    0 => x as f32 / 31.0,
                    1 => y as f32 / 31.0,
                    2 => (x + y) as f32 / 62.0,
                    _ => ((x as i32 - y as i32).abs() as f32) / 31.0,
                };
                for c in 0..3 {
                    let v = (base[c] * t + a * (1.0 - t) * 0.5).clamp(0.0, 1.0);
                    images[[i, y, x, c]] = (v * 255.0) as u8;
                }
            }
        }
        labels.push(class);
    }
    LabeledDataset::new("gradients10", Split::AttackSubset, images, labels, 10).expect("consistent")
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    name: String,
    num_classes: usize,
    /// file path (relative) -> split
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    label: usize,
    split: Split,
}

/// Write a dataset as one subdirectory of PNGs per class plus a manifest.
pub fn export_dir(ds: &LabeledDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (h, w, _c) = ds.image_shape();
    let mut entries = Vec::new();
    for i in 0..ds.len() {
        let class_dir = dir.join(format!("class_{:02}", ds.labels[i]));
        std::fs::create_dir_all(&class_dir)?;
        let rel = format!("class_{:02}/img_{:05}.png", ds.labels[i], i);
        let img = ds.image(i);
        let buf: Vec<u8> = img.iter().copied().collect();
        image::save_buffer(
            dir.join(&rel),
            &buf,
            w as u32,
            h as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Data(format!("png write: {e}")))?;
        entries.push(ManifestEntry {
            path: rel,
            label: ds.labels[i],
            split: ds.split,
        });
    }
    let manifest = Manifest {
        name: ds.name.clone(),
        num_classes: ds.num_classes,
        entries,
    };
    let f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(())
}

/// Load a dataset written by [`export_dir`] (or assembled by hand in the same
/// layout), keeping only entries of the requested split.
pub fn load_dir(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let manifest: Manifest = serde_json::from_reader(
        std::fs::File::open(dir.join("manifest.json"))
            .map_err(|e| Error::Data(format!("manifest: {e}")))?,
    )?;
    let entries: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| e.split == split).collect();
    if entries.is_empty() {
        return Err(Error::Data(format!("no entries for split {split:?}")));
    }
    let first = image::open(dir.join(&entries[0].path))
        .map_err(|e| Error::Data(format!("png read: {e}")))?
        .to_rgb8();
    let (w, h) = (first.width() as usize, first.height() as usize);
    let mut images = Array4::<u8>::zeros((entries.len(), h, w, 3));
    let mut labels = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let img = image::open(dir.join(&e.path))
            .map_err(|er| Error::Data(format!("png read {}: {er}", e.path)))?
            .to_rgb8();
        if img.width() as usize != w || img.height() as usize != h {
            return Err(Error::Data(format!("inconsistent image size in {}", e.path)));
        }
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    images[[i, y, x, c]] = p.0[c];
                }
            }
        }
        labels.push(e.label);
    }
    LabeledDataset::new(manifest.name, split, images, labels, manifest.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes10_is_deterministic() {
        let a = shapes10(50, 1, Split::Train);
        let b = shapes10(50, 1, Split::Train);
        assert_eq!(a.content_hash(), b.content_hash());
        let c = shapes10(50, 2, Split::Train);
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn splits_draw_distinct_streams() {
        let a = shapes10(50, 1, Split::Train);
        let b = shapes10(50, 1, Split::Val);
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn label_range_is_checked() {
        let images = Array4::<u8>::zeros((2, 4, 4, 3));
        let err = LabeledDataset::new("x", Split::Train, images, vec![0, 5], 3);
        assert!(err.is_err());
    }

    #[test]
    fn export_import_roundtrip() {
        let ds = shapes10(20, 3, Split::Val);
        let dir = tempfile::tempdir().unwrap();
        export_dir(&ds, dir.path()).unwrap();
        let back = load_dir(dir.path(), Split::Val).unwrap();
        assert_eq!(back.content_hash(), ds.content_hash());
    }
}
