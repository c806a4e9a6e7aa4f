//! Synthetic multi-class shape dataset, the CTRS on-disk format,
//! augmentation, and deterministic batching.
//!
//! Each image holds up to L-1 non-overlapping parametric shapes (ellipse,
//! rectangle, annulus — type cycles with the class id) on a smooth two-color
//! background gradient. Labels come from exact shape membership tests, so
//! there are no ambiguous boundary pixels; all appearance noise lives in the
//! image channels. Pixel values are quantized to f32 at generation time so
//! the f64 in-memory form round-trips the f32 file format bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::labels::{LabelBatch, LabelMap};
use crate::tensor::Tensor;

/// Per-pixel appearance noise sigma.
pub const NOISE_SIGMA: f64 = 0.05;

const MAGIC: &[u8; 4] = b"CTRS";
const VERSION: u16 = 1;

/// One image-label pair. Image data is (3, H, W) row-major in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Foreground palette: saturated colors with pairwise per-channel distance
/// of at least 0.3 somewhere, far from the dim background range.
const PALETTE: [[f64; 3]; 7] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.90, 0.20],
    [0.20, 0.20, 0.90],
    [0.90, 0.90, 0.20],
    [0.90, 0.20, 0.90],
    [0.20, 0.90, 0.90],
    [0.85, 0.55, 0.15],
];

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { cx: f64, cy: f64, rx: f64, ry: f64 },
    Annulus { cx: f64, cy: f64, rx: f64, ry: f64, inner: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let dx = (x - cx) / rx;
                let dy = (y - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
            Shape::Rect { cx, cy, rx, ry } => (x - cx).abs() <= rx && (y - cy).abs() <= ry,
            Shape::Annulus { cx, cy, rx, ry, inner } => {
                let dx = (x - cx) / rx;
                let dy = (y - cy) / ry;
                let rho = dx * dx + dy * dy;
                rho <= 1.0 && rho >= inner * inner
            }
        }
    }
}

/// Deterministic synthetic dataset: `num` images of `h` x `w` pixels with
/// `classes` classes (class 0 is background). Every present foreground
/// class occupies between 1% and 40% of the pixels.
pub fn generate_synthetic(
    num: usize,
    h: usize,
    w: usize,
    classes: usize,
    seed: u64,
) -> Result<Dataset> {
    if !(2..=8).contains(&classes) {
        return Err(Error::InvalidArgument(format!(
            "classes must be in [2, 8], got {classes}"
        )));
    }
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "spatial dims must be positive multiples of 8, got {h}x{w}"
        )));
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let foreground = classes - 1;
    let pixels = h * w;
    let min_pix = ((pixels as f64) * 0.01).ceil() as usize;
    let max_pix = ((pixels as f64) * 0.40).floor() as usize;

    let mut samples = Vec::with_capacity(num);
    for idx in 0..num {
        // Smooth background gradient; the wide range lets the background
        // locally approach single foreground color channels, so class
        // membership needs more than per-pixel color.
        let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.65));
        let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.65));
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (dir_y, dir_x) = angle.sin_cos();

        // Class subset: the cycling first class guarantees that every
        // foreground class appears across any run of L-1 consecutive images.
        let count = rng.random_range(1..=foreground);
        let first = (idx % foreground) as u8 + 1;
        let mut chosen = vec![first];
        let mut rest: Vec<u8> = (1..=foreground as u8).filter(|c| *c != first).collect();
        for _ in 1..count {
            let pick = rng.random_range(0..rest.len());
            chosen.push(rest.swap_remove(pick));
        }

        let mut label = vec![0u8; pixels];
        let mut occupied = vec![false; pixels];
        for &cls in &chosen {
            let mut target_frac: f64 = rng.random_range(0.02..0.10);
            let mut placed = false;
            'attempts: for attempt in 0..200 {
                if attempt > 0 && attempt % 40 == 0 {
                    target_frac = (target_frac * 0.7).max(0.015);
                }
                let shape = sample_shape(&mut rng, cls, h, w, target_frac);
                let mut mask = Vec::new();
                for i in 0..h {
                    for j in 0..w {
                        if shape.contains(j as f64, i as f64) {
                            mask.push(i * w + j);
                        }
                    }
                }
                if mask.len() < min_pix || mask.len() > max_pix {
                    continue;
                }
                for &p in &mask {
                    if occupied[p] {
                        continue 'attempts;
                    }
                }
                for &p in &mask {
                    occupied[p] = true;
                    label[p] = cls;
                }
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::InvalidArgument(format!(
                    "could not place a shape for class {cls} in a {h}x{w} image"
                )));
            }
        }

        // Render: background gradient or class color, plus noise, quantized
        // to f32 so disk round trips are bitwise.
        let mut image = vec![0.0f64; 3 * pixels];
        let diag = ((h * h + w * w) as f64).sqrt();
        for i in 0..h {
            for j in 0..w {
                let pix = i * w + j;
                let t = 0.5 + (dir_x * j as f64 + dir_y * i as f64) / (2.0 * diag);
                let base: [f64; 3] = if label[pix] == 0 {
                    std::array::from_fn(|ch| c0[ch] + (c1[ch] - c0[ch]) * t)
                } else {
                    PALETTE[(label[pix] - 1) as usize]
                };
                for (ch, b) in base.iter().enumerate() {
                    let v = (b + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    image[ch * pixels + pix] = (v as f32) as f64;
                }
            }
        }
        samples.push(Sample {
            image,
            labels: LabelMap::new(h, w, label)?,
        });
    }
    Ok(Dataset { h, w, num_classes: classes, samples })
}

fn sample_shape(rng: &mut ChaCha8Rng, cls: u8, h: usize, w: usize, frac: f64) -> Shape {
    let area = frac * (h * w) as f64;
    let aspect = rng.random_range(0.6..1.6);
    let max_r = (h.min(w) as f64) / 2.0 - 2.0;
    match (cls - 1) % 3 {
        0 => {
            let rx = (area / (std::f64::consts::PI * aspect)).sqrt().clamp(2.0, max_r);
            let ry = (rx * aspect).clamp(2.0, max_r);
            let cx = rng.random_range(rx + 1.0..w as f64 - rx - 1.0);
            let cy = rng.random_range(ry + 1.0..h as f64 - ry - 1.0);
            Shape::Ellipse { cx, cy, rx, ry }
        }
        1 => {
            let rx = ((area / aspect).sqrt() / 2.0).clamp(1.5, max_r);
            let ry = (rx * aspect).clamp(1.5, max_r);
            let cx = rng.random_range(rx + 1.0..w as f64 - rx - 1.0);
            let cy = rng.random_range(ry + 1.0..h as f64 - ry - 1.0);
            Shape::Rect { cx, cy, rx, ry }
        }
        _ => {
            let inner = rng.random_range(0.45..0.70);
            let denom = std::f64::consts::PI * aspect * (1.0 - inner * inner);
            let rx = (area / denom).sqrt().clamp(2.5, max_r);
            let ry = (rx * aspect).clamp(2.5, max_r);
            let cx = rng.random_range(rx + 1.0..w as f64 - rx - 1.0);
            let cy = rng.random_range(ry + 1.0..h as f64 - ry - 1.0);
            Shape::Annulus { cx, cy, rx, ry, inner }
        }
    }
}

/// Serializes to the CTRS format: 16-byte header (magic, version u16,
/// num u32, h u16, w u16, classes u16, little-endian), then the f32 image
/// block and the u8 label block.
pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + d.len() * d.h * d.w * 13);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(d.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(d.h as u16).to_le_bytes());
    buf.extend_from_slice(&(d.w as u16).to_le_bytes());
    buf.extend_from_slice(&(d.num_classes as u16).to_le_bytes());
    for s in &d.samples {
        for v in &s.image {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    for s in &d.samples {
        buf.extend_from_slice(&s.labels.data);
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::Format("truncated CTRS header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad CTRS magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported CTRS version {version} (expected {VERSION})"
        )));
    }
    let num = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let h = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let w = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
    let classes = u16::from_le_bytes([bytes[14], bytes[15]]) as usize;
    let image_bytes = num * 3 * h * w * 4;
    let label_bytes = num * h * w;
    if bytes.len() != 16 + image_bytes + label_bytes {
        return Err(Error::Format(format!(
            "CTRS payload is {} bytes, header implies {}",
            bytes.len() - 16,
            image_bytes + label_bytes
        )));
    }
    let mut samples = Vec::with_capacity(num);
    let img_base = 16;
    let lab_base = 16 + image_bytes;
    for s in 0..num {
        let mut image = Vec::with_capacity(3 * h * w);
        let off = img_base + s * 3 * h * w * 4;
        for i in 0..3 * h * w {
            let b = &bytes[off + 4 * i..off + 4 * i + 4];
            image.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        }
        let off = lab_base + s * h * w;
        let labels = bytes[off..off + h * w].to_vec();
        if let Some(&bad) = labels.iter().find(|&&v| v as usize >= classes) {
            return Err(Error::Format(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        samples.push(Sample {
            image,
            labels: LabelMap::new(h, w, labels)?,
        });
    }
    Ok(Dataset { h, w, num_classes: classes, samples })
}

/// Random horizontal flip (p = 0.5) then random rotation by a multiple of
/// 90 degrees (p = 0.5, k uniform in 1..=3), applied identically to image
/// and labels. Rotation requires square images and is skipped otherwise.
pub fn augment(s: &Sample, rng: &mut ChaCha8Rng) -> Sample {
    let mut out = s.clone();
    if rng.random_bool(0.5) {
        out = hflip(&out);
    }
    if rng.random_bool(0.5) {
        let k = rng.random_range(1..=3u32);
        if out.labels.h == out.labels.w {
            for _ in 0..k {
                out = rot90(&out);
            }
        }
    }
    out
}

fn hflip(s: &Sample) -> Sample {
    let (h, w) = (s.labels.h, s.labels.w);
    let mut image = vec![0.0; s.image.len()];
    let mut labels = vec![0u8; h * w];
    for i in 0..h {
        for j in 0..w {
            let src = i * w + (w - 1 - j);
            labels[i * w + j] = s.labels.data[src];
            for ch in 0..3 {
                image[ch * h * w + i * w + j] = s.image[ch * h * w + src];
            }
        }
    }
    Sample { image, labels: LabelMap { h, w, data: labels } }
}

/// Clockwise 90-degree rotation: (i, j) <- (h-1-j, i) of the source.
fn rot90(s: &Sample) -> Sample {
    let (h, w) = (s.labels.h, s.labels.w);
    let (oh, ow) = (w, h);
    let mut image = vec![0.0; s.image.len()];
    let mut labels = vec![0u8; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let src = (h - 1 - j) * w + i;
            labels[i * ow + j] = s.labels.data[src];
            for ch in 0..3 {
                image[ch * oh * ow + i * ow + j] = s.image[ch * h * w + src];
            }
        }
    }
    Sample { image, labels: LabelMap { h: oh, w: ow, data: labels } }
}

/// Deterministic epoch shuffle: batches of indices, final partial batch kept.
pub fn batch_indices(
    len: usize,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    use rand::SeedableRng;
    let mut rng =
        ChaCha8Rng::seed_from_u64(shuffle_seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..len).collect();
    // Fisher-Yates
    for i in (1..len).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// A training batch: stacked image tensor plus stacked labels.
pub struct Batch {
    pub images: Tensor,
    pub labels: LabelBatch,
    pub indices: Vec<usize>,
}

/// Assembles a batch, optionally augmenting each sample with the given
/// stream (consumed in index order).
pub fn make_batch(d: &Dataset, indices: &[usize], aug: Option<&mut ChaCha8Rng>) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut images = Vec::with_capacity(indices.len() * 3 * d.h * d.w);
    let mut maps = Vec::with_capacity(indices.len());
    match aug {
        Some(rng) => {
            for &i in indices {
                let s = augment(&d.samples[i], rng);
                images.extend_from_slice(&s.image);
                maps.push(s.labels);
            }
        }
        None => {
            for &i in indices {
                images.extend_from_slice(&d.samples[i].image);
                maps.push(d.samples[i].labels.clone());
            }
        }
    }
    Ok(Batch {
        images: Tensor::new(vec![indices.len(), 3, d.h, d.w], images)?,
        labels: LabelBatch::from_maps(&maps)?,
        indices: indices.to_vec(),
    })
}
