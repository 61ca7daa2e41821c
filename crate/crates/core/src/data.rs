//! Procedural shape-classification data plus the three corruption regimes:
//! Trojan triggers with flipped labels, spurious patterns on one class with
//! labels kept, and a structural null block appended to every image.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{RectError, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const NOISE_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labeled single-channel images in `[0, 1]`, class-balanced by construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }
}

/// One clean/corrupted pair: the corrupted tensor differs from the clean one
/// only inside the region mask.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub clean: Tensor,
    pub corrupted: Tensor,
    pub label: usize,
    /// Trojan target label, when the pair came from a label-flipping attack.
    pub target_label: Option<usize>,
    /// Binary mask of the corrupted region, same shape as the images.
    pub region: Tensor,
}

// ---------------------------------------------------------------------------
// Shape generation
// ---------------------------------------------------------------------------

const SHAPE_NAMES: [&str; 10] = [
    "disk", "ring", "cross", "bar_h", "bar_v", "checker", "stripe_d", "x_cross", "frame",
    "dot_grid",
];

/// Generate a class-balanced dataset of procedural shapes with Gaussian pixel
/// noise (sigma 0.05, clipped to [0, 1]). Deterministic given the seed.
pub fn generate(
    seed: u64,
    classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    split: Split,
) -> Result<Dataset> {
    if !(4..=10).contains(&classes) {
        return Err(RectError::InvalidArgument(format!(
            "class count must be between 4 and 10, got {classes}"
        )));
    }
    if height < 16 || width < 16 {
        return Err(RectError::InvalidArgument(format!(
            "image size must be at least 16x16, got {height}x{width}"
        )));
    }
    let domain = match split {
        Split::Train => "data.train",
        Split::Test => "data.test",
    };
    let mut rng = rng::rng_for(seed, domain);
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        for _ in 0..per_class {
            images.push(draw_shape(class, height, width, &mut rng)?);
            labels.push(class);
        }
    }
    // Deterministic shuffle so batches are class-mixed.
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    let images = order.iter().map(|&i| images[i].clone()).collect();
    let labels = order.iter().map(|&i| labels[i]).collect();
    Ok(Dataset {
        images,
        labels,
        classes,
        split,
        seed,
    })
}

fn draw_shape(class: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut img = vec![0.0f64; h * w];
    // Wide nuisance jitter: position, scale, and contrast all vary, so shape
    // recognition has a real generalization burden at desk scale.
    let cy = h as f64 * rng.gen_range(0.32..0.68);
    let cx = w as f64 * rng.gen_range(0.32..0.68);
    let base = h.min(w) as f64;
    let fg = rng.gen_range(0.55..1.0);

    let put = |img: &mut Vec<f64>, y: isize, x: isize, v: f64| {
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            img[y as usize * w + x as usize] = v;
        }
    };

    match SHAPE_NAMES[class % SHAPE_NAMES.len()] {
        "disk" => {
            let radius = base * rng.gen_range(0.16..0.3);
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    if (dy * dy + dx * dx).sqrt() <= radius {
                        img[y * w + x] = fg;
                    }
                }
            }
        }
        "ring" => {
            let outer = base * rng.gen_range(0.2..0.34);
            let inner = outer - rng.gen_range(1.4..2.8);
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    let d = (dy * dy + dx * dx).sqrt();
                    if d <= outer && d >= inner {
                        img[y * w + x] = fg;
                    }
                }
            }
        }
        "cross" => {
            let half = (base * rng.gen_range(0.22..0.4)) as isize;
            let thick = rng.gen_range(1..=2) as isize;
            for t in -thick..=thick {
                for s in -half..=half {
                    put(&mut img, cy as isize + t, cx as isize + s, fg);
                    put(&mut img, cy as isize + s, cx as isize + t, fg);
                }
            }
        }
        "bar_h" => {
            let thick = rng.gen_range(2..=3);
            let y0 = (cy as usize).saturating_sub(thick / 2);
            for y in y0..(y0 + thick).min(h) {
                for x in 1..w - 1 {
                    img[y * w + x] = fg;
                }
            }
        }
        "bar_v" => {
            let thick = rng.gen_range(2..=3);
            let x0 = (cx as usize).saturating_sub(thick / 2);
            for x in x0..(x0 + thick).min(w) {
                for y in 1..h - 1 {
                    img[y * w + x] = fg;
                }
            }
        }
        "checker" => {
            let cell = rng.gen_range(3..=4);
            let phase = rng.gen_range(0..2);
            for y in 0..h {
                for x in 0..w {
                    if ((y / cell) + (x / cell)) % 2 == phase {
                        img[y * w + x] = fg * 0.85;
                    }
                }
            }
        }
        "stripe_d" => {
            let period = rng.gen_range(4..=5);
            let phase = rng.gen_range(0..period);
            for y in 0..h {
                for x in 0..w {
                    if (y + x + phase) % period < 2 {
                        img[y * w + x] = fg;
                    }
                }
            }
        }
        "x_cross" => {
            let half = (base * rng.gen_range(0.22..0.38)) as isize;
            for s in -half..=half {
                for t in -1..=1isize {
                    put(&mut img, cy as isize + s, cx as isize + s + t, fg);
                    put(&mut img, cy as isize + s, cx as isize - s + t, fg);
                }
            }
        }
        "frame" => {
            let half = (base * rng.gen_range(0.2..0.36)) as isize;
            for s in -half..=half {
                for &(dy, dx) in &[(-half, s), (half, s), (s, -half), (s, half)] {
                    put(&mut img, cy as isize + dy, cx as isize + dx, fg);
                }
            }
        }
        "dot_grid" => {
            let step = rng.gen_range(4..=5usize);
            let off = rng.gen_range(1..step);
            for y in (off..h).step_by(step) {
                for x in (off..w).step_by(step) {
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        put(&mut img, (y + dy) as isize, (x + dx) as isize, fg);
                    }
                }
            }
        }
        _ => unreachable!(),
    }

    for v in &mut img {
        *v = (*v + NOISE_SIGMA * rng::normal(rng)).clamp(0.0, 1.0);
    }
    Tensor::new(vec![1, h, w], img)
}

// ---------------------------------------------------------------------------
// Corruption
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Trojan,
    Spurious,
    Leakage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TriggerLocation {
    TL,
    TR,
    C,
    BL,
    BR,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerPattern {
    /// 5x5 corner-bracket glyph.
    CornerGlyph,
    /// 7x7 diagonal-stripe patch.
    DiagStripes,
}

impl TriggerPattern {
    /// The trigger tensor tau and its binary mask S (the patch support).
    pub fn build(&self) -> (Tensor, Tensor) {
        match self {
            TriggerPattern::CornerGlyph => {
                let mut tau = vec![0.0; 25];
                for i in 0..5 {
                    tau[i] = 1.0; // top edge
                    tau[i * 5] = 1.0; // left edge
                }
                tau[6] = 1.0;
                tau[12] = 1.0;
                (
                    Tensor::new(vec![1, 5, 5], tau).unwrap(),
                    Tensor::new(vec![1, 5, 5], vec![1.0; 25]).unwrap(),
                )
            }
            TriggerPattern::DiagStripes => {
                let mut tau = vec![0.0; 49];
                for y in 0..7 {
                    for x in 0..7 {
                        if (y + x) % 2 == 0 {
                            tau[y * 7 + x] = 1.0;
                        }
                    }
                }
                (
                    Tensor::new(vec![1, 7, 7], tau).unwrap(),
                    Tensor::new(vec![1, 7, 7], vec![1.0; 49]).unwrap(),
                )
            }
        }
    }
}

/// How to corrupt a dataset: which regime, which pattern, where, how visible,
/// and how much of the data it touches.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub pattern: TriggerPattern,
    pub location: TriggerLocation,
    /// Trigger visibility phi in [0, 1].
    pub visibility: f64,
    /// Poison/contamination rate rho in [0, 1].
    pub rate: f64,
    /// Trojan target label (required for trojan).
    pub target_label: Option<usize>,
    /// Class whose samples receive the spurious pattern.
    pub affected_class: usize,
}

impl CorruptionSpec {
    pub fn trojan(target_label: usize) -> Self {
        CorruptionSpec {
            kind: CorruptionKind::Trojan,
            pattern: TriggerPattern::CornerGlyph,
            location: TriggerLocation::BR,
            visibility: 0.5,
            rate: 0.01,
            target_label: Some(target_label),
            affected_class: 0,
        }
    }

    pub fn spurious(affected_class: usize) -> Self {
        CorruptionSpec {
            kind: CorruptionKind::Spurious,
            pattern: TriggerPattern::CornerGlyph,
            location: TriggerLocation::BR,
            visibility: 0.5,
            rate: 0.5,
            target_label: None,
            affected_class,
        }
    }

    pub fn leakage() -> Self {
        CorruptionSpec {
            kind: CorruptionKind::Leakage,
            pattern: TriggerPattern::CornerGlyph,
            location: TriggerLocation::BR,
            visibility: 0.5,
            rate: 1.0,
            target_label: None,
            affected_class: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.visibility) {
            return Err(RectError::InvalidArgument(format!(
                "trigger visibility must be in [0, 1], got {}",
                self.visibility
            )));
        }
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(RectError::InvalidArgument(format!(
                "poison rate must be in [0, 1], got {}",
                self.rate
            )));
        }
        if self.kind == CorruptionKind::Trojan && self.target_label.is_none() {
            return Err(RectError::InvalidArgument(
                "trojan corruption requires a target label".into(),
            ));
        }
        Ok(())
    }

    /// Pixel offset of the trigger's top-left corner for a given image size.
    fn placement(&self, h: usize, w: usize, th: usize, tw: usize) -> (usize, usize) {
        let margin = 1;
        match self.location {
            TriggerLocation::TL => (margin, margin),
            TriggerLocation::TR => (margin, w - tw - margin),
            TriggerLocation::C => ((h - th) / 2, (w - tw) / 2),
            TriggerLocation::BL => (h - th - margin, margin),
            TriggerLocation::BR => (h - th - margin, w - tw - margin),
        }
    }

    /// Full-image binary mask of the trigger region.
    pub fn region_mask(&self, h: usize, w: usize) -> Tensor {
        let (_, mask) = self.pattern.build();
        let (th, tw) = (mask.shape()[1], mask.shape()[2]);
        let (oy, ox) = self.placement(h, w, th, tw);
        let mut full = vec![0.0; h * w];
        for y in 0..th {
            for x in 0..tw {
                full[(oy + y) * w + (ox + x)] = mask.data()[y * tw + x];
            }
        }
        Tensor::new(vec![1, h, w], full).unwrap()
    }
}

/// Blend the trigger into an image: inside the mask,
/// `x~ = phi * tau + (1 - phi) * x`; outside, `x~ = x`.
pub fn apply_trigger(x: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    spec.validate()?;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (tau, mask) = spec.pattern.build();
    let (th, tw) = (tau.shape()[1], tau.shape()[2]);
    if th > h || tw > w {
        return Err(RectError::ShapeMismatch {
            context: "apply_trigger placement".into(),
            expected: vec![th, tw],
            actual: vec![h, w],
        });
    }
    let (oy, ox) = spec.placement(h, w, th, tw);
    let phi = spec.visibility;
    let mut out = x.data().to_vec();
    for y in 0..th {
        for tx in 0..tw {
            if mask.data()[y * tw + tx] > 0.0 {
                let idx = (oy + y) * w + (ox + tx);
                out[idx] = phi * tau.data()[y * tw + tx] + (1.0 - phi) * out[idx];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Null-block pattern values: a low-contrast frame (0.3 border, 0.1 interior).
fn null_block(h: usize, w: usize) -> Vec<f64> {
    let mut block = vec![0.1; h * w];
    for y in 0..h {
        for x in 0..w {
            if y == 0 || y + 1 == h || x == 0 || x + 1 == w {
                block[y * w + x] = 0.3;
            }
        }
    }
    block
}

/// Apply a corruption regime to a dataset. Returns the manipulated dataset
/// plus the clean/corrupted pairs for every touched sample.
///
/// - trojan: a rho-fraction of samples with label != target get the trigger
///   and the target label;
/// - spurious: a rho-fraction of the affected class gets the pattern, labels
///   unchanged;
/// - leakage: every sample has a null block appended at top or bottom
///   (uniformly at random), doubling the image height.
pub fn corrupt_dataset(
    ds: &Dataset,
    spec: &CorruptionSpec,
    seed: u64,
) -> Result<(Dataset, Vec<SamplePair>)> {
    spec.validate()?;
    let mut rng = rng::rng_for(seed, "corruption");
    let mut out = ds.clone();
    let mut pairs = Vec::new();

    match spec.kind {
        CorruptionKind::Trojan => {
            let target = spec.target_label.unwrap();
            let count = (spec.rate * ds.len() as f64).round() as usize;
            if spec.rate > 0.0 && count == 0 {
                return Err(RectError::InvalidArgument(format!(
                    "poison rate {} of {} samples rounds to zero",
                    spec.rate,
                    ds.len()
                )));
            }
            let mut eligible: Vec<usize> = (0..ds.len())
                .filter(|&i| ds.labels[i] != target)
                .collect();
            eligible.shuffle(&mut rng);
            for &i in eligible.iter().take(count) {
                let clean = ds.images[i].clone();
                let corrupted = apply_trigger(&clean, spec)?;
                out.images[i] = corrupted.clone();
                out.labels[i] = target;
                pairs.push(SamplePair {
                    region: spec.region_mask(clean.shape()[1], clean.shape()[2]),
                    clean,
                    corrupted,
                    label: ds.labels[i],
                    target_label: Some(target),
                });
            }
        }
        CorruptionKind::Spurious => {
            let mut members: Vec<usize> = (0..ds.len())
                .filter(|&i| ds.labels[i] == spec.affected_class)
                .collect();
            let count = (spec.rate * members.len() as f64).round() as usize;
            members.shuffle(&mut rng);
            for &i in members.iter().take(count) {
                let clean = ds.images[i].clone();
                let corrupted = apply_trigger(&clean, spec)?;
                out.images[i] = corrupted.clone();
                pairs.push(SamplePair {
                    region: spec.region_mask(clean.shape()[1], clean.shape()[2]),
                    clean,
                    corrupted,
                    label: ds.labels[i],
                    target_label: None,
                });
            }
        }
        CorruptionKind::Leakage => {
            let (h, w) = (ds.image_shape()[1], ds.image_shape()[2]);
            let block = null_block(h, w);
            for i in 0..ds.len() {
                let on_top: bool = rng.gen();
                let src = ds.images[i].data();
                let mut with_block = vec![0.0; 2 * h * w];
                let mut blank = vec![0.0; 2 * h * w];
                let mut mask = vec![0.0; 2 * h * w];
                let (block_off, img_off) = if on_top { (0, h * w) } else { (h * w, 0) };
                with_block[img_off..img_off + h * w].copy_from_slice(src);
                blank[img_off..img_off + h * w].copy_from_slice(src);
                for j in 0..h * w {
                    let noise = NOISE_SIGMA * rng::normal(&mut rng);
                    with_block[block_off + j] = (block[j] + noise).clamp(0.0, 1.0);
                    blank[block_off + j] = noise.clamp(0.0, 1.0);
                    mask[block_off + j] = 1.0;
                }
                let corrupted = Tensor::new(vec![1, 2 * h, w], with_block)?;
                let clean = Tensor::new(vec![1, 2 * h, w], blank)?;
                out.images[i] = corrupted.clone();
                pairs.push(SamplePair {
                    clean,
                    corrupted,
                    label: ds.labels[i],
                    target_label: None,
                    region: Tensor::new(vec![1, 2 * h, w], mask)?,
                });
            }
        }
    }
    Ok((out, pairs))
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// Write a dataset as raw tensors plus a manifest. Each tensor file holds
/// little-endian u32 dims (count then extents) followed by f32 data; the
/// manifest lists `file,label,corrupted,pair_id` per sample.
pub fn export_dataset(ds: &Dataset, pairs: &[SamplePair], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut corrupted_of: Vec<Option<usize>> = vec![None; ds.len()];
    for (pid, pair) in pairs.iter().enumerate() {
        for i in 0..ds.len() {
            if corrupted_of[i].is_none() && ds.images[i] == pair.corrupted {
                corrupted_of[i] = Some(pid);
                break;
            }
        }
    }
    let mut manifest = String::from("file,label,corrupted,pair_id\n");
    for i in 0..ds.len() {
        let name = format!("sample_{i:05}.bin");
        write_raw_tensor(&ds.images[i], &dir.join(&name))?;
        let _ = writeln!(
            manifest,
            "{name},{},{},{}",
            ds.labels[i],
            corrupted_of[i].is_some(),
            corrupted_of[i].map(|p| p.to_string()).unwrap_or_default()
        );
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

pub fn write_raw_tensor(t: &Tensor, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 + 4 * t.shape().len() + 4 * t.numel());
    bytes.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &dim in t.shape() {
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in t.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}
