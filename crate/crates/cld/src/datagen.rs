//! Dataset construction and augmentation: Gaussian mixtures, near-duplicate
//! "multi-view" variants, exponential long-tail subsampling, CIFAR-10 binary
//! batches, and the CLD1 container format.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CldError, Result};
use crate::numerics::{l2_normalize, DetRng};

/// CIFAR-10 per-channel standardization constants.
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

const CIFAR_RECORD: usize = 3073;
const CLD1_MAGIC: [u8; 4] = [0x43, 0x4C, 0x44, 0x31];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Vector,
    Image32x32x3,
}

/// Labeled samples. Labels are carried for the evaluators only; the training
/// path receives an [`UnlabeledView`] and cannot see them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub kind: DataKind,
}

impl Dataset {
    pub fn new(
        samples: Vec<Vec<f64>>,
        labels: Vec<usize>,
        num_classes: usize,
        kind: DataKind,
    ) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(CldError::DimMismatch {
                context: "Dataset labels".to_string(),
                expected: samples.len(),
                got: labels.len(),
            });
        }
        if samples.is_empty() {
            return Err(CldError::EmptyInput("Dataset"));
        }
        let dim = samples[0].len();
        for (i, s) in samples.iter().enumerate() {
            if s.len() != dim {
                return Err(CldError::DimMismatch {
                    context: format!("Dataset sample {i}"),
                    expected: dim,
                    got: s.len(),
                });
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(CldError::InvalidArgument {
                context: "Dataset",
                msg: format!("label {bad} outside [0, {num_classes})"),
            });
        }
        Ok(Dataset {
            samples,
            labels,
            num_classes,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Label-free view for the training path.
    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            samples: &self.samples,
            kind: self.kind,
        }
    }
}

/// What the trainer is allowed to see: samples and their kind, no labels.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledView<'a> {
    pub samples: &'a [Vec<f64>],
    pub kind: DataKind,
}

impl<'a> UnlabeledView<'a> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }
}

/// Augmentation strengths. Vector fields apply to `DataKind::Vector`,
/// image fields to `DataKind::Image32x32x3`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Stddev of additive Gaussian noise per coordinate.
    pub noise_sigma: f64,
    /// Per-coordinate dropout probability.
    pub mask_prob: f64,
    /// Multiplicative jitter range [lo, hi]; [1, 1] is neutral.
    pub scale_range: [f64; 2],
    /// Zero-padding for random crop, in pixels.
    pub crop_pad: usize,
    pub flip_prob: f64,
    /// Max per-channel additive shift (post-standardization units).
    pub brightness_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_sigma: 0.0,
            mask_prob: 0.0,
            scale_range: [1.0, 1.0],
            crop_pad: 0,
            flip_prob: 0.0,
            brightness_jitter: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(CldError::InvalidConfig {
                key: format!("augment.{key}"),
                msg: msg.to_string(),
            })
        };
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma", "must be >= 0");
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return bad("mask_prob", "must be in [0, 1)");
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad("scale_range", "requires 0 < lo <= hi");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob", "must be in [0, 1]");
        }
        if !(self.brightness_jitter >= 0.0) {
            return bad("brightness_jitter", "must be >= 0");
        }
        Ok(())
    }
}

/// Two independently augmented views of one instance.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub view_a: Vec<f64>,
    pub view_b: Vec<f64>,
    pub index: usize,
}

/// Gaussian mixture: class means uniform on a sphere of radius `sep`,
/// samples N(mean, I), labels class-major.
pub fn generate_mixture(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    sep: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 1 || per_class < 1 {
        return Err(CldError::InvalidArgument {
            context: "generate_mixture",
            msg: "counts must be >= 1".to_string(),
        });
    }
    if dim < 2 {
        return Err(CldError::InvalidArgument {
            context: "generate_mixture",
            msg: "dim must be >= 2".to_string(),
        });
    }
    if !(sep >= 0.0) {
        return Err(CldError::InvalidArgument {
            context: "generate_mixture",
            msg: "sep must be >= 0".to_string(),
        });
    }
    let mut rng = DetRng::new(seed);
    let means = class_means(num_classes, dim, sep, &mut rng);
    let mut samples = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let s: Vec<f64> = mean.iter().map(|m| m + rng.normal()).collect();
            samples.push(s);
            labels.push(c);
        }
    }
    Dataset::new(samples, labels, num_classes, DataKind::Vector)
}

fn class_means(num_classes: usize, dim: usize, sep: f64, rng: &mut DetRng) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|_| {
            if sep == 0.0 {
                return vec![0.0; dim];
            }
            let u = l2_normalize(&rng.normal_vec(dim)).expect("gaussian direction");
            u.into_iter().map(|x| x * sep).collect()
        })
        .collect()
}

/// Exponential long-tail profile: class c keeps ceil(n_max * rho^(c/(C-1)))
/// samples; class 0 is untouched. Requires a class-balanced input.
pub fn apply_longtail(ds: &Dataset, imbalance: f64, seed: u64) -> Result<Dataset> {
    if !(imbalance > 0.0 && imbalance <= 1.0) {
        return Err(CldError::InvalidArgument {
            context: "apply_longtail",
            msg: "imbalance ratio must be in (0, 1]".to_string(),
        });
    }
    let counts = ds.class_counts();
    let n_max = counts[0];
    if counts.iter().any(|&c| c != n_max) {
        return Err(CldError::InvalidArgument {
            context: "apply_longtail",
            msg: "dataset must be class-balanced".to_string(),
        });
    }
    let c_total = ds.num_classes;
    let mut rng = DetRng::new(seed);
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for c in 0..c_total {
        let keep = if c == 0 || c_total == 1 {
            n_max
        } else {
            let expo = c as f64 / (c_total - 1) as f64;
            ((n_max as f64) * imbalance.powf(expo)).ceil() as usize
        };
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        if keep < idx.len() {
            rng.shuffle(&mut idx);
            idx.truncate(keep);
            idx.sort_unstable();
        }
        for i in idx {
            samples.push(ds.samples[i].clone());
            labels.push(c);
        }
    }
    Dataset::new(samples, labels, c_total, ds.kind)
}

/// Near-duplicate "multi-view" data: each physical object is a base vector
/// N(class mean, I); its views differ by N(0, corr_sigma^2 I).
pub fn generate_correlated(
    num_classes: usize,
    groups_per_class: usize,
    views_per_group: usize,
    dim: usize,
    sep: f64,
    corr_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 1 || groups_per_class < 1 || views_per_group < 1 {
        return Err(CldError::InvalidArgument {
            context: "generate_correlated",
            msg: "counts must be >= 1".to_string(),
        });
    }
    if dim < 2 {
        return Err(CldError::InvalidArgument {
            context: "generate_correlated",
            msg: "dim must be >= 2".to_string(),
        });
    }
    if !(corr_sigma >= 0.0) {
        return Err(CldError::InvalidArgument {
            context: "generate_correlated",
            msg: "corr_sigma must be >= 0".to_string(),
        });
    }
    let mut rng = DetRng::new(seed);
    let means = class_means(num_classes, dim, sep, &mut rng);
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..groups_per_class {
            let base: Vec<f64> = mean.iter().map(|m| m + rng.normal()).collect();
            for _ in 0..views_per_group {
                let v: Vec<f64> = base.iter().map(|b| b + corr_sigma * rng.normal()).collect();
                samples.push(v);
                labels.push(c);
            }
        }
    }
    Dataset::new(samples, labels, num_classes, DataKind::Vector)
}

/// Parse CIFAR-10 binary batches: 3073-byte records of one label byte then
/// 3072 pixel bytes (R, G, B planes, 32x32 row-major). Pixels are scaled to
/// [0,1] and standardized per channel with the fixed constants.
pub fn load_cifar10<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(CldError::EmptyInput("load_cifar10"));
    }
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let display = path.as_ref().display().to_string();
        let mut bytes = Vec::new();
        std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
            return Err(CldError::Format {
                path: display,
                msg: format!(
                    "size {} not a multiple of {CIFAR_RECORD}; partial record at byte offset {offset}",
                    bytes.len()
                ),
            });
        }
        for (rec, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = chunk[0] as usize;
            if label > 9 {
                return Err(CldError::Format {
                    path: display,
                    msg: format!("record {rec}: label {label} > 9"),
                });
            }
            let mut pixels = Vec::with_capacity(3072);
            for (i, &b) in chunk[1..].iter().enumerate() {
                let channel = i / 1024;
                let v = b as f64 / 255.0;
                pixels.push((v - CIFAR_MEAN[channel]) / CIFAR_STD[channel]);
            }
            samples.push(pixels);
            labels.push(label);
        }
    }
    Dataset::new(samples, labels, 10, DataKind::Image32x32x3)
}

/// Re-serialize a loaded CIFAR-10 dataset, inverting the standardization.
pub fn save_cifar10<P: AsRef<Path>>(ds: &Dataset, path: P) -> Result<()> {
    if ds.kind != DataKind::Image32x32x3 {
        return Err(CldError::InvalidArgument {
            context: "save_cifar10",
            msg: "dataset kind must be image32x32x3".to_string(),
        });
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (sample, &label) in ds.samples.iter().zip(&ds.labels) {
        out.push(label as u8);
        for (i, &v) in sample.iter().enumerate() {
            let channel = i / 1024;
            let raw = (v * CIFAR_STD[channel] + CIFAR_MEAN[channel]) * 255.0;
            out.push(raw.round().clamp(0.0, 255.0) as u8);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Two independent augmentation draws per index. With the default (all-zero)
/// config both views equal the raw sample.
pub fn make_views(
    data: UnlabeledView<'_>,
    indices: &[usize],
    aug: &AugmentConfig,
    rng: &mut DetRng,
) -> Result<Vec<ViewPair>> {
    aug.validate()?;
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= data.len() {
            return Err(CldError::InvalidArgument {
                context: "make_views",
                msg: format!("index {i} out of range for {} samples", data.len()),
            });
        }
        let view_a = augment_one(&data.samples[i], data.kind, aug, rng);
        let view_b = augment_one(&data.samples[i], data.kind, aug, rng);
        out.push(ViewPair { view_a, view_b, index: i });
    }
    Ok(out)
}

fn augment_one(sample: &[f64], kind: DataKind, aug: &AugmentConfig, rng: &mut DetRng) -> Vec<f64> {
    match kind {
        DataKind::Vector => augment_vector(sample, aug, rng),
        DataKind::Image32x32x3 => augment_image(sample, aug, rng),
    }
}

fn augment_vector(sample: &[f64], aug: &AugmentConfig, rng: &mut DetRng) -> Vec<f64> {
    let [lo, hi] = aug.scale_range;
    let scale = if lo == hi { lo } else { rng.uniform(lo, hi) };
    let mut v: Vec<f64> = sample.iter().map(|x| x * scale).collect();
    if aug.noise_sigma > 0.0 {
        for x in v.iter_mut() {
            *x += aug.noise_sigma * rng.normal();
        }
    }
    if aug.mask_prob > 0.0 {
        for x in v.iter_mut() {
            if rng.bernoulli(aug.mask_prob) {
                *x = 0.0;
            }
        }
    }
    v
}

/// Pad-and-crop, horizontal flip, and per-channel brightness shift on a
/// 3-plane 32x32 image stored as a flat vector.
fn augment_image(sample: &[f64], aug: &AugmentConfig, rng: &mut DetRng) -> Vec<f64> {
    const W: usize = 32;
    debug_assert_eq!(sample.len(), 3 * W * W);
    let mut img = sample.to_vec();

    if aug.crop_pad > 0 {
        let pad = aug.crop_pad;
        let dy = rng.index(2 * pad + 1) as isize - pad as isize;
        let dx = rng.index(2 * pad + 1) as isize - pad as isize;
        let mut shifted = vec![0.0; img.len()];
        for c in 0..3 {
            for y in 0..W {
                let sy = y as isize + dy;
                if !(0..W as isize).contains(&sy) {
                    continue;
                }
                for x in 0..W {
                    let sx = x as isize + dx;
                    if !(0..W as isize).contains(&sx) {
                        continue;
                    }
                    shifted[c * W * W + y * W + x] = img[c * W * W + sy as usize * W + sx as usize];
                }
            }
        }
        img = shifted;
    }
    if aug.flip_prob > 0.0 && rng.bernoulli(aug.flip_prob) {
        for c in 0..3 {
            for y in 0..W {
                let row = &mut img[c * W * W + y * W..c * W * W + (y + 1) * W];
                row.reverse();
            }
        }
    }
    if aug.brightness_jitter > 0.0 {
        for c in 0..3 {
            let shift = rng.uniform(-aug.brightness_jitter, aug.brightness_jitter);
            for v in &mut img[c * W * W..(c + 1) * W * W] {
                *v += shift;
            }
        }
    }
    img
}

/// Write the CLD1 container: magic, LE u32 n/dim/num_classes, u8 kind, then
/// records of (u32 label, dim x f32). Bit-exact round trips.
pub fn save_cld1<P: AsRef<Path>>(ds: &Dataset, path: P) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&CLD1_MAGIC)?;
    w.write_all(&(ds.len() as u32).to_le_bytes())?;
    w.write_all(&(ds.dim() as u32).to_le_bytes())?;
    w.write_all(&(ds.num_classes as u32).to_le_bytes())?;
    w.write_all(&[match ds.kind {
        DataKind::Vector => 0u8,
        DataKind::Image32x32x3 => 1u8,
    }])?;
    for (sample, &label) in ds.samples.iter().zip(&ds.labels) {
        w.write_all(&(label as u32).to_le_bytes())?;
        for &v in sample {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_cld1<P: AsRef<Path>>(path: P) -> Result<Dataset> {
    let display = path.as_ref().display().to_string();
    let bytes = std::fs::read(path.as_ref())?;
    let fail = |msg: String| CldError::Format {
        path: display.clone(),
        msg,
    };
    if bytes.len() < 17 {
        return Err(fail("file shorter than header".to_string()));
    }
    if bytes[0..4] != CLD1_MAGIC {
        return Err(fail(format!("bad magic {:02x?}", &bytes[0..4])));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let n = u32_at(4);
    let dim = u32_at(8);
    let num_classes = u32_at(12);
    let kind = match bytes[16] {
        0 => DataKind::Vector,
        1 => DataKind::Image32x32x3,
        other => return Err(fail(format!("unknown kind byte {other}"))),
    };
    let record = 4 + 4 * dim;
    let expect = 17 + n * record;
    if bytes.len() != expect {
        return Err(fail(format!(
            "expected {expect} bytes for {n} records, found {}",
            bytes.len()
        )));
    }
    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for rec in 0..n {
        let base = 17 + rec * record;
        let label = u32_at(base);
        if label >= num_classes {
            return Err(fail(format!("record {rec}: label {label} >= {num_classes}")));
        }
        let mut sample = Vec::with_capacity(dim);
        for d in 0..dim {
            let off = base + 4 + 4 * d;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(fail(format!("record {rec}: non-finite value at dim {d}")));
            }
            sample.push(v as f64);
        }
        samples.push(sample);
        labels.push(label);
    }
    Dataset::new(samples, labels, num_classes, kind)
}
