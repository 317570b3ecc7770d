//! CIFAR binary ingestion, normalization/augmentation and a synthetic dataset.
//!
//! Records keep their raw bytes so that parsing can be checked bit-exactly by
//! re-serializing.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::spm::Mode;

pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
const CIFAR_PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarKind {
    Cifar10,
    Cifar100,
}

impl CifarKind {
    pub fn record_len(self) -> usize {
        match self {
            CifarKind::Cifar10 => 1 + CIFAR_PIXELS,
            CifarKind::Cifar100 => 2 + CIFAR_PIXELS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 10,
            CifarKind::Cifar100 => 100,
        }
    }

    pub fn train_files(self) -> Vec<String> {
        match self {
            CifarKind::Cifar10 => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            CifarKind::Cifar100 => vec!["train.bin".into()],
        }
    }

    pub fn test_files(self) -> Vec<String> {
        match self {
            CifarKind::Cifar10 => vec!["test_batch.bin".into()],
            CifarKind::Cifar100 => vec!["test.bin".into()],
        }
    }
}

/// One image with its raw, un-normalized bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    /// CIFAR-100 coarse label; `None` for CIFAR-10 and synthetic data.
    pub coarse: Option<u8>,
    pub label: u8,
    /// Channel planes, row-major.
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub image_shape: [usize; 3],
    pub num_classes: usize,
    pub records: Vec<RawRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn parse_cifar(bytes: &[u8], kind: CifarKind, path: &Path) -> Result<Vec<RawRecord>> {
    let len = kind.record_len();
    if !bytes.len().is_multiple_of(len) {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            detail: format!("{} bytes is not a multiple of the {len}-byte record", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(len)
        .map(|r| match kind {
            CifarKind::Cifar10 => RawRecord {
                coarse: None,
                label: r[0],
                pixels: r[1..].to_vec(),
            },
            CifarKind::Cifar100 => RawRecord {
                coarse: Some(r[0]),
                label: r[1],
                pixels: r[2..].to_vec(),
            },
        })
        .collect())
}

/// Inverse of [`parse_cifar`].
pub fn serialize_cifar(records: &[RawRecord], kind: CifarKind) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * kind.record_len());
    for r in records {
        if kind == CifarKind::Cifar100 {
            out.push(r.coarse.unwrap_or(0));
        }
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

fn read_split(dir: &Path, files: &[String], kind: CifarKind, split: Split) -> Result<Dataset> {
    let mut records = Vec::new();
    for f in files {
        let path = dir.join(f);
        let bytes = std::fs::read(&path)?;
        records.extend(parse_cifar(&bytes, kind, &path)?);
    }
    let classes = kind.num_classes();
    if let Some(r) = records.iter().find(|r| r.label as usize >= classes) {
        return Err(Error::CorruptFile {
            path: dir.to_path_buf(),
            detail: format!("label {} out of range for {classes} classes", r.label),
        });
    }
    Ok(Dataset {
        split,
        image_shape: CIFAR_SHAPE,
        num_classes: classes,
        records,
    })
}

/// Loads `(train, test)` from the standard binary batch files in `dir`.
pub fn load_cifar(dir: &Path, kind: CifarKind) -> Result<(Dataset, Dataset)> {
    let train = kind.train_files();
    let test = kind.test_files();
    let expected: Vec<String> = train.iter().chain(&test).cloned().collect();
    if expected.iter().any(|f| !dir.join(f).is_file()) {
        return Err(Error::NotFound {
            dir: dir.to_path_buf(),
            expected,
        });
    }
    Ok((
        read_split(dir, &train, kind, Split::Train)?,
        read_split(dir, &test, kind, Split::Test)?,
    ))
}

/// Per-channel standardization constants in `[0, 1]` pixel space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.4914, 0.4822, 0.4465],
            std: [0.2470, 0.2435, 0.2616],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!("invalid normalization {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augment {
    /// Zero padding before the random crop; 0 disables cropping.
    pub crop_pad: usize,
    pub flip: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self { crop_pad: 4, flip: true }
    }
}

pub fn flip_horizontal(img: &mut [f64], shape: [usize; 3]) {
    let w = shape[2];
    for row in img.chunks_mut(w) {
        row.reverse();
    }
}

/// Crops the zero-padded image back to its size at offset `(dy, dx)` of the
/// padded frame.
pub fn padded_crop(img: &[f64], shape: [usize; 3], pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Standardizes a record; in train mode also applies the random crop and flip.
pub fn normalize_augment(
    rec: &RawRecord,
    shape: [usize; 3],
    norm: &Normalization,
    augment: &Augment,
    mode: Mode,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let plane = shape[1] * shape[2];
    let mut img: Vec<f64> = rec
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let ch = (i / plane).min(2);
            (p as f64 / 255.0 - norm.mean[ch]) / norm.std[ch]
        })
        .collect();
    if mode == Mode::Train {
        if augment.crop_pad > 0 {
            let dy = rng.gen_range(0..=2 * augment.crop_pad);
            let dx = rng.gen_range(0..=2 * augment.crop_pad);
            img = padded_crop(&img, shape, augment.crop_pad, dy, dx);
        }
        if augment.flip && rng.gen_bool(0.5) {
            flip_horizontal(&mut img, shape);
        }
    }
    img
}

/// Stacks the given records into an `[N, C, H, W]` batch.
pub fn make_batch(
    data: &Dataset,
    indices: &[usize],
    norm: &Normalization,
    augment: &Augment,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let [c, h, w] = data.image_shape;
    let mut values = Vec::with_capacity(indices.len() * c * h * w);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let rec = &data.records[i];
        values.extend(normalize_augment(rec, data.image_shape, norm, augment, mode, rng));
        labels.push(rec.label as usize);
    }
    Ok((Tensor::new(vec![indices.len(), c, h, w], values)?, labels))
}

/// Sample order for one epoch; a pure function of `(n, seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train: usize,
    pub test: usize,
    pub classes: usize,
    pub image_size: usize,
    /// Pixel noise std in `[0, 255]` units.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train: 2000,
            test: 500,
            classes: 10,
            image_size: 16,
            noise: 24.0,
        }
    }
}

struct ClassPattern {
    tint: [f64; 3],
    weight: [f64; 3],
    freq: f64,
    angle: f64,
    phase: f64,
}

fn synth_split(cfg: &SynthConfig, patterns: &[ClassPattern], n: usize, split: Split, rng: &mut ChaCha8Rng) -> Dataset {
    let s = cfg.image_size;
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite std");
    let records = (0..n)
        .map(|i| {
            let label = i % cfg.classes;
            let p = &patterns[label];
            let jitter = rng.gen_range(-0.6..0.6);
            let contrast = rng.gen_range(0.6..1.4);
            let (sin, cos) = p.angle.sin_cos();
            let mut pixels = Vec::with_capacity(3 * s * s);
            for ch in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        let t = p.freq * (x as f64 * cos + y as f64 * sin) + p.phase + jitter;
                        let v = 128.0 + 40.0 * p.tint[ch] + 50.0 * contrast * p.weight[ch] * t.cos() + noise.sample(rng);
                        pixels.push(v.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            RawRecord {
                coarse: None,
                label: label as u8,
                pixels,
            }
        })
        .collect();
    Dataset {
        split,
        image_shape: [3, s, s],
        num_classes: cfg.classes,
        records,
    }
}

/// A class colour offset of norm in `[0.5, 1]`. Saliency heads have no bias,
/// so a class whose mean colour sat on the normalization mean would give the
/// first gate a near-zero descriptor and hence near-zero saliency.
fn tint(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let norm = rng.gen_range(0.5..1.0);
    dir.map(|v| norm * v)
}

/// Class-conditional textured images: each class has a tint and an oriented
/// grating; samples add phase jitter, contrast variation and pixel noise.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    if cfg.classes == 0 || cfg.classes > 256 {
        return Err(Error::Config(format!("synthetic classes must be in 1..=256, got {}", cfg.classes)));
    }
    if cfg.train < cfg.classes {
        return Err(Error::Config(format!(
            "synthetic train size {} is smaller than the class count {}",
            cfg.train, cfg.classes
        )));
    }
    if cfg.image_size == 0 || !cfg.noise.is_finite() {
        return Err(Error::Config("synthetic image_size and noise must be positive and finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patterns: Vec<ClassPattern> = (0..cfg.classes)
        .map(|_| ClassPattern {
            tint: tint(&mut rng),
            weight: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            freq: rng.gen_range(0.3..1.5),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        })
        .collect();
    let train = synth_split(cfg, &patterns, cfg.train, Split::Train, &mut rng);
    let test = synth_split(cfg, &patterns, cfg.test, Split::Test, &mut rng);
    Ok((train, test))
}

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Synthetic,
}

pub fn load(kind: &DatasetKind, dir: Option<&PathBuf>, synth: &SynthConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let cifar = match kind {
        DatasetKind::Synthetic => return synth_dataset(synth, seed),
        DatasetKind::Cifar10 => CifarKind::Cifar10,
        DatasetKind::Cifar100 => CifarKind::Cifar100,
    };
    let dir = dir.ok_or_else(|| Error::Config("cifar datasets need `data_dir`".into()))?;
    load_cifar(dir, cifar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, value: u8) -> RawRecord {
        RawRecord {
            coarse: None,
            label,
            pixels: vec![value; CIFAR_PIXELS],
        }
    }

    #[test]
    fn record_count_from_size() {
        let bytes = serialize_cifar(&vec![record(1, 0); 10], CifarKind::Cifar10);
        assert_eq!(bytes.len(), 30_730);
        assert_eq!(parse_cifar(&bytes, CifarKind::Cifar10, Path::new("x")).unwrap().len(), 10);
    }

    #[test]
    fn layout_of_label_and_pixels() {
        let mut bytes = vec![7u8];
        bytes.extend(std::iter::repeat_n(255, CIFAR_PIXELS));
        let recs = parse_cifar(&bytes, CifarKind::Cifar10, Path::new("x")).unwrap();
        assert_eq!(recs[0].label, 7);
        assert!(recs[0].pixels.iter().all(|&p| p == 255));

        let mut bytes = vec![3u8, 42];
        bytes.extend(std::iter::repeat_n(9, CIFAR_PIXELS));
        let recs = parse_cifar(&bytes, CifarKind::Cifar100, Path::new("x")).unwrap();
        assert_eq!((recs[0].coarse, recs[0].label), (Some(3), 42));
    }

    #[test]
    fn bad_size_is_corrupt() {
        let err = parse_cifar(&[0u8; 3074], CifarKind::Cifar10, Path::new("b.bin")).unwrap_err();
        assert!(matches!(err, Error::CorruptFile { .. }));
        assert!(parse_cifar(&[0u8; 3073], CifarKind::Cifar100, Path::new("b.bin")).is_err());
    }

    #[test]
    fn eval_is_plain_normalization() {
        let norm = Normalization::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let zero = record(0, 0);
        let a = normalize_augment(&zero, CIFAR_SHAPE, &norm, &Augment::default(), Mode::Eval, &mut rng);
        for ch in 0..3 {
            let expected = -norm.mean[ch] / norm.std[ch];
            assert!(a[ch * 1024..(ch + 1) * 1024].iter().all(|&v| v == expected));
        }
        let b = normalize_augment(&zero, CIFAR_SHAPE, &norm, &Augment::default(), Mode::Eval, &mut rng);
        assert_eq!(a, b);
    }

    #[test]
    fn flip_is_an_involution_and_centre_crop_is_identity() {
        let shape = [2, 3, 4];
        let img: Vec<f64> = (0..24).map(f64::from).collect();
        let mut f = img.clone();
        flip_horizontal(&mut f, shape);
        assert_eq!(&f[..4], &[3.0, 2.0, 1.0, 0.0]);
        flip_horizontal(&mut f, shape);
        assert_eq!(f, img);
        assert_eq!(padded_crop(&img, shape, 4, 4, 4), img);
        let shifted = padded_crop(&img, shape, 1, 0, 0);
        assert_eq!(&shifted[..4], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&shifted[4..8], &[0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn synthetic_is_balanced_and_reproducible() {
        let cfg = SynthConfig {
            train: 100,
            test: 20,
            classes: 10,
            image_size: 8,
            noise: 10.0,
        };
        let (a, at) = synth_dataset(&cfg, 3).unwrap();
        let (b, bt) = synth_dataset(&cfg, 3).unwrap();
        assert_eq!((a.clone(), at), (b, bt));
        for c in 0..10u8 {
            assert_eq!(a.records.iter().filter(|r| r.label == c).count(), 10);
        }
        assert_ne!(synth_dataset(&cfg, 4).unwrap().0, a);
        let small = SynthConfig { train: 5, ..cfg };
        assert!(matches!(synth_dataset(&small, 0), Err(Error::Config(_))));
    }

    #[test]
    fn epoch_order_is_a_reproducible_permutation() {
        let a = epoch_order(50, 9, 2);
        assert_eq!(a, epoch_order(50, 9, 2));
        assert_ne!(a, epoch_order(50, 9, 3));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
