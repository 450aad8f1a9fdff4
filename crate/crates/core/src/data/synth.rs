//! Seeded synthetic segmentation cases: thresholded Gaussian-bump blobs on
//! a flat background, one intensity level per class, additive noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{case_name, write_case, write_manifest, Case, Manifest, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_cases: usize,
    pub val_cases: usize,
    pub test_cases: usize,
    pub size: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    /// Allowed pixel fraction of every foreground class in every case.
    pub min_fraction: f64,
    pub max_fraction: f64,
    pub min_blobs: usize,
    pub max_blobs: usize,
}

impl SynthConfig {
    /// Validation and test splits default to a fifth of the training count.
    pub fn new(seed: u64, cases: usize, size: usize, classes: usize, noise_sigma: f64) -> Self {
        Self {
            seed,
            train_cases: cases,
            val_cases: (cases / 5).max(1),
            test_cases: (cases / 5).max(1),
            size,
            classes,
            noise_sigma,
            min_fraction: 0.05,
            max_fraction: 0.40,
            min_blobs: 1,
            max_blobs: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 8 {
            return Err(Error::Config(format!("classes must be in 2..=8, got {}", self.classes)));
        }
        if self.size == 0 || self.size % 32 != 0 {
            return Err(Error::Config(format!("image size {} must be a positive multiple of 32", self.size)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise sigma {} must be non-negative", self.noise_sigma)));
        }
        if !(0.0 < self.min_fraction && self.min_fraction < self.max_fraction && self.max_fraction <= 1.0)
            || self.min_fraction * (self.classes - 1) as f64 > 1.0
        {
            return Err(Error::Config("invalid class fraction band".into()));
        }
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return Err(Error::Config("invalid blob count range".into()));
        }
        Ok(())
    }

    pub fn cases(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_cases,
            Split::Val => self.val_cases,
            Split::Test => self.test_cases,
        }
    }
}

/// Pre-noise intensity of each class, evenly spread over `[0.15, 0.85]`.
pub fn class_levels(classes: usize) -> Vec<f64> {
    (0..classes).map(|k| 0.15 + 0.7 * k as f64 / (classes - 1) as f64).collect()
}

/// Largest per-case jitter that keeps neighbouring levels 0.15 apart.
fn level_jitter(classes: usize) -> f64 {
    let gap = 0.7 / (classes - 1) as f64;
    ((gap - 0.15) / 2.0).clamp(0.0, 0.05)
}

fn case_rng(seed: u64, split: Split, index: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.code() << 40) | ((index as u64) << 2) | purpose);
    rng
}

fn sample_labels(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Option<Vec<u8>> {
    let n = cfg.size;
    let nf = n as f64;
    let mut best = vec![0.0f64; n * n];
    let mut label = vec![0u8; n * n];
    for c in 1..cfg.classes {
        let blobs = rng.random_range(cfg.min_blobs..=cfg.max_blobs);
        let mut field = vec![0.0f64; n * n];
        for _ in 0..blobs {
            let cy = rng.random_range(0.15..0.85) * nf;
            let cx = rng.random_range(0.15..0.85) * nf;
            let r = rng.random_range(0.06..0.13) * nf;
            let inv = 1.0 / (2.0 * r * r);
            for y in 0..n {
                for x in 0..n {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    field[y * n + x] += (-(dy * dy + dx * dx) * inv).exp();
                }
            }
        }
        for k in 0..n * n {
            if field[k] > 0.5 && field[k] > best[k] {
                best[k] = field[k];
                label[k] = c as u8;
            }
        }
    }
    let total = (n * n) as f64;
    let ok = (1..cfg.classes).all(|c| {
        let f = label.iter().filter(|&&v| v as usize == c).count() as f64 / total;
        (cfg.min_fraction..=cfg.max_fraction).contains(&f)
    });
    ok.then_some(label)
}

/// Clamped additive Gaussian noise.
pub fn add_noise(image: &mut [f32], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let dist = Normal::new(0.0, sigma).expect("finite sigma");
    for v in image.iter_mut() {
        *v = (*v as f64 + dist.sample(rng)).clamp(0.0, 1.0) as f32;
    }
}

/// One case. Labels and intensities depend only on `(seed, split, index)`;
/// noise comes from a separate stream, so datasets that differ only in
/// `noise_sigma` share their label maps.
pub fn generate_case(cfg: &SynthConfig, split: Split, index: usize) -> Result<Case> {
    let mut rng = case_rng(cfg.seed, split, index, 0);
    let mut label = None;
    for _ in 0..10_000 {
        if let Some(l) = sample_labels(cfg, &mut rng) {
            label = Some(l);
            break;
        }
    }
    let label = label.ok_or_else(|| Error::Config("could not satisfy the class fraction band".into()))?;
    let jitter = level_jitter(cfg.classes);
    let levels: Vec<f64> = class_levels(cfg.classes)
        .into_iter()
        .map(|l| if jitter > 0.0 { l + rng.random_range(-jitter..=jitter) } else { l })
        .collect();
    let mut image: Vec<f32> = label.iter().map(|&c| levels[c as usize] as f32).collect();
    add_noise(&mut image, cfg.noise_sigma, &mut case_rng(cfg.seed, split, index, 1));
    Ok(Case { id: case_name(index), image, label, edges: None })
}

/// Writes all splits, then the manifest.
pub fn generate_synthetic(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    for split in Split::ALL {
        for i in 0..cfg.cases(split) {
            write_case(out, split, &generate_case(cfg, split, i)?, cfg.size)?;
        }
    }
    let manifest = Manifest {
        num_classes: cfg.classes,
        image_size: cfg.size,
        splits: Split::ALL.iter().map(|&s| (s, cfg.cases(s))).collect(),
        seed: Some(cfg.seed),
        noise_sigma: Some(cfg.noise_sigma),
    };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractions_within_band_and_deterministic() {
        let cfg = SynthConfig::new(7, 10, 64, 3, 0.05);
        for i in 0..10 {
            let a = generate_case(&cfg, Split::Train, i).unwrap();
            for c in 1..3u8 {
                let f = a.label.iter().filter(|&&v| v == c).count() as f64 / 4096.0;
                assert!((0.05..=0.40).contains(&f), "case {i} class {c}: {f}");
            }
            assert_eq!(a, generate_case(&cfg, Split::Train, i).unwrap());
        }
        assert_ne!(generate_case(&cfg, Split::Train, 0).unwrap().label, generate_case(&cfg, Split::Val, 0).unwrap().label);
    }

    #[test]
    fn zero_noise_is_piecewise_constant() {
        let cfg = SynthConfig::new(3, 1, 32, 4, 0.0);
        let c = generate_case(&cfg, Split::Train, 0).unwrap();
        let mut level = [None; 4];
        for (&l, &v) in c.label.iter().zip(&c.image) {
            let slot = &mut level[l as usize];
            assert_eq!(*slot.get_or_insert(v), v);
        }
        let known: Vec<f32> = level.iter().flatten().copied().collect();
        for (i, a) in known.iter().enumerate() {
            for b in &known[i + 1..] {
                assert!((a - b).abs() >= 0.15 - 1e-6);
            }
        }
    }

    #[test]
    fn noise_level_does_not_change_labels() {
        let a = generate_case(&SynthConfig::new(5, 1, 64, 3, 0.05), Split::Test, 2).unwrap();
        let b = generate_case(&SynthConfig::new(5, 1, 64, 3, 0.15), Split::Test, 2).unwrap();
        assert_eq!(a.label, b.label);
        assert_ne!(a.image, b.image);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(SynthConfig::new(0, 1, 48, 3, 0.0).validate().is_err());
        assert!(SynthConfig::new(0, 1, 64, 1, 0.0).validate().is_err());
        assert!(SynthConfig::new(0, 1, 64, 3, -1.0).validate().is_err());
    }
}
