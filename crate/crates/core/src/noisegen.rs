//! Background noise for raw samples: smooth sinusoidal fields inside a few
//! disjoint square patches, then a global uniform bias plus an i.i.d.
//! Gaussian field. Labels are never touched. Values are clipped to `[0, 1]`
//! after each stage.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::DatasetVariant;
use crate::error::{ConfigError, GenerateError};
use crate::raster::GrayImage;
use crate::rng::{stream_rng, STREAM_NOISE};
use crate::synthgen::{generate_raw, GeneratorConfig, Sample};

/// Placement attempts per requested patch.
pub const PATCH_RETRIES: u32 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub noise_mean: f64,
    pub noise_sigma: f64,
    /// Exclusive upper bound on the number of sine patches.
    pub max_patches: usize,
    pub patch_size: usize,
    /// Angular frequency of the patch field, radians per pixel.
    pub frequency: f64,
    pub amplitude: f64,
    pub bias_range: [f64; 2],
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::for_variant(DatasetVariant::Two)
    }
}

impl NoiseConfig {
    pub fn for_variant(variant: DatasetVariant) -> Self {
        match variant {
            DatasetVariant::One => Self {
                noise_mean: 0.08,
                noise_sigma: 0.04,
                max_patches: 5,
                patch_size: 48,
                frequency: 2.0 * PI / 24.0,
                amplitude: 0.08,
                bias_range: [0.0, 0.2],
                seed: 0,
            },
            DatasetVariant::Two => Self {
                noise_mean: 0.12,
                noise_sigma: 0.08,
                max_patches: 5,
                patch_size: 48,
                frequency: 2.0 * PI / 16.0,
                amplitude: 0.15,
                bias_range: [0.0, 0.2],
                seed: 0,
            },
        }
    }

    /// A configuration under which both noise stages are exact identities.
    pub fn identity() -> Self {
        Self {
            noise_mean: 0.0,
            noise_sigma: 0.0,
            max_patches: 0,
            patch_size: 1,
            frequency: 1.0,
            amplitude: 0.0,
            bias_range: [0.0, 0.0],
            seed: 0,
        }
    }

    pub fn validate(&self, image_size: usize) -> Result<(), ConfigError> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(ConfigError::new("noise_sigma", "must be >= 0"));
        }
        if !self.noise_mean.is_finite() {
            return Err(ConfigError::new("noise_mean", "must be finite"));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(ConfigError::new("amplitude", "must be >= 0"));
        }
        if !(self.frequency > 0.0 && self.frequency.is_finite()) {
            return Err(ConfigError::new("frequency", "must be > 0"));
        }
        if self.patch_size == 0 || self.patch_size > image_size {
            return Err(ConfigError::new(
                "patch_size",
                format!("must be in [1, {image_size}], got {}", self.patch_size),
            ));
        }
        let [lo, hi] = self.bias_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(ConfigError::new("bias_range", format!("need lo <= hi, got [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// Axis-aligned square patch; `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patch {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl Patch {
    pub fn intersects(&self, other: &Patch) -> bool {
        self.x < other.x + other.size
            && other.x < self.x + self.size
            && self.y < other.y + other.size
            && other.y < self.y + self.size
    }
}

/// Adds `n_g + b` to every pixel: `b` is one uniform scalar from
/// `bias_range`, `n_g` an i.i.d. normal field with the configured mean and
/// standard deviation.
pub fn add_global_noise<R: Rng + ?Sized>(image: &mut GrayImage, cfg: &NoiseConfig, rng: &mut R) {
    let [lo, hi] = cfg.bias_range;
    let bias = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    for v in image.as_mut_slice() {
        let z: f64 = StandardNormal.sample(rng);
        let n = cfg.noise_mean + cfg.noise_sigma * z;
        *v = (f64::from(*v) + n + bias).clamp(0.0, 1.0) as f32;
    }
}

/// Picks `n ~ U{0, .., max_patches - 1}` pairwise-disjoint patches by
/// rejection sampling. Returns fewer when the placement budget runs out.
pub fn select_patches<R: Rng + ?Sized>(
    rng: &mut R,
    image_size: usize,
    patch_size: usize,
    max_patches: usize,
) -> Vec<Patch> {
    if max_patches == 0 || patch_size == 0 || patch_size > image_size {
        return Vec::new();
    }
    let wanted = rng.random_range(0..max_patches);
    let span = image_size - patch_size;
    let mut patches: Vec<Patch> = Vec::with_capacity(wanted);
    'outer: for _ in 0..wanted {
        for _ in 0..PATCH_RETRIES {
            let cand = Patch {
                x: rng.random_range(0..=span),
                y: rng.random_range(0..=span),
                size: patch_size,
            };
            if patches.iter().all(|p| !p.intersects(&cand)) {
                patches.push(cand);
                continue 'outer;
            }
        }
        log::debug!("placed {} of {wanted} patches before the retry budget ran out", patches.len());
        break;
    }
    patches
}

/// Adds `amplitude * sin(frequency * d + phase)` over one patch, where `d`
/// is the Euclidean distance from the patch's top-left corner.
pub fn apply_sine_patch(image: &mut GrayImage, patch: Patch, amplitude: f64, frequency: f64, phase: f64) {
    let x_end = (patch.x + patch.size).min(image.width());
    let y_end = (patch.y + patch.size).min(image.height());
    for y in patch.y..y_end {
        for x in patch.x..x_end {
            let dx = (x - patch.x) as f64;
            let dy = (y - patch.y) as f64;
            let d = (dx * dx + dy * dy).sqrt();
            let v = f64::from(image.get(x, y)) + amplitude * (frequency * d + phase).sin();
            image.set(x, y, v.clamp(0.0, 1.0) as f32);
        }
    }
}

/// One uniform phase per patch, then [`apply_sine_patch`].
pub fn add_local_sine<R: Rng + ?Sized>(image: &mut GrayImage, patches: &[Patch], cfg: &NoiseConfig, rng: &mut R) {
    for &p in patches {
        let phase = rng.random_range(0.0..2.0 * PI);
        if cfg.amplitude == 0.0 {
            continue;
        }
        apply_sine_patch(image, p, cfg.amplitude, cfg.frequency, phase);
    }
}

/// Full training sample: raw lines, then local sine patches, then global
/// noise. The label comes from the raw stage unchanged.
pub fn make_sample(gen_cfg: &GeneratorConfig, noise_cfg: &NoiseConfig, seed: u64) -> Result<Sample, GenerateError> {
    noise_cfg.validate(gen_cfg.image_size)?;
    let mut sample = generate_raw(gen_cfg, seed)?;
    let mut rng = stream_rng(seed, STREAM_NOISE);
    let patches = select_patches(&mut rng, gen_cfg.image_size, noise_cfg.patch_size, noise_cfg.max_patches);
    add_local_sine(&mut sample.image, &patches, noise_cfg, &mut rng);
    add_global_noise(&mut sample.image, noise_cfg, &mut rng);
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn ramp(size: usize) -> GrayImage {
        let data = (0..size * size).map(|i| (i % 97) as f32 / 96.0).collect();
        GrayImage::from_vec(size, size, data).unwrap()
    }

    #[test]
    fn zero_global_noise_is_identity() {
        let mut img = ramp(32);
        let before = img.clone();
        add_global_noise(&mut img, &NoiseConfig::identity(), &mut stream_rng(1, 1));
        assert_eq!(img, before);
    }

    #[test]
    fn deterministic_shift() {
        let cfg = NoiseConfig {
            noise_mean: 0.1,
            bias_range: [0.05, 0.05],
            ..NoiseConfig::identity()
        };
        let mut img = ramp(32);
        let before = img.clone();
        add_global_noise(&mut img, &cfg, &mut stream_rng(1, 1));
        for (a, b) in img.as_slice().iter().zip(before.as_slice()) {
            let expect = (f64::from(*b) + 0.1 + 0.05).clamp(0.0, 1.0) as f32;
            assert_eq!(*a, expect);
        }
    }

    #[test]
    fn global_noise_mean_concentrates() {
        // Mean of 16384 i.i.d. N(0.1, 0.05^2): std of the mean is 0.05/128.
        // Clipping at 0 shifts the mean by < 1e-6 at 2 sigma below 0.1.
        let cfg = NoiseConfig {
            noise_mean: 0.1,
            noise_sigma: 0.05,
            bias_range: [0.0, 0.2],
            ..NoiseConfig::identity()
        };
        let mut rng = stream_rng(77, 1);
        let mut probe = rng.clone();
        let bias: f64 = probe.random_range(0.0..=0.2);
        let mut img = GrayImage::new(128, 128);
        add_global_noise(&mut img, &cfg, &mut rng);
        assert!((img.mean() - (0.1 + bias)).abs() < 4.0 * 0.05 / 128.0, "{} vs {}", img.mean(), 0.1 + bias);
    }

    #[test]
    fn single_slot_yields_no_patches() {
        let mut rng = stream_rng(3, 1);
        for _ in 0..200 {
            assert!(select_patches(&mut rng, 64, 16, 1).is_empty());
        }
    }

    #[test]
    fn full_frame_patches_never_exceed_one() {
        let mut rng = stream_rng(4, 1);
        for _ in 0..500 {
            let ps = select_patches(&mut rng, 64, 64, 5);
            assert!(ps.len() <= 1);
        }
    }

    #[test]
    fn zero_amplitude_sine_is_identity() {
        let mut img = ramp(64);
        let before = img.clone();
        let cfg = NoiseConfig {
            amplitude: 0.0,
            ..NoiseConfig::default()
        };
        let patches = [Patch { x: 3, y: 5, size: 20 }];
        add_local_sine(&mut img, &patches, &cfg, &mut stream_rng(0, 1));
        assert_eq!(img, before);
    }

    #[test]
    fn sine_origin_gets_zero_at_zero_phase() {
        let mut img = GrayImage::filled(40, 40, 0.5);
        apply_sine_patch(&mut img, Patch { x: 4, y: 4, size: 32 }, 0.2, 0.3, 0.0);
        assert_eq!(img.get(4, 4), 0.5);
        assert_eq!(img.get(0, 0), 0.5);
        let expect = (0.5 + 0.2 * (0.3f64).sin()) as f32;
        assert_eq!(img.get(5, 4), expect);
    }

    #[test]
    fn sine_diagonal_covers_two_periods() {
        // Oracle: evaluate the field directly along the diagonal and count
        // upward zero crossings of the added component.
        let (a, w) = (0.2, 2.0 * PI / 16.0);
        let mut img = GrayImage::filled(32, 32, 0.5);
        apply_sine_patch(&mut img, Patch { x: 0, y: 0, size: 32 }, a, w, 0.0);
        let diag: Vec<f64> = (0..32).map(|i| f64::from(img.get(i, i)) - 0.5).collect();
        let diag_len = 31.0 * 2f64.sqrt();
        assert!(diag_len * w / (2.0 * PI) >= 2.0);
        let rises = diag.windows(2).filter(|p| p[0] < 0.0 && p[1] >= 0.0).count();
        assert!(rises >= 2, "{rises}");
        let (mn, mx) = diag.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(mx - mn > 1.9 * a, "{}", mx - mn);
    }

    #[test]
    fn make_sample_with_identity_noise_equals_raw() {
        let g = GeneratorConfig::default();
        let raw = generate_raw(&g, 9).unwrap();
        let s = make_sample(&g, &NoiseConfig::identity(), 9).unwrap();
        assert_eq!(raw, s);
    }

    #[test]
    fn noise_leaves_labels_and_range_alone() {
        let g = GeneratorConfig::for_variant(DatasetVariant::Two);
        let n = NoiseConfig::for_variant(DatasetVariant::Two);
        for seed in 0..10 {
            let raw = generate_raw(&g, seed).unwrap();
            let s = make_sample(&g, &n, seed).unwrap();
            assert_eq!(raw.label, s.label);
            assert!(s.image.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn invalid_noise_config() {
        let g = GeneratorConfig::default();
        let bad = NoiseConfig {
            patch_size: 500,
            ..NoiseConfig::default()
        };
        assert!(matches!(make_sample(&g, &bad, 0), Err(GenerateError::Config(e)) if e.parameter == "patch_size"));
        let bad = NoiseConfig {
            frequency: 0.0,
            ..NoiseConfig::default()
        };
        assert!(bad.validate(128).is_err());
    }
}
