//! Test-time image corruptions on `[0, 1]` images.
//!
//! Every corruption is a pure function of the image, its parameters and the
//! random generator state, and its output is clipped back to `[0, 1]`. The
//! `*_unclipped` variants expose the raw sample for statistical checks.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_PEAK: u32 = 255;

/// Below this rate Poisson variates are drawn by inverting the CDF; above
/// it a rounded normal approximation is used.
const POISSON_INVERSION_LIMIT: f64 = 30.0;

fn default_peak() -> u32 {
    DEFAULT_PEAK
}

/// One corruption and its parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Perturbation {
    None,
    /// Additive zero-mean Gaussian noise with the given variance.
    Gaussian { variance: f64 },
    /// Multiplicative noise `I + I n`, `n` Gaussian with the given variance.
    Speckle { variance: f64 },
    /// `(I - 0.5) C + 0.5`.
    Contrast { contrast: f64 },
    /// Contrast change followed by photon-count noise `Poisson(I_C peak) / peak`.
    Poisson {
        contrast: f64,
        #[serde(default = "default_peak")]
        peak: u32,
    },
}

/// A corruption together with the seed that drives it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    #[serde(flatten)]
    pub perturbation: Perturbation,
    pub seed: u64,
}

impl Perturbation {
    /// Name used in reports and grid strings.
    pub fn kind(&self) -> &'static str {
        match self {
            Perturbation::None => "none",
            Perturbation::Gaussian { .. } => "gaussian",
            Perturbation::Speckle { .. } => "speckle",
            Perturbation::Contrast { .. } => "contrast",
            Perturbation::Poisson { .. } => "poisson",
        }
    }

    /// Sort rank of the kind in reports.
    pub fn kind_rank(&self) -> u8 {
        match self {
            Perturbation::None => 0,
            Perturbation::Gaussian { .. } => 1,
            Perturbation::Speckle { .. } => 2,
            Perturbation::Contrast { .. } => 3,
            Perturbation::Poisson { .. } => 4,
        }
    }

    /// The swept parameter: variance or contrast, 0 for `None`.
    pub fn param(&self) -> f64 {
        match *self {
            Perturbation::None => 0.0,
            Perturbation::Gaussian { variance } | Perturbation::Speckle { variance } => variance,
            Perturbation::Contrast { contrast } | Perturbation::Poisson { contrast, .. } => contrast,
        }
    }

    /// Builds a perturbation from its kind name and parameter.
    pub fn from_kind(kind: &str, param: f64) -> Result<Self> {
        let p = match kind {
            "none" => Perturbation::None,
            "gaussian" => Perturbation::Gaussian { variance: param },
            "speckle" => Perturbation::Speckle { variance: param },
            "contrast" => Perturbation::Contrast { contrast: param },
            "poisson" => Perturbation::Poisson {
                contrast: param,
                peak: DEFAULT_PEAK,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown perturbation kind {other:?} (expected none, gaussian, speckle, contrast or poisson)"
                )))
            }
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Perturbation::None => Ok(()),
            Perturbation::Gaussian { variance } | Perturbation::Speckle { variance } => {
                check_variance(self.kind(), variance)
            }
            Perturbation::Contrast { contrast } => check_contrast("contrast", contrast),
            Perturbation::Poisson { contrast, peak } => {
                check_contrast("poisson", contrast)?;
                check_peak(peak)
            }
        }
    }

    /// Applies the corruption to a `[0, 1]` image.
    pub fn apply<R: Rng + ?Sized>(&self, image: &Tensor<f32>, rng: &mut R) -> Result<Tensor<f32>> {
        match *self {
            Perturbation::None => Ok(image.clone()),
            Perturbation::Gaussian { variance } => apply_gaussian(image, variance, rng),
            Perturbation::Speckle { variance } => apply_speckle(image, variance, rng),
            Perturbation::Contrast { contrast } => apply_contrast(image, contrast),
            Perturbation::Poisson { contrast, peak } => apply_poisson_after_contrast(image, contrast, rng, peak),
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::None => f.write_str("none"),
            other => write!(f, "{}:{}", other.kind(), other.param()),
        }
    }
}

impl PerturbationSpec {
    pub fn apply(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.perturbation.apply(image, &mut rng)
    }
}

/// Seed for corrupting one test image, derived from the run's master seed,
/// the corruption and the image index so every model sees identical noise.
pub fn image_seed(master: u64, perturbation: &Perturbation, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(perturbation.kind().as_bytes());
    h.update(perturbation.param().to_bits().to_le_bytes());
    if let Perturbation::Poisson { peak, .. } = perturbation {
        h.update(peak.to_le_bytes());
    }
    h.update((index as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn check_variance(op: &'static str, variance: f64) -> Result<()> {
    if variance >= 0.0 && variance.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(op, format!("variance must be non-negative, got {variance}")))
    }
}

fn check_contrast(op: &'static str, contrast: f64) -> Result<()> {
    if contrast > 0.0 && contrast.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(op, format!("contrast must be positive, got {contrast}")))
    }
}

fn check_peak(peak: u32) -> Result<()> {
    if peak > 0 {
        Ok(())
    } else {
        Err(Error::domain("poisson", "peak must be positive"))
    }
}

/// Fails unless every pixel lies in `[0, 1]`, which is also how normalized
/// images are caught before they are corrupted.
pub fn check_unit_range(image: &Tensor<f32>, op: &'static str) -> Result<()> {
    match image.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        None => Ok(()),
        Some(i) => Err(Error::domain(
            op,
            format!(
                "pixel {i} has value {} outside [0, 1]; corrupt images before normalizing them",
                image.data()[i]
            ),
        )),
    }
}

fn clip(image: Tensor<f32>) -> Tensor<f32> {
    image.map(|v| v.clamp(0.0, 1.0))
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// `image + n` with `n ~ N(0, variance)` per pixel, not clipped.
pub fn gaussian_unclipped<R: Rng + ?Sized>(image: &Tensor<f32>, variance: f64, rng: &mut R) -> Result<Tensor<f32>> {
    check_variance("gaussian", variance)?;
    check_unit_range(image, "gaussian")?;
    if variance == 0.0 {
        return Ok(image.clone());
    }
    let sigma = variance.sqrt();
    Ok(image.map(|v| (v as f64 + sigma * normal(rng)) as f32))
}

pub fn apply_gaussian<R: Rng + ?Sized>(image: &Tensor<f32>, variance: f64, rng: &mut R) -> Result<Tensor<f32>> {
    gaussian_unclipped(image, variance, rng).map(clip)
}

/// `image + image * n` with `n ~ N(0, variance)` per pixel, not clipped.
pub fn speckle_unclipped<R: Rng + ?Sized>(image: &Tensor<f32>, variance: f64, rng: &mut R) -> Result<Tensor<f32>> {
    check_variance("speckle", variance)?;
    check_unit_range(image, "speckle")?;
    if variance == 0.0 {
        return Ok(image.clone());
    }
    let sigma = variance.sqrt();
    Ok(image.map(|v| {
        let x = v as f64;
        (x + x * sigma * normal(rng)) as f32
    }))
}

pub fn apply_speckle<R: Rng + ?Sized>(image: &Tensor<f32>, variance: f64, rng: &mut R) -> Result<Tensor<f32>> {
    speckle_unclipped(image, variance, rng).map(clip)
}

/// `clip((image - 0.5) * contrast + 0.5)`.
pub fn apply_contrast(image: &Tensor<f32>, contrast: f64) -> Result<Tensor<f32>> {
    check_contrast("contrast", contrast)?;
    check_unit_range(image, "contrast")?;
    if contrast == 1.0 {
        return Ok(image.clone());
    }
    Ok(clip(image.map(|v| ((v as f64 - 0.5) * contrast + 0.5) as f32)))
}

/// Poisson variate with rate `lambda`.
pub fn sample_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    if lambda < POISSON_INVERSION_LIMIT {
        let u: f64 = rng.random();
        let mut k = 0u64;
        let mut p = (-lambda).exp();
        let mut cdf = p;
        while u > cdf {
            k += 1;
            p *= lambda / k as f64;
            cdf += p;
            if p == 0.0 {
                break;
            }
        }
        k
    } else {
        (lambda + lambda.sqrt() * normal(rng)).round().max(0.0) as u64
    }
}

/// `Poisson(contrast(image) * peak) / peak` per pixel, not clipped.
pub fn poisson_unclipped<R: Rng + ?Sized>(
    image: &Tensor<f32>,
    contrast: f64,
    rng: &mut R,
    peak: u32,
) -> Result<Tensor<f32>> {
    check_peak(peak)?;
    let adjusted = apply_contrast(image, contrast)?;
    let peak = peak as f64;
    Ok(adjusted.map(|v| (sample_poisson(v as f64 * peak, rng) as f64 / peak) as f32))
}

pub fn apply_poisson_after_contrast<R: Rng + ?Sized>(
    image: &Tensor<f32>,
    contrast: f64,
    rng: &mut R,
    peak: u32,
) -> Result<Tensor<f32>> {
    poisson_unclipped(image, contrast, rng, peak).map(clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MILLION: usize = 1_000_000;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn gray(value: f32, n: usize) -> Tensor<f32> {
        Tensor::full(vec![n], value)
    }

    fn variance_of_difference(out: &Tensor<f32>, input: &Tensor<f32>) -> f64 {
        let d: Vec<f64> = out.data().iter().zip(input.data()).map(|(&a, &b)| a as f64 - b as f64).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64
    }

    #[test]
    fn zero_variance_is_identity() {
        let img = Tensor::from_fn(vec![100], |i| i as f32 / 99.0);
        assert_eq!(apply_gaussian(&img, 0.0, &mut rng(1)).unwrap(), img);
        assert_eq!(apply_speckle(&img, 0.0, &mut rng(1)).unwrap(), img);
    }

    #[test]
    fn gaussian_variance_estimate() {
        let img = gray(0.5, MILLION);
        let out = gaussian_unclipped(&img, 0.2, &mut rng(2)).unwrap();
        let v = variance_of_difference(&out, &img);
        assert!((v / 0.2 - 1.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn speckle_variance_estimate() {
        let img = gray(0.5, MILLION);
        let out = speckle_unclipped(&img, 0.2, &mut rng(3)).unwrap();
        let v = variance_of_difference(&out, &img);
        assert!((v / (0.25 * 0.2) - 1.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn speckle_keeps_black_pixels_black() {
        let img = gray(0.0, 1000);
        for variance in [0.01, 0.5, 4.0] {
            assert!(apply_speckle(&img, variance, &mut rng(4)).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn contrast_formula() {
        let img = Tensor::new(vec![3], vec![0.7f32, 0.5, 0.2]).unwrap();
        assert_eq!(apply_contrast(&img, 1.0).unwrap(), img);
        let out = apply_contrast(&img, 0.5).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-6);
        for c in [0.1, 0.5, 2.0, 7.0] {
            assert_eq!(apply_contrast(&img, c).unwrap().data()[1], 0.5);
        }
        assert_eq!(apply_contrast(&img, 10.0).unwrap().data(), &[1.0, 0.5, 0.0]);
    }

    #[test]
    fn parameter_errors() {
        let img = gray(0.5, 4);
        assert!(apply_gaussian(&img, -0.1, &mut rng(0)).is_err());
        assert!(apply_speckle(&img, -1.0, &mut rng(0)).is_err());
        assert!(apply_contrast(&img, 0.0).is_err());
        assert!(apply_poisson_after_contrast(&img, 1.0, &mut rng(0), 0).is_err());
        assert!(Perturbation::from_kind("blur", 1.0).is_err());
    }

    #[test]
    fn normalized_images_are_rejected() {
        let img = Tensor::new(vec![2], vec![-0.4f32, 2.8]).unwrap();
        assert!(matches!(apply_gaussian(&img, 0.1, &mut rng(0)), Err(Error::Domain { .. })));
    }

    #[test]
    fn poisson_of_black_is_black() {
        let img = gray(0.0, 1000);
        assert!(apply_poisson_after_contrast(&img, 1.0, &mut rng(5), 255).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn poisson_mean_matches_rate() {
        // one low-rate and one high-rate level to cover both samplers
        for (level, seed) in [(0.05f32, 6), (0.7, 7)] {
            let img = gray(level, MILLION);
            let adjusted = apply_contrast(&img, 1.0).unwrap();
            let out = poisson_unclipped(&img, 1.0, &mut rng(seed), 255).unwrap();
            let mean_out = out.data().iter().map(|&v| v as f64).sum::<f64>() / MILLION as f64;
            let mean_in = adjusted.data().iter().map(|&v| v as f64).sum::<f64>() / MILLION as f64;
            assert!((mean_out / mean_in - 1.0).abs() < 0.01, "{mean_out} vs {mean_in}");
        }
    }

    #[test]
    fn large_peak_is_nearly_noiseless() {
        let img = gray(0.5, 10_000);
        let out = apply_poisson_after_contrast(&img, 1.0, &mut rng(8), 100_000).unwrap();
        let worst = out.data().iter().map(|&v| (v - 0.5).abs()).fold(0.0f32, f32::max);
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn small_rate_sampler_matches_moments() {
        let mut r = rng(9);
        let n = 200_000;
        let samples: Vec<f64> = (0..n).map(|_| sample_poisson(3.5, &mut r) as f64).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 3.5).abs() < 0.03 && (var - 3.5).abs() < 0.08, "{mean} {var}");
    }

    #[test]
    fn seeds_differ_by_cell_and_index() {
        let g = Perturbation::Gaussian { variance: 0.1 };
        let s = Perturbation::Speckle { variance: 0.1 };
        assert_eq!(image_seed(1, &g, 3), image_seed(1, &g, 3));
        assert_ne!(image_seed(1, &g, 3), image_seed(1, &g, 4));
        assert_ne!(image_seed(1, &g, 3), image_seed(1, &s, 3));
        assert_ne!(image_seed(1, &g, 3), image_seed(2, &g, 3));
    }

    #[test]
    fn serde_form() {
        let spec = PerturbationSpec {
            perturbation: Perturbation::Poisson { contrast: 0.5, peak: 255 },
            seed: 3,
        };
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"kind":"poisson","contrast":0.5,"peak":255,"seed":3}"#);
        assert_eq!(serde_json::from_str::<PerturbationSpec>(&json).unwrap(), spec);
    }

    fn any_perturbation() -> impl Strategy<Value = Perturbation> {
        prop_oneof![
            Just(Perturbation::None),
            (0.0f64..1.0).prop_map(|variance| Perturbation::Gaussian { variance }),
            (0.0f64..1.0).prop_map(|variance| Perturbation::Speckle { variance }),
            (0.05f64..4.0).prop_map(|contrast| Perturbation::Contrast { contrast }),
            (0.05f64..4.0, 1u32..1000).prop_map(|(contrast, peak)| Perturbation::Poisson { contrast, peak }),
        ]
    }

    proptest! {
        #[test]
        fn outputs_stay_in_range_and_are_reproducible(
            p in any_perturbation(),
            seed in any::<u64>(),
            pixels in prop::collection::vec(0.0f32..=1.0, 1..200),
        ) {
            let img = Tensor::new(vec![pixels.len()], pixels).unwrap();
            let spec = PerturbationSpec { perturbation: p, seed };
            let a = spec.apply(&img).unwrap();
            let b = spec.apply(&img).unwrap();
            prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            if p == Perturbation::None {
                prop_assert_eq!(a, img);
            }
        }
    }
}
