//! Seeded synthetic fluorescence scenes: Gaussian blobs on a dark
//! background with exact dot ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::annotations::{AnnotationSet, DotAnnotation, Magnification};
use crate::imaging::GrayImage;
use crate::metrics::{DensityBin, DensityBounds};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("could not place cell {placed} of {requested} without overlap after {attempts} attempts")]
    Placement {
        placed: usize,
        requested: usize,
        attempts: usize,
    },
    #[error("infeasible quota: {0}")]
    Quota(String),
}

type Result<T> = std::result::Result<T, SynthError>;

/// Log-normal parameters matching the DAPI channel's count mean and spread.
pub const DAPI_LOG_MU: f64 = 5.0438;
pub const DAPI_LOG_SIGMA: f64 = 1.0924;

#[derive(Debug, Clone, PartialEq)]
pub enum CountDistribution {
    Fixed(usize),
    /// `round(exp(N(mu, sigma)))`, clipped to `[min, max]`.
    LogNormal {
        mu: f64,
        sigma: f64,
        min: usize,
        max: usize,
    },
}

impl CountDistribution {
    /// The DAPI-like long tail with every count multiplied by `scale`.
    pub fn dapi_like(scale: f64, max: usize) -> Self {
        CountDistribution::LogNormal {
            mu: DAPI_LOG_MU + scale.ln(),
            sigma: DAPI_LOG_SIGMA,
            min: 0,
            max,
        }
    }

    fn range(&self) -> (usize, usize) {
        match *self {
            CountDistribution::Fixed(n) => (n, n),
            CountDistribution::LogNormal { min, max, .. } => (min, max),
        }
    }

    /// Panics on parameters that [`SceneSpec::validate`] rejects.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match *self {
            CountDistribution::Fixed(n) => n,
            CountDistribution::LogNormal { mu, sigma, min, max } => {
                let d = LogNormal::new(mu, sigma).expect("validated");
                (d.sample(rng).round() as usize).clamp(min, max)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub count: CountDistribution,
    /// Blob radius range in pixels; the Gaussian sigma is half the radius.
    pub radius: (f64, f64),
    /// Peak intensity range above the background.
    pub intensity: (f64, f64),
    pub background: f64,
    pub allow_overlap: bool,
    pub noise_sigma: f64,
    /// Probability that a scene is tagged as 40x rather than 20x.
    pub p_40x: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            count: CountDistribution::dapi_like(0.1, 120),
            radius: (1.5, 2.5),
            intensity: (0.5, 0.8),
            background: 0.05,
            allow_overlap: true,
            noise_sigma: 0.01,
            p_40x: 0.12,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        if let CountDistribution::LogNormal { mu, sigma, min, max } = self.count {
            if !mu.is_finite() || !(sigma > 0.0) || min > max {
                return bad(format!(
                    "log-normal count needs sigma > 0 and min <= max, got mu={mu} sigma={sigma} [{min}, {max}]"
                ));
            }
        }
        let (r0, r1) = self.radius;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return bad(format!("radius range ({r0}, {r1}) must be positive and ascending"));
        }
        let (i0, i1) = self.intensity;
        if !(i0 >= 0.0 && i0 <= i1 && i1 <= 1.0) {
            return bad(format!("intensity range ({i0}, {i1}) must be ascending within [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return bad(format!("background {} outside [0, 1]", self.background));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be non-negative", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.p_40x) {
            return bad(format!("p_40x {} outside [0, 1]", self.p_40x));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: GrayImage,
    pub dots: AnnotationSet,
    pub spec: SceneSpec,
}

impl SyntheticScene {
    pub fn count(&self) -> usize {
        self.dots.count()
    }
}

const PLACEMENT_ATTEMPTS: usize = 10_000;

/// Draws one scene using `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.count.sample(&mut rng);
    render_scene(spec, n, &mut rng)
}

fn render_scene(spec: &SceneSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<SyntheticScene> {
    let (w, h) = (spec.width, spec.height);
    let magnification = if rng.random::<f64>() < spec.p_40x {
        Magnification::X40
    } else {
        Magnification::X20
    };
    let mut blobs: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(n);
    let mut attempts = 0;
    while blobs.len() < n {
        let x = rng.random_range(0.0..w as f64);
        let y = rng.random_range(0.0..h as f64);
        let r = rng.random_range(spec.radius.0..=spec.radius.1);
        let a = rng.random_range(spec.intensity.0..=spec.intensity.1);
        if !spec.allow_overlap {
            let clash = blobs.iter().any(|&(bx, by, br, _)| (bx - x).hypot(by - y) < br + r);
            if clash {
                attempts += 1;
                if attempts >= PLACEMENT_ATTEMPTS {
                    return Err(SynthError::Placement {
                        placed: blobs.len(),
                        requested: n,
                        attempts,
                    });
                }
                continue;
            }
        }
        blobs.push((x, y, r, a));
    }

    let mut px = vec![spec.background; w * h];
    for &(bx, by, r, a) in &blobs {
        let sigma = r / 2.0;
        let reach = (3.0 * sigma).ceil() as isize + 1;
        let (cx, cy) = (bx.floor() as isize, by.floor() as isize);
        for py in (cy - reach).max(0)..(cy + reach + 1).min(h as isize) {
            for qx in (cx - reach).max(0)..(cx + reach + 1).min(w as isize) {
                // pixel centers sit at half-integer coordinates
                let dx = qx as f64 + 0.5 - bx;
                let dy = py as f64 + 0.5 - by;
                px[py as usize * w + qx as usize] += a * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated");
        for p in &mut px {
            *p += noise.sample(rng);
        }
    }
    for p in &mut px {
        *p = p.clamp(0.0, 1.0);
    }

    let dots = blobs.iter().map(|&(x, y, _, _)| DotAnnotation::new(x, y)).collect();
    let mut set = AnnotationSet::new(format!("synth_{:016x}", spec.seed), dots);
    set.magnification = magnification;
    set.image_size = Some((w as u32, h as u32));
    Ok(SyntheticScene {
        image: GrayImage::new(w, h, px).expect("pixels clamped to [0, 1]"),
        dots: set,
        spec: spec.clone(),
    })
}

/// Seed of the `index`-th scene of a corpus seeded with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    // splitmix64
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Required number of scenes per density bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinQuotas {
    pub low: usize,
    pub medium: usize,
    pub high: usize,
    pub bounds: DensityBounds,
}

impl BinQuotas {
    pub fn total(&self) -> usize {
        self.low + self.medium + self.high
    }

    /// Integer count range of `bin`, intersected with `[lo, hi]`.
    fn range(&self, bin: DensityBin, lo: usize, hi: usize) -> Option<(usize, usize)> {
        let b = self.bounds;
        let (a, z) = match bin {
            DensityBin::Low => (0, b.low_max.floor() as usize),
            DensityBin::Medium => (b.low_max.floor() as usize + 1, b.medium_max.floor() as usize),
            DensityBin::High => (b.medium_max.floor() as usize + 1, usize::MAX),
        };
        let (a, z) = (a.max(lo), z.min(hi));
        (a <= z).then_some((a, z))
    }

    fn target(&self, index: usize) -> DensityBin {
        if index < self.low {
            DensityBin::Low
        } else if index < self.low + self.medium {
            DensityBin::Medium
        } else {
            DensityBin::High
        }
    }
}

const QUOTA_REDRAWS: usize = 200;

/// Draws `n_images` scenes with per-image derived seeds. With quotas, the
/// first `low` scenes land in the low bin, the next `medium` in the medium
/// bin and the rest in the high bin: counts are redrawn from `spec.count`
/// until they fall in the bin, falling back to a uniform
/// draw over the bin's admissible range.
pub fn generate_corpus(spec: &SceneSpec, n_images: usize, quotas: Option<&BinQuotas>) -> Result<Vec<SyntheticScene>> {
    spec.validate()?;
    let (lo, hi) = spec.count.range();
    if let Some(q) = quotas {
        if q.total() != n_images {
            return Err(SynthError::Quota(format!(
                "quotas sum to {} but {n_images} images were requested",
                q.total()
            )));
        }
        for (bin, want) in [
            (DensityBin::Low, q.low),
            (DensityBin::Medium, q.medium),
            (DensityBin::High, q.high),
        ] {
            if want > 0 && q.range(bin, lo, hi).is_none() {
                return Err(SynthError::Quota(format!(
                    "{bin} bin is unreachable with counts in [{lo}, {hi}]"
                )));
            }
        }
    }
    (0..n_images)
        .into_par_iter()
        .map(|i| {
            let seed = scene_seed(spec.seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = match quotas {
                None => spec.count.sample(&mut rng),
                Some(q) => {
                    let (a, z) = q.range(q.target(i), lo, hi).expect("checked above");
                    (0..QUOTA_REDRAWS)
                        .map(|_| spec.count.sample(&mut rng))
                        .find(|n| (a..=z).contains(n))
                        .unwrap_or_else(|| rng.random_range(a..=z))
                }
            };
            let scene_spec = SceneSpec { seed, ..spec.clone() };
            let mut scene = render_scene(&scene_spec, n, &mut rng)?;
            scene.dots.image_id = format!("synth_{:05}", i + 1);
            Ok(scene)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(n: usize) -> SceneSpec {
        SceneSpec {
            count: CountDistribution::Fixed(n),
            noise_sigma: 0.0,
            allow_overlap: false,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn empty_scene() {
        let s = generate_scene(&SceneSpec {
            count: CountDistribution::Fixed(0),
            ..SceneSpec::default()
        })
        .unwrap();
        assert_eq!(s.count(), 0);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SceneSpec {
            seed: 7,
            ..SceneSpec::default()
        };
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        let other = generate_scene(&SceneSpec {
            seed: 8,
            ..spec.clone()
        })
        .unwrap();
        assert_ne!(generate_scene(&spec).unwrap().image, other.image);
    }

    #[test]
    fn crowded_scene_fails_placement() {
        let spec = SceneSpec {
            width: 8,
            height: 8,
            radius: (3.0, 3.0),
            ..quiet(50)
        };
        assert!(matches!(generate_scene(&spec), Err(SynthError::Placement { .. })));
    }

    #[test]
    fn spec_validation() {
        let bad = SceneSpec {
            radius: (2.0, 1.0),
            ..SceneSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SceneSpec {
            count: CountDistribution::LogNormal {
                mu: 1.0,
                sigma: 1.0,
                min: 5,
                max: 2,
            },
            ..SceneSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dots_in_bounds() {
        let s = generate_scene(&SceneSpec { seed: 3, ..quiet(20) }).unwrap();
        assert!(s.dots.clone().bind_to_image(64, 64).is_ok());
    }

    #[test]
    fn infeasible_quota() {
        let spec = SceneSpec {
            count: CountDistribution::Fixed(10),
            ..SceneSpec::default()
        };
        let q = BinQuotas {
            low: 1,
            medium: 1,
            high: 0,
            bounds: DensityBounds::default(),
        };
        assert!(matches!(generate_corpus(&spec, 2, Some(&q)), Err(SynthError::Quota(_))));
        assert!(matches!(generate_corpus(&spec, 3, Some(&q)), Err(SynthError::Quota(_))));
    }
}
