use std::collections::HashSet;

use cellcount_core::dataset::{write_synthetic_corpus, Dataset};
use cellcount_core::imaging::{density_from_dots, encode_pgm, gaussian_kernel};
use cellcount_core::metrics::{bin_by_density, CountPair, DensityBounds};
use cellcount_core::synthgen::{
    generate_corpus, generate_scene, BinQuotas, CountDistribution, SceneSpec, DAPI_LOG_MU, DAPI_LOG_SIGMA,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sparse(n: usize, seed: u64) -> SceneSpec {
    SceneSpec {
        count: CountDistribution::Fixed(n),
        noise_sigma: 0.0,
        allow_overlap: false,
        seed,
        ..SceneSpec::default()
    }
}

/// Pixels strictly brighter than all 8 neighbours.
fn local_maxima(img: &cellcount_core::imaging::GrayImage) -> Vec<(usize, usize)> {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = img.get(x, y);
            let mut peak = true;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if (dx, dy) != (0, 0) && nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        peak &= v > img.get(nx as usize, ny as usize);
                    }
                }
            }
            if peak {
                out.push((x, y));
            }
        }
    }
    out
}

#[test]
fn noiseless_separated_cells_give_one_peak_each() {
    for seed in 0..20 {
        let s = generate_scene(&sparse(10, seed)).unwrap();
        let peaks = local_maxima(&s.image);
        assert_eq!(peaks.len(), 10, "seed {seed}");
        // every dot has exactly one peak within a pixel of it
        for d in &s.dots.dots {
            let near = peaks
                .iter()
                .filter(|&&(x, y)| (x as f64 + 0.5 - d.x).abs() <= 1.0 && (y as f64 + 0.5 - d.y).abs() <= 1.0)
                .count();
            assert_eq!(near, 1, "seed {seed}, dot {d:?}");
        }
    }
}

#[test]
fn empty_scene_is_background_plus_noise() {
    let s = generate_scene(&SceneSpec {
        count: CountDistribution::Fixed(0),
        noise_sigma: 0.0,
        ..SceneSpec::default()
    })
    .unwrap();
    assert!(s.dots.dots.is_empty());
    assert!(s.image.pixels().iter().all(|&p| p == 0.05));
}

#[test]
fn quotas_reproduce_bin_sizes() {
    let spec = SceneSpec {
        count: CountDistribution::dapi_like(1.0, 900),
        seed: 4,
        ..SceneSpec::default()
    };
    let bounds = DensityBounds::default();
    let q = BinQuotas {
        low: 20,
        medium: 5,
        high: 5,
        bounds,
    };
    let scenes = generate_corpus(&spec, 30, Some(&q)).unwrap();
    let pairs: Vec<CountPair> = scenes
        .iter()
        .map(|s| CountPair::new(s.dots.image_id.clone(), s.count() as f64, 0.0))
        .collect();
    let sizes: Vec<usize> = bin_by_density(&pairs, bounds).iter().map(|(_, v)| v.len()).collect();
    assert_eq!(sizes, [20, 5, 5]);
}

#[test]
fn ground_truth_maps_conserve_generator_counts() {
    let scenes = generate_corpus(
        &SceneSpec {
            seed: 12,
            ..SceneSpec::default()
        },
        40,
        None,
    )
    .unwrap();
    let kernel = gaussian_kernel(5, 1.0).unwrap();
    for s in &scenes {
        for grid in [(8, 8), (16, 16), (64, 64)] {
            let m = density_from_dots(&s.dots.dots, grid, (64, 64), &kernel).unwrap();
            assert!((m.total() - s.count() as f64).abs() < 1e-9);
        }
    }
}

#[test]
fn dapi_parameters_follow_from_count_mean_and_std() {
    // method of moments for a log-normal with mean 281.6 and std 426.9
    let (mean, std): (f64, f64) = (281.6, 426.9);
    let sigma2 = (1.0 + (std / mean).powi(2)).ln();
    let mu = mean.ln() - sigma2 / 2.0;
    assert!((DAPI_LOG_MU - mu).abs() < 5e-5, "{mu}");
    assert!((DAPI_LOG_SIGMA - sigma2.sqrt()).abs() < 5e-5, "{}", sigma2.sqrt());
}

#[test]
fn dapi_like_counts_are_long_tailed() {
    let dist = CountDistribution::dapi_like(1.0, 100_000);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut draws: Vec<usize> = (0..4000).map(|_| dist.sample(&mut rng)).collect();
    draws.sort_unstable();
    let mean = draws.iter().sum::<usize>() as f64 / draws.len() as f64;
    let median = draws[draws.len() / 2] as f64;
    // log-normal median exp(mu) vs mean exp(mu + sigma²/2)
    assert!(median < 0.7 * mean, "median {median} mean {mean}");
    assert!((median / DAPI_LOG_MU.exp() - 1.0).abs() < 0.1);
    let analytic_mean = (DAPI_LOG_MU + DAPI_LOG_SIGMA * DAPI_LOG_SIGMA / 2.0).exp();
    assert!((mean / analytic_mean - 1.0).abs() < 0.1, "{mean} vs {analytic_mean}");
}

#[test]
fn disjoint_seeds_share_no_images() {
    let mut seen = HashSet::new();
    for seed in [101, 202, 303] {
        for s in generate_corpus(
            &SceneSpec {
                seed,
                ..SceneSpec::default()
            },
            50,
            None,
        )
        .unwrap()
        {
            assert!(
                seen.insert(encode_pgm(&s.image, true)),
                "repeated image under seed {seed}"
            );
        }
    }
}

#[test]
fn corpus_is_deterministic_regardless_of_threads() {
    let spec = SceneSpec {
        seed: 5,
        ..SceneSpec::default()
    };
    let a = generate_corpus(&spec, 16, None).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| generate_corpus(&spec, 16, None).unwrap());
    assert_eq!(a, b);
}

#[test]
fn written_corpus_reads_back_through_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = generate_corpus(
        &SceneSpec {
            seed: 77,
            ..SceneSpec::default()
        },
        12,
        None,
    )
    .unwrap();
    let records = write_synthetic_corpus(&scenes, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.records, records);
    for s in &scenes {
        let id = &s.dots.image_id;
        let set = ds.read_annotations(id).unwrap();
        assert_eq!(set.count(), s.count());
        for (a, b) in set.dots.iter().zip(&s.dots.dots) {
            assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        }
        assert_eq!(set.magnification, s.dots.magnification);
        let img = ds.read_image(id).unwrap();
        let worst = img
            .pixels()
            .iter()
            .zip(s.image.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 0.5 / 65535.0 + 1e-12, "{worst}");
    }
}
