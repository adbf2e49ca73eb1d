use cellcount_autograd::{Graph, Tensor};
use cellcount_core::imaging::DensityMap;
use cellcount_core::imaging::GrayImage;
use cellcount_core::model::{
    head_param_count, patchify, CountingModel, DensityModel, ModelConfig, ParamGroup, ParamStore, RegressionModel,
};
use cellcount_core::training::{train, Objective, Sample, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        patch_size: 16,
        embed_dim: 16,
        depth: 1,
        num_heads: 2,
        mlp_ratio: 4,
        feature_dim: 8,
        head_channels: vec![4],
        ..ModelConfig::default()
    }
}

fn random_image(side: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::new(side, side, (0..side * side).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn loss_of<M: CountingModel>(m: &M, img: &GrayImage, target: &Tensor) -> f64 {
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, false);
    let out = m.forward(&mut g, &p, img).unwrap();
    let t = g.constant(target.clone());
    let l = g.mse_loss(out, t).unwrap();
    g.value(l).data()[0]
}

/// Compares every analytic parameter gradient with a central difference.
fn max_fd_error<M: CountingModel + Clone>(model: &M, img: &GrayImage, target: &Tensor) -> (f64, usize) {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let out = model.forward(&mut g, &p, img).unwrap();
    let t = g.constant(target.clone());
    let l = g.mse_loss(out, t).unwrap();
    g.backward(l).unwrap();
    let analytic: Vec<Tensor> = p.iter().map(|&v| g.grad(v).cloned().unwrap()).collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = model.clone();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = probe.params().tensor(i).data()[j];
            probe.params_mut().tensor_mut(i).data_mut()[j] = orig + h;
            let up = loss_of(&probe, img, target);
            probe.params_mut().tensor_mut(i).data_mut()[j] = orig - h;
            let down = loss_of(&probe, img, target);
            probe.params_mut().tensor_mut(i).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

#[test]
fn density_model_gradients_match_finite_differences() {
    let m = DensityModel::new(tiny()).unwrap();
    let img = random_image(32, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let target = Tensor::new(vec![2, 2], (0..4).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap();
    let (worst, checked) = max_fd_error(&m, &img, &target);
    assert_eq!(checked, m.param_count());
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn regression_model_gradients_match_finite_differences() {
    let m = RegressionModel::new(tiny()).unwrap();
    let img = random_image(32, 3);
    let target = Tensor::new(vec![1, 1], vec![7.0]).unwrap();
    let (worst, _) = max_fd_error(&m, &img, &target);
    assert!(worst < 1e-4, "max relative error {worst}");
}

// Straight-line re-implementation of the forward pass on plain vectors.

type Mat = Vec<Vec<f64>>;

fn t(store: &ParamStore, name: &str) -> Tensor {
    store.get(name).unwrap_or_else(|| panic!("missing {name}")).clone()
}

fn lin(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|o| b.data()[o] + (0..din).map(|i| row[i] * w.data()[i * dout + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, gain: &Tensor, bias: &Tensor, eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + eps).sqrt() * gain.data()[i] + bias.data()[i])
                .collect()
        })
        .collect()
}

fn gelu(v: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

fn reference_density(m: &DensityModel, img: &GrayImage) -> Vec<f64> {
    let cfg = m.config();
    let s = m.params();
    let (p, side) = (cfg.patch_size, cfg.input_size);
    let grid = side / p;
    // tokens in row-major patch order, pixels row-major within a patch
    let mut tokens: Mat = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let mut tok = Vec::new();
            for dy in 0..p {
                for dx in 0..p {
                    tok.push(img.get(gx * p + dx, gy * p + dy));
                }
            }
            tokens.push(tok);
        }
    }
    let pos = t(s, "encoder.pos_embed");
    let e = cfg.embed_dim;
    let mut x = lin(
        &tokens,
        &t(s, "encoder.patch_embed.weight"),
        &t(s, "encoder.patch_embed.bias"),
    );
    for (i, row) in x.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += pos.data()[i * e + j];
        }
    }
    let eps = cfg.layer_norm_eps;
    for b in 0..cfg.depth {
        let n = |k: &str| t(s, &format!("encoder.blocks.{b}.{k}"));
        let h = layer_norm(&x, &n("norm1.gain"), &n("norm1.bias"), eps);
        let qkv = lin(&h, &n("attn.qkv.weight"), &n("attn.qkv.bias"));
        let dh = e / cfg.num_heads;
        let tokens_n = qkv.len();
        let mut merged = vec![vec![0.0; e]; tokens_n];
        for head in 0..cfg.num_heads {
            for i in 0..tokens_n {
                let scores: Vec<f64> = (0..tokens_n)
                    .map(|j| {
                        (0..dh)
                            .map(|d| qkv[i][head * dh + d] * qkv[j][e + head * dh + d])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                for d in 0..dh {
                    merged[i][head * dh + d] = (0..tokens_n).map(|j| ex[j] / z * qkv[j][2 * e + head * dh + d]).sum();
                }
            }
        }
        let a = lin(&merged, &n("attn.proj.weight"), &n("attn.proj.bias"));
        x = add(&x, &a);
        let h = layer_norm(&x, &n("norm2.gain"), &n("norm2.bias"), eps);
        let mut h = lin(&h, &n("mlp.fc1.weight"), &n("mlp.fc1.bias"));
        h.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = gelu(*v)));
        let h = lin(&h, &n("mlp.fc2.weight"), &n("mlp.fc2.bias"));
        x = add(&x, &h);
    }
    let x = layer_norm(&x, &t(s, "encoder.norm.gain"), &t(s, "encoder.norm.bias"), eps);
    let mut f = lin(&x, &t(s, "encoder.neck.weight"), &t(s, "encoder.neck.bias"));
    let layers = cfg.head_channels.len() + 1;
    for l in 0..layers {
        f = lin(&f, &t(s, &format!("head.{l}.weight")), &t(s, &format!("head.{l}.bias")));
        if l + 1 < layers {
            f.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = v.max(0.0)));
        }
    }
    f.into_iter().map(|r| r[0]).collect()
}

#[test]
fn forward_matches_straight_line_reimplementation() {
    for cfg in [
        tiny(),
        ModelConfig {
            depth: 2,
            input_size: 48,
            ..tiny()
        },
        ModelConfig {
            head_channels: vec![],
            ..tiny()
        },
    ] {
        let m = DensityModel::new(cfg.clone()).unwrap();
        let img = random_image(cfg.input_size, 9);
        let got = m.predict_map(&img).unwrap().unwrap();
        let want = reference_density(&m, &img);
        assert_eq!(got.values().len(), want.len());
        for (a, b) in got.values().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn feature_map_of_full_scale_geometry() {
    // 224 input with 16-pixel patches gives a 14×14 grid of D-channel features
    let cfg = ModelConfig {
        embed_dim: 8,
        depth: 0,
        num_heads: 1,
        feature_dim: 256,
        ..ModelConfig::default()
    };
    let m = DensityModel::new(cfg).unwrap();
    let img = random_image(224, 4);
    assert_eq!(m.features(&img).unwrap().shape(), [196, 256]);
    assert_eq!(patchify(&img, 16).unwrap().shape(), [196, 256]);
    let map = m.predict_map(&img).unwrap().unwrap();
    assert_eq!((map.width(), map.height()), (14, 14));
}

#[test]
fn depth_zero_features_are_local() {
    let cfg = ModelConfig { depth: 0, ..tiny() };
    let m = DensityModel::new(cfg).unwrap();
    let img = random_image(32, 5);
    let mut px = img.pixels().to_vec();
    // zero patch (1, 0): columns 16..32 of rows 0..16
    for y in 0..16 {
        for x in 16..32 {
            px[y * 32 + x] = 0.0;
        }
    }
    let zeroed = GrayImage::new(32, 32, px).unwrap();
    let (a, b) = (m.features(&img).unwrap(), m.features(&zeroed).unwrap());
    let d = 8;
    let change: Vec<f64> = (0..4)
        .map(|t| (0..d).map(|c| (a.data()[t * d + c] - b.data()[t * d + c]).abs()).sum())
        .collect();
    assert!(change[1] > 0.0);
    assert_eq!([change[0], change[2], change[3]], [0.0, 0.0, 0.0]);
}

#[test]
fn analytic_counts_match_built_models() {
    for head in [vec![], vec![128], vec![128, 64]] {
        let cfg = ModelConfig {
            embed_dim: 8,
            depth: 1,
            num_heads: 2,
            input_size: 32,
            head_channels: head.clone(),
            ..ModelConfig::default()
        };
        let m = DensityModel::new(cfg.clone()).unwrap();
        assert_eq!(m.head_param_count(), head_param_count(256, &head));
        assert_eq!(m.encoder_param_count(), cfg.encoder_param_count());
    }
    let full = ModelConfig::default().encoder_param_count() as f64;
    assert!((full - 89.7e6).abs() / 89.7e6 < 0.05, "{full}");
}

fn toy_samples(cfg: &ModelConfig, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let img = random_image(cfg.input_size, 100 + i as u64);
            let (grid, p) = (cfg.grid(), cfg.patch_size);
            // target per cell: mean intensity of the matching patch
            let vals: Vec<f64> = (0..grid * grid)
                .map(|c| {
                    let (gx, gy) = (c % grid, c / grid);
                    let sum: f64 = (0..p * p).map(|k| img.get(gx * p + k % p, gy * p + k / p)).sum();
                    sum / (p * p) as f64
                })
                .collect();
            let density = DensityMap::from_values(grid, grid, vals).unwrap();
            Sample {
                id: format!("s{i}"),
                count: density.total(),
                image: img,
                density,
            }
        })
        .collect()
}

#[test]
fn frozen_encoder_is_bit_stable_under_training() {
    let cfg = tiny();
    let samples = toy_samples(&cfg, 4);
    let m = DensityModel::new(cfg).unwrap();
    let before = m.params().clone();
    for objective in [Objective::DensityMse, Objective::CountMse] {
        let tc = TrainConfig {
            batch_size: 2,
            learning_rate: 1e-2,
            max_epochs: 5,
            encoder_trainable: false,
            objective,
            patience: 0,
            ..TrainConfig::default()
        };
        let (trained, state) = train(m.clone(), &samples, &samples, &tc).unwrap();
        assert_eq!(state.step, 10);
        assert_eq!(trained.trainable_param_count(), trained.head_param_count());
        let mut head_moved = false;
        for (a, b) in before.params().iter().zip(trained.params().params()) {
            let same_bits = a
                .tensor
                .data()
                .iter()
                .zip(b.tensor.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            match a.group {
                ParamGroup::Encoder => assert!(same_bits, "{} changed", a.name),
                ParamGroup::Head => head_moved |= !same_bits,
            }
        }
        assert!(head_moved);
    }
}

#[test]
fn same_seed_same_outputs() {
    let img = random_image(32, 8);
    let a = DensityModel::new(tiny()).unwrap().predict_map(&img).unwrap();
    let b = DensityModel::new(tiny()).unwrap().predict_map(&img).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_grid_is_input_over_patch(
        grid in 1usize..5,
        patch in prop::sample::select(vec![2usize, 4, 8]),
        heads in prop::sample::select(vec![1usize, 2, 4]),
        depth in 0usize..3,
        head in prop::collection::vec(1usize..6, 0..3),
    ) {
        let cfg = ModelConfig {
            input_size: grid * patch,
            patch_size: patch,
            embed_dim: 8,
            depth,
            num_heads: heads,
            mlp_ratio: 2,
            feature_dim: 4,
            head_channels: head,
            ..ModelConfig::default()
        };
        let m = DensityModel::new(cfg.clone()).unwrap();
        let map = m.predict_map(&GrayImage::filled(cfg.input_size, cfg.input_size, 0.5)).unwrap().unwrap();
        prop_assert_eq!((map.width(), map.height()), (grid, grid));
    }
}
