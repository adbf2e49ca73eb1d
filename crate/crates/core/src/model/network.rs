use cellcount_autograd::{Graph, Var};

use super::params::{LinearIds, NormIds, ParamBuilder, ParamGroup, ParamStore};
use super::{patchify, CountingModel, ModelConfig, ModelError, ModelKind, Result};
use crate::imaging::{DensityMap, GrayImage};

#[derive(Debug, Clone)]
struct BlockIds {
    norm1: NormIds,
    qkv: LinearIds,
    proj: LinearIds,
    norm2: NormIds,
    fc1: LinearIds,
    fc2: LinearIds,
}

/// Parameter indices of the shared encoder.
#[derive(Debug, Clone)]
struct EncoderIds {
    patch: LinearIds,
    pos: usize,
    blocks: Vec<BlockIds>,
    norm: NormIds,
    neck: LinearIds,
}

fn build_encoder(b: &mut ParamBuilder, cfg: &ModelConfig) -> EncoderIds {
    let e = cfg.embed_dim;
    let enc = ParamGroup::Encoder;
    let patch = b.linear("encoder.patch_embed", enc, cfg.patch_dim(), e);
    let pos = b.normal("encoder.pos_embed", enc, &[cfg.num_tokens(), e], 0.02);
    let blocks = (0..cfg.depth)
        .map(|i| {
            let p = format!("encoder.blocks.{i}");
            BlockIds {
                norm1: b.norm(&format!("{p}.norm1"), enc, e),
                qkv: b.linear(&format!("{p}.attn.qkv"), enc, e, 3 * e),
                proj: b.linear(&format!("{p}.attn.proj"), enc, e, e),
                norm2: b.norm(&format!("{p}.norm2"), enc, e),
                fc1: b.linear(&format!("{p}.mlp.fc1"), enc, e, e * cfg.mlp_ratio),
                fc2: b.linear(&format!("{p}.mlp.fc2"), enc, e * cfg.mlp_ratio, e),
            }
        })
        .collect();
    let norm = b.norm("encoder.norm", enc, e);
    let neck = b.linear("encoder.neck", enc, e, cfg.feature_dim);
    EncoderIds {
        patch,
        pos,
        blocks,
        norm,
        neck,
    }
}

fn linear(g: &mut Graph, p: &[Var], ids: LinearIds, x: Var) -> Result<Var> {
    let y = g.matmul(x, p[ids.w])?;
    Ok(g.add_row(y, p[ids.b])?)
}

fn norm(g: &mut Graph, p: &[Var], ids: NormIds, x: Var, eps: f64) -> Result<Var> {
    Ok(g.layer_norm(x, p[ids.gain], p[ids.bias], eps)?)
}

fn attention(g: &mut Graph, p: &[Var], blk: &BlockIds, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let e = cfg.embed_dim;
    let dh = e / cfg.num_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv = linear(g, p, blk.qkv, x)?;
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let q = g.slice_cols(qkv, h * dh, (h + 1) * dh)?;
        let k = g.slice_cols(qkv, e + h * dh, e + (h + 1) * dh)?;
        let v = g.slice_cols(qkv, 2 * e + h * dh, 2 * e + (h + 1) * dh)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_lastdim(scores)?;
        heads.push(g.matmul(attn, v)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    linear(g, p, blk.proj, merged)
}

/// Feature map `[N × D]`, one row per grid cell in patch order.
fn encode(g: &mut Graph, p: &[Var], ids: &EncoderIds, cfg: &ModelConfig, img: &GrayImage) -> Result<Var> {
    if img.width() != cfg.input_size || img.height() != cfg.input_size {
        return Err(ModelError::Shape(format!(
            "model expects {0}x{0} input, got {1}x{2}",
            cfg.input_size,
            img.width(),
            img.height()
        )));
    }
    let tokens = g.constant(patchify(img, cfg.patch_size)?);
    let x = linear(g, p, ids.patch, tokens)?;
    let mut x = g.add(x, p[ids.pos])?;
    let eps = cfg.layer_norm_eps;
    for blk in &ids.blocks {
        let h = norm(g, p, blk.norm1, x, eps)?;
        let a = attention(g, p, blk, cfg, h)?;
        x = g.add(x, a)?;
        let h = norm(g, p, blk.norm2, x, eps)?;
        let h = linear(g, p, blk.fc1, h)?;
        let h = g.gelu(h);
        let h = linear(g, p, blk.fc2, h)?;
        x = g.add(x, h)?;
    }
    let x = norm(g, p, ids.norm, x, eps)?;
    linear(g, p, ids.neck, x)
}

/// Init scale of the last head layer. Density targets are a small fraction
/// of a cell per grid cell; starting near zero keeps early updates from
/// driving every hidden ReLU negative.
const OUTPUT_GAIN: f64 = 0.1;

/// Encoder, neck and a stack of 1×1 convolutions producing one channel.
#[derive(Debug, Clone)]
pub struct DensityModel {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: EncoderIds,
    head: Vec<LinearIds>,
}

impl DensityModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(cfg.seed, cfg.encoder_trainable);
        let encoder = build_encoder(&mut b, &cfg);
        let mut widths = vec![cfg.feature_dim];
        widths.extend_from_slice(&cfg.head_channels);
        widths.push(1);
        let last = widths.len() - 2;
        let head = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i == last { OUTPUT_GAIN } else { 1.0 };
                b.linear_scaled(&format!("head.{i}"), ParamGroup::Head, w[0], w[1], gain)
            })
            .collect();
        Ok(Self {
            cfg,
            store: b.store,
            encoder,
            head,
        })
    }

    /// Rebuilds the model for `cfg` and replaces every tensor with `store`'s.
    pub fn from_params(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        adopt(&mut m.store, store)?;
        Ok(m)
    }

    /// Encoder output `[N × D]` for inspection.
    pub fn features(&self, img: &GrayImage) -> Result<cellcount_autograd::Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let f = encode(&mut g, &p, &self.encoder, &self.cfg, img)?;
        Ok(g.value(f).clone())
    }

    pub fn encoder_param_count(&self) -> usize {
        self.store.count(ParamGroup::Encoder)
    }

    pub fn head_param_count(&self) -> usize {
        self.store.count(ParamGroup::Head)
    }
}

impl CountingModel for DensityModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Density
    }

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, g: &mut Graph, p: &[Var], img: &GrayImage) -> Result<Var> {
        let mut x = encode(g, p, &self.encoder, &self.cfg, img)?;
        let last = self.head.len() - 1;
        for (i, ids) in self.head.iter().enumerate() {
            x = linear(g, p, *ids, x)?;
            if i < last {
                x = g.relu(x);
            }
        }
        let grid = self.cfg.grid();
        Ok(g.reshape(x, &[grid, grid])?)
    }

    fn predict_count(&self, img: &GrayImage) -> Result<f64> {
        Ok(self.predict_map(img)?.map(|m| m.total()).unwrap_or(0.0))
    }

    fn predict_map(&self, img: &GrayImage) -> Result<Option<DensityMap>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let out = self.forward(&mut g, &p, img)?;
        let grid = self.cfg.grid();
        let map = DensityMap::from_values(grid, grid, g.value(out).data().to_vec())
            .map_err(|e| ModelError::Shape(e.to_string()))?;
        Ok(Some(map))
    }
}

/// Encoder, mean over grid cells, then one linear layer to a scalar.
#[derive(Debug, Clone)]
pub struct RegressionModel {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: EncoderIds,
    fc: LinearIds,
}

impl RegressionModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(cfg.seed, cfg.encoder_trainable);
        let encoder = build_encoder(&mut b, &cfg);
        let fc = b.linear("head.fc", ParamGroup::Head, cfg.feature_dim, 1);
        Ok(Self {
            cfg,
            store: b.store,
            encoder,
            fc,
        })
    }

    pub fn from_params(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        adopt(&mut m.store, store)?;
        Ok(m)
    }

    /// Unclamped output, as used by the training objective.
    pub fn raw_output(&self, img: &GrayImage) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let out = self.forward(&mut g, &p, img)?;
        Ok(g.value(out).data()[0])
    }
}

impl CountingModel for RegressionModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Regression
    }

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, g: &mut Graph, p: &[Var], img: &GrayImage) -> Result<Var> {
        let f = encode(g, p, &self.encoder, &self.cfg, img)?;
        let pooled = g.mean_rows(f)?;
        linear(g, p, self.fc, pooled)
    }

    fn predict_count(&self, img: &GrayImage) -> Result<f64> {
        Ok(self.raw_output(img)?.max(0.0))
    }

    fn predict_map(&self, _img: &GrayImage) -> Result<Option<DensityMap>> {
        Ok(None)
    }
}

/// Copies tensors from `src` into `dst`, requiring identical names,
/// groups and shapes in the same order.
fn adopt(dst: &mut ParamStore, src: ParamStore) -> Result<()> {
    if dst.len() != src.len() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} tensors, found {}",
            dst.len(),
            src.len()
        )));
    }
    for (i, p) in src.params().iter().enumerate() {
        let want = &dst.params()[i];
        if want.name != p.name || want.group != p.group || want.tensor.shape() != p.tensor.shape() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {i}: expected {} {:?}, found {} {:?}",
                want.name,
                want.tensor.shape(),
                p.name,
                p.tensor.shape()
            )));
        }
        *dst.tensor_mut(i) = p.tensor.clone();
    }
    dst.set_encoder_trainable(src.encoder_trainable());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_size: 32,
            patch_size: 16,
            embed_dim: 16,
            depth: 1,
            num_heads: 2,
            feature_dim: 8,
            head_channels: vec![4],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn output_grid_shape() {
        let mut cfg = ModelConfig::desk();
        cfg.depth = 1;
        let m = DensityModel::new(cfg.clone()).unwrap();
        let map = m.predict_map(&GrayImage::filled(32, 32, 0.3)).unwrap().unwrap();
        assert_eq!((map.width(), map.height()), (cfg.grid(), cfg.grid()));
        assert!(m.predict_map(&GrayImage::filled(16, 16, 0.3)).is_err());
    }

    #[test]
    fn counts_match_analytic_totals() {
        for head in [vec![], vec![4], vec![6, 3]] {
            let cfg = ModelConfig {
                head_channels: head,
                ..tiny()
            };
            let m = DensityModel::new(cfg.clone()).unwrap();
            assert_eq!(m.encoder_param_count(), cfg.encoder_param_count());
            assert_eq!(m.head_param_count(), cfg.head_param_count());
        }
    }

    #[test]
    fn zero_head_predicts_zero() {
        let mut m = DensityModel::new(tiny()).unwrap();
        for i in 0..m.params().len() {
            if m.params().params()[i].group == ParamGroup::Head {
                m.params_mut().tensor_mut(i).data_mut().fill(0.0);
            }
        }
        assert_eq!(m.predict_count(&GrayImage::filled(32, 32, 0.9)).unwrap(), 0.0);
    }

    #[test]
    fn count_is_map_total() {
        let m = DensityModel::new(tiny()).unwrap();
        let img = GrayImage::filled(32, 32, 0.4);
        let map = m.predict_map(&img).unwrap().unwrap();
        assert_eq!(m.predict_count(&img).unwrap(), map.total());
    }

    #[test]
    fn freezing_leaves_only_head_trainable() {
        let mut m = DensityModel::new(tiny()).unwrap();
        m.set_trainable(false);
        assert_eq!(m.trainable_param_count(), m.head_param_count());
        m.set_trainable(true);
        assert_eq!(m.trainable_param_count(), m.param_count());
    }

    #[test]
    fn regression_output_is_clamped() {
        let mut m = RegressionModel::new(tiny()).unwrap();
        let b = m.params_mut().get_mut("head.fc.bias").unwrap();
        b.data_mut()[0] = -1e6;
        let img = GrayImage::filled(32, 32, 0.2);
        assert!(m.raw_output(&img).unwrap() < 0.0);
        assert_eq!(m.predict_count(&img).unwrap(), 0.0);
    }

    #[test]
    fn same_seed_same_model() {
        let a = DensityModel::new(tiny()).unwrap();
        let b = DensityModel::new(tiny()).unwrap();
        assert_eq!(a.params(), b.params());
        let c = DensityModel::new(ModelConfig { seed: 1, ..tiny() }).unwrap();
        assert_ne!(a.params(), c.params());
    }
}
