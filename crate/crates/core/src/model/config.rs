use std::collections::BTreeMap;

use super::ModelError;

/// Architecture of the patch-transformer encoder and the 1×1 density head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square input side `H = W`.
    pub input_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Channels `D` of the spatial feature map after the neck.
    pub feature_dim: usize,
    /// Hidden widths of the density head; empty means a single 1×1 layer.
    pub head_channels: Vec<usize>,
    pub encoder_trainable: bool,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// ViT-B sized encoder on 224×224 inputs with a 256→128→64→1 head.
    fn default() -> Self {
        Self {
            input_size: 224,
            patch_size: 16,
            in_channels: 1,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4,
            feature_dim: 256,
            head_channels: vec![128, 64],
            encoder_trainable: true,
            layer_norm_eps: 1e-6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A configuration small enough to train on a desktop CPU in minutes.
    pub fn desk() -> Self {
        Self {
            input_size: 32,
            patch_size: 4,
            embed_dim: 32,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2,
            feature_dim: 32,
            head_channels: vec![16, 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.input_size == 0 || self.patch_size == 0 {
            return bad("input and patch size must be positive".into());
        }
        if !self.input_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "input size {} is not divisible by patch size {}",
                self.input_size, self.patch_size
            ));
        }
        if self.in_channels != 1 {
            return bad(format!(
                "only single-channel input is supported, got {}",
                self.in_channels
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.mlp_ratio == 0 || self.feature_dim == 0 || self.head_channels.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Side of the output grid, `H_f = W_f = H / P`.
    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    /// Encoder parameter total, from the layer shapes alone.
    pub fn encoder_param_count(&self) -> usize {
        let e = self.embed_dim;
        let hidden = e * self.mlp_ratio;
        let patch = self.patch_dim() * e + e;
        let pos = self.num_tokens() * e;
        let block = 2 * (2 * e) // two layer norms
            + (e * 3 * e + 3 * e) // qkv
            + (e * e + e) // output projection
            + (e * hidden + hidden)
            + (hidden * e + e);
        let final_norm = 2 * e;
        let neck = e * self.feature_dim + self.feature_dim;
        patch + pos + self.depth * block + final_norm + neck
    }

    /// Density-head parameter total.
    pub fn head_param_count(&self) -> usize {
        head_param_count(self.feature_dim, &self.head_channels)
    }

    pub fn to_kv(&self) -> String {
        let head: Vec<String> = self.head_channels.iter().map(|c| c.to_string()).collect();
        format!(
            "input_size={}\npatch_size={}\nin_channels={}\nembed_dim={}\ndepth={}\nnum_heads={}\n\
             mlp_ratio={}\nfeature_dim={}\nhead_channels={}\nencoder_trainable={}\nlayer_norm_eps={}\nseed={}\n",
            self.input_size,
            self.patch_size,
            self.in_channels,
            self.embed_dim,
            self.depth,
            self.num_heads,
            self.mlp_ratio,
            self.feature_dim,
            head.join(","),
            self.encoder_trainable,
            self.layer_norm_eps,
            self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self, ModelError> {
        let mut kv = BTreeMap::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("expected key=value, got {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut cfg = ModelConfig::default();
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, ModelError> {
            v.parse()
                .map_err(|_| ModelError::Config(format!("bad value {v:?} for {k}")))
        }
        for (k, v) in &kv {
            match k.as_str() {
                "input_size" => cfg.input_size = parse(k, v)?,
                "patch_size" => cfg.patch_size = parse(k, v)?,
                "in_channels" => cfg.in_channels = parse(k, v)?,
                "embed_dim" => cfg.embed_dim = parse(k, v)?,
                "depth" => cfg.depth = parse(k, v)?,
                "num_heads" => cfg.num_heads = parse(k, v)?,
                "mlp_ratio" => cfg.mlp_ratio = parse(k, v)?,
                "feature_dim" => cfg.feature_dim = parse(k, v)?,
                "head_channels" => {
                    cfg.head_channels = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| parse(k, s))
                        .collect::<Result<_, _>>()?
                }
                "encoder_trainable" => cfg.encoder_trainable = parse(k, v)?,
                "layer_norm_eps" => cfg.layer_norm_eps = parse(k, v)?,
                "seed" => cfg.seed = parse(k, v)?,
                other => return Err(ModelError::Config(format!("unknown model key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameters of a stack of 1×1 convolutions `D → c₀ → … → 1`.
pub fn head_param_count(feature_dim: usize, head_channels: &[usize]) -> usize {
    let mut widths = vec![feature_dim];
    widths.extend_from_slice(head_channels);
    widths.push(1);
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_counts_match_reported_totals() {
        assert_eq!(head_param_count(256, &[]), 257);
        assert_eq!(head_param_count(256, &[128]), 33_025);
        assert_eq!(head_param_count(256, &[128, 64]), 41_217);
    }

    #[test]
    fn full_scale_encoder_near_reported_size() {
        let n = ModelConfig::default().encoder_param_count() as f64;
        assert!((n - 89.7e6).abs() / 89.7e6 < 0.05, "{n}");
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = ModelConfig::desk();
        c.input_size = 30;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.head_channels = vec![];
        assert!(c.validate().is_ok());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::desk();
        c.head_channels = vec![];
        c.seed = 99;
        c.encoder_trainable = false;
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert!(ModelConfig::from_kv("depth=two").is_err());
        assert!(ModelConfig::from_kv("colour=blue").is_err());
    }
}
