//! Patch-transformer encoder with a 1×1 density head, and the
//! global-pool regression baseline on the same encoder.
//!
//! Tensors on the graph are row-major `[tokens × channels]`. Token `t`
//! sits at grid cell `(t / W_f, t % W_f)`, so reshaping the head output to
//! `[H_f × W_f]` yields the density map without any permutation.

pub mod checkpoint;
mod config;
mod network;
mod params;

use cellcount_autograd::{Graph, Tensor, TensorError, Var};
use thiserror::Error;

use crate::imaging::{DensityMap, GrayImage};

pub use config::{head_param_count, ModelConfig};
pub use network::{DensityModel, RegressionModel};
pub use params::{Param, ParamGroup, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Density,
    Regression,
}

impl ModelKind {
    pub fn code(self) -> u8 {
        match self {
            ModelKind::Density => 0,
            ModelKind::Regression => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ModelKind::Density),
            1 => Some(ModelKind::Regression),
            _ => None,
        }
    }
}

/// Common surface of both model families, used by training and evaluation.
pub trait CountingModel: Send + Sync {
    fn kind(&self) -> ModelKind;
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Records the forward pass. `params` must come from
    /// `self.params().bind(..)` on the same graph. Density models return
    /// `[H_f × W_f]`; the regression model returns its raw `[1 × 1]` output.
    fn forward(&self, g: &mut Graph, params: &[Var], img: &GrayImage) -> Result<Var>;

    /// Count as seen by inference: the map sum, or the clamped regression output.
    fn predict_count(&self, img: &GrayImage) -> Result<f64>;

    /// Predicted density map; `None` for models without a spatial output.
    fn predict_map(&self, img: &GrayImage) -> Result<Option<DensityMap>>;

    fn set_trainable(&mut self, encoder: bool) {
        self.params_mut().set_encoder_trainable(encoder);
    }

    fn param_count(&self) -> usize {
        self.params().total_count()
    }

    fn trainable_param_count(&self) -> usize {
        self.params().trainable_count()
    }
}

/// Splits an image into non-overlapping `p×p` patches.
///
/// Row `t` holds patch `(t / (W/p), t % (W/p))`; within a patch, pixels
/// are flattened row-major.
pub fn patchify(img: &GrayImage, p: usize) -> Result<Tensor> {
    let (w, h) = (img.width(), img.height());
    if p == 0 || w % p != 0 || h % p != 0 {
        return Err(ModelError::Config(format!(
            "image {w}x{h} is not divisible into {p}x{p} patches"
        )));
    }
    let (gw, gh) = (w / p, h / p);
    let px = img.pixels();
    let mut data = Vec::with_capacity(w * h);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..p {
                let row = (gy * p + dy) * w + gx * p;
                data.extend_from_slice(&px[row..row + p]);
            }
        }
    }
    Ok(Tensor::new(vec![gw * gh, p * p], data)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, p: usize, width: usize, height: usize) -> Result<GrayImage> {
    if p == 0 || !width.is_multiple_of(p) || !height.is_multiple_of(p) {
        return Err(ModelError::Config(format!(
            "image {width}x{height} is not divisible into {p}x{p} patches"
        )));
    }
    let (gw, gh) = (width / p, height / p);
    if tokens.shape() != [gw * gh, p * p] {
        return Err(ModelError::Shape(format!(
            "expected tokens [{}, {}], got {:?}",
            gw * gh,
            p * p,
            tokens.shape()
        )));
    }
    let src = tokens.data();
    let mut px = vec![0.0; width * height];
    for (t, patch) in src.chunks(p * p).enumerate() {
        let (gy, gx) = (t / gw, t % gw);
        for dy in 0..p {
            let row = (gy * p + dy) * width + gx * p;
            px[row..row + p].copy_from_slice(&patch[dy * p..(dy + 1) * p]);
        }
    }
    GrayImage::new(width, height, px).map_err(|e| ModelError::Shape(e.to_string()))
}
