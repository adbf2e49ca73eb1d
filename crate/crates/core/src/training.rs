//! Mini-batch Adam training with validation-MAE checkpointing, evaluation
//! and the encoder-freezing × head-depth ablation.

use std::fmt;

use cellcount_autograd::{Graph, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::annotations::DotAnnotation;
use crate::imaging::{density_from_dots, resize_bilinear, DensityMap, GaussianKernel, GrayImage, ImagingError};
use crate::metrics::{compute_metrics, macro_report, CountPair, DensityBounds, MacroRow, MetricsError, MetricsReport};
use crate::model::{CountingModel, DensityModel, ModelConfig, ModelError, ModelKind, ParamStore};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("loss became non-finite ({loss}) at step {step}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Mean squared error between predicted and ground-truth maps.
    DensityMse,
    /// Squared error between the predicted and true count.
    CountMse,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::DensityMse => "density_mse",
            Objective::CountMse => "count_mse",
        })
    }
}

impl std::str::FromStr for Objective {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "density_mse" => Ok(Objective::DensityMse),
            "count_mse" => Ok(Objective::CountMse),
            other => Err(TrainError::Config(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub objective: Objective,
    pub encoder_trainable: bool,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// The observer sees every `report_every`-th epoch; 0 silences it.
    pub report_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 1e-6,
            max_epochs: 100,
            max_steps: None,
            seed: 0,
            objective: Objective::DensityMse,
            encoder_trainable: true,
            patience: 10,
            report_every: 1,
        }
    }
}

impl TrainConfig {
    /// Settings for [`ModelConfig::desk`]-sized models. Randomly initialized
    /// small models need a far larger step than fine-tuning a pretrained
    /// encoder does.
    pub fn desk() -> Self {
        Self {
            learning_rate: 3e-3,
            max_epochs: 60,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::Config("max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Slot `i` of `params` and `grads` must refer to the same
    /// tensor on every call; slots with no gradient are left untouched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Option<&[f64]>]) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (theta, grad)) in params.iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..theta.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                theta[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    fn apply(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        let trainable: Vec<bool> = (0..store.len()).map(|i| store.is_trainable(i)).collect();
        let mut slices: Vec<&mut [f64]> = store.params_mut().map(|p| p.tensor.data_mut()).collect();
        let grads: Vec<Option<&[f64]>> = grads
            .iter()
            .zip(&trainable)
            .map(|(g, &t)| if t { g.as_ref().map(|g| g.data()) } else { None })
            .collect();
        self.step(&mut slices, &grads);
    }
}

/// One image prepared for a specific model geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Resized to the model input size.
    pub image: GrayImage,
    /// Ground truth at the model output grid.
    pub density: DensityMap,
    pub count: f64,
}

/// Resizes `image` to the model input and builds the ground-truth map
/// directly at the output grid from the original-resolution dots.
pub fn prepare_sample(
    id: impl Into<String>,
    image: &GrayImage,
    dots: &[DotAnnotation],
    cfg: &ModelConfig,
    kernel: &GaussianKernel,
) -> Result<Sample> {
    let side = cfg.input_size;
    let resized = if image.width() == side && image.height() == side {
        image.clone()
    } else {
        resize_bilinear(image, side, side)?
    };
    let grid = cfg.grid();
    let density = density_from_dots(dots, (grid, grid), (image.width(), image.height()), kernel)?;
    Ok(Sample {
        id: id.into(),
        image: resized,
        density,
        count: dots.len() as f64,
    })
}

/// Anything that maps a prepared sample to a count.
pub trait Predictor: Sync {
    fn predict(&self, sample: &Sample) -> Result<f64>;

    fn predict_map(&self, _sample: &Sample) -> Result<Option<DensityMap>> {
        Ok(None)
    }
}

impl<T: CountingModel + ?Sized> Predictor for T {
    fn predict(&self, sample: &Sample) -> Result<f64> {
        Ok(self.predict_count(&sample.image)?)
    }

    fn predict_map(&self, sample: &Sample) -> Result<Option<DensityMap>> {
        Ok(CountingModel::predict_map(self, &sample.image)?)
    }
}

/// Returns the ground-truth map of each sample.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthOracle;

impl Predictor for GroundTruthOracle {
    fn predict(&self, sample: &Sample) -> Result<f64> {
        Ok(sample.density.total())
    }

    fn predict_map(&self, sample: &Sample) -> Result<Option<DensityMap>> {
        Ok(Some(sample.density.clone()))
    }
}

/// Predicts the same count for every image.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub f64);

impl ConstantPredictor {
    /// The mean ground-truth count of `samples`.
    pub fn training_mean(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(TrainError::EmptySplit("train"));
        }
        Ok(Self(
            samples.iter().map(|s| s.count).sum::<f64>() / samples.len() as f64,
        ))
    }
}

impl Predictor for ConstantPredictor {
    fn predict(&self, _sample: &Sample) -> Result<f64> {
        Ok(self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// In input order.
    pub pairs: Vec<CountPair>,
    pub overall: MetricsReport,
    pub bins: Vec<MacroRow>,
}

/// Predicts every sample on parallel workers and reports overall and
/// per-density-bin metrics.
pub fn evaluate<P: Predictor + ?Sized>(model: &P, samples: &[Sample], bounds: DensityBounds) -> Result<Evaluation> {
    let pairs = predict_pairs(model, samples)?;
    let overall = compute_metrics(&pairs)?;
    let bins = macro_report(&pairs, bounds);
    Ok(Evaluation { pairs, overall, bins })
}

pub fn predict_pairs<P: Predictor + ?Sized>(model: &P, samples: &[Sample]) -> Result<Vec<CountPair>> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    samples
        .par_iter()
        .map(|s| Ok(CountPair::new(s.id.clone(), s.count, model.predict(s)?)))
        .collect()
}

fn mae<P: Predictor + ?Sized>(model: &P, samples: &[Sample]) -> Result<f64> {
    let pairs = predict_pairs(model, samples)?;
    Ok(pairs.iter().map(|p| (p.y - p.y_hat).abs()).sum::<f64>() / pairs.len() as f64)
}

/// Loss and per-parameter gradient for one sample.
fn sample_grad<M: CountingModel>(model: &M, s: &Sample, objective: Objective) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let params = model.params().bind(&mut g, true);
    let out = model.forward(&mut g, &params, &s.image)?;
    let loss = match objective {
        Objective::DensityMse => {
            let shape = g.shape(out).to_vec();
            let target = Tensor::new(shape, s.density.values().to_vec())
                .map_err(|_| TrainError::Config(format!("ground-truth map of {} does not match model output", s.id)))?;
            let t = g.constant(target);
            g.mse_loss(out, t)?
        }
        Objective::CountMse => {
            let c = g.sum(out);
            let t = g.constant(Tensor::scalar(s.count));
            g.mse_loss(c, t)?
        }
    };
    g.backward(loss)?;
    let value = g.value(loss).data()[0];
    Ok((value, params.iter().map(|&v| g.grad(v).cloned()).collect()))
}

/// Mean loss and gradient over a batch. Per-sample work runs in parallel;
/// the reduction runs in batch order so results do not depend on scheduling.
fn batch_grad<M: CountingModel>(
    model: &M,
    batch: &[&Sample],
    objective: Objective,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let parts: Vec<(f64, Vec<Option<Tensor>>)> = batch
        .par_iter()
        .map(|s| sample_grad(model, s, objective))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut acc: Vec<Option<Tensor>> = vec![None; model.params().len()];
    for (l, grads) in parts {
        loss += l * scale;
        for (slot, g) in acc.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match slot {
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y * scale;
                    }
                }
                None => *slot = Some(g.map(|v| v * scale)),
            }
        }
    }
    Ok((loss, acc))
}

/// Progress and optimizer state of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub best_val_mae: f64,
    pub best_epoch: usize,
    /// Validation MAE after each epoch.
    pub val_history: Vec<f64>,
    /// Running minimum of `val_history`.
    pub best_history: Vec<f64>,
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Cumulative optimizer steps at the end of each epoch.
    pub epoch_steps: Vec<usize>,
    /// Batch loss per optimizer step.
    pub loss_history: Vec<f64>,
    pub stopped_early: bool,
    pub optimizer: Adam,
}

impl TrainState {
    pub const HISTORY_CSV_HEADER: &'static str = "epoch,steps,train_loss,val_mae,best_val_mae";

    pub fn history_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HISTORY_CSV_HEADER);
        for e in 0..self.val_history.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e + 1,
                self.epoch_steps[e],
                self.epoch_loss[e],
                self.val_history[e],
                self.best_history[e]
            ));
        }
        out
    }
}

/// Summary handed to a training observer.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub best_val_mae: f64,
}

pub fn train<M: CountingModel + Clone>(
    model: M,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<(M, TrainState)> {
    train_with_observer(model, train_set, val_set, cfg, &mut |_| {})
}

/// Trains for up to `max_epochs`, evaluating validation MAE after each
/// epoch, and returns the parameters from the epoch with the lowest MAE.
pub fn train_with_observer<M: CountingModel + Clone>(
    mut model: M,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochReport),
) -> Result<(M, TrainState)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    if cfg.objective == Objective::DensityMse && model.kind() != ModelKind::Density {
        return Err(TrainError::Config("density_mse needs a density model".into()));
    }
    model.set_trainable(cfg.encoder_trainable);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = TrainState {
        epoch: 0,
        step: 0,
        best_val_mae: f64::INFINITY,
        best_epoch: 0,
        val_history: Vec::new(),
        best_history: Vec::new(),
        epoch_loss: Vec::new(),
        epoch_steps: Vec::new(),
        loss_history: Vec::new(),
        stopped_early: false,
        optimizer: Adam::new(cfg.learning_rate),
    };
    let mut best = model.params().clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let step_cap = cfg.max_steps.unwrap_or(usize::MAX);

    while state.epoch < cfg.max_epochs && state.step < step_cap {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if state.step >= step_cap {
                break;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_grad(&model, &batch, cfg.objective)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step: state.step, loss });
            }
            state.optimizer.apply(model.params_mut(), &grads);
            state.step += 1;
            state.loss_history.push(loss);
            loss_sum += loss;
            batches += 1;
        }
        state.epoch += 1;
        let val = mae(&model, val_set)?;
        if !val.is_finite() {
            return Err(TrainError::Diverged {
                step: state.step,
                loss: val,
            });
        }
        if val < state.best_val_mae {
            state.best_val_mae = val;
            state.best_epoch = state.epoch;
            best = model.params().clone();
        }
        state.val_history.push(val);
        state.best_history.push(state.best_val_mae);
        state.epoch_loss.push(loss_sum / batches.max(1) as f64);
        state.epoch_steps.push(state.step);
        if cfg.report_every > 0 && state.epoch.is_multiple_of(cfg.report_every) {
            observer(&EpochReport {
                epoch: state.epoch,
                step: state.step,
                train_loss: loss_sum / batches.max(1) as f64,
                val_mae: val,
                best_val_mae: state.best_val_mae,
            });
        }
        if cfg.patience > 0 && state.epoch - state.best_epoch >= cfg.patience {
            state.stopped_early = true;
            break;
        }
    }
    *model.params_mut() = best;
    Ok((model, state))
}

/// One cell of the freezing × head-depth grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub encoder_trainable: bool,
    pub head_channels: Vec<usize>,
    pub trainable_params: usize,
    pub head_params: usize,
    /// Test MAE, or the error message if this cell failed.
    pub test_mae: std::result::Result<f64, String>,
}

impl AblationRow {
    pub fn head_layers(&self) -> usize {
        self.head_channels.len() + 1
    }

    pub fn setting(&self) -> String {
        let enc = if self.encoder_trainable { "Trainable" } else { "Frozen" };
        let n = self.head_layers();
        format!("Encoder {enc}, {n} layer{}", if n == 1 { "" } else { "s" })
    }
}

/// Trains one density model per `(encoder_trainable, head_channels)` pair
/// from the same seeds and data. A failing cell is recorded and the
/// remaining cells still run.
pub fn run_ablation(
    base: &ModelConfig,
    encoder_options: &[bool],
    heads: &[Vec<usize>],
    train_set: &[Sample],
    val_set: &[Sample],
    test_set: &[Sample],
    cfg: &TrainConfig,
) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for &encoder_trainable in encoder_options {
        for head in heads {
            let mcfg = ModelConfig {
                head_channels: head.clone(),
                encoder_trainable,
                ..base.clone()
            };
            let tcfg = TrainConfig {
                encoder_trainable,
                ..cfg.clone()
            };
            let cell = || -> Result<(usize, usize, f64)> {
                let model = DensityModel::new(mcfg.clone())?;
                let (trained, _) = train(model, train_set, val_set, &tcfg)?;
                let test = mae(&trained, test_set)?;
                Ok((trained.trainable_param_count(), trained.head_param_count(), test))
            };
            let (trainable_params, head_params, test_mae) = match cell() {
                Ok((t, h, m)) => (t, h, Ok(m)),
                Err(e) => {
                    let head_params = mcfg.head_param_count();
                    let trainable = if encoder_trainable {
                        mcfg.encoder_param_count() + head_params
                    } else {
                        head_params
                    };
                    (trainable, head_params, Err(e.to_string()))
                }
            };
            rows.push(AblationRow {
                encoder_trainable,
                head_channels: head.clone(),
                trainable_params,
                head_params,
                test_mae,
            });
        }
    }
    rows
}

/// Compact parameter counts in the style `257`, `33.0K`, `89.7M`.
pub fn human_count(n: usize) -> String {
    match n {
        0..=999 => n.to_string(),
        1_000..=999_999 => format!("{:.1}K", n as f64 / 1e3),
        _ => format!("{:.1}M", n as f64 / 1e6),
    }
}

/// Ablation table with parameter counts written as encoder + head.
pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from("| Encoder | Head layers | # Params | Test MAE ↓ |\n|---|---:|---:|---:|\n");
    for r in rows {
        let params = if r.encoder_trainable {
            let encoder = r.trainable_params - r.head_params;
            format!("{} + {}", human_count(encoder), human_count(r.head_params))
        } else {
            human_count(r.head_params)
        };
        let mae = match &r.test_mae {
            Ok(m) => format!("{m:.2}"),
            Err(e) => format!("failed: {e}"),
        };
        let enc = if r.encoder_trainable { "Trainable" } else { "Frozen" };
        out.push_str(&format!("| {enc} | {} | {params} | {mae} |\n", r.head_layers()));
    }
    out
}

pub const ABLATION_CSV_HEADER: &str =
    "encoder_trainable,head_layers,head_channels,head_params,trainable_params,test_mae,error";

/// `head_channels` is written dash-separated; a failed cell has an empty
/// `test_mae` and its message in `error`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ABLATION_CSV_HEADER.split(',')).expect("in-memory write");
    for r in rows {
        let channels: Vec<String> = r.head_channels.iter().map(usize::to_string).collect();
        let (mae, err) = match &r.test_mae {
            Ok(m) => (m.to_string(), String::new()),
            Err(e) => (String::new(), e.clone()),
        };
        w.write_record([
            r.encoder_trainable.to_string(),
            r.head_layers().to_string(),
            channels.join("-"),
            r.head_params.to_string(),
            r.trainable_params.to_string(),
            mae,
            err,
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
}

pub fn parse_ablation_csv(text: &str) -> Result<Vec<AblationRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let bad = |row: usize, msg: String| TrainError::Config(format!("ablation CSV row {row}: {msg}"));
    let header = reader.headers().map_err(|e| bad(1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != ABLATION_CSV_HEADER {
        return Err(bad(1, format!("expected header {ABLATION_CSV_HEADER:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| bad(row, e.to_string()))?;
        let num = |j: usize| {
            rec[j]
                .parse::<usize>()
                .map_err(|_| bad(row, format!("bad integer {:?}", &rec[j])))
        };
        let head_channels = if rec[2].is_empty() {
            Vec::new()
        } else {
            rec[2]
                .split('-')
                .map(|c| {
                    c.parse()
                        .map_err(|_| bad(row, format!("bad head widths {:?}", &rec[2])))
                })
                .collect::<Result<Vec<usize>>>()?
        };
        let test_mae = if rec[5].is_empty() {
            Err(rec[6].to_string())
        } else {
            Ok(rec[5].parse().map_err(|_| bad(row, format!("bad MAE {:?}", &rec[5])))?)
        };
        let parsed = AblationRow {
            encoder_trainable: rec[0]
                .parse()
                .map_err(|_| bad(row, format!("bad flag {:?}", &rec[0])))?,
            head_channels,
            head_params: num(3)?,
            trainable_params: num(4)?,
            test_mae,
        };
        if parsed.head_layers() != num(1)? {
            return Err(bad(row, "head_layers disagrees with head_channels".into()));
        }
        rows.push(parsed);
    }
    Ok(rows)
}

/// Validation MAE for one `(batch_size, learning_rate)` candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub best_val_mae: std::result::Result<f64, String>,
}

/// Trains a fresh copy of `model` per candidate and reports the best
/// validation MAE each reached.
pub fn grid_search<M: CountingModel + Clone>(
    model: &M,
    candidates: &[(usize, f64)],
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Vec<GridPoint> {
    candidates
        .iter()
        .map(|&(batch_size, learning_rate)| {
            let c = TrainConfig {
                batch_size,
                learning_rate,
                ..cfg.clone()
            };
            let best_val_mae = train(model.clone(), train_set, val_set, &c)
                .map(|(_, s)| s.best_val_mae)
                .map_err(|e| e.to_string());
            GridPoint {
                batch_size,
                learning_rate,
                best_val_mae,
            }
        })
        .collect()
}

/// The candidate with the lowest validation MAE; the earliest wins ties.
pub fn best_grid_point(points: &[GridPoint]) -> Option<&GridPoint> {
    points
        .iter()
        .filter_map(|p| p.best_val_mae.as_ref().ok().map(|m| (p, *m)))
        .fold(None, |best: Option<(&GridPoint, f64)>, (p, m)| match best {
            Some((_, b)) if b <= m => best,
            _ => Some((p, m)),
        })
        .map(|(p, _)| p)
}

pub const GRID_CSV_HEADER: &str = "batch_size,learning_rate,best_val_mae,error";

pub fn grid_csv(points: &[GridPoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(GRID_CSV_HEADER.split(',')).expect("in-memory write");
    for p in points {
        let (mae, err) = match &p.best_val_mae {
            Ok(m) => (m.to_string(), String::new()),
            Err(e) => (String::new(), e.clone()),
        };
        w.write_record([p.batch_size.to_string(), p.learning_rate.to_string(), mae, err])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
}

/// Chosen hyperparameters in a Model / Batch size / Learning rate table.
pub fn hparams_markdown(rows: &[(&str, usize, f64)]) -> String {
    let mut out = String::from("| Model | Batch size | Learning rate |\n|---|---:|---:|\n");
    for (name, batch, lr) in rows {
        out.push_str(&format!("| {name} | {batch} | {lr:e} |\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        // After one step, m̂ = g and v̂ = g², so the move is lr·g/(|g| + ε).
        let mut opt = Adam::new(0.1);
        let mut w = [2.0];
        let g = [4.0];
        opt.step(&mut [&mut w[..]], &[Some(&g[..])]);
        let want = 2.0 - 0.1 * 4.0 / (4.0 + 1e-8);
        assert!((w[0] - want).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_skips_missing_gradients() {
        let mut opt = Adam::new(0.1);
        let mut a = [1.0];
        let mut b = [1.0];
        opt.step(&mut [&mut a[..], &mut b[..]], &[Some(&[1.0][..]), None]);
        assert!(a[0] < 1.0);
        assert_eq!(b[0], 1.0);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn human_counts() {
        assert_eq!(human_count(257), "257");
        assert_eq!(human_count(33_025), "33.0K");
        assert_eq!(human_count(41_217), "41.2K");
        assert_eq!(human_count(89_700_000), "89.7M");
    }

    #[test]
    fn ablation_csv_round_trip() {
        let rows = vec![
            AblationRow {
                encoder_trainable: false,
                head_channels: vec![],
                trainable_params: 257,
                head_params: 257,
                test_mae: Ok(4.25),
            },
            AblationRow {
                encoder_trainable: true,
                head_channels: vec![128, 64],
                trainable_params: 89_700_000 + 41_217,
                head_params: 41_217,
                test_mae: Err("loss became non-finite, at step 3".into()),
            },
        ];
        assert_eq!(parse_ablation_csv(&ablation_csv(&rows)).unwrap(), rows);
        let md = ablation_markdown(&rows);
        assert!(md.contains("| Frozen | 1 | 257 | 4.25 |"));
        assert!(md.contains("| Trainable | 3 | 89.7M + 41.2K | failed: "));
    }

    #[test]
    fn best_grid_point_skips_failures() {
        let p = |b, m: std::result::Result<f64, String>| GridPoint {
            batch_size: b,
            learning_rate: 1e-3,
            best_val_mae: m,
        };
        let pts = [p(4, Err("x".into())), p(8, Ok(2.0)), p(16, Ok(1.5)), p(32, Ok(1.5))];
        assert_eq!(best_grid_point(&pts).unwrap().batch_size, 16);
        assert!(best_grid_point(&pts[..1]).is_none());
        assert_eq!(grid_csv(&pts).lines().nth(1).unwrap(), "4,0.001,,x");
    }

    fn sample(id: &str, count: f64) -> Sample {
        Sample {
            id: id.into(),
            image: GrayImage::filled(4, 4, 0.0),
            density: DensityMap::from_values(1, 1, vec![count]).unwrap(),
            count,
        }
    }

    #[test]
    fn oracle_and_constant_predictors() {
        let s = vec![sample("a", 10.0), sample("b", 20.0)];
        let e = evaluate(&GroundTruthOracle, &s, DensityBounds::default()).unwrap();
        assert_eq!((e.overall.mae, e.overall.acp), (0.0, 100.0));
        let e = evaluate(&ConstantPredictor(0.0), &s, DensityBounds::default()).unwrap();
        assert_eq!(e.overall.mae, 15.0);
        assert_eq!(ConstantPredictor::training_mean(&s).unwrap().0, 15.0);
    }
}
