//! Optimization: L2 forecasting loss, Adam, the epoch loop with early
//! stopping and per-epoch graph rebuilds, and the learning-rate grid.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{NormMode, WindowBatch};
use crate::error::{PgmaError, Result};
use crate::graph::{build_slot_graphs, Adjacency};
use crate::model::{Model, ModelParams};

/// Learning rates tried by [`grid_search`] when none are given.
pub const DEFAULT_LR_GRID: [f64; 4] = [0.01, 0.005, 0.0025, 0.00125];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Neighbor budget; clamped to `N - 1` for small sensor counts.
    pub k: usize,
    /// Number of graph slots per period.
    pub slots: usize,
    pub window: usize,
    pub stride: usize,
    pub dilation: usize,
    pub conv_channels: usize,
    pub kernel_sizes: [usize; 3],
    pub embed_dim: usize,
    pub graph_dim: usize,
    pub temporal_dim: usize,
    pub mlp_hidden: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Fraction of training windows (the chronological tail) held out.
    pub val_fraction: f64,
    pub normalization: NormMode,
    /// Re-detect the period inside every window instead of once.
    pub period_per_window: bool,
    /// Drop the temporal convolution branch.
    pub no_temporal_conv: bool,
    /// Use a single graph for all phases (forces `slots = 1`).
    pub static_graph: bool,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0025,
            max_epochs: 30,
            patience: 10,
            batch_size: 32,
            seed: 0,
            k: 15,
            slots: 4,
            window: 64,
            stride: 1,
            dilation: 1,
            conv_channels: 8,
            kernel_sizes: [2, 3, 5],
            embed_dim: 64,
            graph_dim: 64,
            temporal_dim: 32,
            mlp_hidden: 128,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: Some(5.0),
            val_fraction: 0.1,
            normalization: NormMode::MinMax,
            period_per_window: false,
            no_temporal_conv: false,
            static_graph: false,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("k", self.k),
            ("slots", self.slots),
            ("window", self.window),
            ("stride", self.stride),
            ("dilation", self.dilation),
            ("conv_channels", self.conv_channels),
            ("embed_dim", self.embed_dim),
            ("graph_dim", self.graph_dim),
            ("temporal_dim", self.temporal_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("threads", self.threads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PgmaError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(PgmaError::Config("learning rate must be positive".into()));
        }
        if self.patience > self.max_epochs && self.max_epochs > 0 {
            return Err(PgmaError::Config(format!(
                "patience {} exceeds max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(PgmaError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(PgmaError::Config("Adam epsilon must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(PgmaError::Config("validation fraction must lie in (0, 1)".into()));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(PgmaError::Config("gradient clip must be positive".into()));
            }
        }
        Ok(())
    }

    /// Slot count after applying the static-graph ablation.
    pub fn effective_slots(&self) -> usize {
        if self.static_graph {
            1
        } else {
            self.slots
        }
    }

    pub fn effective_k(&self, n_sensors: usize) -> usize {
        self.k.min(n_sensors.saturating_sub(1))
    }

    pub fn model_config(&self, n_sensors: usize) -> crate::model::ModelConfig {
        crate::model::ModelConfig {
            n_sensors,
            window: self.window,
            embed_dim: self.embed_dim,
            graph_dim: self.graph_dim,
            conv_channels: self.conv_channels,
            kernel_sizes: self.kernel_sizes,
            dilation: self.dilation,
            temporal_dim: self.temporal_dim,
            mlp_hidden: self.mlp_hidden,
            n_slots: self.effective_slots(),
            temporal: !self.no_temporal_conv,
        }
    }
}

/// Mean squared error over all `B x N` entries.
pub fn l2_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(PgmaError::Shape(format!(
            "prediction has {} entries, target {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam update of one tensor at step `t` (1-based).
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    hp: AdamHyper,
) {
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + hp.epsilon);
    }
}

/// Adam moments for every model tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: ModelParams,
    v: ModelParams,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam step over all tensors. A non-finite gradient aborts before any
/// parameter is touched.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f64,
    hp: AdamHyper,
) -> Result<()> {
    if let Some(param) = grads.first_non_finite() {
        return Err(PgmaError::NonFiniteGradient { param });
    }
    state.step += 1;
    let t = state.step;
    let mut g_flat = Vec::new();
    grads.for_each(|_, g| g_flat.push(g.to_vec()));
    let mut m_flat = Vec::new();
    state.m.for_each_mut(|_, m| m_flat.push(std::mem::take(m)));
    let mut v_flat = Vec::new();
    state.v.for_each_mut(|_, v| v_flat.push(std::mem::take(v)));
    let mut idx = 0;
    params.for_each_mut(|_, p| {
        adam_update(p, &g_flat[idx], &mut m_flat[idx], &mut v_flat[idx], t, lr, hp);
        idx += 1;
    });
    let mut it = m_flat.into_iter();
    state.m.for_each_mut(|_, m| *m = it.next().expect("moment layout"));
    let mut it = v_flat.into_iter();
    state.v.for_each_mut(|_, v| *v = it.next().expect("moment layout"));
    Ok(())
}

/// Scales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Hex SHA-256 over the little-endian bytes of every parameter.
pub fn param_checksum(params: &ModelParams) -> String {
    let mut hasher = Sha256::new();
    params.for_each(|name, t| {
        hasher.update(name.as_bytes());
        for v in t {
            hasher.update(v.to_le_bytes());
        }
    });
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Validation loss of the freshly initialized model.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochStats>,
    /// Index into `epochs` of the kept checkpoint; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub learning_rate: f64,
    pub checksum: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

impl TrainReport {
    /// Drops wall-clock fields so the report is reproducible byte for byte.
    pub fn without_timing(mut self) -> Self {
        self.wall_clock_seconds = None;
        self.epochs.iter_mut().for_each(|e| e.seconds = None);
        self
    }

    /// Loss curve as CSV: `epoch,train_loss,val_loss`.
    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
        }
        out
    }
}

/// Windows prepared for optimization: training and validation parts with
/// their graph slot per window.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub train: WindowBatch,
    pub train_slots: Vec<usize>,
    pub val: WindowBatch,
    pub val_slots: Vec<usize>,
}

impl TrainingSet {
    /// Splits `windows` chronologically, keeping the last `val_fraction`
    /// (at least one window) for validation.
    pub fn split(windows: WindowBatch, slots: Vec<usize>, val_fraction: f64) -> Result<Self> {
        let total = windows.len();
        if total < 2 {
            return Err(PgmaError::Data(format!(
                "need at least 2 windows to hold out validation data, got {total}"
            )));
        }
        let n_val = ((total as f64 * val_fraction).round() as usize).clamp(1, total - 1);
        let cut = total - n_val;
        Ok(TrainingSet {
            train: windows.subset(0, cut),
            train_slots: slots[..cut].to_vec(),
            val: windows.subset(cut, total),
            val_slots: slots[cut..].to_vec(),
        })
    }
}

/// Builds the slot graphs of the current embeddings, or a neighbor-less
/// graph per slot when `k == 0`.
pub fn current_graphs(model: &Model, k: usize) -> Result<Vec<Adjacency>> {
    if k == 0 {
        return Ok(vec![Adjacency::empty(model.config.n_sensors); model.config.n_slots]);
    }
    build_slot_graphs(&model.params.embeddings, k)
}

/// Outcome of [`train`]: the best-validation model and its report.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub graphs: Vec<Adjacency>,
    pub report: TrainReport,
}

fn all_indices(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Trains `model` in place of a copy and returns the best-validation
/// parameters. Each epoch rebuilds the slot graphs from the current
/// embeddings, then runs seeded shuffled mini-batches against that fixed
/// snapshot.
pub fn train(model: Model, data: &TrainingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let k = cfg.effective_k(model.config.n_sensors);
    let hp = AdamHyper {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        epsilon: cfg.epsilon,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c);
    let val_idx = all_indices(data.val.len());

    let mut model = model;
    let mut graphs = current_graphs(&model, k)?;
    let initial_val_loss = model.loss(&data.val, &val_idx, &data.val_slots, &graphs)?;
    if !initial_val_loss.is_finite() {
        return Err(PgmaError::Diverged {
            epoch: 0,
            loss: initial_val_loss,
        });
    }
    let mut best = (model.clone(), graphs.clone());
    let mut best_val = initial_val_loss;
    let mut best_epoch = None;
    let mut epochs = Vec::with_capacity(cfg.max_epochs);
    let mut state = AdamState::new(&model.params);
    let mut order = all_indices(data.train.len());
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let t0 = Instant::now();
        graphs = current_graphs(&model, k)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, mut grads) =
                model.loss_and_grad(&data.train, batch, &data.train_slots, &graphs, cfg.threads)?;
            if let Some(clip) = cfg.grad_clip {
                if let Some(param) = grads.first_non_finite() {
                    return Err(PgmaError::NonFiniteGradient { param });
                }
                clip_global_norm(&mut grads, clip);
            }
            adam_step(&mut model.params, &grads, &mut state, cfg.learning_rate, hp)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let val_loss = model.loss(&data.val, &val_idx, &data.val_slots, &graphs)?;
        if !val_loss.is_finite() {
            return Err(PgmaError::Diverged {
                epoch,
                loss: val_loss,
            });
        }
        let train_loss = if seen > 0 { loss_sum / seen as f64 } else { 0.0 };
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            seconds: Some(t0.elapsed().as_secs_f64()),
        });
        if best_epoch.is_none() || val_loss < best_val {
            best_val = val_loss;
            best_epoch = Some(epoch);
            best = (model.clone(), graphs.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (model, graphs) = best;
    let report = TrainReport {
        initial_val_loss,
        epochs,
        best_epoch,
        best_val_loss: best_val,
        stopped_early,
        learning_rate: cfg.learning_rate,
        checksum: param_checksum(&model.params),
        wall_clock_seconds: Some(started.elapsed().as_secs_f64()),
    };
    Ok(TrainOutcome {
        model,
        graphs,
        report,
    })
}

/// Result of one grid cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub learning_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<TrainReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub best_config: TrainConfig,
    pub best: TrainOutcome,
    pub cells: Vec<GridCell>,
}

/// Trains once per learning rate and keeps the lowest best-validation loss;
/// ties go to the lower learning rate. Failed cells are recorded and
/// skipped. Up to `workers` cells run concurrently.
pub fn grid_search(
    init: impl Fn(&TrainConfig) -> Result<Model> + Sync,
    data: &TrainingSet,
    cfg: &TrainConfig,
    grid: &[f64],
    workers: usize,
) -> Result<GridOutcome> {
    if grid.is_empty() {
        return Err(PgmaError::Config("learning-rate grid is empty".into()));
    }
    let run = |lr: f64| -> (TrainConfig, Result<TrainOutcome>) {
        let cell_cfg = TrainConfig {
            learning_rate: lr,
            ..cfg.clone()
        };
        let out = init(&cell_cfg).and_then(|m| train(m, data, &cell_cfg));
        (cell_cfg, out)
    };
    let results: Vec<(TrainConfig, Result<TrainOutcome>)> = if workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| PgmaError::Config(format!("thread pool: {e}")))?;
        pool.install(|| grid.par_iter().map(|&lr| run(lr)).collect())
    } else {
        grid.iter().map(|&lr| run(lr)).collect()
    };

    let mut cells = Vec::with_capacity(results.len());
    let mut best: Option<(TrainConfig, TrainOutcome)> = None;
    for (cell_cfg, result) in results {
        match result {
            Ok(out) => {
                cells.push(GridCell {
                    learning_rate: cell_cfg.learning_rate,
                    report: Some(out.report.clone()),
                    error: None,
                });
                let better = match &best {
                    None => true,
                    Some((bc, bo)) => {
                        let (a, b) = (out.report.best_val_loss, bo.report.best_val_loss);
                        a < b || (a == b && cell_cfg.learning_rate < bc.learning_rate)
                    }
                };
                if better {
                    best = Some((cell_cfg, out));
                }
            }
            Err(e) => {
                log::warn!("grid cell lr={} failed: {e}", cell_cfg.learning_rate);
                cells.push(GridCell {
                    learning_rate: cell_cfg.learning_rate,
                    report: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let (best_config, best) = best.ok_or(PgmaError::NoSuccessfulConfiguration)?;
    Ok(GridOutcome {
        best_config,
        best,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_examples() {
        assert_eq!(l2_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l2_loss(&[2.0, 3.0, 0.5], &[1.0, 2.0, -0.5]).unwrap(), 1.0);
        assert_eq!(l2_loss(&[1.0, 2.0], &[3.0, 2.0]).unwrap(), 2.0);
        assert!(l2_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = [0.3, -1.2];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, AdamHyper::default());
        assert_eq!(p, [0.3, -1.2]);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let mut p = [0.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, AdamHyper::default());
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_symmetric_params_stay_equal() {
        let mut p = [0.5, 0.5];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for t in 1..=50 {
            let g = (t as f64 * 0.37).sin();
            adam_update(&mut p, &[g, g], &mut m, &mut v, t, 0.01, AdamHyper::default());
            assert_eq!(p[0], p[1]);
        }
    }

    #[test]
    fn clip_bounds_norm() {
        let cfg = crate::model::ModelConfig {
            n_sensors: 2,
            window: 8,
            embed_dim: 2,
            graph_dim: 2,
            conv_channels: 1,
            kernel_sizes: [2, 3, 5],
            dilation: 1,
            temporal_dim: 2,
            mlp_hidden: 2,
            n_slots: 1,
            temporal: true,
        };
        let mut g = ModelParams::init(&cfg, 0).unwrap();
        g.scale(100.0);
        let before = clip_global_norm(&mut g, 5.0);
        assert!(before > 5.0);
        assert!((g.global_norm() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let cfg = crate::model::ModelConfig {
            n_sensors: 2,
            window: 8,
            embed_dim: 2,
            graph_dim: 2,
            conv_channels: 1,
            kernel_sizes: [2, 3, 5],
            dilation: 1,
            temporal_dim: 2,
            mlp_hidden: 2,
            n_slots: 1,
            temporal: true,
        };
        let mut params = ModelParams::init(&cfg, 0).unwrap();
        let mut grads = params.zeros_like();
        grads.attn_a[1] = f64::NAN;
        let mut state = AdamState::new(&params);
        let before = params.clone();
        let err = adam_step(&mut params, &grads, &mut state, 0.1, AdamHyper::default()).unwrap_err();
        assert!(matches!(err, PgmaError::NonFiniteGradient { ref param } if param == "attn_a"));
        assert_eq!(params, before);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 40,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let zero_epochs = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(zero_epochs.validate().is_ok());
        assert_eq!(TrainConfig::default().effective_k(8), 7);
        let stat = TrainConfig {
            static_graph: true,
            ..TrainConfig::default()
        };
        assert_eq!(stat.effective_slots(), 1);
    }
}
