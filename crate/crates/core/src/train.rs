//! Adam training with gradient accumulation and per-epoch checkpoint
//! selection on system-level validation metrics.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, LevelMetrics};
use crate::model::{kink_margin, loss_and_grad, Gradients, Mode, ModelConfig, ModelParams};
use crate::repr::LayerwiseRepr;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_BATCH_SIZE: usize = 5;

/// Optimizer state; moments are shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias-corrected moments.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(Error::DimensionMismatch(
            "parameter, gradient and moment shapes differ".into(),
        ));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    let eps = state.eps;
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().into_iter().zip(state.v.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    SystemLcc,
    SystemSrcc,
    SystemMse,
}

impl SelectionMetric {
    pub fn value(self, system: &LevelMetrics) -> f64 {
        match self {
            SelectionMetric::SystemLcc => system.lcc,
            SelectionMetric::SystemSrcc => system.srcc,
            SelectionMetric::SystemMse => system.mse,
        }
    }

    fn better(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            SelectionMetric::SystemMse => candidate < incumbent,
            _ => candidate > incumbent,
        }
    }
}

/// Index of the best value, earliest on ties. `None` entries (epochs whose
/// metric could not be computed) are skipped.
pub fn select_epoch(values: &[Option<f64>], metric: SelectionMetric) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        let Some(v) = *v else { continue };
        match best {
            Some((_, b)) if !metric.better(v, b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            selection_metric: SelectionMetric::SystemLcc,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} is not a finite non-negative number",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub steps: usize,
}

/// One pass over `ds` in a seeded shuffle. Gradients are averaged over each
/// group of `batch_size` pairs (the last group may be smaller) before one
/// optimizer step.
pub fn train_epoch<R: Rng>(
    ds: &Dataset,
    params: &mut ModelParams,
    state: &mut AdamState,
    cfg: &ModelConfig,
    batch_size: usize,
    rng: &mut R,
) -> Result<EpochStats> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);

    let mut total_loss = 0.0;
    let mut steps = 0;
    for group in order.chunks(batch_size) {
        let frozen: &ModelParams = params;
        let results: Vec<(f64, Gradients)> = group
            .par_iter()
            .map(|&i| {
                let s = &ds.samples()[i];
                loss_and_grad(&s.test, &s.reference, s.pair.score, frozen, cfg)
            })
            .collect::<Result<_>>()?;
        // fixed reduction order keeps runs bit-identical
        let mut acc = params.zeros_like();
        let scale = 1.0 / group.len() as f64;
        for (loss, g) in &results {
            total_loss += loss;
            acc.add_scaled(scale, g);
        }
        adam_step(params, &acc, state)?;
        steps += 1;
    }
    Ok(EpochStats {
        mean_loss: total_loss / ds.len() as f64,
        steps,
    })
}

/// Validation block of one history record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub utterance: LevelMetrics,
    pub system: LevelMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid: Option<ValidationMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_error: Option<String>,
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_params: ModelParams,
    /// Zero-based index into `history`.
    pub best_epoch: usize,
    pub final_params: ModelParams,
    pub history: Vec<EpochRecord>,
}

fn check_dataset(ds: &Dataset, cfg: &ModelConfig, name: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let expected = (cfg.dims.num_layers, cfg.dims.dim);
    match ds.shape() {
        Some(shape) if shape == expected => {}
        Some((l, d)) => {
            return Err(Error::DimensionMismatch(format!(
                "{name} set has L={l} D={d}, model expects L={} D={}",
                expected.0, expected.1
            )))
        }
        None => return Err(Error::EmptyDataset),
    }
    if cfg.mode == Mode::Classification {
        if let Some(p) = ds.pairs().find(|p| p.score.fract() != 0.0) {
            return Err(Error::InvalidConfig(format!(
                "{name} pair {} has non-integer score {} in classification mode",
                p.pair_id, p.score
            )));
        }
    }
    Ok(())
}

/// Trains from a seeded initialization. After every epoch the validation
/// set is scored at system level and the best epoch under
/// `tcfg.selection_metric` is kept, earliest on ties.
pub fn train(
    train_ds: &Dataset,
    valid_ds: &Dataset,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    check_dataset(train_ds, cfg, "training")?;
    check_dataset(valid_ds, cfg, "validation")?;

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let params = ModelParams::init_with_rng(cfg, &mut rng);
    train_from(train_ds, valid_ds, cfg, tcfg, params, &mut rng)
}

/// Like [`train`] but starting from given parameters and generator.
pub fn train_from<R: Rng>(
    train_ds: &Dataset,
    valid_ds: &Dataset,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    mut params: ModelParams,
    rng: &mut R,
) -> Result<TrainOutcome> {
    params.check_compatible(cfg)?;
    let mut state = AdamState::new(&params, tcfg.learning_rate);
    let mut history = Vec::with_capacity(tcfg.epochs);
    let mut snapshots = Vec::with_capacity(tcfg.epochs);
    for epoch in 1..=tcfg.epochs {
        let stats = train_epoch(train_ds, &mut params, &mut state, cfg, tcfg.batch_size, rng)?;
        let (valid, valid_error) = match metrics::evaluate(&params, cfg, valid_ds) {
            Ok(r) => (
                Some(ValidationMetrics {
                    utterance: r.utterance,
                    system: r.system,
                }),
                None,
            ),
            Err(e @ (Error::ZeroVariance | Error::TooFewSystems(_))) => (None, Some(e.to_string())),
            Err(e) => return Err(e),
        };
        history.push(EpochRecord {
            epoch,
            train_loss: stats.mean_loss,
            valid,
            valid_error,
            selected: false,
        });
        snapshots.push(params.clone());
    }
    let values: Vec<Option<f64>> = history
        .iter()
        .map(|r| r.valid.map(|v| tcfg.selection_metric.value(&v.system)))
        .collect();
    let best_epoch =
        select_epoch(&values, tcfg.selection_metric).ok_or(Error::NoSelectableEpoch)?;
    history[best_epoch].selected = true;
    let best_params = snapshots.swap_remove(best_epoch);
    Ok(TrainOutcome {
        best_params,
        best_epoch,
        final_params: params,
        history,
    })
}

/// History as newline-delimited JSON, one record per epoch.
pub fn history_jsonl(history: &[EpochRecord]) -> String {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r).expect("history serializes"));
        out.push('\n');
    }
    out
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, history_jsonl(history)).map_err(|e| Error::io(path, e))
}

/// Finite-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so parameters whose true
/// gradient is (near) zero are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-3;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

fn random_repr<R: Rng>(rng: &mut R, id: &str, layers: usize, dim: usize) -> LayerwiseRepr {
    let frames = rng.gen_range(1..=4);
    let data = (0..layers * frames * dim)
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    LayerwiseRepr::new(id, layers, frames, dim, data).expect("shape is consistent")
}

/// Compares analytic gradients with central differences on a random
/// instance shaped by `cfg.dims`, returning the largest relative error.
/// Instances with a ReLU or absolute-value input within 1e-3 of its kink
/// are resampled.
pub fn grad_check(cfg: &ModelConfig, seed: u64) -> Result<f64> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, d) = (cfg.dims.num_layers, cfg.dims.dim);
    let (test, reference, params, label) = loop {
        let test = random_repr(&mut rng, "t", l, d);
        let reference = random_repr(&mut rng, "r", l, d);
        let mut params = ModelParams::init_with_rng(cfg, &mut rng);
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        let label = match cfg.mode {
            Mode::Regression => rng.gen_range(1.0..=4.0),
            Mode::Classification => f64::from(rng.gen_range(1..=4u8)),
        };
        if kink_margin(&test, &reference, &params, cfg)? >= KINK_MARGIN {
            break (test, reference, params, label);
        }
    };

    let (_, grads) = loss_and_grad(&test, &reference, label, &params, cfg)?;
    let analytic = grads.flatten();
    let base = params.flatten();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut shifted = base.clone();
        shifted[i] = base[i] + GRAD_CHECK_STEP;
        probe.assign_flat(&shifted)?;
        let (plus, _) = loss_and_grad(&test, &reference, label, &probe, cfg)?;
        shifted[i] = base[i] - GRAD_CHECK_STEP;
        probe.assign_flat(&shifted)?;
        let (minus, _) = loss_and_grad(&test, &reference, label, &probe, cfg)?;
        let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
