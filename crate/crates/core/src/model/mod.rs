//! The similarity scoring network.
//!
//! Both utterances are reduced to one `T x D` sequence (softmax-weighted sum
//! of all layers, or the last layer), optionally passed through an affine
//! adapter, aligned against each other by single-head scaled dot-product
//! co-attention, mean-pooled, compared by per-dimension absolute difference,
//! and scored by a two-layer head. The two branch scores are averaged.

mod checkpoint;
mod network;
pub mod ops;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, SVS_MAGIC, SVS_VERSION};
pub use network::{forward, kink_margin, loss_and_grad, ScoreOutput};
pub use ops::BranchOutput;

pub const NUM_CLASSES: usize = 4;
pub const DEFAULT_ADAPTER_DIM: usize = 256;
pub const DEFAULT_HIDDEN_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Regression,
    Classification,
}

impl Mode {
    pub fn num_outputs(self) -> usize {
        match self {
            Mode::Regression => 1,
            Mode::Classification => NUM_CLASSES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprSource {
    WeightedSum,
    LastLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub num_layers: usize,
    pub dim: usize,
    pub adapter_dim: usize,
    pub hidden_dim: usize,
    pub num_outputs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub repr_source: ReprSource,
    pub use_adapter: bool,
    pub dims: ModelDims,
}

impl ModelConfig {
    /// Config with the default adapter (256) and hidden (128) widths.
    pub fn new(
        mode: Mode,
        repr_source: ReprSource,
        use_adapter: bool,
        num_layers: usize,
        dim: usize,
    ) -> Self {
        Self {
            mode,
            repr_source,
            use_adapter,
            dims: ModelDims {
                num_layers,
                dim,
                adapter_dim: DEFAULT_ADAPTER_DIM,
                hidden_dim: DEFAULT_HIDDEN_DIM,
                num_outputs: mode.num_outputs(),
            },
        }
    }

    pub fn with_widths(mut self, adapter_dim: usize, hidden_dim: usize) -> Self {
        self.dims.adapter_dim = adapter_dim;
        self.dims.hidden_dim = hidden_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if d.num_outputs != self.mode.num_outputs() {
            return Err(Error::InvalidConfig(format!(
                "{:?} mode needs {} outputs, config has {}",
                self.mode,
                self.mode.num_outputs(),
                d.num_outputs
            )));
        }
        if d.num_layers == 0 || d.dim == 0 || d.hidden_dim == 0 {
            return Err(Error::InvalidConfig(
                "layer count and widths must be positive".into(),
            ));
        }
        if self.use_adapter && d.adapter_dim == 0 {
            return Err(Error::InvalidConfig(
                "adapter width must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Width of the sequence entering co-attention.
    pub fn feature_dim(&self) -> usize {
        if self.use_adapter {
            self.dims.adapter_dim
        } else {
            self.dims.dim
        }
    }
}

/// Affine map `y = W x + b` with `W` stored output-major (`out x in`).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::DimensionMismatch(format!(
                "weight has {} outputs, bias has {}",
                weight.rows(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    /// Weights uniform in `±1/sqrt(inputs)`, zero bias.
    fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data = (0..inputs * outputs).map(|_| dist.sample(rng)).collect();
        Self {
            weight: Matrix::from_vec(outputs, inputs, data).expect("sized above"),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .row_iter()
            .zip(&self.bias)
            .map(|(w, b)| crate::linalg::dot(w, x) + b)
            .collect()
    }

    fn check(&self, inputs: usize, outputs: usize, name: &str) -> Result<()> {
        if self.inputs() != inputs || self.outputs() != outputs || self.bias.len() != outputs {
            return Err(Error::DimensionMismatch(format!(
                "{name}: expected {inputs}->{outputs}, found {}->{}",
                self.inputs(),
                self.outputs()
            )));
        }
        Ok(())
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layer_logits: Vec<f64>,
    pub adapter: Option<Linear>,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

/// Per-parameter gradients, laid out exactly like [`ModelParams`].
pub type Gradients = ModelParams;

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        Self::init_with_rng(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn init_with_rng<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = &cfg.dims;
        let adapter = cfg
            .use_adapter
            .then(|| Linear::init(d.dim, d.adapter_dim, rng));
        let head_hidden = Linear::init(cfg.feature_dim(), d.hidden_dim, rng);
        let head_out = Linear::init(d.hidden_dim, d.num_outputs, rng);
        Self {
            layer_logits: vec![0.0; d.num_layers],
            adapter,
            head_hidden,
            head_out,
        }
    }

    /// All-zero parameters shaped for `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = &cfg.dims;
        Self {
            layer_logits: vec![0.0; d.num_layers],
            adapter: cfg.use_adapter.then(|| Linear::zeros(d.dim, d.adapter_dim)),
            head_hidden: Linear::zeros(cfg.feature_dim(), d.hidden_dim),
            head_out: Linear::zeros(d.hidden_dim, d.num_outputs),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    /// Normalized layer weights `softmax(layer_logits)`.
    pub fn layer_weights(&self) -> Vec<f64> {
        ops::layer_weights(&self.layer_logits)
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let d = &cfg.dims;
        if self.layer_logits.len() != d.num_layers {
            return Err(Error::DimensionMismatch(format!(
                "{} layer logits for {} layers",
                self.layer_logits.len(),
                d.num_layers
            )));
        }
        match (&self.adapter, cfg.use_adapter) {
            (Some(a), true) => a.check(d.dim, d.adapter_dim, "adapter")?,
            (None, false) => {}
            _ => {
                return Err(Error::DimensionMismatch(
                    "adapter presence disagrees with config".into(),
                ))
            }
        }
        self.head_hidden
            .check(cfg.feature_dim(), d.hidden_dim, "head hidden layer")?;
        self.head_out
            .check(d.hidden_dim, d.num_outputs, "head output layer")
    }

    /// Parameter tensors in declaration order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.layer_logits];
        if let Some(a) = &self.adapter {
            out.push(a.weight.as_slice());
            out.push(&a.bias);
        }
        out.push(self.head_hidden.weight.as_slice());
        out.push(&self.head_hidden.bias);
        out.push(self.head_out.weight.as_slice());
        out.push(&self.head_out.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.layer_logits];
        if let Some(a) = &mut self.adapter {
            out.push(a.weight.as_mut_slice());
            out.push(&mut a.bias);
        }
        out.push(self.head_hidden.weight.as_mut_slice());
        out.push(&mut self.head_hidden.bias);
        out.push(self.head_out.weight.as_mut_slice());
        out.push(&mut self.head_out.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Overwrites all parameters from a flat vector in declaration order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::LengthMismatch(flat.len(), self.num_params()));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, shapes assumed equal.
    pub fn add_scaled(&mut self, scale: f64, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            crate::linalg::axpy(dst, scale, src);
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }
}
