//! Latent ODE model: a GRU encoder summarizes a window of (loss, metric,
//! lr) into a latent state, an MLP vector field advances it in continuous
//! time with RK4, and an MLP decoder maps latent states back to the three
//! channels.

mod eval;
mod forward;
pub mod ode;
mod train;

pub use eval::{predict_from_prefix, predict_from_window, rank_by_prediction, rank_runs, Prediction, RankedRun};
pub use forward::{decode, encode, integrate, model_loss, model_loss_and_grad, LossBreakdown, LossItem};
pub(crate) use forward::{decode_batch, integrate_batch, rows3};
pub use train::{train_lode, TrainConfig, TrainOutcome};

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{EngineError, Tensor};
use crate::trajectory::{DataError, NormalizationSpec, CHANNELS};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite latent state at integration step {step}")]
    NonFiniteState { step: usize },
    #[error("training diverged at update {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Latent vector `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState(pub Vec<f64>);

impl LatentState {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Affine layer `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    fn uniform<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<_>>();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out)),
            bias: Tensor::row(draw(fan_out)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    fn check(&self, what: &str) -> Result<(), ModelError> {
        if self.weight.shape().len() != 2 || self.bias.shape() != [1, self.fan_out()] {
            return Err(ModelError::Checkpoint(format!("{what}: inconsistent layer shapes")));
        }
        Ok(())
    }
}

/// GRU cell (input 3, hidden `d_h`) with gates fused column-wise as
/// `[reset | update | candidate]`, plus a linear readout to `d_z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w_input: Tensor,
    pub w_hidden: Tensor,
    pub b_input: Tensor,
    pub b_hidden: Tensor,
    pub readout: Linear,
}

impl EncoderParams {
    pub fn zeros(hidden: usize, latent: usize) -> Self {
        Self {
            w_input: Tensor::zeros(&[CHANNELS, 3 * hidden]),
            w_hidden: Tensor::zeros(&[hidden, 3 * hidden]),
            b_input: Tensor::zeros(&[1, 3 * hidden]),
            b_hidden: Tensor::zeros(&[1, 3 * hidden]),
            readout: Linear::zeros(hidden, latent),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hidden.rows()
    }
}

/// Feed-forward net: tanh on every layer but the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            layers: sizes.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        }
    }

    fn uniform<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        Self {
            layers: sizes.windows(2).map(|w| Linear::uniform(w[0], w[1], rng)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Linear::fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::fan_out)
    }

    fn check(&self, what: &str) -> Result<(), ModelError> {
        if self.layers.is_empty() {
            return Err(ModelError::Checkpoint(format!("{what}: no layers")));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.check(what)?;
            if i > 0 && self.layers[i - 1].fan_out() != l.fan_in() {
                return Err(ModelError::Checkpoint(format!("{what}: layer {i} input width mismatch")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodeArch {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Width of the two hidden layers in the dynamics and decoder MLPs.
    pub mlp_width: usize,
    /// RK4 steps per epoch.
    pub substeps: usize,
    pub lambda_path: f64,
}

impl Default for LodeArch {
    fn default() -> Self {
        Self {
            latent_dim: 20,
            hidden_dim: 20,
            mlp_width: 20,
            substeps: 4,
            lambda_path: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LodeModel {
    pub encoder: EncoderParams,
    /// Vector field over `[z, tau]`.
    pub dynamics: Mlp,
    pub decoder: Mlp,
    pub normalization: NormalizationSpec,
    pub substeps: usize,
    pub lambda_path: f64,
}

impl LodeModel {
    /// Uniform `±1/sqrt(fan_in)` initialization of every layer.
    pub fn init<R: Rng>(arch: &LodeArch, normalization: NormalizationSpec, rng: &mut R) -> Result<Self, ModelError> {
        if arch.latent_dim == 0 || arch.hidden_dim == 0 || arch.mlp_width == 0 {
            return Err(ModelError::Invalid("dimensions must be >= 1".into()));
        }
        let (h, z, w) = (arch.hidden_dim, arch.latent_dim, arch.mlp_width);
        let gru_in = Linear::uniform(CHANNELS, 3 * h, rng);
        let gru_hidden = Linear::uniform(h, 3 * h, rng);
        let encoder = EncoderParams {
            w_input: gru_in.weight,
            w_hidden: gru_hidden.weight,
            b_input: gru_in.bias,
            b_hidden: gru_hidden.bias,
            readout: Linear::uniform(h, z, rng),
        };
        let dynamics = Mlp::uniform(&[z + 1, w, w, z], rng);
        let decoder = Mlp::uniform(&[z, w, w, CHANNELS], rng);
        let model = Self {
            encoder,
            dynamics,
            decoder,
            normalization,
            substeps: arch.substeps,
            lambda_path: arch.lambda_path,
        };
        model.validate()?;
        Ok(model)
    }

    /// Model with every weight and bias zero.
    pub fn zeros(arch: &LodeArch, normalization: NormalizationSpec) -> Self {
        let (h, z, w) = (arch.hidden_dim, arch.latent_dim, arch.mlp_width);
        Self {
            encoder: EncoderParams::zeros(h, z),
            dynamics: Mlp::zeros(&[z + 1, w, w, z]),
            decoder: Mlp::zeros(&[z, w, w, CHANNELS]),
            normalization,
            substeps: arch.substeps,
            lambda_path: arch.lambda_path,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.readout.fan_out()
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.hidden_dim()
    }

    /// RK4 step length in tau units.
    pub fn step_size(&self) -> f64 {
        1.0 / (self.substeps * self.normalization.time_scale) as f64
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let h = self.hidden_dim();
        let z = self.latent_dim();
        let e = &self.encoder;
        if e.w_input.shape() != [CHANNELS, 3 * h]
            || e.w_hidden.shape() != [h, 3 * h]
            || e.b_input.shape() != [1, 3 * h]
            || e.b_hidden.shape() != [1, 3 * h]
            || e.readout.fan_in() != h
        {
            return Err(ModelError::Checkpoint("encoder: inconsistent GRU shapes".into()));
        }
        e.readout.check("encoder.readout")?;
        self.dynamics.check("dynamics")?;
        self.decoder.check("decoder")?;
        if self.dynamics.input_dim() != z + 1 || self.dynamics.output_dim() != z {
            return Err(ModelError::Checkpoint(format!("dynamics must map {} -> {z}", z + 1)));
        }
        if self.decoder.input_dim() != z || self.decoder.output_dim() != CHANNELS {
            return Err(ModelError::Checkpoint(format!("decoder must map {z} -> {CHANNELS}")));
        }
        if self.substeps == 0 {
            return Err(ModelError::Invalid("substeps k must be >= 1".into()));
        }
        if !(self.lambda_path >= 0.0) {
            return Err(ModelError::Invalid("lambda_path must be >= 0".into()));
        }
        if self.normalization.time_scale == 0 {
            return Err(ModelError::Invalid("time scale must be >= 1".into()));
        }
        Ok(())
    }

    /// Parameter tensors with stable names, in optimizer order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let e = &self.encoder;
        let mut out: Vec<(String, &Tensor)> = vec![
            ("encoder.w_input".into(), &e.w_input),
            ("encoder.w_hidden".into(), &e.w_hidden),
            ("encoder.b_input".into(), &e.b_input),
            ("encoder.b_hidden".into(), &e.b_hidden),
            ("encoder.readout.weight".into(), &e.readout.weight),
            ("encoder.readout.bias".into(), &e.readout.bias),
        ];
        for (prefix, mlp) in [("dynamics", &self.dynamics), ("decoder", &self.decoder)] {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let e = &mut self.encoder;
        let mut out: Vec<&mut Tensor> = vec![
            &mut e.w_input,
            &mut e.w_hidden,
            &mut e.b_input,
            &mut e.b_hidden,
            &mut e.readout.weight,
            &mut e.readout.bias,
        ];
        for mlp in [&mut self.dynamics, &mut self.decoder] {
            for l in mlp.layers.iter_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            schema_version: SCHEMA_VERSION,
            d_z: self.latent_dim(),
            d_h: self.hidden_dim(),
            k: self.substeps,
            lambda_path: self.lambda_path,
            normalization: self.normalization.clone(),
            encoder: self.encoder.clone(),
            dynamics: self.dynamics.clone(),
            decoder: self.decoder.clone(),
        };
        serde_json::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ck.schema_version != SCHEMA_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported schema_version {}",
                ck.schema_version
            )));
        }
        let model = LodeModel {
            encoder: ck.encoder,
            dynamics: ck.dynamics,
            decoder: ck.decoder,
            normalization: ck.normalization,
            substeps: ck.k,
            lambda_path: ck.lambda_path,
        };
        model.validate()?;
        if model.latent_dim() != ck.d_z || model.hidden_dim() != ck.d_h {
            return Err(ModelError::Checkpoint("d_z/d_h disagree with weight shapes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    schema_version: u32,
    d_z: usize,
    d_h: usize,
    k: usize,
    lambda_path: f64,
    normalization: NormalizationSpec,
    encoder: EncoderParams,
    dynamics: Mlp,
    decoder: Mlp,
}
