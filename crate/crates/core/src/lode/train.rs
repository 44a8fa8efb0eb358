use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{adam_step, AdamConfig, AdamState, EngineError, Tensor};
use crate::schedules::{Schedule, ScheduleSpec};
use crate::trajectory::{fit_normalization, window, Trajectory, CHANNELS};

use super::forward::{model_loss_and_grad, LossItem};
use super::{LodeArch, LodeModel, ModelError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub updates: usize,
    /// Peak of the OneCycle schedule over the update count.
    pub peak_lr: f64,
    pub pct_start: f64,
    pub seed: u64,
    /// Encoded prefix fraction is drawn uniformly from this range per update.
    pub prefix_min: f64,
    pub prefix_max: f64,
    pub arch: LodeArch,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            updates: 10_000,
            peak_lr: 1e-3,
            pct_start: 0.3,
            seed: 7,
            prefix_min: 0.05,
            prefix_max: 0.5,
            arch: LodeArch::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Invalid(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.updates == 0 {
            return bad("updates must be >= 1".into());
        }
        if !(self.peak_lr > 0.0) {
            return bad(format!("peak_lr must be > 0, got {}", self.peak_lr));
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return bad(format!("pct_start must lie in (0, 1), got {}", self.pct_start));
        }
        if !(self.prefix_min > 0.0 && self.prefix_min <= self.prefix_max && self.prefix_max <= 1.0) {
            return bad(format!(
                "prefix range must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.prefix_min, self.prefix_max
            ));
        }
        if self.arch.substeps == 0 {
            return bad("substeps must be >= 1".into());
        }
        if !(self.arch.lambda_path >= 0.0) {
            return bad("lambda_path must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: LodeModel,
    /// Total loss of every update, in order.
    pub loss_history: Vec<f64>,
}

/// Fits a LODE model to the corpus with Adam under a OneCycle rate.
pub fn train_lode(corpus: &[Trajectory], cfg: &TrainConfig) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if corpus.len() < 2 {
        return Err(ModelError::Invalid(format!(
            "need at least 2 runs to train, got {}",
            corpus.len()
        )));
    }
    let spec = fit_normalization(corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = LodeModel::init(&cfg.arch, spec.clone(), &mut rng)?;
    let targets: Vec<Vec<[f64; CHANNELS]>> = corpus.iter().map(|t| spec.normalize_run(t)).collect();

    let lr_schedule = if cfg.updates >= 2 {
        Some(
            ScheduleSpec::new(
                Schedule::OneCycle {
                    peak_lr: cfg.peak_lr,
                    pct_start: cfg.pct_start,
                },
                cfg.updates,
            )
            .map_err(|e| ModelError::Invalid(e.to_string()))?,
        )
    } else {
        None
    };

    let mut adam = {
        let shapes: Vec<&Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
        AdamState::new(cfg.adam, &shapes)
    };
    let mut history = Vec::with_capacity(cfg.updates);
    for step in 0..cfg.updates {
        let picks: Vec<usize> = if corpus.len() >= cfg.batch_size {
            index::sample(&mut rng, corpus.len(), cfg.batch_size).into_vec()
        } else {
            (0..cfg.batch_size).map(|_| rng.gen_range(0..corpus.len())).collect()
        };
        let fraction = rng.gen_range(cfg.prefix_min..=cfg.prefix_max);
        let mut batch = Vec::with_capacity(picks.len());
        for &i in &picks {
            let run = &corpus[i];
            let p = ((fraction * run.len() as f64).round() as usize).clamp(1, run.len());
            batch.push(LossItem {
                window: window(run, p - 1, p, &spec)?,
                target: targets[i].clone(),
            });
        }

        let (loss, grads) = match model_loss_and_grad(&model, &batch) {
            Ok(v) => v,
            Err(ModelError::NonFiniteState { .. }) | Err(ModelError::Engine(EngineError::NonFinite { .. })) => {
                return Err(ModelError::Divergence { step, loss: f64::NAN })
            }
            Err(e) => return Err(e),
        };
        if !loss.total.is_finite() {
            return Err(ModelError::Divergence { step, loss: loss.total });
        }
        history.push(loss.total);

        let lr = lr_schedule
            .as_ref()
            .map_or(cfg.peak_lr, |s| s.lr_at(step).expect("step within schedule"));
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let mut params = model.params_mut();
        adam_step(&mut params, &grad_refs, &mut adam, lr).map_err(|_| ModelError::Divergence {
            step,
            loss: loss.total,
        })?;
    }
    Ok(TrainOutcome {
        model,
        loss_history: history,
    })
}
