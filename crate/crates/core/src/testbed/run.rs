use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scheduler::{LodeScheduler, RunHistory, ScheduleSegment};
use crate::schedules::ScheduleSpec;
use crate::trajectory::{ScheduleFamily, Trajectory, TrajectoryPoint};

use super::data::SyntheticDataset;
use super::sharpness::{estimate_sharpness, SharpnessConfig};
use super::trainee::{accuracy, loss_and_grad_into, Trainee, PARAM_COUNT};
use super::TestbedError;

pub const BATCH_SIZE: usize = 64;
pub const MOMENTUM: f64 = 0.9;
/// Logged in place of a non-finite or larger training loss.
pub const LOSS_CAP: f64 = 1e6;

/// Supplies per-epoch learning rates to [`train_run`].
pub trait LrSource {
    /// Rates for the epochs starting at `history.len()`. Asked again only
    /// once the previous answer is used up.
    fn next_rates(&mut self, history: &[TrajectoryPoint]) -> Result<Vec<f64>, TestbedError>;

    fn family(&self) -> ScheduleFamily {
        ScheduleFamily::External
    }

    fn params(&self) -> BTreeMap<String, f64> {
        BTreeMap::new()
    }
}

impl LrSource for ScheduleSpec {
    fn next_rates(&mut self, history: &[TrajectoryPoint]) -> Result<Vec<f64>, TestbedError> {
        (history.len()..self.total_epochs)
            .map(|t| self.lr_at(t).map_err(TestbedError::from))
            .collect()
    }

    fn family(&self) -> ScheduleFamily {
        ScheduleSpec::family(self)
    }

    fn params(&self) -> BTreeMap<String, f64> {
        ScheduleSpec::params(self)
    }
}

impl LrSource for LodeScheduler {
    fn next_rates(&mut self, history: &[TrajectoryPoint]) -> Result<Vec<f64>, TestbedError> {
        let ScheduleSegment { start_epoch, rates, .. } = self.next_segment(&RunHistory::new(history.to_vec())?)?;
        debug_assert_eq!(start_epoch, history.len());
        Ok(rates)
    }

    fn family(&self) -> ScheduleFamily {
        ScheduleFamily::Lode
    }
}

/// A precomputed rate sequence. Zero rates are allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedRates {
    pub rates: Vec<f64>,
    pub family: ScheduleFamily,
}

impl FixedRates {
    pub fn new(rates: Vec<f64>) -> Self {
        Self {
            rates,
            family: ScheduleFamily::External,
        }
    }
}

impl LrSource for FixedRates {
    fn next_rates(&mut self, history: &[TrajectoryPoint]) -> Result<Vec<f64>, TestbedError> {
        Ok(self.rates.get(history.len()..).unwrap_or_default().to_vec())
    }

    fn family(&self) -> ScheduleFamily {
        self.family
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub run_id: Option<String>,
    /// Measure sharpness after every this many epochs and after the last.
    /// `None` skips sharpness entirely.
    pub sharpness_every: Option<usize>,
    pub sharpness: SharpnessConfig,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            run_id: None,
            sharpness_every: None,
            sharpness: SharpnessConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    /// Test accuracy after each epoch.
    pub test_metric: Vec<f64>,
    /// Sharpness after each epoch where it was sampled.
    pub lambda_max: Vec<Option<f64>>,
    /// Epoch at which the loss first became non-finite.
    pub diverged_at: Option<usize>,
    pub final_params: Vec<f64>,
}

impl RunOutput {
    /// Epoch with the highest validation accuracy; ties go to the earliest.
    pub fn best_epoch(&self) -> usize {
        let pts = &self.trajectory.points;
        let mut best = 0;
        for (i, p) in pts.iter().enumerate() {
            if p.val_metric > pts[best].val_metric {
                best = i;
            }
        }
        best
    }

    pub fn best_epoch_test_metric(&self) -> f64 {
        self.test_metric[self.best_epoch()]
    }

    /// The last sampled sharpness.
    pub fn final_lambda_max(&self) -> Option<f64> {
        self.lambda_max.last().copied().flatten()
    }
}

/// Trains a freshly initialised trainee for `total_epochs` epochs of
/// minibatch SGD with momentum on a reshuffled training set.
///
/// The logged training loss is the mean over the epoch's examples, each
/// taken at the parameters of its own batch.
///
/// The seed drives both the initial weights and the batch order. Velocity
/// follows `v = momentum * v + g`, `theta -= lr * v`. Once the loss turns
/// non-finite the run is marked diverged; remaining epochs log
/// [`LOSS_CAP`] and the parameters stop changing.
pub fn train_run(
    data: &SyntheticDataset,
    seed: u64,
    source: &mut dyn LrSource,
    total_epochs: usize,
    opts: &RunOptions,
) -> Result<RunOutput, TestbedError> {
    if total_epochs < 2 {
        return Err(TestbedError::Invalid(format!("need at least 2 epochs, got {total_epochs}")));
    }
    if opts.sharpness_every == Some(0) {
        return Err(TestbedError::Invalid("sharpness_every must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = Trainee::init(&mut rng).theta;
    let mut velocity = vec![0.0; PARAM_COUNT];
    let mut grad = vec![0.0; PARAM_COUNT];
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut example_loss = vec![0.0; data.train.len()];

    let mut points: Vec<TrajectoryPoint> = Vec::with_capacity(total_epochs);
    let mut test_metric = Vec::with_capacity(total_epochs);
    let mut lambda_max = Vec::with_capacity(total_epochs);
    let mut pending: VecDeque<f64> = VecDeque::new();
    let mut diverged_at = None;

    for epoch in 0..total_epochs {
        if pending.is_empty() {
            let rates = source.next_rates(&points)?;
            if rates.is_empty() {
                return Err(TestbedError::Invalid(format!("lr source produced no rates at epoch {epoch}")));
            }
            if let Some(r) = rates.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
                return Err(TestbedError::Invalid(format!("lr source produced rate {r} at epoch {epoch}")));
            }
            pending.extend(rates);
        }
        let lr = pending.pop_front().expect("non-empty");

        let mut train_loss = LOSS_CAP;
        if diverged_at.is_none() {
            order.shuffle(&mut rng);
            for idx in order.chunks(BATCH_SIZE) {
                let l = loss_and_grad_into(&theta, &data.train, idx, &mut grad, Some(&mut example_loss));
                if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    diverged_at = Some(epoch);
                    break;
                }
                for ((t, v), g) in theta.iter_mut().zip(&mut velocity).zip(&grad) {
                    *v = MOMENTUM * *v + g;
                    *t -= lr * *v;
                }
            }
            if diverged_at.is_none() {
                // Summed in example order so that the value does not depend on the shuffle.
                let mean = example_loss.iter().sum::<f64>() / example_loss.len() as f64;
                train_loss = mean.min(LOSS_CAP);
            }
            if theta.iter().any(|t| !t.is_finite()) && diverged_at.is_none() {
                diverged_at = Some(epoch);
            }
        }
        points.push(TrajectoryPoint {
            t: epoch,
            train_loss,
            val_metric: accuracy(&theta, &data.val),
            lr,
        });
        test_metric.push(accuracy(&theta, &data.test));

        let sample = opts.sharpness_every.is_some_and(|k| (epoch + 1) % k == 0 || epoch + 1 == total_epochs);
        lambda_max.push(if sample && theta.iter().all(|t| t.is_finite()) {
            Some(estimate_sharpness(&theta, &data.train, &opts.sharpness)?.lambda_max)
        } else {
            None
        });
    }

    let family = source.family();
    Ok(RunOutput {
        trajectory: Trajectory {
            run_id: opts.run_id.clone().unwrap_or_else(|| format!("{family}-s{seed}")),
            seed,
            schedule_family: family,
            schedule_params: source.params(),
            points,
        },
        test_metric,
        lambda_max,
        diverged_at,
        final_params: theta,
    })
}
