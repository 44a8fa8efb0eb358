//! Dynamic learning-rate scheduling from a trained latent ODE.
//!
//! Every `mu` epochs the recent live history is encoded, an ensemble of
//! perturbed latents is rolled out to `T + horizon`, samples whose
//! predicted loss comes close to the live loss are anchored, and the lr
//! paths of the best three by predicted metric are averaged into the next
//! segment.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::Tensor;
use crate::lode::{decode_batch, encode, integrate_batch, rows3, LatentState, LodeModel, ModelError};
use crate::trajectory::{window, window_points, DataError, NormalizationSpec, Trajectory, TrajectoryPoint, CHANNELS};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("scheduler config: {0}")]
    Config(String),
    #[error("run history: {0}")]
    History(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Encoding length and update period in epochs.
    pub mu: usize,
    /// Ensemble size, including the unperturbed latent.
    pub n: usize,
    pub sigma: f64,
    /// Epochs past the anchor at which predicted metrics are compared.
    /// `None` uses the remaining run length `T - t_*`.
    pub horizon: Option<usize>,
    pub total_epochs: usize,
    /// Clamp for decoded rates. `None` falls back to the corpus range of
    /// the model's normalization, widened by a factor of 10 each way.
    pub lr_lo: Option<f64>,
    pub lr_hi: Option<f64>,
    pub seed: u64,
}

impl SchedulerConfig {
    pub fn new(total_epochs: usize) -> Self {
        Self {
            mu: Self::default_mu(total_epochs),
            n: 30,
            sigma: 0.15,
            horizon: None,
            total_epochs,
            lr_lo: None,
            lr_hi: None,
            seed: 0,
        }
    }

    /// 5% of the run, rounded up.
    pub fn default_mu(total_epochs: usize) -> usize {
        ((0.05 * total_epochs as f64).ceil() as usize).max(1)
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        let bad = |m: String| Err(SchedulerError::Config(m));
        if self.total_epochs == 0 {
            return bad("total_epochs must be >= 1".into());
        }
        if self.mu == 0 || self.mu > self.total_epochs {
            return bad(format!("mu must lie in 1..={}, got {}", self.total_epochs, self.mu));
        }
        if self.n == 0 {
            return bad("ensemble size n must be >= 1".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be finite and >= 0, got {}", self.sigma));
        }
        if self.horizon == Some(0) {
            return bad("horizon must be >= 1".into());
        }
        for (name, v) in [("lr_lo", self.lr_lo), ("lr_hi", self.lr_hi)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("{name} must be finite and > 0, got {v}"));
                }
            }
        }
        if let (Some(lo), Some(hi)) = (self.lr_lo, self.lr_hi) {
            if lo > hi {
                return bad(format!("lr_lo {lo} exceeds lr_hi {hi}"));
            }
        }
        Ok(())
    }

    pub fn clamp_bounds(&self, spec: &NormalizationSpec) -> (f64, f64) {
        let lo = self.lr_lo.unwrap_or(spec.lr_min / 10.0);
        let hi = self.lr_hi.unwrap_or(spec.lr_max * 10.0);
        (lo, hi.max(lo))
    }

    /// Horizon in effect after the live run has reached epoch `t_star`.
    pub fn horizon_at(&self, t_star: usize) -> usize {
        self.horizon
            .unwrap_or_else(|| self.total_epochs.saturating_sub(t_star))
            .max(1)
    }
}

/// The live run's points for epochs `0..=t_*`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    points: Vec<TrajectoryPoint>,
}

impl RunHistory {
    pub fn new(points: Vec<TrajectoryPoint>) -> Result<Self, SchedulerError> {
        let mut h = Self::default();
        for p in points {
            h.push(p)?;
        }
        Ok(h)
    }

    pub fn push(&mut self, p: TrajectoryPoint) -> Result<(), SchedulerError> {
        if p.t != self.points.len() {
            return Err(SchedulerError::History(format!(
                "expected epoch {}, got {}",
                self.points.len(),
                p.t
            )));
        }
        p.check("live")?;
        self.points.push(p);
        Ok(())
    }

    pub fn points(&self) -> &[TrajectoryPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the latest recorded epoch.
    pub fn t_star(&self) -> Option<usize> {
        self.points.len().checked_sub(1)
    }

    /// The last `count` raw training losses (fewer if the run is shorter).
    pub fn recent_losses(&self, count: usize) -> Vec<f64> {
        let from = self.points.len().saturating_sub(count);
        self.points[from..].iter().map(|p| p.train_loss).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSample {
    /// 0 is the unperturbed latent.
    pub index: usize,
    pub latent: LatentState,
    /// Denormalized `(loss, metric, lr)` for epochs `0..=T+horizon`, rates
    /// already clamped. `None` when the rollout failed.
    pub trajectory: Option<Vec<[f64; CHANNELS]>>,
    pub accepted: bool,
    pub anchor: Option<usize>,
    pub nu_hat: Option<f64>,
}

impl EnsembleSample {
    fn at(&self, epoch: usize) -> [f64; CHANNELS] {
        let traj = self.trajectory.as_ref().expect("valid sample");
        traj[epoch.min(traj.len() - 1)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Ensemble,
    Fallback,
    ColdStart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSegment {
    /// First epoch the rates apply to.
    pub start_epoch: usize,
    pub rates: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub sample: usize,
    pub anchor: usize,
    pub nu_hat: f64,
}

/// One scheduler invocation, enough to replay the decision offline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub t_star: Option<usize>,
    pub start_epoch: usize,
    pub provenance: Provenance,
    pub horizon: Option<usize>,
    pub live_loss: Option<f64>,
    /// Twice the population std of the recent live losses.
    pub threshold: Option<f64>,
    pub valid_samples: usize,
    pub accepted: usize,
    pub anchors: Vec<AnchorRecord>,
    pub selected: Vec<usize>,
    pub rates: Vec<f64>,
}

impl DecisionRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("decision record serializes")
    }
}

/// The corpus run with the highest final validation metric; ties go to the
/// smallest run id.
pub fn select_bootstrap(corpus: &[Trajectory]) -> Option<&Trajectory> {
    corpus.iter().filter(|t| !t.is_empty()).max_by(|a, b| {
        let (x, y) = (a.final_point().val_metric, b.final_point().val_metric);
        x.partial_cmp(&y)
            .unwrap_or(Ordering::Equal)
            .then_with(|| b.run_id.cmp(&a.run_id))
    })
}

/// `z0` itself followed by `n - 1` Gaussian perturbations. Noise is drawn
/// sample by sample, coordinate by coordinate.
pub fn draw_latents<R: Rng>(z0: &LatentState, n: usize, sigma: f64, rng: &mut R) -> Vec<LatentState> {
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut out = Vec::with_capacity(n);
    out.push(z0.clone());
    for _ in 1..n {
        out.push(LatentState(z0.0.iter().map(|&z| z + normal.sample(rng)).collect()));
    }
    out
}

fn rollout_rows(model: &LodeModel, z0: &Tensor, end_epoch: usize) -> Result<Vec<Tensor>, ModelError> {
    let states = integrate_batch(model, z0, 0, end_epoch)?;
    let rows = z0.rows();
    let mut all = Vec::with_capacity(states.len() * rows * z0.cols());
    for s in &states {
        all.extend_from_slice(s.data());
    }
    let decoded = decode_batch(model, &Tensor::matrix(states.len() * rows, z0.cols(), all))?;
    let per_epoch = rows3(&decoded);
    Ok((0..rows)
        .map(|r| {
            let data = (0..states.len()).flat_map(|e| per_epoch[e * rows + r]).collect();
            Tensor::matrix(states.len(), CHANNELS, data)
        })
        .collect())
}

fn denormalize(spec: &NormalizationSpec, rows: &Tensor, bounds: (f64, f64)) -> Option<Vec<[f64; CHANNELS]>> {
    let out: Vec<[f64; CHANNELS]> = (0..rows.rows())
        .map(|e| {
            let mut p = spec.denormalize_row(rows.row_slice(e));
            p[2] = p[2].clamp(bounds.0, bounds.1);
            p
        })
        .collect();
    if out.iter().flatten().any(|v| v.is_nan()) {
        return None;
    }
    Some(out)
}

/// Rolls every latent out over epochs `0..=end_epoch` and decodes it.
/// A sample whose rollout fails is kept but marked invalid.
pub fn build_ensemble(
    model: &LodeModel,
    latents: Vec<LatentState>,
    end_epoch: usize,
    bounds: (f64, f64),
) -> Vec<EnsembleSample> {
    let spec = &model.normalization;
    let dim = model.latent_dim();
    let stacked = Tensor::matrix(latents.len(), dim, latents.iter().flat_map(|z| z.0.iter().copied()).collect());
    let batched = if latents.iter().all(|z| z.dim() == dim) {
        rollout_rows(model, &stacked, end_epoch).ok()
    } else {
        None
    };
    latents
        .into_iter()
        .enumerate()
        .map(|(index, latent)| {
            let rows = match &batched {
                Some(all) => Some(all[index].clone()),
                None if latent.dim() == dim => {
                    rollout_rows(model, &Tensor::row(latent.0.clone()), end_epoch)
                        .ok()
                        .map(|mut v| v.remove(0))
                }
                None => None,
            };
            EnsembleSample {
                index,
                trajectory: rows.and_then(|r| denormalize(spec, &r, bounds)),
                latent,
                accepted: false,
                anchor: None,
                nu_hat: None,
            }
        })
        .collect()
}

/// Mean taken as an offset from the first value, so identical inputs
/// return that value exactly.
fn offset_mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut it = values.clone();
    let first = it.next().expect("non-empty");
    let n = values.clone().count() as f64;
    first + values.map(|v| v - first).sum::<f64>() / n
}

/// `2 * std` of the recent losses, population convention.
pub fn acceptance_threshold(recent: &[f64]) -> f64 {
    let mean = offset_mean(recent.iter().copied());
    let var = recent.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / recent.len() as f64;
    2.0 * var.sqrt()
}

/// Accepts a sample if its predicted loss at some epoch `k` in `0..=T`
/// lies strictly within `threshold` of the live loss. The anchor is the
/// qualifying `k` with the highest predicted rate, ties to the smallest `k`.
pub fn accept_and_anchor(samples: &mut [EnsembleSample], live_loss: f64, threshold: f64, total_epochs: usize) {
    for s in samples.iter_mut() {
        s.accepted = false;
        s.anchor = None;
        s.nu_hat = None;
        let Some(traj) = &s.trajectory else { continue };
        let last = total_epochs.min(traj.len() - 1);
        let mut best: Option<(usize, f64)> = None;
        for (k, row) in traj.iter().enumerate().take(last + 1) {
            if (row[0] - live_loss).abs() < threshold && best.is_none_or(|(_, lr)| row[2] > lr) {
                best = Some((k, row[2]));
            }
        }
        if let Some((k, _)) = best {
            s.accepted = true;
            s.anchor = Some(k);
        }
    }
}

/// Selection made from the accepted samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioned {
    /// Sample indices in rank order.
    pub selected: Vec<usize>,
    pub rates: Vec<f64>,
}

/// Scores each accepted sample by its predicted metric `horizon` epochs
/// past its anchor, keeps the best three (ties to the lower index) and
/// averages their anchored rate paths. `None` if nothing was accepted.
pub fn condition_and_average(
    samples: &mut [EnsembleSample],
    mu: usize,
    horizon: usize,
    total_epochs: usize,
) -> Option<Conditioned> {
    let end = total_epochs + horizon;
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for (pos, s) in samples.iter_mut().enumerate() {
        if let (true, Some(k)) = (s.accepted, s.anchor) {
            let nu = s.at((k + horizon).min(end))[1];
            s.nu_hat = Some(nu);
            scored.push((pos, nu));
        }
    }
    if scored.is_empty() {
        return None;
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| samples[a.0].index.cmp(&samples[b.0].index))
    });
    scored.truncate(3);
    let rates = (0..mu)
        .map(|j| {
            offset_mean(scored.iter().map(|&(pos, _)| {
                let s = &samples[pos];
                s.at(s.anchor.expect("accepted") + j)[2]
            }))
        })
        .collect();
    Some(Conditioned {
        selected: scored.iter().map(|&(pos, _)| samples[pos].index).collect(),
        rates,
    })
}

/// Stateful scheduler for one live run. Only the rng stream and the
/// decision log change between calls.
#[derive(Clone, Debug)]
pub struct LodeScheduler {
    model: LodeModel,
    cfg: SchedulerConfig,
    bootstrap: Trajectory,
    bounds: (f64, f64),
    rng: ChaCha8Rng,
    log: Vec<DecisionRecord>,
}

impl LodeScheduler {
    pub fn new(model: LodeModel, cfg: SchedulerConfig, bootstrap: Trajectory) -> Result<Self, SchedulerError> {
        cfg.validate()?;
        model.validate()?;
        if bootstrap.len() < cfg.mu {
            return Err(SchedulerError::Config(format!(
                "bootstrap run {} has {} epochs, fewer than mu = {}",
                bootstrap.run_id,
                bootstrap.len(),
                cfg.mu
            )));
        }
        let bounds = cfg.clamp_bounds(&model.normalization);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            cfg,
            bootstrap,
            bounds,
            rng,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    pub fn decisions(&self) -> &[DecisionRecord] {
        &self.log
    }

    /// Rates for the `mu` epochs following the history.
    pub fn next_segment(&mut self, history: &RunHistory) -> Result<ScheduleSegment, SchedulerError> {
        let (mu, bounds) = (self.cfg.mu, self.bounds);
        let start_epoch = history.len();
        let Some(t_star) = history.t_star() else {
            let rates: Vec<f64> = self.bootstrap.points[..mu]
                .iter()
                .map(|p| p.lr.clamp(bounds.0, bounds.1))
                .collect();
            return Ok(self.emit(DecisionRecord {
                t_star: None,
                start_epoch,
                provenance: Provenance::ColdStart,
                horizon: None,
                live_loss: None,
                threshold: None,
                valid_samples: 0,
                accepted: 0,
                anchors: Vec::new(),
                selected: Vec::new(),
                rates,
            }));
        };

        let spec = &self.model.normalization;
        let w = if history.len() < mu {
            window(&self.bootstrap, mu - 1, mu, spec)?
        } else {
            window_points("live", history.points(), t_star, mu, spec)?
        };
        let z0 = encode(&self.model, &w)?;
        let horizon = self.cfg.horizon_at(t_star);
        let latents = draw_latents(&z0, self.cfg.n, self.cfg.sigma, &mut self.rng);
        let mut samples = build_ensemble(&self.model, latents, self.cfg.total_epochs + horizon, bounds);

        let live_loss = history.points()[t_star].train_loss;
        let threshold = acceptance_threshold(&history.recent_losses(mu));
        accept_and_anchor(&mut samples, live_loss, threshold, self.cfg.total_epochs);
        let chosen = condition_and_average(&mut samples, mu, horizon, self.cfg.total_epochs);

        let anchors = samples
            .iter()
            .filter_map(|s| {
                Some(AnchorRecord {
                    sample: s.index,
                    anchor: s.anchor?,
                    nu_hat: s.nu_hat?,
                })
            })
            .collect::<Vec<_>>();
        let (provenance, selected, rates) = match chosen {
            Some(c) => (Provenance::Ensemble, c.selected, c.rates),
            None => {
                let last = history.points()[t_star].lr.clamp(bounds.0, bounds.1);
                (Provenance::Fallback, Vec::new(), vec![last; mu])
            }
        };
        Ok(self.emit(DecisionRecord {
            t_star: Some(t_star),
            start_epoch,
            provenance,
            horizon: Some(horizon),
            live_loss: Some(live_loss),
            threshold: Some(threshold),
            valid_samples: samples.iter().filter(|s| s.trajectory.is_some()).count(),
            accepted: anchors.len(),
            anchors,
            selected,
            rates,
        }))
    }

    fn emit(&mut self, record: DecisionRecord) -> ScheduleSegment {
        let seg = ScheduleSegment {
            start_epoch: record.start_epoch,
            rates: record.rates.clone(),
            provenance: record.provenance,
        };
        self.log.push(record);
        seg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(index: usize, rows: Vec<[f64; 3]>) -> EnsembleSample {
        EnsembleSample {
            index,
            latent: LatentState(vec![0.0]),
            trajectory: Some(rows),
            accepted: false,
            anchor: None,
            nu_hat: None,
        }
    }

    #[test]
    fn acceptance_uses_strict_two_std() {
        let mut s = vec![sample(0, vec![[1.0, 0.1, 0.01], [0.5, 0.2, 0.01], [0.2, 0.3, 0.01]])];
        accept_and_anchor(&mut s, 0.45, 0.1, 2);
        assert!(s[0].accepted);
        assert_eq!(s[0].anchor, Some(1));

        let flat = acceptance_threshold(&[0.3, 0.3, 0.3]);
        assert_eq!(flat, 0.0);
        accept_and_anchor(&mut s, 0.3, flat, 2);
        assert!(!s[0].accepted && s[0].anchor.is_none());
    }

    #[test]
    fn anchor_prefers_highest_rate_then_earliest() {
        let mut rows = vec![[9.0, 0.0, 0.02]; 9];
        rows[3] = [1.0, 0.0, 0.01];
        rows[7] = [1.0, 0.0, 0.05];
        rows[8] = [1.0, 0.0, 0.05];
        let mut s = vec![sample(0, rows)];
        accept_and_anchor(&mut s, 1.0, 0.5, 8);
        assert_eq!(s[0].anchor, Some(7));
    }

    #[test]
    fn anchor_search_stops_at_final_epoch() {
        let mut rows = vec![[9.0, 0.0, 0.02]; 6];
        rows[5] = [1.0, 0.0, 0.05];
        let mut s = vec![sample(0, rows)];
        accept_and_anchor(&mut s, 1.0, 0.5, 4);
        assert!(!s[0].accepted);
    }

    #[test]
    fn three_best_are_averaged() {
        let nus = [0.1, 0.9, 0.5, 0.7, 0.3];
        let mut s: Vec<EnsembleSample> = nus
            .iter()
            .enumerate()
            .map(|(i, &nu)| {
                let lr = 0.1 * (i + 1) as f64;
                let mut e = sample(i, vec![[0.0, nu, lr]; 5]);
                e.accepted = true;
                e.anchor = Some(0);
                e
            })
            .collect();
        let c = condition_and_average(&mut s, 2, 1, 3).unwrap();
        assert_eq!(c.selected, vec![1, 3, 2]);
        let expected = 0.2 + ((0.2 - 0.2) + (0.4 - 0.2) + (0.30000000000000004 - 0.2)) / 3.0;
        assert_eq!(c.rates, vec![expected; 2]);
        assert_eq!(s[4].nu_hat, Some(0.3));
    }

    #[test]
    fn mean_of_anchored_slices() {
        let mut s: Vec<EnsembleSample> = [0.1, 0.2, 0.3]
            .iter()
            .enumerate()
            .map(|(i, &lr)| {
                let mut e = sample(i, vec![[0.0, 0.5, lr]; 4]);
                e.accepted = true;
                e.anchor = Some(i);
                e
            })
            .collect();
        let c = condition_and_average(&mut s, 2, 1, 3).unwrap();
        assert!(c.rates.iter().all(|r| (r - 0.2).abs() < 1e-15));
        let mut none: Vec<EnsembleSample> = vec![sample(0, vec![[0.0; 3]; 3])];
        assert!(condition_and_average(&mut none, 2, 1, 2).is_none());
    }

    #[test]
    fn lookups_past_the_rollout_clamp_to_its_end() {
        let rows: Vec<[f64; 3]> = (0..4).map(|e| [0.0, e as f64 / 10.0, 0.01 * (e + 1) as f64]).collect();
        let mut s = vec![sample(0, rows)];
        s[0].accepted = true;
        s[0].anchor = Some(2);
        let c = condition_and_average(&mut s, 3, 5, 1).unwrap();
        assert_eq!(s[0].nu_hat, Some(0.3));
        assert_eq!(c.rates, vec![0.03, 0.04, 0.04]);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = SchedulerConfig::new(50);
        assert_eq!((c.mu, c.n, c.sigma), (3, 30, 0.15));
        assert_eq!(c.horizon_at(9), 41);
        assert!(c.validate().is_ok());
        assert!(SchedulerConfig { mu: 0, ..c.clone() }.validate().is_err());
        assert!(SchedulerConfig { mu: 51, ..c.clone() }.validate().is_err());
        assert!(SchedulerConfig { n: 0, ..c.clone() }.validate().is_err());
        assert!(SchedulerConfig { sigma: -1.0, ..c.clone() }.validate().is_err());
        assert!(SchedulerConfig { lr_lo: Some(0.2), lr_hi: Some(0.1), ..c.clone() }.validate().is_err());
        assert!(SchedulerConfig { horizon: Some(0), ..c }.validate().is_err());
    }

    #[test]
    fn history_must_be_contiguous() {
        let p = |t| TrajectoryPoint {
            t,
            train_loss: 1.0,
            val_metric: 0.5,
            lr: 0.1,
        };
        assert!(RunHistory::new(vec![p(0), p(1)]).is_ok());
        assert!(RunHistory::new(vec![p(0), p(2)]).is_err());
        let h = RunHistory::new(vec![p(0), p(1), p(2)]).unwrap();
        assert_eq!(h.recent_losses(2).len(), 2);
        assert_eq!(h.recent_losses(9).len(), 3);
        assert_eq!(h.t_star(), Some(2));
    }
}
