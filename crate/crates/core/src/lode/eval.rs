use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::trajectory::{window, Trajectory, CHANNELS};

use super::forward::{decode, encode, integrate};
use super::{LodeModel, ModelError};

/// Denormalized reconstruction of one run from an encoded prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub run_id: String,
    pub prefix_len: usize,
    /// `(train_loss, val_metric, lr)` per epoch over the whole run.
    pub predicted: Vec<[f64; CHANNELS]>,
    /// `sum (pred - true)^2 / sum (true - mean)^2` per channel; `None` when
    /// the true channel is constant over the run.
    pub rel_mse: [Option<f64>; CHANNELS],
}

impl Prediction {
    pub fn final_metric(&self) -> f64 {
        self.predicted.last().map_or(f64::NAN, |r| r[1])
    }
}

fn relative_mse(pred: &[f64], truth: &[f64]) -> Option<f64> {
    if truth.iter().all(|&y| y == truth[0]) {
        return None;
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let denom: f64 = truth.iter().map(|y| (y - mean) * (y - mean)).sum();
    let num: f64 = pred.iter().zip(truth).map(|(p, y)| (p - y) * (p - y)).sum();
    Some(num / denom)
}

/// Encodes the first `prefix_len` epochs, integrates from epoch 0 to the
/// run's end and decodes every epoch.
pub fn predict_from_window(model: &LodeModel, traj: &Trajectory, prefix_len: usize) -> Result<Prediction, ModelError> {
    if prefix_len == 0 || prefix_len > traj.len() {
        return Err(ModelError::Invalid(format!(
            "prefix length {prefix_len} outside 1..={}",
            traj.len()
        )));
    }
    let spec = &model.normalization;
    let w = window(traj, prefix_len - 1, prefix_len, spec)?;
    let z0 = encode(model, &w)?;
    let zs = integrate(model, &z0, 0, traj.len() - 1)?;
    let rows = decode(model, &zs)?;
    let predicted: Vec<[f64; CHANNELS]> = rows.iter().map(|r| spec.denormalize_row(r)).collect();

    let truth: [Vec<f64>; CHANNELS] = [
        traj.points.iter().map(|p| p.train_loss).collect(),
        traj.points.iter().map(|p| p.val_metric).collect(),
        traj.points.iter().map(|p| p.lr).collect(),
    ];
    let mut rel_mse = [None; CHANNELS];
    for (ch, slot) in rel_mse.iter_mut().enumerate() {
        let pred: Vec<f64> = predicted.iter().map(|r| r[ch]).collect();
        *slot = relative_mse(&pred, &truth[ch]);
    }
    Ok(Prediction {
        run_id: traj.run_id.clone(),
        prefix_len,
        predicted,
        rel_mse,
    })
}

/// Prefix length is `round(fraction * len)`; at least two points are required.
pub fn predict_from_prefix(model: &LodeModel, traj: &Trajectory, prefix_fraction: f64) -> Result<Prediction, ModelError> {
    if !(prefix_fraction > 0.0 && prefix_fraction <= 1.0) {
        return Err(ModelError::Invalid(format!(
            "prefix fraction must lie in (0, 1], got {prefix_fraction}"
        )));
    }
    let p = ((prefix_fraction * traj.len() as f64).round() as usize).min(traj.len());
    if p < 2 {
        return Err(ModelError::Invalid(format!(
            "prefix of {p} point(s) for run {}; need at least 2",
            traj.run_id
        )));
    }
    predict_from_window(model, traj, p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedRun {
    pub run_id: String,
    pub predicted_final_metric: f64,
}

/// Descending by predicted metric, ties by run id. NaN predictions sort last.
pub fn rank_by_prediction(mut preds: Vec<RankedRun>) -> Vec<RankedRun> {
    preds.sort_by(|a, b| {
        let (x, y) = (a.predicted_final_metric, b.predicted_final_metric);
        match (x.is_nan(), y.is_nan()) {
            (true, true) => Ordering::Equal,
            (true, false) => Ordering::Greater,
            (false, true) => Ordering::Less,
            _ => y.partial_cmp(&x).expect("non-NaN"),
        }
        .then_with(|| a.run_id.cmp(&b.run_id))
    });
    preds
}

/// Ranks runs by the final validation metric predicted from their first
/// `prefix_epochs` epochs.
pub fn rank_runs(model: &LodeModel, corpus: &[Trajectory], prefix_epochs: usize) -> Result<Vec<RankedRun>, ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::Invalid("cannot rank an empty corpus".into()));
    }
    if prefix_epochs == 0 {
        return Err(ModelError::Invalid("prefix_epochs must be >= 1".into()));
    }
    let mut preds = Vec::with_capacity(corpus.len());
    for t in corpus {
        let p = predict_from_window(model, t, prefix_epochs)?;
        preds.push(RankedRun {
            run_id: t.run_id.clone(),
            predicted_final_metric: p.final_metric(),
        });
    }
    Ok(rank_by_prediction(preds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_mse_constant_truth_is_undefined() {
        assert_eq!(relative_mse(&[1.0, 2.0], &[3.0, 3.0]), None);
        assert_eq!(relative_mse(&[0.0, 1.0], &[0.0, 1.0]), Some(0.0));
        // truth var: 0.5 ; error 2 * 0.25
        assert_eq!(relative_mse(&[0.5, 0.5], &[0.0, 1.0]), Some(1.0));
    }

    #[test]
    fn ranking_sorts_constants_with_run_id_ties() {
        let stub = |id: &str, v: f64| RankedRun {
            run_id: id.into(),
            predicted_final_metric: v,
        };
        let ranked = rank_by_prediction(vec![
            stub("c", 0.5),
            stub("a", 0.9),
            stub("d", f64::NAN),
            stub("b", 0.5),
            stub("e", 0.7),
        ]);
        let ids: Vec<&str> = ranked.iter().map(|r| r.run_id.as_str()).collect();
        assert_eq!(ids, ["a", "e", "b", "c", "d"]);
    }
}
