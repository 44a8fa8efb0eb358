//! Trajectory corpus: per-epoch training records, JSONL ingestion,
//! channel normalization and windowing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("run {run_id}: invalid {field}: {detail}")]
    Invariant {
        run_id: String,
        field: String,
        detail: String,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("window out of range: end epoch {end_epoch}, width {mu}, run length {len}")]
    WindowRange { end_epoch: usize, mu: usize, len: usize },
}

/// Number of channels per trajectory point: loss, metric, learning rate.
pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
}

impl TrajectoryPoint {
    pub fn check(&self, run_id: &str) -> Result<(), DataError> {
        let bad = |field: &str, detail: String| DataError::Invariant {
            run_id: run_id.to_string(),
            field: field.to_string(),
            detail,
        };
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(bad("lr", format!("epoch {}: lr must be finite and > 0, got {}", self.t, self.lr)));
        }
        if !self.train_loss.is_finite() || self.train_loss < 0.0 {
            return Err(bad(
                "train_loss",
                format!("epoch {}: must be finite and >= 0, got {}", self.t, self.train_loss),
            ));
        }
        if !self.val_metric.is_finite() || !(0.0..=1.0).contains(&self.val_metric) {
            return Err(bad(
                "val_metric",
                format!("epoch {}: must lie in [0, 1], got {}", self.t, self.val_metric),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleFamily {
    Constant,
    Cosine,
    Onecycle,
    Expdecay,
    Lode,
    External,
}

impl ScheduleFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleFamily::Constant => "constant",
            ScheduleFamily::Cosine => "cosine",
            ScheduleFamily::Onecycle => "onecycle",
            ScheduleFamily::Expdecay => "expdecay",
            ScheduleFamily::Lode => "lode",
            ScheduleFamily::External => "external",
        }
    }
}

impl fmt::Display for ScheduleFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One training run: contiguous per-epoch points plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub run_id: String,
    pub seed: u64,
    pub schedule_family: ScheduleFamily,
    pub schedule_params: BTreeMap<String, f64>,
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn final_point(&self) -> &TrajectoryPoint {
        self.points.last().expect("validated trajectories are non-empty")
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.points.len() < 2 {
            return Err(DataError::Invariant {
                run_id: self.run_id.clone(),
                field: "epochs".into(),
                detail: format!("need at least 2 points, got {}", self.points.len()),
            });
        }
        for (i, p) in self.points.iter().enumerate() {
            if p.t != i {
                return Err(DataError::Invariant {
                    run_id: self.run_id.clone(),
                    field: "t".into(),
                    detail: format!("expected epoch {i} at position {i}, found {}", p.t),
                });
            }
            p.check(&self.run_id)?;
        }
        for (k, v) in &self.schedule_params {
            if !v.is_finite() {
                return Err(DataError::Invariant {
                    run_id: self.run_id.clone(),
                    field: format!("schedule.params.{k}"),
                    detail: "must be finite".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleRecord {
    family: ScheduleFamily,
    #[serde(default)]
    params: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunRecord {
    run_id: String,
    seed: u64,
    schedule: ScheduleRecord,
    epochs: Vec<TrajectoryPoint>,
}

impl From<RunRecord> for Trajectory {
    fn from(r: RunRecord) -> Self {
        Trajectory {
            run_id: r.run_id,
            seed: r.seed,
            schedule_family: r.schedule.family,
            schedule_params: r.schedule.params,
            points: r.epochs,
        }
    }
}

impl From<&Trajectory> for RunRecord {
    fn from(t: &Trajectory) -> Self {
        RunRecord {
            run_id: t.run_id.clone(),
            seed: t.seed,
            schedule: ScheduleRecord {
                family: t.schedule_family,
                params: t.schedule_params.clone(),
            },
            epochs: t.points.clone(),
        }
    }
}

/// Serializes one trajectory as a single JSON line (no trailing newline).
pub fn to_json_line(traj: &Trajectory) -> String {
    serde_json::to_string(&RunRecord::from(traj)).expect("trajectory serializes")
}

/// Parses JSONL text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_corpus_reader<R: BufRead>(reader: R) -> Result<Vec<Trajectory>, DataError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: "<reader>".into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RunRecord = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        let traj = Trajectory::from(rec);
        traj.validate()?;
        out.push(traj);
    }
    Ok(out)
}

pub fn parse_corpus(path: impl AsRef<Path>) -> Result<Vec<Trajectory>, DataError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus_reader(BufReader::new(file))
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &[Trajectory]) -> Result<(), DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf = String::new();
    for t in corpus {
        buf.push_str(&to_json_line(t));
        buf.push('\n');
    }
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(buf.as_bytes()).map_err(io_err)?;
    Ok(())
}

/// Affine map `y = (x + shift) / scale` applied after a fixed pointwise
/// transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub shift: f64,
    pub scale: f64,
    /// Set when the fitted channel had zero spread and `scale` fell back to 1.
    pub zero_variance: bool,
}

impl Affine {
    fn apply(&self, x: f64) -> f64 {
        (x + self.shift) / self.scale
    }

    fn invert(&self, y: f64) -> f64 {
        y * self.scale - self.shift
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    /// Applied to `ln(1 + loss)`.
    pub loss: Affine,
    /// Applied to the raw metric; corpus min maps to -1, max to +1.
    pub metric: Affine,
    /// Applied to `log10(lr)`.
    pub lr: Affine,
    /// Longest corpus run; epoch `t` maps to `tau = t / time_scale`.
    pub time_scale: usize,
    pub lr_min: f64,
    pub lr_max: f64,
}

impl NormalizationSpec {
    pub fn normalize_loss(&self, loss: f64) -> f64 {
        self.loss.apply(loss.ln_1p())
    }
    pub fn normalize_metric(&self, metric: f64) -> f64 {
        self.metric.apply(metric)
    }
    pub fn normalize_lr(&self, lr: f64) -> f64 {
        self.lr.apply(lr.log10())
    }
    pub fn denormalize_loss(&self, y: f64) -> f64 {
        self.loss.invert(y).exp_m1()
    }
    pub fn denormalize_metric(&self, y: f64) -> f64 {
        self.metric.invert(y)
    }
    pub fn denormalize_lr(&self, y: f64) -> f64 {
        10f64.powf(self.lr.invert(y))
    }

    pub fn normalize_point(&self, p: &TrajectoryPoint) -> [f64; CHANNELS] {
        [
            self.normalize_loss(p.train_loss),
            self.normalize_metric(p.val_metric),
            self.normalize_lr(p.lr),
        ]
    }

    /// Inverse of [`Self::normalize_point`] as (loss, metric, lr).
    pub fn denormalize_row(&self, row: &[f64]) -> [f64; CHANNELS] {
        [
            self.denormalize_loss(row[0]),
            self.denormalize_metric(row[1]),
            self.denormalize_lr(row[2]),
        ]
    }

    pub fn tau(&self, epoch: usize) -> f64 {
        epoch as f64 / self.time_scale as f64
    }

    /// Whole run as a `len x 3` row-major matrix.
    pub fn normalize_run(&self, traj: &Trajectory) -> Vec<[f64; CHANNELS]> {
        traj.points.iter().map(|p| self.normalize_point(p)).collect()
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn standardizer(values: &[f64]) -> Affine {
    let (mean, std) = mean_std(values);
    // relative threshold: a channel whose spread is pure roundoff counts as constant
    let zero = !(std > 1e-12 * mean.abs().max(1.0));
    Affine {
        shift: -mean,
        scale: if zero { 1.0 } else { std },
        zero_variance: zero,
    }
}

/// Fits per-channel transforms over every point of every run.
pub fn fit_normalization(corpus: &[Trajectory]) -> Result<NormalizationSpec, DataError> {
    if corpus.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let pts = corpus.iter().flat_map(|t| t.points.iter());
    let losses: Vec<f64> = pts.clone().map(|p| p.train_loss.ln_1p()).collect();
    let lrs: Vec<f64> = pts.clone().map(|p| p.lr.log10()).collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lr_min, mut lr_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        lo = lo.min(p.val_metric);
        hi = hi.max(p.val_metric);
        lr_min = lr_min.min(p.lr);
        lr_max = lr_max.max(p.lr);
    }
    if losses.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let metric = if hi > lo {
        Affine {
            shift: -(lo + hi) / 2.0,
            scale: (hi - lo) / 2.0,
            zero_variance: false,
        }
    } else {
        Affine {
            shift: -lo,
            scale: 1.0,
            zero_variance: true,
        }
    };
    Ok(NormalizationSpec {
        loss: standardizer(&losses),
        metric,
        lr: standardizer(&lrs),
        time_scale: corpus.iter().map(Trajectory::len).max().unwrap_or(1),
        lr_min,
        lr_max,
    })
}

/// A normalized μ-row slice of one run, ending at `end_epoch` inclusive.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub run_id: String,
    pub start_epoch: usize,
    pub rows: Vec<[f64; CHANNELS]>,
    pub raw_losses: Vec<f64>,
}

impl Window {
    pub fn width(&self) -> usize {
        self.rows.len()
    }

    pub fn end_epoch(&self) -> usize {
        self.start_epoch + self.rows.len() - 1
    }
}

pub fn window(traj: &Trajectory, end_epoch: usize, mu: usize, spec: &NormalizationSpec) -> Result<Window, DataError> {
    window_points(&traj.run_id, &traj.points, end_epoch, mu, spec)
}

/// Windowing over a bare slice of points (a live run history, say).
pub fn window_points(
    run_id: &str,
    points: &[TrajectoryPoint],
    end_epoch: usize,
    mu: usize,
    spec: &NormalizationSpec,
) -> Result<Window, DataError> {
    if mu == 0 || end_epoch >= points.len() || end_epoch + 1 < mu {
        return Err(DataError::WindowRange {
            end_epoch,
            mu,
            len: points.len(),
        });
    }
    let start = end_epoch + 1 - mu;
    let span = &points[start..=end_epoch];
    Ok(Window {
        run_id: run_id.to_string(),
        start_epoch: start,
        rows: span.iter().map(|p| spec.normalize_point(p)).collect(),
        raw_losses: span.iter().map(|p| p.train_loss).collect(),
    })
}

/// Splits off `n` runs chosen by a seeded permutation. Both parts keep
/// corpus order. Returns `(kept, held_out)`.
pub fn holdout_split(corpus: &[Trajectory], n: usize, seed: u64) -> (Vec<Trajectory>, Vec<Trajectory>) {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held: BTreeSet<usize> = order.into_iter().take(n).collect();
    let (mut kept, mut out) = (Vec::new(), Vec::new());
    for (i, t) in corpus.iter().enumerate() {
        if held.contains(&i) {
            out.push(t.clone());
        } else {
            kept.push(t.clone());
        }
    }
    (kept, out)
}
