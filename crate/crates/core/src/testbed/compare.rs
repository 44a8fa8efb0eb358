//! Head-to-head evaluation of the parametric families at their best sweep
//! rate against a LODE-scheduled arm.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::lode::LodeModel;
use crate::scheduler::{select_bootstrap, LodeScheduler, SchedulerConfig};
use crate::schedules::ScheduleSpec;
use crate::trajectory::{ScheduleFamily, Trajectory};

use super::data::SyntheticDataset;
use super::run::{train_run, LrSource, RunOptions, RunOutput};
use super::sharpness::SharpnessConfig;
use super::sweep::SWEEP_FAMILIES;
use super::TestbedError;

pub const LODE_ARM: &str = "lode";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub total_epochs: usize,
    pub seeds: Vec<u64>,
    /// Sharpness sampling period in epochs; the final epoch is always sampled.
    pub sharpness_every: usize,
    pub sharpness: SharpnessConfig,
}

impl CompareConfig {
    pub fn new(total_epochs: usize, seeds: Vec<u64>) -> Self {
        Self {
            total_epochs,
            seeds,
            sharpness_every: 5,
            sharpness: SharpnessConfig::default(),
        }
    }
}

/// Builds the LODE arm's rate source for a trainee seed.
pub type LodeFactory<'a> = dyn Fn(u64) -> Result<Box<dyn LrSource>, TestbedError> + Sync + 'a;

/// For each parametric family in the corpus, the overall rate with the
/// highest mean final validation metric across seeds. Ties go to the
/// smaller rate. Families appear in the standard order.
pub fn best_sweep_lrs(corpus: &[Trajectory]) -> Result<Vec<(ScheduleFamily, f64)>, TestbedError> {
    let mut finals: BTreeMap<(ScheduleFamily, u64), (f64, Vec<f64>)> = BTreeMap::new();
    for t in corpus {
        if !SWEEP_FAMILIES.contains(&t.schedule_family) {
            continue;
        }
        let spec = ScheduleSpec::from_params(t.schedule_family, &t.schedule_params, t.len().max(2))?;
        let lr = spec.base_lr();
        finals
            .entry((t.schedule_family, lr.to_bits()))
            .or_insert_with(|| (lr, Vec::new()))
            .1
            .push(t.final_point().val_metric);
    }
    let mut out = Vec::new();
    for family in SWEEP_FAMILIES {
        let mut best: Option<(f64, f64)> = None;
        for ((f, _), (lr, vals)) in &finals {
            if *f != family {
                continue;
            }
            let m = mean(vals);
            best = match best {
                Some((blr, bm)) if bm > m || (bm == m && blr <= *lr) => Some((blr, bm)),
                _ => Some((*lr, m)),
            };
        }
        if let Some((lr, _)) = best {
            out.push((family, lr));
        }
    }
    if out.is_empty() {
        return Err(TestbedError::Invalid("corpus contains no parametric sweep runs".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonJob {
    pub arm: String,
    /// `None` for the LODE arm.
    pub spec: Option<ScheduleSpec>,
    pub seed: u64,
}

impl ComparisonJob {
    pub fn run_id(&self) -> String {
        format!("compare-{}-s{}", self.arm, self.seed)
    }
}

/// One job per (arm, seed): the baselines in the standard family order,
/// then the LODE arm.
pub fn comparison_jobs(corpus: &[Trajectory], cfg: &CompareConfig) -> Result<Vec<ComparisonJob>, TestbedError> {
    if cfg.seeds.is_empty() {
        return Err(TestbedError::Invalid("comparison needs at least one seed".into()));
    }
    let mut jobs = Vec::new();
    for (family, lr) in best_sweep_lrs(corpus)? {
        let spec = ScheduleSpec::with_base_lr(family, lr, cfg.total_epochs)?;
        for &seed in &cfg.seeds {
            jobs.push(ComparisonJob {
                arm: family.to_string(),
                spec: Some(spec),
                seed,
            });
        }
    }
    for &seed in &cfg.seeds {
        jobs.push(ComparisonJob {
            arm: LODE_ARM.into(),
            spec: None,
            seed,
        });
    }
    Ok(jobs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_metric: f64,
    pub test_metric: f64,
    pub lambda_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: String,
    pub run_id: String,
    pub seed: u64,
    pub diverged: bool,
    pub best_epoch: usize,
    pub best_test_metric: f64,
    pub final_lambda_max: Option<f64>,
    pub epochs: Vec<EpochRow>,
}

impl ArmRun {
    fn from_output(arm: &str, out: &RunOutput) -> Self {
        let epochs = out
            .trajectory
            .points
            .iter()
            .zip(&out.test_metric)
            .zip(&out.lambda_max)
            .map(|((p, &test_metric), &lambda_max)| EpochRow {
                epoch: p.t,
                lr: p.lr,
                train_loss: p.train_loss,
                val_metric: p.val_metric,
                test_metric,
                lambda_max,
            })
            .collect();
        Self {
            arm: arm.into(),
            run_id: out.trajectory.run_id.clone(),
            seed: out.trajectory.seed,
            diverged: out.diverged_at.is_some(),
            best_epoch: out.best_epoch(),
            best_test_metric: out.best_epoch_test_metric(),
            final_lambda_max: out.final_lambda_max(),
            epochs,
        }
    }
}

pub fn run_job(job: &ComparisonJob, data: &SyntheticDataset, cfg: &CompareConfig, lode: &LodeFactory) -> Result<ArmRun, TestbedError> {
    let opts = RunOptions {
        run_id: Some(job.run_id()),
        sharpness_every: Some(cfg.sharpness_every),
        sharpness: cfg.sharpness,
    };
    let out = match job.spec {
        Some(mut spec) => train_run(data, job.seed, &mut spec, cfg.total_epochs, &opts)?,
        None => {
            let mut source = lode(job.seed)?;
            train_run(data, job.seed, source.as_mut(), cfg.total_epochs, &opts)?
        }
    };
    Ok(ArmRun::from_output(&job.arm, &out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    /// Overall rate of a baseline arm.
    pub lr: Option<f64>,
    pub run_ids: Vec<String>,
    pub seeds: Vec<u64>,
    /// Test accuracy at each run's best validation epoch.
    pub best_epoch_test_metric: Vec<f64>,
    pub lambda_max: Vec<Option<f64>>,
    pub diverged: Vec<bool>,
    pub mean_test_metric: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_test_metric: f64,
    /// Over runs with a measured sharpness.
    pub mean_lambda_max: Option<f64>,
    pub std_lambda_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub total_epochs: usize,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmSummary>,
    pub runs: Vec<ArmRun>,
}

impl ComparisonReport {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TestbedError> {
        serde_json::from_str(text).map_err(|e| TestbedError::Invalid(format!("malformed report: {e}")))
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation, 0 below two values.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Groups runs by arm, keeping the order in which arms first appear.
pub fn assemble_report(cfg: &CompareConfig, jobs: &[ComparisonJob], runs: Vec<ArmRun>) -> ComparisonReport {
    let mut arms: Vec<ArmSummary> = Vec::new();
    for (job, run) in jobs.iter().zip(&runs) {
        let idx = match arms.iter().position(|a| a.arm == run.arm) {
            Some(i) => i,
            None => {
                arms.push(ArmSummary {
                    arm: run.arm.clone(),
                    lr: job.spec.map(|s| s.base_lr()),
                    run_ids: Vec::new(),
                    seeds: Vec::new(),
                    best_epoch_test_metric: Vec::new(),
                    lambda_max: Vec::new(),
                    diverged: Vec::new(),
                    mean_test_metric: 0.0,
                    std_test_metric: 0.0,
                    mean_lambda_max: None,
                    std_lambda_max: None,
                });
                arms.len() - 1
            }
        };
        let a = &mut arms[idx];
        a.run_ids.push(run.run_id.clone());
        a.seeds.push(run.seed);
        a.best_epoch_test_metric.push(run.best_test_metric);
        a.lambda_max.push(run.final_lambda_max);
        a.diverged.push(run.diverged);
    }
    for a in &mut arms {
        a.mean_test_metric = mean(&a.best_epoch_test_metric);
        a.std_test_metric = std_dev(&a.best_epoch_test_metric);
        let lam: Vec<f64> = a.lambda_max.iter().flatten().copied().collect();
        if !lam.is_empty() {
            a.mean_lambda_max = Some(mean(&lam));
            a.std_lambda_max = Some(std_dev(&lam));
        }
    }
    ComparisonReport {
        total_epochs: cfg.total_epochs,
        seeds: cfg.seeds.clone(),
        arms,
        runs,
    }
}

/// Runs every comparison job in order with a caller-supplied LODE arm.
pub fn compare_with(
    corpus: &[Trajectory],
    data: &SyntheticDataset,
    cfg: &CompareConfig,
    lode: &LodeFactory,
) -> Result<ComparisonReport, TestbedError> {
    let jobs = comparison_jobs(corpus, cfg)?;
    let runs = jobs.iter().map(|j| run_job(j, data, cfg, lode)).collect::<Result<Vec<_>, _>>()?;
    Ok(assemble_report(cfg, &jobs, runs))
}

/// A live scheduler per trainee seed, bootstrapped from the corpus run with
/// the best final metric. The ensemble seed is offset by the trainee seed.
pub fn lode_factory<'a>(
    model: &'a LodeModel,
    sched: &'a SchedulerConfig,
    corpus: &[Trajectory],
) -> Result<impl Fn(u64) -> Result<Box<dyn LrSource>, TestbedError> + Sync + 'a, TestbedError> {
    sched.validate()?;
    let bootstrap = select_bootstrap(corpus)
        .ok_or_else(|| TestbedError::Invalid("cannot bootstrap from an empty corpus".into()))?
        .clone();
    Ok(move |seed: u64| -> Result<Box<dyn LrSource>, TestbedError> {
        let cfg = SchedulerConfig {
            seed: sched.seed.wrapping_add(seed),
            ..sched.clone()
        };
        Ok(Box::new(LodeScheduler::new(model.clone(), cfg, bootstrap.clone())?))
    })
}

pub fn evaluate_comparison(
    corpus: &[Trajectory],
    model: &LodeModel,
    sched: &SchedulerConfig,
    data: &SyntheticDataset,
    cfg: &CompareConfig,
) -> Result<ComparisonReport, TestbedError> {
    if sched.total_epochs != cfg.total_epochs {
        return Err(TestbedError::Invalid(format!(
            "scheduler plans {} epochs but the comparison runs {}",
            sched.total_epochs, cfg.total_epochs
        )));
    }
    let factory = lode_factory(model, sched, corpus)?;
    compare_with(corpus, data, cfg, &factory)
}
