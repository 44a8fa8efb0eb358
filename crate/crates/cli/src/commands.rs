use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use lodesched::lode::{predict_from_prefix, rank_runs, train_lode, LodeArch, LodeModel, Prediction, TrainConfig};
use lodesched::scheduler::{select_bootstrap, LodeScheduler};
use lodesched::schedules::ScheduleSpec;
use lodesched::testbed::{
    assemble_report, comparison_jobs, eos_ratio, lode_factory, run_job, train_run, CompareConfig, LrSource,
    RunOptions, SharpnessConfig, SweepGrid, SyntheticDataset,
};
use lodesched::trajectory::{holdout_split, parse_corpus, to_json_line, write_corpus, ScheduleFamily, Trajectory, CHANNELS};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::{sibling, usage, Failure};

fn positive(flag: &str, v: usize, min: usize) -> Result<(), Failure> {
    if v < min {
        return Err(usage(format!("{flag}: must be >= {min}, got {v}")));
    }
    Ok(())
}

fn finite_positive(flag: &str, v: f64) -> Result<(), Failure> {
    if !(v.is_finite() && v > 0.0) {
        return Err(usage(format!("{flag}: must be finite and > 0, got {v}")));
    }
    Ok(())
}

fn unit_interval(flag: &str, v: f64) -> Result<(), Failure> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(usage(format!("{flag}: must lie in (0, 1], got {v}")));
    }
    Ok(())
}

fn validate_data(d: &DataArgs) -> Result<(), Failure> {
    if !(d.radius.is_finite() && d.radius >= 0.0) {
        return Err(usage(format!("--radius: must be finite and >= 0, got {}", d.radius)));
    }
    finite_positive("--spread", d.spread)?;
    finite_positive("--y-scale", d.y_scale)
}

fn validate_sched(s: &SchedArgs, epochs: usize) -> Result<(), Failure> {
    if let Some(mu) = s.mu {
        if mu == 0 || mu > epochs {
            return Err(usage(format!("--mu: must lie in 1..={epochs}, got {mu}")));
        }
    }
    positive("--n", s.n, 1)?;
    if !(s.sigma.is_finite() && s.sigma >= 0.0) {
        return Err(usage(format!("--sigma: must be finite and >= 0, got {}", s.sigma)));
    }
    if let Some(h) = s.horizon {
        positive("--horizon", h, 1)?;
    }
    if let Some(lo) = s.lr_lo {
        finite_positive("--lr-lo", lo)?;
    }
    if let Some(hi) = s.lr_hi {
        finite_positive("--lr-hi", hi)?;
    }
    if let (Some(lo), Some(hi)) = (s.lr_lo, s.lr_hi) {
        if lo > hi {
            return Err(usage(format!("--lr-lo: must not exceed --lr-hi ({lo} > {hi})")));
        }
    }
    Ok(())
}

/// Flag constraints, checked before any work starts.
pub fn validate(command: &Command) -> Result<(), Failure> {
    match command {
        Command::Sweep(a) => {
            positive("--epochs", a.epochs, 2)?;
            if a.seeds == 0 {
                return Err(usage("--seeds: must be >= 1, got 0"));
            }
            if a.lrs.is_empty() {
                return Err(usage("--lrs: needs at least one rate"));
            }
            for &lr in &a.lrs {
                finite_positive("--lrs", lr)?;
            }
            if a.families.is_empty() {
                return Err(usage("--families: needs at least one family"));
            }
            positive("--jobs", a.jobs, 1)?;
            validate_data(&a.data)
        }
        Command::TrainLode(a) => {
            positive("--steps", a.steps, 1)?;
            positive("--batch-size", a.batch_size, 1)?;
            finite_positive("--peak-lr", a.peak_lr)?;
            if !(a.pct_start > 0.0 && a.pct_start < 1.0) {
                return Err(usage(format!("--pct-start: must lie in (0, 1), got {}", a.pct_start)));
            }
            unit_interval("--prefix-min", a.prefix_min)?;
            unit_interval("--prefix-max", a.prefix_max)?;
            if a.prefix_min > a.prefix_max {
                return Err(usage(format!(
                    "--prefix-min: must not exceed --prefix-max ({} > {})",
                    a.prefix_min, a.prefix_max
                )));
            }
            positive("--latent-dim", a.latent_dim, 1)?;
            positive("--hidden-dim", a.hidden_dim, 1)?;
            positive("--mlp-width", a.mlp_width, 1)?;
            positive("--substeps", a.substeps, 1)?;
            if !(a.lambda_path.is_finite() && a.lambda_path >= 0.0) {
                return Err(usage(format!("--lambda-path: must be finite and >= 0, got {}", a.lambda_path)));
            }
            Ok(())
        }
        Command::Reconstruct(a) => {
            unit_interval("--prefix-fraction", a.prefix_fraction)?;
            if !a.runs.is_empty() && a.holdout_file.is_some() {
                return Err(usage("--runs: cannot be combined with --holdout-file"));
            }
            Ok(())
        }
        Command::Rank(a) => positive("--prefix-epochs", a.prefix_epochs, 1),
        Command::Run(a) => {
            positive("--epochs", a.epochs, 2)?;
            match a.family {
                RunFamilyArg::Lode => {
                    if a.model.is_none() {
                        return Err(usage("--model: required with --family lode"));
                    }
                    if a.corpus.is_none() {
                        return Err(usage("--corpus: required with --family lode"));
                    }
                    if a.lr.is_some() {
                        return Err(usage("--lr: only applies to parametric families"));
                    }
                }
                _ => match a.lr {
                    Some(lr) => finite_positive("--lr", lr)?,
                    None => return Err(usage("--lr: required with a parametric --family")),
                },
            }
            validate_sched(&a.sched, a.epochs)?;
            validate_data(&a.data)
        }
        Command::Compare(a) => {
            positive("--epochs", a.epochs, 2)?;
            if a.seeds == 0 {
                return Err(usage("--seeds: must be >= 1, got 0"));
            }
            positive("--sharpness-every", a.sharpness_every, 1)?;
            positive("--sharpness-iters", a.sharpness_iters, 1)?;
            finite_positive("--sharpness-tol", a.sharpness_tol)?;
            positive("--jobs", a.jobs, 1)?;
            validate_sched(&a.sched, a.epochs)?;
            validate_data(&a.data)
        }
        Command::Sharpness(a) => {
            positive("--epochs", a.epochs, 2)?;
            finite_positive("--lr", a.lr)?;
            positive("--every", a.every, 1)?;
            positive("--iters", a.iters, 1)?;
            finite_positive("--tol", a.tol)?;
            validate_data(&a.data)
        }
        Command::Export(_) => Ok(()),
    }
}

pub fn execute(command: &Command) -> Result<(), Failure> {
    match command {
        Command::Sweep(a) => sweep(a),
        Command::TrainLode(a) => train(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Rank(a) => rank(a),
        Command::Run(a) => run(a),
        Command::Compare(a) => compare(a),
        Command::Sharpness(a) => sharpness(a),
        Command::Export(a) => crate::export::export(a),
    }
    .map_err(Failure::from)
}

fn require_file(flag: &str, path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("{flag}: no such file {}", path.display());
    }
    Ok(())
}

fn load_corpus(flag: &str, path: &Path) -> anyhow::Result<Vec<Trajectory>> {
    require_file(flag, path)?;
    parse_corpus(path).with_context(|| format!("{flag}: {}", path.display()))
}

fn load_model(flag: &str, path: &Path) -> anyhow::Result<LodeModel> {
    require_file(flag, path)?;
    LodeModel::load(path).with_context(|| format!("{flag}: {}", path.display()))
}

fn write_text(path: &Path, text: String) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_text(path, serde_json::to_string_pretty(value)? + "\n")
}

fn dataset(d: &DataArgs) -> anyhow::Result<SyntheticDataset> {
    Ok(SyntheticDataset::generate(&d.config())?)
}

fn pool(jobs: usize) -> anyhow::Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| anyhow!("--jobs: cannot start {jobs} workers: {e}"))
}

fn seed_range(first: u64, count: u64) -> anyhow::Result<Vec<u64>> {
    let end = first
        .checked_add(count)
        .ok_or_else(|| anyhow!("--seed: {first} + {count} seeds overflows"))?;
    Ok((first..end).collect())
}

fn sweep(a: &SweepArgs) -> anyhow::Result<()> {
    let data = dataset(&a.data)?;
    let grid = SweepGrid {
        families: a.families.iter().map(|&f| f.into()).collect(),
        lrs: a.lrs.clone(),
        seeds: seed_range(a.seed, a.seeds)?,
    };
    let cells = grid.cells(a.epochs)?;
    let corpus = pool(a.jobs)?.install(|| cells.par_iter().map(|c| c.run(&data)).collect::<Result<Vec<_>, _>>())?;
    write_corpus(&a.out, &corpus)?;
    eprintln!("wrote {} runs to {}", corpus.len(), a.out.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct HoldoutFile {
    pub seed: u64,
    pub run_ids: Vec<String>,
}

fn train(a: &TrainLodeArgs) -> anyhow::Result<()> {
    let corpus = load_corpus("--corpus", &a.corpus)?;
    if a.holdout >= corpus.len() {
        bail!("--holdout: must be below the corpus size {}, got {}", corpus.len(), a.holdout);
    }
    let (kept, held) = holdout_split(&corpus, a.holdout, a.holdout_seed);
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        updates: a.steps,
        peak_lr: a.peak_lr,
        pct_start: a.pct_start,
        seed: a.seed,
        prefix_min: a.prefix_min,
        prefix_max: a.prefix_max,
        arch: LodeArch {
            latent_dim: a.latent_dim,
            hidden_dim: a.hidden_dim,
            mlp_width: a.mlp_width,
            substeps: a.substeps,
            lambda_path: a.lambda_path,
        },
        ..TrainConfig::default()
    };
    let outcome = train_lode(&kept, &cfg)?;
    outcome.model.save(&a.out)?;
    if a.holdout > 0 {
        write_json(
            &sibling(&a.out, "holdout.json"),
            &HoldoutFile {
                seed: a.holdout_seed,
                run_ids: held.iter().map(|t| t.run_id.clone()).collect(),
            },
        )?;
    }
    if let Some(last) = outcome.loss_history.last() {
        eprintln!("trained on {} runs, final loss {last}", kept.len());
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub prefix_fraction: f64,
    /// Mean over runs of the relative MSE of (train_loss, val_metric, lr),
    /// skipping runs where the channel is constant.
    pub mean_rel_mse: [Option<f64>; CHANNELS],
    pub runs: Vec<Prediction>,
}

fn select_runs(corpus: Vec<Trajectory>, ids: &[String], flag: &str) -> anyhow::Result<Vec<Trajectory>> {
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let present: BTreeSet<&str> = corpus.iter().map(|t| t.run_id.as_str()).collect();
    if let Some(missing) = wanted.iter().find(|id| !present.contains(*id)) {
        bail!("{flag}: run {missing} is not in the corpus");
    }
    Ok(corpus.into_iter().filter(|t| wanted.contains(t.run_id.as_str())).collect())
}

fn reconstruct(a: &ReconstructArgs) -> anyhow::Result<()> {
    let model = load_model("--model", &a.model)?;
    let mut runs = load_corpus("--corpus", &a.corpus)?;
    if !a.runs.is_empty() {
        runs = select_runs(runs, &a.runs, "--runs")?;
    } else if let Some(path) = &a.holdout_file {
        require_file("--holdout-file", path)?;
        let h: HoldoutFile = serde_json::from_str(&fs::read_to_string(path)?)
            .with_context(|| format!("--holdout-file: {}", path.display()))?;
        runs = select_runs(runs, &h.run_ids, "--holdout-file")?;
    }
    let preds = runs
        .iter()
        .map(|t| predict_from_prefix(&model, t, a.prefix_fraction))
        .collect::<Result<Vec<_>, _>>()?;
    let mut mean_rel_mse = [None; CHANNELS];
    for (ch, slot) in mean_rel_mse.iter_mut().enumerate() {
        let v: Vec<f64> = preds.iter().filter_map(|p| p.rel_mse[ch]).collect();
        if !v.is_empty() {
            *slot = Some(v.iter().sum::<f64>() / v.len() as f64);
        }
    }
    write_json(
        &a.out,
        &ReconstructionReport {
            prefix_fraction: a.prefix_fraction,
            mean_rel_mse,
            runs: preds,
        },
    )
}

#[derive(Serialize, Deserialize)]
pub struct RankEntry {
    pub rank: usize,
    pub run_id: String,
    pub predicted_final_metric: f64,
    pub true_final_metric: f64,
}

fn rank(a: &RankArgs) -> anyhow::Result<()> {
    let model = load_model("--model", &a.model)?;
    let corpus = load_corpus("--corpus", &a.corpus)?;
    let ranked = rank_runs(&model, &corpus, a.prefix_epochs)?;
    let entries: Vec<RankEntry> = ranked
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let truth = corpus.iter().find(|t| t.run_id == r.run_id).expect("ranked run is in the corpus");
            RankEntry {
                rank: i + 1,
                true_final_metric: truth.final_point().val_metric,
                run_id: r.run_id,
                predicted_final_metric: r.predicted_final_metric,
            }
        })
        .collect();
    write_json(&a.out, &entries)
}

fn run(a: &RunArgs) -> anyhow::Result<()> {
    let data = dataset(&a.data)?;
    let opts = RunOptions::default();
    let (out, decisions) = match a.family {
        RunFamilyArg::Lode => {
            let model = load_model("--model", a.model.as_deref().expect("validated"))?;
            let corpus = load_corpus("--corpus", a.corpus.as_deref().expect("validated"))?;
            let bootstrap = select_bootstrap(&corpus)
                .ok_or_else(|| anyhow!("--corpus: no non-empty run to bootstrap from"))?
                .clone();
            let mut cfg = a.sched.config(a.epochs);
            // Same offset as the comparison's LODE arm.
            cfg.seed = cfg.seed.wrapping_add(a.seed);
            let mut sched = LodeScheduler::new(model, cfg, bootstrap)?;
            let out = train_run(&data, a.seed, &mut sched, a.epochs, &opts)?;
            (out, Some(sched.decisions().to_vec()))
        }
        family => {
            let family = family.parametric().expect("not lode");
            let mut spec = ScheduleSpec::with_base_lr(family, a.lr.expect("validated"), a.epochs)?;
            (train_run(&data, a.seed, &mut spec, a.epochs, &opts)?, None)
        }
    };
    write_text(&a.out, to_json_line(&out.trajectory) + "\n")?;
    if let Some(decisions) = decisions {
        let lines: String = decisions.iter().map(|d| d.to_json_line() + "\n").collect();
        write_text(&sibling(&a.out, "decisions.jsonl"), lines)?;
    }
    if let Some(t) = out.diverged_at {
        eprintln!("run diverged at epoch {t}");
    }
    Ok(())
}

fn compare(a: &CompareArgs) -> anyhow::Result<()> {
    let model = load_model("--model", &a.model)?;
    let corpus = load_corpus("--corpus", &a.corpus)?;
    let data = dataset(&a.data)?;
    let cfg = CompareConfig {
        sharpness_every: a.sharpness_every,
        sharpness: SharpnessConfig {
            iters: a.sharpness_iters,
            tol: a.sharpness_tol,
            ..SharpnessConfig::default()
        },
        ..CompareConfig::new(a.epochs, seed_range(a.seed, a.seeds)?)
    };
    let sched = a.sched.config(a.epochs);
    let factory = lode_factory(&model, &sched, &corpus)?;
    let jobs = comparison_jobs(&corpus, &cfg)?;
    let runs = pool(a.jobs)?.install(|| {
        jobs.par_iter()
            .map(|j| run_job(j, &data, &cfg, &factory))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let report = assemble_report(&cfg, &jobs, runs);
    for arm in &report.arms {
        eprintln!(
            "{:<9} test {:.4} +- {:.4}  lambda_max {}",
            arm.arm,
            arm.mean_test_metric,
            arm.std_test_metric,
            arm.mean_lambda_max.map_or("-".into(), |l| format!("{l:.4}"))
        );
    }
    write_text(&a.out, report.to_json() + "\n")
}

#[derive(Serialize, Deserialize)]
pub struct SharpnessSample {
    pub epoch: usize,
    pub lr: f64,
    pub lambda_max: f64,
    /// `lr * lambda_max / 2`; `None` for a negative estimate.
    pub eos_ratio: Option<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct SharpnessReport {
    pub run_id: String,
    pub family: ScheduleFamily,
    pub lr: f64,
    pub diverged_at: Option<usize>,
    pub samples: Vec<SharpnessSample>,
}

fn sharpness(a: &SharpnessArgs) -> anyhow::Result<()> {
    let data = dataset(&a.data)?;
    let family: ScheduleFamily = a.family.into();
    let mut spec = ScheduleSpec::with_base_lr(family, a.lr, a.epochs)?;
    let opts = RunOptions {
        run_id: None,
        sharpness_every: Some(a.every),
        sharpness: SharpnessConfig {
            iters: a.iters,
            tol: a.tol,
            seed: a.probe_seed,
        },
    };
    let out = train_run(&data, a.seed, &mut spec as &mut dyn LrSource, a.epochs, &opts)?;
    let samples = out
        .trajectory
        .points
        .iter()
        .zip(&out.lambda_max)
        .filter_map(|(p, l)| {
            l.map(|l| SharpnessSample {
                epoch: p.t,
                lr: p.lr,
                lambda_max: l,
                eos_ratio: (l >= 0.0).then(|| eos_ratio(p.lr, l)),
            })
        })
        .collect();
    write_json(
        &a.out,
        &SharpnessReport {
            run_id: out.trajectory.run_id.clone(),
            family,
            lr: a.lr,
            diverged_at: out.diverged_at,
            samples,
        },
    )
}
