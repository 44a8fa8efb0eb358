//! Brute-force reference for one scheduler invocation, written directly
//! from the algorithm description with plain loops over single samples.

#![allow(dead_code)]

use std::collections::BTreeMap;

use lodesched::lode::{decode, encode, integrate, LatentState, LodeArch, LodeModel};
use lodesched::scheduler::SchedulerConfig;
use lodesched::trajectory::{fit_normalization, ScheduleFamily, Trajectory, TrajectoryPoint, Window};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct OracleOutcome {
    pub rates: Vec<f64>,
    pub provenance: &'static str,
    pub accepted: usize,
    /// Some accepted sample had several qualifying epochs sharing the top rate.
    pub anchor_tie: bool,
}

pub struct Oracle {
    rng: ChaCha8Rng,
}

impl Oracle {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn step(&mut self, model: &LodeModel, cfg: &SchedulerConfig, bootstrap: &Trajectory, history: &[TrajectoryPoint]) -> OracleOutcome {
        let spec = &model.normalization;
        let big_t = cfg.total_epochs;
        let mu = cfg.mu;
        let lo = cfg.lr_lo.unwrap_or(spec.lr_min / 10.0);
        let hi = cfg.lr_hi.unwrap_or(spec.lr_max * 10.0).max(lo);
        let clamp = |v: f64| if v < lo { lo } else if v > hi { hi } else { v };

        if history.is_empty() {
            return OracleOutcome {
                rates: bootstrap.points[..mu].iter().map(|p| clamp(p.lr)).collect(),
                provenance: "cold_start",
                accepted: 0,
                anchor_tie: false,
            };
        }
        let t_star = history.len() - 1;

        // 1. encode
        let source: &[TrajectoryPoint] = if history.len() < mu {
            &bootstrap.points[..mu]
        } else {
            &history[history.len() - mu..]
        };
        let w = Window {
            run_id: "oracle".into(),
            start_epoch: source[0].t,
            rows: source.iter().map(|p| spec.normalize_point(p)).collect(),
            raw_losses: source.iter().map(|p| p.train_loss).collect(),
        };
        let z0 = encode(model, &w).unwrap();
        let horizon = cfg.horizon.unwrap_or(big_t - t_star).max(1);
        let end = big_t + horizon;

        // 2. ensemble
        let normal = Normal::new(0.0, cfg.sigma).unwrap();
        let mut trajectories: Vec<Option<Vec<[f64; 3]>>> = Vec::new();
        for i in 0..cfg.n {
            let z = if i == 0 {
                z0.clone()
            } else {
                let mut v = Vec::new();
                for d in 0..z0.dim() {
                    v.push(z0.0[d] + normal.sample(&mut self.rng));
                }
                LatentState(v)
            };
            let traj = integrate(model, &z, 0, end).ok().and_then(|zs| decode(model, &zs).ok()).map(|rows| {
                rows.iter()
                    .map(|r| {
                        [
                            spec.denormalize_loss(r[0]),
                            spec.denormalize_metric(r[1]),
                            clamp(spec.denormalize_lr(r[2])),
                        ]
                    })
                    .collect::<Vec<_>>()
            });
            trajectories.push(traj.filter(|t| t.iter().all(|r| r.iter().all(|v| !v.is_nan()))));
        }

        // 3. acceptance against the recent live losses
        let recent: Vec<f64> = history[history.len().saturating_sub(mu)..].iter().map(|p| p.train_loss).collect();
        let mut offset = 0.0;
        for l in &recent {
            offset += l - recent[0];
        }
        let mean = recent[0] + offset / recent.len() as f64;
        let mut var = 0.0;
        for l in &recent {
            var += (l - mean) * (l - mean);
        }
        var /= recent.len() as f64;
        let bound = 2.0 * var.sqrt();
        let live = history[t_star].train_loss;

        // 4. anchor and score
        let mut scored: Vec<(usize, usize, f64)> = Vec::new();
        let mut anchor_tie = false;
        for (i, traj) in trajectories.iter().enumerate() {
            let Some(traj) = traj else { continue };
            let mut qualifying = Vec::new();
            for k in 0..=big_t.min(traj.len() - 1) {
                if (traj[k][0] - live).abs() < bound {
                    qualifying.push(k);
                }
            }
            if qualifying.is_empty() {
                continue;
            }
            let top = qualifying.iter().map(|&k| traj[k][2]).fold(f64::NEG_INFINITY, f64::max);
            let ks: Vec<usize> = qualifying.iter().copied().filter(|&k| traj[k][2] == top).collect();
            anchor_tie |= ks.len() > 1;
            let k = ks[0];
            let look = (k + horizon).min(end).min(traj.len() - 1);
            scored.push((i, k, traj[look][1]));
        }
        let accepted = scored.len();
        if scored.is_empty() {
            return OracleOutcome {
                rates: vec![clamp(history[t_star].lr); mu],
                provenance: "fallback",
                accepted,
                anchor_tie,
            };
        }

        // 5. average the three best predicted metrics
        let mut best: Vec<(usize, usize, f64)> = Vec::new();
        while best.len() < 3 && best.len() < scored.len() {
            let mut pick: Option<(usize, usize, f64)> = None;
            for &cand in &scored {
                if best.iter().any(|b| b.0 == cand.0) {
                    continue;
                }
                pick = match pick {
                    None => Some(cand),
                    Some(p) if cand.2 > p.2 || (cand.2 == p.2 && cand.0 < p.0) => Some(cand),
                    keep => keep,
                };
            }
            best.push(pick.unwrap());
        }
        let mut rates = Vec::new();
        for j in 0..mu {
            let mut values = Vec::new();
            for &(i, k, _) in &best {
                let traj = trajectories[i].as_ref().unwrap();
                values.push(traj[(k + j).min(traj.len() - 1)][2]);
            }
            let mut offset = 0.0;
            for v in &values {
                offset += v - values[0];
            }
            rates.push(values[0] + offset / values.len() as f64);
        }
        OracleOutcome {
            rates,
            provenance: "ensemble",
            accepted,
            anchor_tie,
        }
    }
}

fn synthetic_run(rng: &mut ChaCha8Rng, id: String, len: usize, noise: f64) -> Trajectory {
    let rate = rng.gen_range(0.02..0.4);
    let floor = rng.gen_range(0.05..0.5);
    let lr0: f64 = 10f64.powf(rng.gen_range(-3.0..-1.0));
    let points = (0..len)
        .map(|t| {
            let decay = (-rate * t as f64).exp();
            TrajectoryPoint {
                t,
                train_loss: (2.0 * decay + floor + noise * rng.gen_range(-1.0..1.0)).max(0.0),
                val_metric: (0.9 - 0.6 * decay + 0.5 * noise * rng.gen_range(-1.0..1.0)).clamp(0.0, 1.0),
                lr: lr0 * (0.5 + 0.5 * decay),
            }
        })
        .collect();
    Trajectory {
        run_id: id,
        seed: 0,
        schedule_family: ScheduleFamily::External,
        schedule_params: BTreeMap::new(),
        points,
    }
}

pub struct Instance {
    pub model: LodeModel,
    pub cfg: SchedulerConfig,
    pub bootstrap: Trajectory,
    pub live: Trajectory,
}

/// A random small scheduling problem. Roughly a third of the instances use
/// a degenerate lr clamp so that many decoded rates coincide.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let big_t = rng.gen_range(6..=30);
    let corpus: Vec<Trajectory> = (0..4).map(|i| synthetic_run(&mut rng, format!("c{i}"), big_t, 0.02)).collect();
    let spec = fit_normalization(&corpus).unwrap();
    let arch = LodeArch {
        latent_dim: rng.gen_range(2..=4),
        hidden_dim: rng.gen_range(2..=4),
        mlp_width: rng.gen_range(3..=6),
        substeps: rng.gen_range(1..=4),
        lambda_path: 0.0,
    };
    let model = LodeModel::init(&arch, spec.clone(), &mut rng).unwrap();
    let mu = rng.gen_range(1..=(big_t / 3).max(1));
    let (lr_lo, lr_hi) = match rng.gen_range(0..3) {
        0 => {
            let v = 10f64.powf(rng.gen_range(-3.0..-1.0));
            (Some(v), Some(v))
        }
        1 => (Some(spec.lr_min), Some(spec.lr_min * 2.0)),
        _ => (None, None),
    };
    let cfg = SchedulerConfig {
        mu,
        n: rng.gen_range(1..=8),
        sigma: [0.0, 0.05, 0.15, 0.5][rng.gen_range(0..4)],
        horizon: if rng.gen_bool(0.5) { None } else { Some(rng.gen_range(1..=5)) },
        total_epochs: big_t,
        lr_lo,
        lr_hi,
        seed: rng.gen(),
    };
    let noise = [0.0, 0.05, 0.3][rng.gen_range(0..3)];
    let live = synthetic_run(&mut rng, "live".into(), big_t, noise);
    let bootstrap = corpus[rng.gen_range(0..corpus.len())].clone();
    Instance {
        model,
        cfg,
        bootstrap,
        live,
    }
}
