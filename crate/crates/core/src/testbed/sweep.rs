use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::schedules::ScheduleSpec;
use crate::trajectory::{write_corpus, ScheduleFamily, Trajectory};

use super::data::SyntheticDataset;
use super::run::{train_run, RunOptions};
use super::TestbedError;

pub const SWEEP_LRS: [f64; 5] = [1e-3, 5e-3, 1e-2, 5e-2, 1e-1];
pub const SWEEP_FAMILIES: [ScheduleFamily; 4] = [
    ScheduleFamily::Constant,
    ScheduleFamily::Cosine,
    ScheduleFamily::Onecycle,
    ScheduleFamily::Expdecay,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub families: Vec<ScheduleFamily>,
    pub lrs: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    /// 4 families x 5 rates x 3 seeds.
    fn default() -> Self {
        Self::with_seeds(3)
    }
}

impl SweepGrid {
    /// The standard families and rates over seeds `0..n`.
    pub fn with_seeds(n: u64) -> Self {
        Self {
            families: SWEEP_FAMILIES.to_vec(),
            lrs: SWEEP_LRS.to_vec(),
            seeds: (0..n).collect(),
        }
    }

    /// Cartesian product, families outermost, seeds innermost.
    pub fn cells(&self, total_epochs: usize) -> Result<Vec<SweepCell>, TestbedError> {
        if self.families.is_empty() || self.lrs.is_empty() || self.seeds.is_empty() {
            return Err(TestbedError::Invalid("sweep grid has an empty axis".into()));
        }
        let mut out = Vec::with_capacity(self.families.len() * self.lrs.len() * self.seeds.len());
        for &family in &self.families {
            for &lr in &self.lrs {
                let spec = ScheduleSpec::with_base_lr(family, lr, total_epochs)?;
                for &seed in &self.seeds {
                    out.push(SweepCell {
                        run_id: format!("{family}-lr{lr:e}-s{seed}"),
                        spec,
                        seed,
                    });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub run_id: String,
    pub spec: ScheduleSpec,
    pub seed: u64,
}

impl SweepCell {
    pub fn run(&self, data: &SyntheticDataset) -> Result<Trajectory, TestbedError> {
        let opts = RunOptions {
            run_id: Some(self.run_id.clone()),
            ..RunOptions::default()
        };
        let mut spec = self.spec;
        Ok(train_run(data, self.seed, &mut spec, self.spec.total_epochs, &opts)?.trajectory)
    }
}

/// Trains every grid cell in order and writes the corpus as JSONL.
pub fn run_sweep(
    grid: &SweepGrid,
    data: &SyntheticDataset,
    total_epochs: usize,
    out: impl AsRef<Path>,
) -> Result<Vec<Trajectory>, TestbedError> {
    let corpus = grid
        .cells(total_epochs)?
        .iter()
        .map(|c| c.run(data))
        .collect::<Result<Vec<_>, _>>()?;
    write_corpus(out, &corpus)?;
    Ok(corpus)
}
