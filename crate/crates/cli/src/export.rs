use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use lodesched::testbed::ComparisonReport;
use lodesched::trajectory::{parse_corpus_reader, Trajectory};

use crate::args::{ExportArgs, FormatArg};

pub const CORPUS_HEADER: [&str; 7] = ["run_id", "seed", "schedule_family", "epoch", "train_loss", "val_metric", "lr"];
pub const REPORT_HEADER: [&str; 11] = [
    "arm",
    "run_id",
    "seed",
    "epoch",
    "lr",
    "train_loss",
    "val_metric",
    "test_metric",
    "lambda_max",
    "best_epoch",
    "diverged",
];

enum Input {
    Corpus(Vec<Trajectory>),
    Report(ComparisonReport),
}

/// A file that parses as a comparison report is one; anything else must be
/// a corpus.
fn read_input(path: &Path) -> anyhow::Result<Input> {
    if !path.is_file() {
        bail!("--input: no such file {}", path.display());
    }
    let text = fs::read_to_string(path).with_context(|| format!("--input: {}", path.display()))?;
    if let Ok(report) = ComparisonReport::from_json(&text) {
        return Ok(Input::Report(report));
    }
    let corpus = parse_corpus_reader(text.as_bytes()).with_context(|| format!("--input: {}", path.display()))?;
    Ok(Input::Corpus(corpus))
}

pub fn export(a: &ExportArgs) -> anyhow::Result<()> {
    let FormatArg::Csv = a.format;
    let inputs = a.input.iter().map(|p| read_input(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let reports = inputs.iter().filter(|i| matches!(i, Input::Report(_))).count();
    if reports != 0 && reports != inputs.len() {
        bail!("--input: cannot mix corpora and comparison reports in one export");
    }
    let mut w = csv::Writer::from_path(&a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    if reports == 0 {
        w.write_record(CORPUS_HEADER)?;
        for input in &inputs {
            let Input::Corpus(corpus) = input else { unreachable!() };
            for t in corpus {
                for p in &t.points {
                    w.write_record([
                        t.run_id.clone(),
                        t.seed.to_string(),
                        t.schedule_family.to_string(),
                        p.t.to_string(),
                        p.train_loss.to_string(),
                        p.val_metric.to_string(),
                        p.lr.to_string(),
                    ])?;
                }
            }
        }
    } else {
        w.write_record(REPORT_HEADER)?;
        for input in &inputs {
            let Input::Report(report) = input else { unreachable!() };
            for run in &report.runs {
                for e in &run.epochs {
                    w.write_record([
                        run.arm.clone(),
                        run.run_id.clone(),
                        run.seed.to_string(),
                        e.epoch.to_string(),
                        e.lr.to_string(),
                        e.train_loss.to_string(),
                        e.val_metric.to_string(),
                        e.test_metric.to_string(),
                        e.lambda_max.map_or(String::new(), |l| l.to_string()),
                        run.best_epoch.to_string(),
                        run.diverged.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
