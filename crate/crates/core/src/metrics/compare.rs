//! Aggregation of repeated runs into a per-label comparison table.

use std::fmt::Write as _;
use std::io::Write;

use indexmap::IndexMap;

use crate::error::{Error, Result};

use super::report::{fmt_opt, write_comments, RocReport};

/// Published full-scale mean AUCs on ChestX-ray14 with pretrained
/// backbones: `(backbone, deterministic baseline, generative)`. Shown next
/// to desk-scale deltas for qualitative comparison only.
pub const REFERENCE_MEAN_AUC: [(&str, f64, f64); 6] = [
    ("AlexNet", 0.7619, 0.7654),
    ("ResNet50", 0.7762, 0.7772),
    ("DenseNet201", 0.7794, 0.7827),
    ("DenseNet121", 0.7762, 0.7771),
    ("DenseNet161", 0.7847, 0.7876),
    ("VGG16", 0.7875, 0.7877),
];

pub const MEAN_ROW: &str = "mean_auc";

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub mean: Option<f64>,
    /// Sample standard deviation over repeats; 0 for a single repeat.
    pub std: Option<f64>,
    /// Repeats with a defined AUC for this row.
    pub repeats: usize,
    /// This run's mean minus the average of the other runs' means.
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    /// Label names followed by [`MEAN_ROW`].
    pub rows: Vec<String>,
    pub runs: IndexMap<String, Vec<Cell>>,
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 { 0.0 } else { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
    (Some(mean), Some(std))
}

pub fn compare_report(runs: &IndexMap<String, Vec<RocReport>>) -> Result<Comparison> {
    let names = runs
        .values()
        .flatten()
        .next()
        .map(RocReport::label_names)
        .ok_or_else(|| Error::Config("compare needs at least one report".into()))?;
    for (run, reports) in runs {
        if let Some(r) = reports.iter().find(|r| r.label_names() != names) {
            return Err(Error::LabelMismatch(format!("run {run}: labels {:?} vs {names:?}", r.label_names())));
        }
    }
    let mut rows = names.clone();
    rows.push(MEAN_ROW.to_string());

    let mut stats: IndexMap<String, Vec<Cell>> = IndexMap::new();
    for (run, reports) in runs {
        let cells = (0..rows.len())
            .map(|k| {
                let values: Vec<f64> = reports
                    .iter()
                    .filter_map(|r| if k < names.len() { r.labels[k].auc } else { r.mean_auc })
                    .collect();
                let (mean, std) = mean_std(&values);
                Cell { mean, std, repeats: values.len(), delta: None }
            })
            .collect();
        stats.insert(run.clone(), cells);
    }
    let snapshot = stats.clone();
    for (run, cells) in stats.iter_mut() {
        for (k, cell) in cells.iter_mut().enumerate() {
            let others: Vec<f64> = snapshot.iter().filter(|(r, _)| *r != run).filter_map(|(_, c)| c[k].mean).collect();
            cell.delta = match (cell.mean, others.is_empty()) {
                (Some(m), false) => Some(m - others.iter().sum::<f64>() / others.len() as f64),
                _ => None,
            };
        }
    }
    Ok(Comparison { rows, runs: stats })
}

impl Comparison {
    /// `run,label,auc_mean,auc_std,repeats,delta`.
    pub fn write_csv<W: Write>(&self, mut out: W, comments: &[String]) -> Result<()> {
        write_comments(&mut out, comments)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["run", "label", "auc_mean", "auc_std", "repeats", "delta"])?;
        for (run, cells) in &self.runs {
            for (label, c) in self.rows.iter().zip(cells) {
                w.write_record([run, label, &fmt_opt(c.mean), &fmt_opt(c.std), &c.repeats.to_string(), &fmt_opt(c.delta)])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn mean_auc(&self, run: &str) -> Option<&Cell> {
        self.runs.get(run).and_then(|c| c.last())
    }

    /// Fixed-width text table, one column per run.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(String::len).max().unwrap_or(5).max(5);
        let mut s = format!("{:width$}", "label");
        for run in self.runs.keys() {
            let _ = write!(s, "  {:>17}  {:>8}", run, "delta");
        }
        s.push('\n');
        for (k, label) in self.rows.iter().enumerate() {
            let _ = write!(s, "{label:width$}");
            for cells in self.runs.values() {
                let c = &cells[k];
                let v = match (c.mean, c.std) {
                    (Some(m), Some(sd)) => format!("{m:.4} ± {sd:.4}"),
                    _ => "n/a".into(),
                };
                let d = c.delta.map_or("n/a".into(), |d| format!("{d:+.4}"));
                let _ = write!(s, "  {v:>17}  {d:>8}");
            }
            s.push('\n');
        }
        s.push_str("\nreference mean AUC deltas, generative minus baseline (ChestX-ray14, pretrained backbones):\n");
        for (net, base, gen) in REFERENCE_MEAN_AUC {
            let _ = writeln!(s, "  {net:12} {base:.4} -> {gen:.4}  ({:+.4})", gen - base);
        }
        s
    }
}
