use std::io::Write;

use log::warn;

use crate::error::{Error, Result};
use crate::exec;
use crate::objective::TargetMatrix;

use super::roc::{auc, roc_curve, RocCurve};

#[derive(Clone, Debug, PartialEq)]
pub struct LabelRoc {
    pub name: String,
    pub n_pos: u64,
    pub n_neg: u64,
    /// `None` when the label has a single class in this set.
    pub curve: Option<RocCurve>,
    pub auc: Option<f64>,
}

/// Per-label ROC curves and AUCs. The mean runs over labels that have both
/// classes; labels without are listed in `excluded`.
#[derive(Clone, Debug, PartialEq)]
pub struct RocReport {
    pub labels: Vec<LabelRoc>,
    pub mean_auc: Option<f64>,
    pub excluded: Vec<String>,
}

impl RocReport {
    /// `probs` is row-major `n x C`, matching `targets`.
    pub fn from_scores(label_names: &[String], probs: &[f64], targets: &TargetMatrix) -> Result<Self> {
        let (n, c) = (targets.rows(), targets.cols());
        if label_names.len() != c || probs.len() != n * c {
            return Err(Error::LabelMismatch(format!(
                "{} label names, {} scores, {n}x{c} targets",
                label_names.len(),
                probs.len()
            )));
        }
        let labels = exec::map_indexed(c, |j| {
            let scores: Vec<f64> = (0..n).map(|i| probs[i * c + j]).collect();
            let truth: Vec<u8> = (0..n).map(|i| targets.row(i)[j]).collect();
            let n_pos = truth.iter().filter(|&&v| v == 1).count() as u64;
            let curve = match roc_curve(&scores, &truth) {
                Ok(curve) => Some(curve),
                Err(Error::SingleClass(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(LabelRoc { name: label_names[j].clone(), n_pos, n_neg: n as u64 - n_pos, auc: curve.as_ref().map(auc), curve })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let excluded: Vec<String> = labels.iter().filter(|l| l.auc.is_none()).map(|l| l.name.clone()).collect();
        if !excluded.is_empty() {
            warn!("labels with a single class excluded from mean AUC: {}", excluded.join(", "));
        }
        let valid: Vec<f64> = labels.iter().filter_map(|l| l.auc).collect();
        let mean_auc = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
        Ok(Self { labels, mean_auc, excluded })
    }

    pub fn label_names(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.name.clone()).collect()
    }

    /// `label,fpr,tpr,threshold`, one row per curve point.
    pub fn write_roc_csv<W: Write>(&self, mut out: W, comments: &[String]) -> Result<()> {
        write_comments(&mut out, comments)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["label", "fpr", "tpr", "threshold"])?;
        for l in &self.labels {
            for p in l.curve.iter().flat_map(|c| &c.points) {
                w.write_record([l.name.clone(), p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `run,label,auc,n_pos,n_neg`, one row per label and a final
    /// `mean_auc` row. Single-class labels have an empty `auc` field.
    pub fn write_auc_csv<W: Write>(&self, mut out: W, run: &str, comments: &[String]) -> Result<()> {
        write_comments(&mut out, comments)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["run", "label", "auc", "n_pos", "n_neg"])?;
        for l in &self.labels {
            w.write_record([run, &l.name, &fmt_opt(l.auc), &l.n_pos.to_string(), &l.n_neg.to_string()])?;
        }
        let (p, n): (u64, u64) = self.labels.iter().fold((0, 0), |(p, n), l| (p + l.n_pos, n + l.n_neg));
        w.write_record([run, "mean_auc", &fmt_opt(self.mean_auc), &p.to_string(), &n.to_string()])?;
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|a| a.to_string()).unwrap_or_default()
}

pub(crate) fn write_comments<W: Write>(out: &mut W, comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("L{i}")).collect()
    }

    #[test]
    fn single_class_label_excluded() {
        let t = TargetMatrix::from_rows(&[vec![1, 0], vec![0, 0], vec![1, 0]]).unwrap();
        let r = RocReport::from_scores(&names(2), &[0.9, 0.1, 0.2, 0.5, 0.8, 0.3], &t).unwrap();
        assert_eq!(r.labels[0].auc, Some(1.0));
        assert_eq!(r.labels[1].auc, None);
        assert_eq!(r.excluded, vec!["L1"]);
        assert_eq!(r.mean_auc, Some(1.0));
    }

    #[test]
    fn mean_invariant_under_label_permutation() {
        let t = TargetMatrix::from_rows(&[vec![1, 0, 1], vec![0, 1, 0], vec![1, 1, 0], vec![0, 0, 1]]).unwrap();
        let p = [0.9, 0.2, 0.3, 0.1, 0.7, 0.6, 0.8, 0.4, 0.2, 0.3, 0.5, 0.9];
        let a = RocReport::from_scores(&names(3), &p, &t).unwrap();
        let perm = [2, 0, 1];
        let tp = TargetMatrix::from_rows(&(0..4).map(|i| perm.iter().map(|&j| t.row(i)[j]).collect()).collect::<Vec<_>>()).unwrap();
        let pp: Vec<f64> = (0..4).flat_map(|i| perm.iter().map(move |&j| p[i * 3 + j])).collect();
        let b = RocReport::from_scores(&names(3), &pp, &tp).unwrap();
        assert!((a.mean_auc.unwrap() - b.mean_auc.unwrap()).abs() < 1e-15);
    }

    #[test]
    fn csv_shapes() {
        let t = TargetMatrix::from_rows(&[vec![1, 0], vec![0, 1]]).unwrap();
        let r = RocReport::from_scores(&names(2), &[0.9, 0.1, 0.2, 0.5], &t).unwrap();
        let mut buf = Vec::new();
        r.write_auc_csv(&mut buf, "gen", &["seed = 1".into()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# seed = 1");
        assert_eq!(lines[1], "run,label,auc,n_pos,n_neg");
        assert_eq!(lines.last().unwrap(), &"gen,mean_auc,1,2,2");
        let mut buf = Vec::new();
        r.write_roc_csv(&mut buf, &[]).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("label,fpr,tpr,threshold\nL0,0,0,inf\n"));
    }

    #[test]
    fn mismatched_shapes() {
        let t = TargetMatrix::from_rows(&[vec![1, 0]]).unwrap();
        assert!(RocReport::from_scores(&names(3), &[0.1, 0.2], &t).is_err());
        assert!(RocReport::from_scores(&names(2), &[0.1], &t).is_err());
    }
}
