//! ROC curves, AUC, per-label reports and run comparisons.

pub mod compare;
pub mod report;
pub mod roc;
pub mod svg;

pub use compare::{compare_report, Comparison};
pub use report::{LabelRoc, RocReport};
pub use roc::{auc, auc_score, roc_curve, RocCurve, RocPoint};
