use std::fmt::Write as _;

use super::report::RocReport;

const SIZE: f64 = 360.0;
const PAD: f64 = 40.0;
const PALETTE: [&str; 7] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"];

/// ROC curves of every label with a defined AUC, one polyline each.
pub fn roc_svg(report: &RocReport, title: &str) -> String {
    let total = SIZE + 2.0 * PAD;
    let legend_rows = report.labels.len() as f64;
    let height = total + 16.0 * legend_rows;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{height}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{PAD}" y="20">{}</text>"#, escape(title));
    let _ = writeln!(s, r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r##"<line x1="{PAD}" y1="{}" x2="{}" y2="{PAD}" stroke="#999" stroke-dasharray="4 4"/>"##,
        PAD + SIZE,
        PAD + SIZE
    );
    for (i, l) in report.labels.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = total + 16.0 * i as f64;
        let auc = l.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        let _ = writeln!(s, r#"<text x="{PAD}" y="{y}" fill="{color}">{} (AUC {auc})</text>"#, escape(&l.name));
        let Some(curve) = &l.curve else { continue };
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", PAD + p.fpr * SIZE, PAD + (1.0 - p.tpr) * SIZE))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" points="{}"/>"#, pts.join(" "));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::TargetMatrix;

    #[test]
    fn one_polyline_per_valid_label() {
        let t = TargetMatrix::from_rows(&[vec![1, 0], vec![0, 0]]).unwrap();
        let r = RocReport::from_scores(&["A".into(), "B<".into()], &[0.9, 0.1, 0.2, 0.3], &t).unwrap();
        let svg = roc_svg(&r, "t");
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains("B&lt;"));
    }
}
