use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub images: usize,
    pub gt_boxes: usize,
    pub detections: usize,
}

/// Per-category AP and their mean, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub method: String,
    /// `(category, AP %)`; absent APs are kept for display but not averaged.
    pub categories: Vec<(String, Option<f64>)>,
    pub map: f64,
    pub fingerprint: String,
    pub counts: ReportCounts,
}

/// Builds a report from APs given as fractions in `[0, 1]`.
pub fn build_report(
    method: &str,
    aps: &[(String, Option<f64>)],
    fingerprint: &str,
    counts: ReportCounts,
) -> Result<DetectionReport, EvalError> {
    let defined: Vec<f64> = aps.iter().filter_map(|(_, ap)| ap.map(|v| v * 100.0)).collect();
    if defined.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(DetectionReport {
        method: method.to_string(),
        categories: aps.iter().map(|(n, ap)| (n.clone(), ap.map(|v| v * 100.0))).collect(),
        map: defined.iter().sum::<f64>() / defined.len() as f64,
        fingerprint: fingerprint.to_string(),
        counts,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

impl DetectionReport {
    /// Aligned table: one header row of category names plus `mAP`, one row
    /// of values.
    pub fn to_text(&self) -> String {
        let mut header = vec!["Method".to_string()];
        let mut row = vec![self.method.clone()];
        for (name, ap) in &self.categories {
            header.push(name.clone());
            row.push(cell(*ap));
        }
        header.push("mAP".into());
        row.push(format!("{:.2}", self.map));
        let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
                .trim_end()
                .to_string()
        };
        let mut out = String::new();
        writeln!(out, "{}", line(&header)).unwrap();
        writeln!(
            out,
            "{}",
            widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-")
        )
        .unwrap();
        writeln!(out, "{}", line(&row)).unwrap();
        writeln!(
            out,
            "images={} gt_boxes={} detections={} config={}",
            self.counts.images, self.counts.gt_boxes, self.counts.detections, self.fingerprint
        )
        .unwrap();
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,category,ap\n");
        for (name, ap) in &self.categories {
            writeln!(
                out,
                "{},{},{}",
                self.method,
                name,
                ap.map_or(String::new(), |v| format!("{v:.4}"))
            )
            .unwrap();
        }
        writeln!(out, "{},mAP,{:.4}", self.method, self.map).unwrap();
        out
    }
}

/// Strategy comparison table: one row per `(label, mAP %)`.
pub fn format_comparison(rows: &[(String, f64)]) -> String {
    let w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("Method".len());
    let mut out = String::new();
    writeln!(out, "{:<w$} | mAP", "Method").unwrap();
    writeln!(out, "{}-+------", "-".repeat(w)).unwrap();
    for (label, map) in rows {
        writeln!(out, "{label:<w$} | {map:.2}").unwrap();
    }
    out
}
