//! Metric writers: one JSON object per round, histogram CSVs and the grid summary CSV.

use std::io::Write;

use fedgc_core::eval::{Histogram, RoundMetrics};
use serde_json::json;

pub fn metrics_json(m: &RoundMetrics) -> String {
    json!({
        "round": m.round,
        "mean_local_loss": m.mean_local_loss,
        "combined_objective": m.combined_objective,
        "verification_accuracy": m.verification_accuracy,
        "cross_client_max_cos": m.cross_client_max_cos,
        "within_client_max_cos": m.within_client_max_cos,
        "mean_anchor_feature_dist": m.mean_anchor_feature_dist,
    })
    .to_string()
}

pub fn write_histogram<W: Write>(mut w: W, h: &Histogram) -> std::io::Result<()> {
    writeln!(w, "bin_left,count")?;
    for (i, c) in h.counts.iter().enumerate() {
        writeln!(w, "{},{c}", h.bin_left(i))?;
    }
    w.flush()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub cell: String,
    pub mode: String,
    pub fraction: f64,
    pub lambda: f64,
    pub partition: String,
    pub seed: u64,
    pub rounds_completed: usize,
    pub final_accuracy: Option<f64>,
    pub final_cross_client_max_cos: Option<f64>,
    pub status: String,
}

pub const SUMMARY_HEADER: &str =
    "cell,mode,fraction,lambda,partition,seed,rounds_completed,final_accuracy,final_cross_client_max_cos,status";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SummaryRow {
    pub fn csv(&self) -> String {
        let status = self.status.replace([',', '\n', '"'], " ");
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.cell,
            self.mode,
            self.fraction,
            self.lambda,
            self.partition,
            self.seed,
            self.rounds_completed,
            opt(self.final_accuracy),
            opt(self.final_cross_client_max_cos),
            status
        )
    }
}

pub fn write_summary<W: Write>(mut w: W, rows: &[SummaryRow]) -> std::io::Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_line_has_every_field() {
        let m = RoundMetrics {
            round: 3,
            mean_local_loss: 0.5,
            combined_objective: 1.25,
            verification_accuracy: 0.75,
            cross_client_max_cos: -1.0,
            within_client_max_cos: 0.0,
            mean_anchor_feature_dist: 2.0,
        };
        let v: serde_json::Value = serde_json::from_str(&metrics_json(&m)).unwrap();
        assert_eq!(v["round"], 3);
        assert_eq!(v["verification_accuracy"], 0.75);
        assert_eq!(v.as_object().unwrap().len(), 7);
        assert!(!metrics_json(&m).contains('\n'));
    }

    #[test]
    fn histogram_csv_rows() {
        let mut h = Histogram::new(-1.0, 1.0, 4);
        h.add(0.1);
        let mut buf = Vec::new();
        write_histogram(&mut buf, &h).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "bin_left,count\n-1,0\n-0.5,0\n0,1\n0.5,0\n");
    }

    #[test]
    fn status_cannot_break_csv() {
        let row = SummaryRow {
            cell: "c".into(),
            mode: "fedgc".into(),
            fraction: 1.0,
            lambda: 2.0,
            partition: "balanced".into(),
            seed: 0,
            rounds_completed: 1,
            final_accuracy: None,
            final_cross_client_max_cos: None,
            status: "diverged: a, b\nc".into(),
        };
        assert_eq!(row.csv().split(',').count(), 10);
    }
}
