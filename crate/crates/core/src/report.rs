//! Compression accounting: per-layer rows, totals, and JSON/CSV emission.

use crate::tensor::Dtype;
use serde::Serialize;

/// One layer's before/after accounting.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ReportRow {
    pub name: String,
    /// `tensorize`, `quantize`, or `keep`.
    pub action: String,
    pub params_before: usize,
    pub params_after: usize,
    pub bytes_before: usize,
    pub bytes_after: usize,
    /// Relative Frobenius error of the stored form against the original.
    pub rel_error: f64,
    /// Interior bond dimensions as `4x4`, or `-` when not tensorized.
    pub bond_dims: String,
    /// Free-form remark, e.g. why a tensorize request fell back to keep.
    pub note: String,
}

/// Sums over rows plus the two reduction percentages. Parameter reduction
/// counts stored scalars; byte reduction counts payload bytes. The two need
/// not agree (quantization shrinks bytes far more than scalar counts), which
/// is why both are always reported.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ReportTotals {
    pub params_before: usize,
    pub params_after: usize,
    pub bytes_before: usize,
    pub bytes_after: usize,
    pub parameter_reduction_pct: f64,
    pub byte_reduction_pct: f64,
}

/// The full accounting for one compression run, one row per manifest layer
/// in manifest order.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct CompressionReport {
    pub rows: Vec<ReportRow>,
    pub totals: ReportTotals,
}

fn reduction_pct(before: usize, after: usize) -> f64 {
    if before == 0 {
        return 0.0;
    }
    100.0 * (1.0 - after as f64 / before as f64)
}

impl CompressionReport {
    pub fn from_rows(rows: Vec<ReportRow>) -> CompressionReport {
        let params_before = rows.iter().map(|r| r.params_before).sum();
        let params_after = rows.iter().map(|r| r.params_after).sum();
        let bytes_before = rows.iter().map(|r| r.bytes_before).sum();
        let bytes_after = rows.iter().map(|r| r.bytes_after).sum();
        CompressionReport {
            rows,
            totals: ReportTotals {
                params_before,
                params_after,
                bytes_before,
                bytes_after,
                parameter_reduction_pct: reduction_pct(params_before, params_after),
                byte_reduction_pct: reduction_pct(bytes_before, bytes_after),
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// CSV with a fixed column order and a `TOTAL` footer row. The footer
    /// carries the reduction percentages in the note column so the table
    /// stays rectangular.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "name,action,params_before,params_after,bytes_before,bytes_after,rel_error,bond_dims,note\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.6e},{},{}\n",
                r.name,
                r.action,
                r.params_before,
                r.params_after,
                r.bytes_before,
                r.bytes_after,
                r.rel_error,
                r.bond_dims,
                r.note
            ));
        }
        let t = &self.totals;
        out.push_str(&format!(
            "TOTAL,,{},{},{},{},,,params -{:.2}%; bytes -{:.2}%\n",
            t.params_before,
            t.params_after,
            t.bytes_before,
            t.bytes_after,
            t.parameter_reduction_pct,
            t.byte_reduction_pct
        ));
        out
    }
}

/// Storage size of `params` scalars of `dtype` in decimal gigabytes
/// (1 GB = 1e9 bytes), the convention model cards use for weight files.
pub fn decimal_gigabytes(params: u64, dtype: Dtype) -> f64 {
    let bytes_per_element = match dtype {
        Dtype::F64 => 8.0,
        Dtype::F32 => 4.0,
        Dtype::F16 => 2.0,
        Dtype::I8 => 1.0,
        Dtype::I4Packed => 0.5,
    };
    params as f64 * bytes_per_element / 1e9
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, pb: usize, pa: usize, bb: usize, ba: usize) -> ReportRow {
        ReportRow {
            name: name.into(),
            action: "tensorize".into(),
            params_before: pb,
            params_after: pa,
            bytes_before: bb,
            bytes_after: ba,
            rel_error: 0.01,
            bond_dims: "4x4".into(),
            note: String::new(),
        }
    }

    #[test]
    fn totals_are_row_sums() {
        let report =
            CompressionReport::from_rows(vec![row("a", 100, 10, 400, 40), row("b", 300, 30, 1200, 120)]);
        assert_eq!(report.totals.params_before, 400);
        assert_eq!(report.totals.params_after, 40);
        assert_eq!(report.totals.bytes_before, 1600);
        assert_eq!(report.totals.bytes_after, 160);
        assert!((report.totals.parameter_reduction_pct - 90.0).abs() < 1e-12);
        assert!((report.totals.byte_reduction_pct - 90.0).abs() < 1e-12);
    }

    #[test]
    fn csv_shape_is_header_rows_totals() {
        let report = CompressionReport::from_rows(vec![row("a", 1, 1, 4, 4), row("b", 2, 2, 8, 8)]);
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 2 + 2); // header + layer rows + totals
        assert!(lines[0].starts_with("name,action,"));
        assert!(lines[3].starts_with("TOTAL,,"));
        // Every line has the same column count.
        let cols = lines[0].split(',').count();
        for line in &lines {
            assert_eq!(line.split(',').count(), cols, "{line}");
        }
    }

    #[test]
    fn empty_report_reduces_zero_pct() {
        let report = CompressionReport::from_rows(vec![]);
        assert_eq!(report.totals.parameter_reduction_pct, 0.0);
        assert_eq!(report.totals.byte_reduction_pct, 0.0);
    }

    #[test]
    fn json_is_machine_readable() {
        let report = CompressionReport::from_rows(vec![row("a", 100, 10, 400, 40)]);
        let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(v["rows"][0]["name"], "a");
        assert_eq!(v["totals"]["params_before"], 100);
    }

    #[test]
    fn decimal_size_arithmetic() {
        // 7e9 params at f32 is 28.0 decimal GB; 2.1e9 at f16 is 4.2 GB.
        assert!((decimal_gigabytes(7_000_000_000, Dtype::F32) - 28.0).abs() < 1e-9);
        assert!((decimal_gigabytes(2_100_000_000, Dtype::F16) - 4.2).abs() < 1e-9);
        assert!((decimal_gigabytes(1_000_000_000, Dtype::I4Packed) - 0.5).abs() < 1e-9);
    }
}
