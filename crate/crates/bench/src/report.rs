//! Per-frame rows and summaries of one strategy run, with CSV and JSON output.

use std::io::Write;

use serde::Serialize;

/// Bumped whenever a column is added, removed or renamed.
pub const SCHEMA_VERSION: u32 = 1;

/// Columns preceding the per-object IoU columns, in order.
pub const FIXED_COLUMNS: [&str; 8] = [
    "run",
    "frame",
    "strategy",
    "bank_frames_equivalent",
    "read_seconds",
    "write_seconds",
    "evictions",
    "wrote",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameRow {
    pub frame: u64,
    pub strategy: String,
    pub bank_frames_equivalent: f64,
    pub read_seconds: f64,
    pub write_seconds: f64,
    pub evictions: usize,
    pub wrote: bool,
    /// IoU per object id, in [`RunReport::objects`] order; `None` before entry.
    pub iou: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    /// Frames in the input sequence, bootstrap frames included.
    pub frames: usize,
    /// Monotonic wall time of the whole sequence loop, excluding I/O.
    pub total_seconds: f64,
    pub frames_per_second: f64,
    pub mean_bank_frames_equivalent: f64,
    pub max_bank_frames_equivalent: f64,
    /// Mean over every (row, tracked object) IoU.
    pub mean_iou: f64,
    pub mean_iou_per_object: Vec<Option<f64>>,
    /// Writes on frames without a read (and so without a row).
    pub bootstrap_writes: usize,
    /// All writes: `bootstrap_writes` plus rows with `wrote` set.
    pub writes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    /// Free-form run label, e.g. `capacity=4` or `seed=3`.
    pub run: String,
    pub strategy: String,
    pub objects: Vec<u8>,
    pub rows: Vec<FrameRow>,
    pub summary: Summary,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl Summary {
    /// Recomputes the row-derived fields; `frames`, `total_seconds` and the
    /// bootstrap writes (writes on frames without a row) come from the run.
    pub fn from_rows(rows: &[FrameRow], objects: usize, frames: usize, total_seconds: f64, bootstrap_writes: usize) -> Self {
        let per_object = (0..objects)
            .map(|m| mean(rows.iter().filter_map(|r| r.iou[m])))
            .collect();
        Self {
            frames,
            total_seconds,
            frames_per_second: if total_seconds > 0.0 {
                frames as f64 / total_seconds
            } else {
                f64::INFINITY
            },
            mean_bank_frames_equivalent: mean(rows.iter().map(|r| r.bank_frames_equivalent)).unwrap_or(0.0),
            max_bank_frames_equivalent: rows.iter().map(|r| r.bank_frames_equivalent).fold(0.0, f64::max),
            mean_iou: mean(rows.iter().flat_map(|r| r.iou.iter().flatten().copied())).unwrap_or(0.0),
            mean_iou_per_object: per_object,
            bootstrap_writes,
            writes: bootstrap_writes + rows.iter().filter(|r| r.wrote).count(),
        }
    }
}

fn iou_header(objects: &[u8]) -> Vec<String> {
    objects.iter().map(|id| format!("iou_{id}")).collect()
}

fn fmt_f64(v: f64) -> String {
    // Shortest round-trip representation.
    format!("{v:?}")
}

/// Writes the rows of several runs as one long-format CSV table.
///
/// All runs must share the same object list; the IoU columns follow it.
pub fn write_rows_csv<W: Write>(out: W, reports: &[RunReport]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let objects = reports.first().map(|r| r.objects.clone()).unwrap_or_default();
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(iou_header(&objects));
    w.write_record(&header)?;
    for report in reports {
        for row in &report.rows {
            let mut record = vec![
                report.run.clone(),
                row.frame.to_string(),
                row.strategy.clone(),
                fmt_f64(row.bank_frames_equivalent),
                fmt_f64(row.read_seconds),
                fmt_f64(row.write_seconds),
                row.evictions.to_string(),
                u8::from(row.wrote).to_string(),
            ];
            record.extend(row.iou.iter().map(|v| v.map(fmt_f64).unwrap_or_default()));
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const SUMMARY_COLUMNS: [&str; 9] = [
    "run",
    "strategy",
    "frames",
    "total_seconds",
    "frames_per_second",
    "mean_bank_frames_equivalent",
    "max_bank_frames_equivalent",
    "mean_iou",
    "writes",
];

/// One summary line per run.
pub fn write_summary_csv<W: Write>(out: W, reports: &[RunReport]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_COLUMNS)?;
    for r in reports {
        let s = &r.summary;
        w.write_record([
            r.run.clone(),
            r.strategy.clone(),
            s.frames.to_string(),
            fmt_f64(s.total_seconds),
            fmt_f64(s.frames_per_second),
            fmt_f64(s.mean_bank_frames_equivalent),
            fmt_f64(s.max_bank_frames_equivalent),
            fmt_f64(s.mean_iou),
            s.writes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<W: Write, S: Serialize + ?Sized>(mut out: W, value: &S) -> serde_json::Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out).map_err(serde_json::Error::io)
}

/// Least-squares line through `(x, y)`: `(slope, intercept, r_squared)`.
///
/// `r_squared` is 1 for a perfect fit and `None` is returned for fewer than
/// two distinct `x` values.
pub fn linear_fit(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let n = points.len() as f64;
    let mx = mean(points.iter().map(|p| p.0))?;
    let my = mean(points.iter().map(|p| p.1))?;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if n < 2.0 || sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some((slope, my - slope * mx, r2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(frame: u64, bank: f64, wrote: bool, iou: Vec<Option<f64>>) -> FrameRow {
        FrameRow {
            frame,
            strategy: "adaptive-lfu".into(),
            bank_frames_equivalent: bank,
            read_seconds: 0.001,
            write_seconds: 0.0,
            evictions: 0,
            wrote,
            iou,
        }
    }

    #[test]
    fn summary_from_rows() {
        let rows = vec![
            row(1, 1.0, false, vec![Some(1.0), None]),
            row(2, 2.0, true, vec![Some(0.5), Some(0.0)]),
        ];
        let s = Summary::from_rows(&rows, 2, 3, 0.5, 1);
        assert_eq!(s.frames_per_second, 6.0);
        assert_eq!(s.mean_bank_frames_equivalent, 1.5);
        assert_eq!(s.max_bank_frames_equivalent, 2.0);
        assert_eq!(s.mean_iou, 0.5);
        assert_eq!(s.mean_iou_per_object, vec![Some(0.75), Some(0.0)]);
        assert_eq!(s.writes, 2);
    }

    #[test]
    fn csv_layout() {
        let rows = vec![row(1, 1.0, true, vec![Some(0.25), None])];
        let summary = Summary::from_rows(&rows, 2, 2, 1.0, 1);
        let report = RunReport {
            schema_version: SCHEMA_VERSION,
            run: "seed=0".into(),
            strategy: "adaptive-lfu".into(),
            objects: vec![1, 2],
            rows,
            summary,
        };
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, &[report]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "run,frame,strategy,bank_frames_equivalent,read_seconds,write_seconds,evictions,wrote,iou_1,iou_2"
        );
        assert_eq!(lines.next().unwrap(), "seed=0,1,adaptive-lfu,1.0,0.001,0.0,0,1,0.25,");
    }

    #[test]
    fn fit_examples() {
        let (m, b, r2) = linear_fit(&[(1.0, 3.0), (2.0, 5.0), (3.0, 7.0)]).unwrap();
        assert!((m - 2.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        assert!(linear_fit(&[(1.0, 1.0), (1.0, 2.0)]).is_none());
        let (_, _, r2) = linear_fit(&[(0.0, 0.0), (1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).unwrap();
        assert!(r2 < 0.5);
    }
}
