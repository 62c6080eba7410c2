//! Strategy runs over labelled sequences, and fan-out over several runs.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use featbank::simstream::{iou, KeyGuidedEncoder, Sequence, SurrogatePredictor};
use featbank::{run_sequence, Scalar, SequenceError, StrategyConfig};
use serde::Serialize;

use crate::report::{FrameRow, RunReport, Summary, SCHEMA_VERSION};

/// Environment variable capping how many runs execute at once.
pub const THREADS_ENV: &str = "FEATBANK_THREADS";

/// Everything besides the strategy that shapes a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Top-k of the in-frame value encoder applied on writes; 0 disables it.
    pub encoder_topk: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { encoder_topk: 50 }
    }
}

/// Runs one strategy over `seq` and scores each frame against its labels.
pub fn run_report<T: Scalar>(
    seq: &Sequence<T>,
    cfg: &StrategyConfig,
    options: RunOptions,
    run: &str,
) -> Result<RunReport, SequenceError> {
    let encoder = (options.encoder_topk > 0).then_some(KeyGuidedEncoder {
        top_k: options.encoder_topk,
    });
    let mut predictor = SurrogatePredictor::new(encoder);
    let out = run_sequence(&seq.frames, &seq.entries, cfg, &mut predictor)?;

    let position: HashMap<u64, usize> = seq.frames.iter().enumerate().map(|(i, f)| (f.frame_index, i)).collect();
    let outputs: HashMap<u64, &Vec<u8>> = out.records.iter().map(|r| (r.frame_index, &r.output)).collect();
    let objects = seq.objects();
    let strategy = cfg.strategy.name().to_string();
    let rows: Vec<FrameRow> = out
        .stats
        .iter()
        .map(|s| {
            let labels = &seq.labels[position[&s.frame]];
            let output = outputs[&s.frame];
            let iou = objects
                .iter()
                .map(|&o| (seq.entries[&o] < s.frame).then(|| iou(output, labels, o)))
                .collect();
            FrameRow {
                frame: s.frame,
                strategy: strategy.clone(),
                bank_frames_equivalent: s.bank_frames_equivalent,
                read_seconds: s.read_seconds,
                write_seconds: s.write_seconds,
                evictions: s.evictions,
                wrote: s.wrote,
                iou,
            }
        })
        .collect();
    let bootstrap = out.writes - rows.iter().filter(|r| r.wrote).count();
    let summary = Summary::from_rows(&rows, objects.len(), seq.len(), out.total_seconds, bootstrap);
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        run: run.to_string(),
        strategy,
        objects: objects.iter().map(|o| o.0).collect(),
        rows,
        summary,
    })
}

/// Thread cap from [`THREADS_ENV`], else the available parallelism.
pub fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Maps `f` over `items` on at most `threads` threads; output order follows input order.
pub fn parallel_map<I, O, F>(items: &[I], threads: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<O>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|o| o.expect("every index was claimed"))
        .collect()
}

/// One unit of work: a labelled sequence and a configuration.
pub struct Job<'a, T> {
    pub run: String,
    pub seq: &'a Sequence<T>,
    pub cfg: StrategyConfig,
}

/// Runs every job, `threads` at a time, stopping at the first error in job order.
pub fn run_jobs<T: Scalar>(jobs: &[Job<'_, T>], options: RunOptions, threads: usize) -> Result<Vec<RunReport>, SequenceError> {
    parallel_map(jobs, threads, |job| run_report(job.seq, &job.cfg, options, &job.run))
        .into_iter()
        .collect()
}

/// One line of a capacity sweep, averaged over every run at that capacity.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub capacity_frames: usize,
    pub strategy: String,
    pub runs: usize,
    pub mean_iou: f64,
    pub frames_per_second: f64,
    pub mean_bank_frames_equivalent: f64,
    pub mean_read_seconds: f64,
}

pub const SWEEP_COLUMNS: [&str; 7] = [
    "capacity_frames",
    "strategy",
    "runs",
    "mean_iou",
    "frames_per_second",
    "mean_bank_frames_equivalent",
    "mean_read_seconds",
];

/// Groups reports by capacity; `reports[i]` must have been run at `capacities[i]`.
pub fn sweep_table(capacities: &[usize], reports: &[RunReport]) -> Vec<SweepRow> {
    let mut order: Vec<usize> = capacities.to_vec();
    order.sort_unstable();
    order.dedup();
    order
        .into_iter()
        .map(|cap| {
            let group: Vec<&RunReport> = capacities
                .iter()
                .zip(reports)
                .filter(|(&c, _)| c == cap)
                .map(|(_, r)| r)
                .collect();
            let n = group.len() as f64;
            let avg = |f: &dyn Fn(&RunReport) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
            SweepRow {
                capacity_frames: cap,
                strategy: group.first().map(|r| r.strategy.clone()).unwrap_or_default(),
                runs: group.len(),
                mean_iou: avg(&|r| r.summary.mean_iou),
                frames_per_second: avg(&|r| r.summary.frames_per_second),
                mean_bank_frames_equivalent: avg(&|r| r.summary.mean_bank_frames_equivalent),
                mean_read_seconds: avg(&|r| mean_read_seconds(r)),
            }
        })
        .collect()
}

/// Mean read time per row of one report.
pub fn mean_read_seconds(report: &RunReport) -> f64 {
    if report.rows.is_empty() {
        return 0.0;
    }
    report.rows.iter().map(|r| r.read_seconds).sum::<f64>() / report.rows.len() as f64
}

pub fn write_sweep_csv<W: std::io::Write>(out: W, rows: &[SweepRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.capacity_frames.to_string(),
            r.strategy.clone(),
            r.runs.to_string(),
            format!("{:?}", r.mean_iou),
            format!("{:?}", r.frames_per_second),
            format!("{:?}", r.mean_bank_frames_equivalent),
            format!("{:?}", r.mean_read_seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..37).collect();
        for threads in [1, 3, 64] {
            let out = parallel_map(&items, threads, |&x| x * x);
            assert_eq!(out, items.iter().map(|x| x * x).collect::<Vec<_>>());
        }
        assert!(parallel_map(&Vec::<u8>::new(), 4, |&x| x).is_empty());
    }
}
