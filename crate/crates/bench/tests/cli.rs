use std::path::Path;
use std::process::{Command, Output};

use featbank::simstream::read_trace;
use serde_json::Value;

fn featbank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_featbank"))
        .args(args)
        .env("FEATBANK_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = featbank(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn csv_rows(text: &str) -> Vec<csv::StringRecord> {
    csv::Reader::from_reader(text.as_bytes()).records().map(Result::unwrap).collect()
}

fn column(text: &str, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let i = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[i].to_string()).collect()
}

fn short_scenario(dir: &Path, frames: u64) -> String {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/drift.cfg"))
        .unwrap()
        .replace("frames = 60", &format!("frames = {frames}"));
    let path = dir.join(format!("drift{frames}.cfg"));
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_writes_deterministic_traces() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.mbt");
    let b = dir.path().join("b.mbt");
    for p in [&a, &b] {
        ok(&["gen", "--scenario", "drift", "--seed", "4", "--out", p.to_str().unwrap()]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let seq = read_trace(&a).unwrap();
    assert_eq!((seq.len(), seq.dims(), seq.c_key()), (60, Some((16, 16)), Some(32)));
}

#[test]
fn occlusion_window_has_no_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("occ.mbt");
    ok(&["gen", "--scenario", "occlude", "--out", p.to_str().unwrap()]);
    let seq = read_trace(&p).unwrap();
    for t in 0..seq.len() {
        let visible = seq.labels[t].contains(&1);
        assert_eq!(visible, !(15..35).contains(&t), "frame {t}");
    }
}

#[test]
fn first_latest_holds_two_frames() {
    let out = ok(&["run", "--scenario", "drift", "--strategy", "first-latest"]);
    let bank = column(&out, "bank_frames_equivalent");
    assert_eq!(bank.len(), 59);
    assert!(bank.iter().all(|v| v == "2.0"));
}

#[test]
fn every_five_averages_seven_frames_over_seventy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_scenario(dir.path(), 70);
    let out = ok(&["run", "--scenario", &cfg, "--strategy", "every-k", "--write-interval", "5", "--encoder-topk", "0"]);
    let bank: Vec<f64> = column(&out, "bank_frames_equivalent").iter().map(|v| v.parse().unwrap()).collect();
    let mean = bank.iter().sum::<f64>() / bank.len() as f64;
    assert!((mean - 7.0).abs() <= 1.0, "{mean}");
}

#[test]
fn adaptive_never_exceeds_capacity() {
    let out = ok(&["run", "--scenario", "drift", "--capacity-frames", "2", "--format", "json"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v[0]["summary"]["max_bank_frames_equivalent"], 2.0);
}

#[test]
fn summary_is_recomputable_from_rows() {
    let out = ok(&["run", "--scenario", "late-object", "--format", "json"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    let report = &v[0];
    let rows = report["rows"].as_array().unwrap();
    let s = &report["summary"];
    let bank: Vec<f64> = rows.iter().map(|r| r["bank_frames_equivalent"].as_f64().unwrap()).collect();
    assert_eq!(s["mean_bank_frames_equivalent"].as_f64().unwrap(), bank.iter().sum::<f64>() / bank.len() as f64);
    let ious: Vec<f64> = rows
        .iter()
        .flat_map(|r| r["iou"].as_array().unwrap().iter().filter_map(Value::as_f64))
        .collect();
    assert_eq!(s["mean_iou"].as_f64().unwrap(), ious.iter().sum::<f64>() / ious.len() as f64);
    let wrote = rows.iter().filter(|r| r["wrote"] == true).count() as u64;
    assert_eq!(s["writes"].as_u64().unwrap(), s["bootstrap_writes"].as_u64().unwrap() + wrote);
    let fps = s["frames"].as_f64().unwrap() / s["total_seconds"].as_f64().unwrap();
    assert_eq!(s["frames_per_second"].as_f64().unwrap(), fps);
    // The late object has no score before it is tracked.
    for r in rows {
        let frame = r["frame"].as_u64().unwrap();
        assert_eq!(r["iou"][1].is_null(), frame <= 10, "frame {frame}");
    }
}

#[test]
fn write_counts_follow_the_schedule() {
    for (strategy, want) in [("adaptive-lfu", 12), ("first-latest", 60), ("every-k", 12)] {
        let out = ok(&["run", "--scenario", "static", "--strategy", strategy, "--format", "json"]);
        let v: Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v[0]["summary"]["writes"], want, "{strategy}");
    }
}

#[test]
fn reports_are_deterministic_apart_from_timings() {
    let strip = |text: &str| -> Vec<Vec<String>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let keep: Vec<usize> = r
            .headers()
            .unwrap()
            .iter()
            .enumerate()
            .filter(|(_, h)| !h.ends_with("_seconds"))
            .map(|(i, _)| i)
            .collect();
        r.records().map(|rec| keep.iter().map(|&i| rec.as_ref().unwrap()[i].to_string()).collect()).collect()
    };
    let args = ["compare", "--scenario", "deform", "--seed", "3", "--strategies", "adaptive-lfu,softmax-index"];
    let a = ok(&args);
    let b = Command::new(env!("CARGO_BIN_EXE_featbank"))
        .args(args)
        .env("FEATBANK_THREADS", "2")
        .output()
        .unwrap();
    assert!(b.status.success());
    assert_eq!(strip(&a), strip(&String::from_utf8(b.stdout).unwrap()));
    assert_eq!(csv_rows(&a).len(), 2 * 59);
}

#[test]
fn runs_from_trace_match_runs_from_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.mbt");
    ok(&["gen", "--scenario", "occlude", "--seed", "2", "--out", p.to_str().unwrap()]);
    let from_trace = column(&ok(&["run", "--input", p.to_str().unwrap()]), "iou_1");
    let from_scenario = column(&ok(&["run", "--scenario", "occlude", "--seed", "2"]), "iou_1");
    assert_eq!(from_trace, from_scenario);
}

#[test]
fn sweep_on_static_is_exact_at_every_capacity() {
    let out = ok(&["sweep", "--scenario", "static", "--capacities", "1,2,4"]);
    let iou = column(&out, "mean_iou");
    assert_eq!(iou, ["1.0", "1.0", "1.0"]);
}

#[test]
fn out_file_gets_report_and_stdout_gets_summary() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.csv");
    let stdout = ok(&["run", "--scenario", "static", "--out", p.to_str().unwrap()]);
    assert!(stdout.starts_with("run,strategy,frames,"));
    let report = std::fs::read_to_string(&p).unwrap();
    assert!(report.starts_with("run,frame,strategy,bank_frames_equivalent,read_seconds,write_seconds,evictions,wrote,iou_1\n"));
}

#[test]
fn usage_errors_exit_one() {
    let out = featbank(&["compare", "--scenario", "static", "--strategies", "adaptive-lfu"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least two strategies"));

    let out = featbank(&["sweep", "--scenario", "static", "--capacities", "2"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least two capacities"));

    assert_eq!(code(&featbank(&["run", "--scenario", "static", "--topk", "0"])), 1);
    assert_eq!(code(&featbank(&["run", "--scenario", "static", "--strategy", "lru"])), 1);
    assert_eq!(code(&featbank(&["run"])), 1);
    assert_eq!(code(&featbank(&["--help"])), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "frames = 10\nheight = 8\nwidth = 8\nc_key = 4\nnoise_sigma = -2.0\n").unwrap();
    let out = featbank(&["run", "--scenario", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(err.contains("bad.cfg:5:"), "{err}");

    let missing = dir.path().join("missing.mbt");
    assert_eq!(code(&featbank(&["run", "--input", missing.to_str().unwrap()])), 2);

    let junk = dir.path().join("junk.mbt");
    std::fs::write(&junk, b"not a trace").unwrap();
    let out = featbank(&["run", "--input", junk.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}
