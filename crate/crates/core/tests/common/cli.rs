//! Drives the `fewseg` binary through the gen-data, train, eval and predict round trip.

use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

pub const BIN: &str = env!("CARGO_BIN_EXE_fewseg");

pub const QUICK: [&str; 8] = [
    "--set",
    "train.epochs=2",
    "--set",
    "train.episodes_per_epoch=16",
    "--set",
    "train.warmup_steps=10",
    "--set",
    "train.momentum=0.9",
];

pub fn fewseg(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn fewseg")
}

fn ok(args: &[&str]) -> Result<String, String> {
    let out = fewseg(args);
    if !out.status.success() {
        return Err(format!("{args:?} exited with {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub struct Smoke {
    pub elapsed: Duration,
    pub iteration_files: usize,
}

/// The full round trip in `dir`; errors name the first step that misbehaved.
pub fn round_trip(dir: &Path) -> Result<Smoke, String> {
    let start = Instant::now();
    let data = dir.join("data");
    let run = dir.join("run");
    let pred = dir.join("pred");

    ok(&["gen-data", "--out", s(&data), "--episodes", "3", "--k", "2", "--annotation", "bbox"])?;
    let manifest = std::fs::read_to_string(data.join("manifest.txt")).map_err(|e| e.to_string())?;
    check(manifest.lines().any(|l| l.starts_with("fingerprint = ")), || "manifest has no fingerprint".into())?;
    let ep0 = data.join("episode_00000");
    for f in ["support_0.ppm", "support_0_mask.pgm", "support_0_bbox.pgm", "support_1.ppm", "query.ppm", "query_mask.pgm"] {
        check(ep0.join(f).is_file(), || format!("gen-data did not write {f}"))?;
    }

    let mut train = vec!["train", "--out", s(&run)];
    train.extend(QUICK);
    ok(&train)?;
    let ck = run.join("model.ck");
    check(ck.is_file(), || "train wrote no checkpoint".into())?;
    let loss = std::fs::read_to_string(run.join("loss.csv")).map_err(|e| e.to_string())?;
    check(loss.starts_with("# fingerprint ") && loss.lines().nth(1) == Some("epoch,step,loss"), || {
        "loss.csv header".into()
    })?;
    check(loss.lines().count() == 2 + 2 * 4, || format!("loss.csv has {} lines", loss.lines().count()))?;

    let mut eval = vec!["eval", "--checkpoint", s(&ck), "--episodes", "20", "--out", s(&run)];
    eval.extend(QUICK);
    let table = ok(&eval)?;
    check(table.contains("FB-IoU") && table.contains("episodes: 20"), || format!("eval table: {table}"))?;
    let kv = std::fs::read_to_string(run.join("report.kv")).map_err(|e| e.to_string())?;
    check(kv.lines().any(|l| l == "episodes = 20"), || format!("report.kv: {kv}"))?;

    let sup = format!("{}:{}", s(&ep0.join("support_0.ppm")), s(&ep0.join("support_0_mask.pgm")));
    let query = ep0.join("query.ppm");
    let mut predict = vec![
        "predict",
        "--checkpoint",
        s(&ck),
        "--support",
        &sup,
        "--query",
        s(&query),
        "--out",
        s(&pred),
        "--iterations",
        "4",
        "--dump-iterations",
    ];
    predict.extend(QUICK);
    ok(&predict)?;
    check(pred.join("mask.pgm").is_file(), || "predict wrote no mask".into())?;
    let iteration_files = std::fs::read_dir(&pred)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("iter_"))
        .count();
    for t in 0..=4 {
        check(pred.join(format!("iter_{t}.pgm")).is_file(), || format!("iter_{t}.pgm missing"))?;
    }
    Ok(Smoke {
        elapsed: start.elapsed(),
        iteration_files,
    })
}
