use std::path::Path;
use std::process::{Command, Output};

fn scan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scan")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = "channels = 8\nattention.heads = 2\nattention.head_dim = 4\nattention.depth = 1\nattention.features = 8\n";

fn synth_dir(dir: &Path) -> std::path::PathBuf {
    let spec = write(dir, "scene.txt", "seed = 3\nframes = 3\nrandom.count = 5\nstuff.density = 0.3\nnoise = 0.01\n");
    let frames = dir.join("frames");
    let out = scan(&["synth", "--spec", path(&spec), "--out-dir", path(&frames)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    frames
}

#[test]
fn oracle_round_trip_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let frames = synth_dir(dir.path());
    assert!(frames.join("000002.label").exists());
    let pred = dir.path().join("pred");
    let out = scan(&["infer", "--oracle", "--in", path(&frames), "--out", path(&pred)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let classes = write(dir.path(), "classes.txt", "classes.count = 20\nclasses.things = 1-8\n");
    let out = scan(&["eval", "--gt", path(&frames), "--pred", path(&pred), "--classes", path(&classes)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(pred.join("metrics.csv")).unwrap();
    assert!(csv.lines().any(|l| l == "all,pq,1"), "{csv}");
    assert!(csv.lines().any(|l| l == "all,miou,1"), "{csv}");
    assert!(!String::from_utf8_lossy(&out.stdout).is_empty());
}

#[test]
fn inference_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let frames = synth_dir(dir.path());
    let config = write(dir.path(), "run.txt", SMALL);
    let weights = dir.path().join("w.bin");
    let out = scan(&["init", "--config", path(&config), "--seed", "4", "--out", path(&weights)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let pred = dir.path().join(format!("pred{threads}"));
        let out = scan(&[
            "infer", "--config", path(&config), "--weights", path(&weights), "--in", path(&frames), "--out", path(&pred),
            "--threads", threads,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push((0..3).map(|k| std::fs::read(pred.join(format!("{k:06}.label"))).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn weight_errors_exit_with_their_code() {
    let dir = tempfile::tempdir().unwrap();
    let frames = synth_dir(dir.path());
    let bad = write(dir.path(), "bad.bin", "NOTAWEIGHTFILE");
    let out = scan(&["infer", "--weights", path(&bad), "--in", path(&frames), "--out", path(&dir.path().join("p"))]);
    assert_eq!(out.status.code(), Some(10));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));

    let config = write(dir.path(), "run.txt", SMALL);
    let small = dir.path().join("small.bin");
    assert!(scan(&["init", "--config", path(&config), "--seed", "1", "--out", path(&small)]).status.success());
    let out = scan(&["infer", "--weights", path(&small), "--in", path(&frames), "--out", path(&dir.path().join("p"))]);
    assert_eq!(out.status.code(), Some(16), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    std::fs::create_dir(&frames).unwrap();
    std::fs::write(frames.join("000000.bin"), [0u8; 20]).unwrap();
    let out = scan(&["infer", "--seed", "1", "--in", path(&frames), "--out", path(&dir.path().join("p"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte 16"));

    let config = write(dir.path(), "run.txt", "channels = 8\nbogus = 1\n");
    let out = scan(&["bench", "--points", "100", "--config", path(&config)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn check_passes() {
    let out = scan(&["check"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 13, "{stdout}");
}

#[test]
fn bench_reports_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "run.txt", SMALL);
    let out = scan(&["bench", "--points", "2000", "--config", path(&config)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for stage in ["crop", "backbone", "attention", "heatmap", "point_heads", "decode", "total"] {
        assert!(stdout.lines().any(|l| l.starts_with(stage)), "missing {stage}: {stdout}");
    }
}
