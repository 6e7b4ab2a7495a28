use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 6] = [
    "--set",
    "model.stage_channels=[4,8,8,16]",
    "--set",
    "model.blocks_per_stage=1",
    "--set",
    "model.fpn_width=8",
];

fn asap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = asap(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn gen(dir: &Path, count: &str, size: &str) {
    ok(&["gen", "--out", dir.to_str().unwrap(), "--count", count, "--size", size, "--seed", "3"]);
}

#[test]
fn gen_writes_reproducible_datasets() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen(a.path(), "10", "64x128");
    gen(b.path(), "10", "64x128");
    let train = fs::read_to_string(a.path().join("train.txt")).unwrap();
    let val = fs::read_to_string(a.path().join("val.txt")).unwrap();
    assert_eq!((train.lines().count(), val.lines().count()), (8, 2));
    for line in train.lines().chain(val.lines()) {
        let label = line.replace("images/", "labels/").replace(".ppm", ".pgm");
        let (img, lab) = (fs::read(a.path().join(line)).unwrap(), fs::read(a.path().join(&label)).unwrap());
        assert!(img.starts_with(b"P6\n128 64\n255\n"));
        assert!(lab.starts_with(b"P5\n128 64\n255\n"));
        assert_eq!(img, fs::read(b.path().join(line)).unwrap());
        assert_eq!(lab, fs::read(b.path().join(&label)).unwrap());
    }
}

#[test]
fn untrained_checkpoint_evaluates_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));
    gen(&data, "10", "32x64");
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(), "--max-steps", "0"];
    args.extend(SMALL);
    ok(&args);
    let ckpt = run.join("checkpoint.bin");
    let eval = ["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()];
    let first = ok(&eval);
    assert_eq!(first, ok(&eval));
    let miou: f64 = first
        .lines()
        .find_map(|l| l.strip_prefix("mIoU\t"))
        .expect("mIoU line")
        .parse()
        .unwrap();
    assert!(miou < 0.25, "{miou}");
}

#[test]
fn interrupted_training_resumes_on_the_same_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "6", "32x64");
    let d = data.to_str().unwrap();
    let train = |run: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--data", d, "--out", run.to_str().unwrap(), "--max-steps", "3"];
        args.extend(extra);
        ok(&args)
    };
    let (whole, split) = (dir.path().join("whole"), dir.path().join("split"));
    train(&whole, &SMALL);
    let mut first = vec!["--stop-after", "1"];
    first.extend(SMALL);
    train(&split, &first);
    let (cfg, ckpt) = (split.join("config.toml"), split.join("checkpoint.bin"));
    train(&split, &["--config", cfg.to_str().unwrap(), "--resume", ckpt.to_str().unwrap()]);

    let trace = fs::read_to_string(split.join("trace.tsv")).unwrap();
    assert_eq!(trace.lines().count(), 4, "{trace}");
    assert_eq!(trace, fs::read_to_string(whole.join("trace.tsv")).unwrap());
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(whole.join("checkpoint.bin")).unwrap());
}

#[test]
fn flops_and_gradcheck_pass() {
    let out = ok(&["flops"]);
    assert!(!out.contains("FAIL"), "{out}");
    assert!(out.contains("PASS"));
    assert!(ok(&["gradcheck"]).lines().any(|l| l == "PASS"));
}

#[test]
fn bench_prints_one_line_per_iteration() {
    let mut args = vec!["bench", "--size", "64x96", "--iters", "1"];
    args.extend(SMALL);
    let out = ok(&args);
    let samples = out
        .lines()
        .skip_while(|l| *l != "sample\tms")
        .skip(1)
        .take_while(|l| l.split('\t').count() == 2 && l.split('\t').all(|f| f.parse::<f64>().is_ok()))
        .count();
    assert_eq!(samples, 1, "{out}");
}

#[test]
fn ablate_reports_each_variant() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "6", "32x64");
    let mut args = vec!["ablate", "--data", dir.path().to_str().unwrap(), "--variant", "ln_only", "--max-steps", "1"];
    args.extend(SMALL);
    let out = ok(&args);
    let rows: Vec<&str> = out.lines().filter(|l| l.starts_with("ln_only\t")).collect();
    assert_eq!(rows.len(), 1, "{out}");
}

#[test]
fn bad_configuration_exits_with_usage_code() {
    for args in [
        &["flops", "--set", "model.no_such_key=1"][..],
        &["flops", "--set", "train.batch_size=0"],
        &["flops", "--size", "12"],
        &["frobnicate"],
    ] {
        assert_eq!(asap(args).status.code(), Some(2), "{args:?}");
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[model]\nfpn_width = 8\n[extra]\nx = 1\n").unwrap();
    assert_eq!(asap(&["flops", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}
