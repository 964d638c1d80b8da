use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mclab::degrade::{quantize, Degradation, Task};
use mclab::imageio::{encode_pnm, read_pnm};
use mclab::nets::{init_params, RestorationNetConfig};
use mclab::train::save_checkpoint;

const SMALL: &str = "\
total_iters = 30
batch = 2
eval_every = 10
net.depth = 1
net.width = 4
data.count = 8
data.size = 32
seed = 3
";

fn mclab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mclab"))
        .args(args)
        .output()
        .expect("spawn mclab")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.conf");
    fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn sorted_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_deterministic_and_reapplicable() {
    let tmp = tempfile::tempdir().unwrap();
    for task in ["sr2x", "haze", "rain", "blur"] {
        let (a, b) = (tmp.path().join(format!("{task}_a")), tmp.path().join(format!("{task}_b")));
        for dir in [&a, &b] {
            let out = mclab(&["gen-data", "--task", task, "--count", "4", "--seed", "1", "--size", "32", "--out", p(dir)]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        }
        let files = sorted_files(&a);
        assert_eq!(files.len(), 9, "{files:?}");
        assert_eq!(files.iter().filter(|f| f.ends_with(".pgm")).count(), 8);
        assert_eq!(files, sorted_files(&b));
        for f in &files {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{task}/{f}");
        }

        // manifest parameters re-applied to the clean fixture give the degraded fixture
        let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
        let lines: Vec<&str> = manifest.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(lines.len(), 4);
        for line in lines {
            let mut parts = line.split_whitespace();
            let name = parts.next().unwrap();
            let fields: Vec<(&str, &str)> = parts.map(|kv| kv.split_once('=').unwrap()).collect();
            let task: Task = fields.iter().find(|(k, _)| *k == "task").unwrap().1.parse().unwrap();
            let meta = Degradation::parse(task, &fields).unwrap();
            let hq = read_pnm(a.join(format!("{name}_hq.pgm"))).unwrap();
            let lq = quantize(&meta.apply(&hq).unwrap());
            assert_eq!(encode_pnm(&lq).unwrap(), fs::read(a.join(format!("{name}_lq.pgm"))).unwrap(), "{line}");
        }
    }
}

#[test]
fn gen_data_color_writes_ppm() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mclab(&["gen-data", "--task", "blur", "--count", "2", "--channels", "3", "--size", "16", "--out", p(tmp.path())]);
    assert!(out.status.success());
    assert_eq!(sorted_files(tmp.path()).iter().filter(|f| f.ends_with(".ppm")).count(), 4);
}

#[test]
fn train_then_eval_reproduces_final_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let run = tmp.path().join("run");
    let out = mclab(&["train", "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "final.ckpt", "manifest.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let header = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(header.starts_with("iter,rec_loss,neg_loss,total_loss,eval_psnr,eval_ssim,wall_ms\n"));
    let rows = csv_rows(&run.join("metrics.csv"));
    assert_eq!(rows.len(), 30);
    assert!(!rows[9][4].is_empty());
    assert!(rows[10][4].is_empty());
    let manifest = fs::read_to_string(run.join("manifest.txt")).unwrap();
    assert!(manifest.contains("total_iters = 30"));
    assert!(manifest.starts_with("build = "));

    let last = rows.last().unwrap();
    let (psnr, ssim): (f64, f64) = (last[4].parse().unwrap(), last[5].parse().unwrap());
    let out = mclab(&["eval", "--checkpoint", p(&run.join("final.ckpt")), "--data", p(&run.join("eval_split"))]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mean: Vec<&str> = stdout.lines().find(|l| l.starts_with("mean,")).unwrap().split(',').collect();
    assert!((mean[1].parse::<f64>().unwrap() - psnr).abs() <= 1e-9, "{stdout}");
    assert!((mean[2].parse::<f64>().unwrap() - ssim).abs() <= 1e-9, "{stdout}");
    assert_eq!(stdout.lines().count(), 1 + 2 + 1);
}

#[test]
fn train_outputs_are_rerun_identical_except_wall_time() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let strip = |dir: &Path| -> Vec<String> {
        csv_rows(&dir.join("metrics.csv"))
            .into_iter()
            .map(|r| r[..6].join(","))
            .collect()
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        assert!(mclab(&["train", "--config", p(&cfg), "--out", p(dir)]).status.success());
    }
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(b.join("final.ckpt")).unwrap());
}

#[test]
fn large_lambda_records_every_iteration_until_termination() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lambda = 1e-1\n");
    let run = tmp.path().join("run");
    let out = mclab(&["train", "--config", p(&cfg), "--out", p(&run)]);
    let rows = csv_rows(&run.join("metrics.csv"));
    match out.status.code() {
        Some(0) => assert_eq!(rows.len(), 30),
        Some(2) => assert!(rows.len() < 30),
        other => panic!("unexpected exit {other:?}"),
    }
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], (i + 1).to_string());
    }
}

#[test]
fn divergent_run_exits_collapsed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lr = 1e100\n");
    let run = tmp.path().join("run");
    let out = mclab(&["train", "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("collapsed"));
    let rows = csv_rows(&run.join("metrics.csv"));
    assert!(rows.len() < 30);
    assert!(!run.join("final.ckpt").exists());
}

#[test]
fn config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mclab(&["train", "--config", p(&tmp.path().join("nope.conf")), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out.stderr.is_empty());

    let bad = tmp.path().join("bad.conf");
    fs::write(&bad, "lambda = 1e-4\n\nnet.depht = 2\n").unwrap();
    let out = mclab(&["train", "--config", p(&bad), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let cfg = write_config(tmp.path(), "");
    let out = mclab(&["ablate", "--grid", "depth", "--config", p(&cfg), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(mclab(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mclab(&["--help"]).status.code(), Some(0));
}

#[test]
fn eval_identity_pairs_hit_the_cap() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(mclab(&["gen-data", "--count", "2", "--size", "16", "--out", p(&data)]).status.success());
    for i in 0..2 {
        fs::copy(data.join(format!("pair_{i:04}_hq.pgm")), data.join(format!("pair_{i:04}_lq.pgm"))).unwrap();
    }
    // zero tail makes the residual net the identity
    let mut params = init_params(&RestorationNetConfig::default(), 0).unwrap();
    params.get_mut("tail.weight").unwrap().data_mut().fill(0.0);
    let ckpt = tmp.path().join("id.ckpt");
    save_checkpoint(&ckpt, &params, 0).unwrap();
    let out = mclab(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data)]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mean = stdout.lines().find(|l| l.starts_with("mean,")).unwrap();
    assert!(mean.starts_with("mean,1.00000000e2,1.00000000e0"), "{mean}");

    let out = mclab(&["eval", "--checkpoint", p(&tmp.path().join("missing.ckpt")), "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn ablation_parallel_matches_sequential() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("seq"), tmp.path().join("par"));
    let seq = mclab(&["ablate", "--grid", "mode", "--config", p(&cfg), "--out", p(&a), "--set", "total_iters=12"]);
    assert!(seq.status.success(), "{}", String::from_utf8_lossy(&seq.stderr));
    let par = mclab(&["ablate", "--grid", "mode", "--config", p(&cfg), "--out", p(&b), "--set", "total_iters=12", "--parallel"]);
    assert!(par.status.success());
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert_eq!(summary, fs::read_to_string(b.join("summary.csv")).unwrap());
    let labels: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["none", "fixed_random", "fixed_pretrained", "latency"]);
    for arm in &labels {
        assert!(a.join(arm).join("metrics.csv").exists());
    }
}

#[test]
fn shipped_desk_config_is_the_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_sr2x.conf");
    let cfg = mclab::config::load(&path).unwrap();
    assert_eq!(cfg, mclab::train::TrainConfig::desk_sr2x());
}
