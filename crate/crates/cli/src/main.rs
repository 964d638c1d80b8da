use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mclab::ablate::{self, Grid};
use mclab::config;
use mclab::degrade::{make_dataset, DatasetSpec, ImagePair, Task};
use mclab::imageio::{read_pnm, write_pnm};
use mclab::train::{
    evaluate_images, fmt_sig9, load_checkpoint, save_checkpoint, write_metrics_csv, RunStatus, TrainConfig, Trainer,
};
use mclab::Error;

const BUILD_ID: &str = env!("MCLAB_BUILD_ID");

const EXIT_USAGE: u8 = 1;
const EXIT_COLLAPSED: u8 = 2;
const EXIT_IO: u8 = 3;

/// Model-contrastive restoration experiments on synthetic data.
#[derive(Parser, Debug)]
#[command(name = "mclab", version = BUILD_ID)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write degraded/clean image pairs and a manifest.
    GenData {
        #[arg(long, default_value = "sr2x")]
        task: Task,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 48)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// 1 writes PGM, 3 writes PPM.
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Extra `key=value` settings applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Score a checkpoint on a directory of pairs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run one ablation grid.
    Ablate {
        #[arg(long)]
        grid: Grid,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Run independent arms on separate threads.
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Checkpoint(_) => Failure::Io(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type CmdResult = Result<ExitCode, Failure>;

fn io_ctx(path: &Path) -> impl FnOnce(io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.cmd {
        Cmd::GenData {
            task,
            count,
            size,
            seed,
            channels,
            out,
        } => gen_data(task, count, size, seed, channels, &out),
        Cmd::Train { config, out, sets } => train(&config, &out, &sets),
        Cmd::Eval { checkpoint, data } => eval(&checkpoint, &data),
        Cmd::Ablate {
            grid,
            config,
            out,
            sets,
            parallel,
        } => run_ablation(grid, &config, &out, &sets, parallel),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_IO)
        }
    }
}

fn load_config(path: &Path, sets: &[String]) -> Result<TrainConfig, Failure> {
    let text = fs::read_to_string(path).map_err(io_ctx(path))?;
    let cfg = config::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if sets.is_empty() {
        return Ok(cfg);
    }
    let mut extra = String::new();
    for s in sets {
        if !s.contains('=') {
            return Err(Failure::Usage(format!("--set expects KEY=VALUE, got `{s}`")));
        }
        extra.push_str(s);
        extra.push('\n');
    }
    config::parse_onto(cfg, &extra).map_err(|e| Failure::Usage(format!("--set: {e}")))
}

fn ext(pair: &ImagePair) -> &'static str {
    if pair.hq.shape().c == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

/// Writes `pair_NNNN_{lq,hq}.{pgm,ppm}` and `manifest.txt` into `dir`.
fn write_pairs(dir: &Path, pairs: &[ImagePair], header: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(io_ctx(dir))?;
    let mut manifest = format!("# {header}\n");
    for (i, p) in pairs.iter().enumerate() {
        let name = format!("pair_{i:04}");
        for (kind, img) in [("lq", &p.lq), ("hq", &p.hq)] {
            let path = dir.join(format!("{name}_{kind}.{}", ext(p)));
            write_pnm(&path, img).map_err(io_ctx(&path))?;
        }
        let _ = writeln!(manifest, "{name} task={} seed={} {}", p.task, p.seed, p.meta.describe());
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(io_ctx(&path))?;
    Ok(())
}

fn gen_data(task: Task, count: usize, size: usize, seed: u64, channels: usize, out: &Path) -> CmdResult {
    let spec = DatasetSpec {
        task,
        count,
        size,
        channels,
        seed,
        ..Default::default()
    };
    let pairs = make_dataset(&spec)?;
    let header = format!("mclab gen-data task={task} count={count} size={size} channels={channels} seed={seed}");
    write_pairs(out, &pairs, &header)?;
    println!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn write_manifest(config_path: &Path, cfg: &TrainConfig, out: &Path) -> Result<(), Failure> {
    let text = format!(
        "build = {BUILD_ID}\nconfig_file = {}\nout_dir = {}\n\n[resolved config]\n{}",
        config_path.display(),
        out.display(),
        config::render(cfg)
    );
    let path = out.join("manifest.txt");
    fs::write(&path, text).map_err(io_ctx(&path))?;
    Ok(())
}

fn train(config_path: &Path, out: &Path, sets: &[String]) -> CmdResult {
    let cfg = load_config(config_path, sets)?;
    fs::create_dir_all(out).map_err(io_ctx(out))?;
    write_manifest(config_path, &cfg, out)?;
    let trainer = Trainer::new(cfg.clone(), None)?;
    write_pairs(
        &out.join("eval_split"),
        trainer.eval_pairs(),
        &format!("held-out split of {}", config_path.display()),
    )?;
    let report = trainer.run_with(|r, _| {
        if let (Some(p), Some(s)) = (r.eval_psnr, r.eval_ssim) {
            eprintln!("iter {:>6}  rec {:.6}  neg {:.6}  psnr {:.3}  ssim {:.4}", r.iter, r.rec_loss, r.neg_loss, p, s);
        }
    })?;
    let csv = out.join("metrics.csv");
    write_metrics_csv(fs::File::create(&csv).map_err(io_ctx(&csv))?, &report.records).map_err(io_ctx(&csv))?;
    println!(
        "input  psnr {}  ssim {}",
        fmt_sig9(report.input_metrics.psnr),
        fmt_sig9(report.input_metrics.ssim)
    );
    match report.status {
        RunStatus::Completed => {
            let ckpt = out.join("final.ckpt");
            save_checkpoint(&ckpt, &report.params, cfg.total_iters).map_err(|e| Failure::Io(format!("{}: {e}", ckpt.display())))?;
            if let Some(m) = report.final_eval {
                println!("final  psnr {}  ssim {}", fmt_sig9(m.psnr), fmt_sig9(m.ssim));
            }
            Ok(ExitCode::SUCCESS)
        }
        RunStatus::Collapsed { iter, what, value } => {
            eprintln!("collapsed at iteration {iter}: {what} = {value}");
            Ok(ExitCode::from(EXIT_COLLAPSED))
        }
    }
}

/// Pairs `*_lq.*` with `*_hq.*` files, sorted by name.
fn read_pairs(dir: &Path) -> Result<Vec<(String, mclab::Tensor, mclab::Tensor)>, Failure> {
    let mut names: Vec<(String, String)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_ctx(dir))? {
        let file = entry.map_err(io_ctx(dir))?.file_name().to_string_lossy().into_owned();
        for e in ["pgm", "ppm"] {
            if let Some(stem) = file.strip_suffix(&format!("_lq.{e}")) {
                names.push((stem.to_string(), e.to_string()));
            }
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Failure::Io(format!("{}: no *_lq.pgm/ppm files", dir.display())));
    }
    names
        .into_iter()
        .map(|(stem, e)| {
            let lq_path = dir.join(format!("{stem}_lq.{e}"));
            let hq_path = dir.join(format!("{stem}_hq.{e}"));
            let lq = read_pnm(&lq_path).map_err(io_ctx(&lq_path))?;
            let hq = read_pnm(&hq_path).map_err(io_ctx(&hq_path))?;
            Ok((stem, lq, hq))
        })
        .collect()
}

fn eval(checkpoint: &Path, data: &Path) -> CmdResult {
    let ck = load_checkpoint(checkpoint).map_err(|e| Failure::Io(format!("{}: {e}", checkpoint.display())))?;
    let pairs = read_pairs(data)?;
    let images: Vec<(&mclab::Tensor, &mclab::Tensor)> = pairs.iter().map(|(_, lq, hq)| (lq, hq)).collect();
    let (mean, per) = evaluate_images(&ck.params, &images)?;
    println!("pair,psnr,ssim");
    for ((name, _, _), m) in pairs.iter().zip(&per) {
        println!("{name},{},{}", fmt_sig9(m.psnr), fmt_sig9(m.ssim));
    }
    println!("mean,{},{}", fmt_sig9(mean.psnr), fmt_sig9(mean.ssim));
    Ok(ExitCode::SUCCESS)
}

fn run_ablation(grid: Grid, config_path: &Path, out: &Path, sets: &[String], parallel: bool) -> CmdResult {
    let base = load_config(config_path, sets)?;
    fs::create_dir_all(out).map_err(io_ctx(out))?;
    write_manifest(config_path, &base, out)?;
    let results = ablate::run_grid(grid, &base, out, parallel)?;
    println!("{}", ablate::SUMMARY_HEADER);
    for r in &results {
        println!("{}", ablate::summary_row(r));
    }
    Ok(ExitCode::SUCCESS)
}
