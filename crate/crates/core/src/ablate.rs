//! Ablation grids over the negative-loss weight, EMA weight, negative
//! steps and negative source. Every arm shares the base seed.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::MetricValue;
use crate::negbank::NegativeMode;
use crate::nets::ParamSet;
use crate::train::{fmt_sig9, write_metrics_csv, RunStatus, TrainConfig, TrainReport, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Grid {
    Lambda,
    EmaW,
    Step,
    Mode,
}

impl Grid {
    pub const ALL: [Grid; 4] = [Grid::Lambda, Grid::EmaW, Grid::Step, Grid::Mode];

    pub fn as_str(&self) -> &'static str {
        match self {
            Grid::Lambda => "lambda",
            Grid::EmaW => "ema_w",
            Grid::Step => "step",
            Grid::Mode => "mode",
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Grid::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown grid `{s}` (expected lambda, ema_w, step or mode)"))
    }
}

pub const LAMBDA_ARMS: [(&str, f64); 6] = [
    ("0", 0.0),
    ("1e-2", 1e-2),
    ("1e-3", 1e-3),
    ("5e-4", 5e-4),
    ("1e-4", 1e-4),
    ("1e-5", 1e-5),
];

pub const EMA_W_ARMS: [(&str, f64); 6] = [
    ("0", 0.0),
    ("0.01", 0.01),
    ("0.1", 0.1),
    ("0.5", 0.5),
    ("0.9", 0.9),
    ("0.999", 0.999),
];

/// One configured run of a grid.
#[derive(Clone, Debug)]
pub struct Arm {
    pub label: String,
    pub cfg: TrainConfig,
    /// Use the final parameters of this earlier arm as the fixed negative.
    pub pretrained_from: Option<usize>,
}

fn arm(label: impl Into<String>, cfg: TrainConfig) -> Arm {
    Arm {
        label: label.into(),
        cfg,
        pretrained_from: None,
    }
}

/// The arms of `grid`, derived from `base`.
pub fn arms(grid: Grid, base: &TrainConfig) -> Vec<Arm> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match grid {
        Grid::Lambda => LAMBDA_ARMS
            .iter()
            .map(|&(l, v)| arm(l, with(&|c| c.lambda = v)))
            .collect(),
        Grid::EmaW => EMA_W_ARMS
            .iter()
            .map(|&(l, v)| arm(l, with(&|c| c.ema_w = v)))
            .collect(),
        Grid::Step => {
            let mut out: Vec<Arm> = base
                .steps
                .iter()
                .map(|&s| arm(s.to_string(), with(&|c| c.steps = vec![s])))
                .collect();
            out.push(arm("all", base.clone()));
            out
        }
        Grid::Mode => {
            let none = with(&|c| {
                c.lambda = 0.0;
                c.mode = NegativeMode::Latency;
            });
            let mode = |m: NegativeMode| with(&|c| c.mode = m);
            let mut pretrained = arm("fixed_pretrained", mode(NegativeMode::FixedPretrained));
            if base.pretrained.is_none() {
                pretrained.pretrained_from = Some(0);
            }
            vec![
                arm("none", none),
                arm("fixed_random", mode(NegativeMode::FixedRandom)),
                pretrained,
                arm("latency", mode(NegativeMode::Latency)),
            ]
        }
    }
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub label: String,
    pub report: TrainReport,
}

impl ArmResult {
    /// Final eval metrics of a completed arm.
    pub fn final_metrics(&self) -> Option<MetricValue> {
        match self.report.status {
            RunStatus::Completed => self.report.final_eval,
            RunStatus::Collapsed { .. } => None,
        }
    }
}

fn run_arm(arm: &Arm, pretrained: Option<ParamSet>) -> Result<ArmResult> {
    let report = Trainer::new(arm.cfg.clone(), pretrained)?.run()?;
    Ok(ArmResult {
        label: arm.label.clone(),
        report,
    })
}

/// Runs all arms; independent arms run on separate threads when
/// `parallel` is set. Results are in arm order and do not depend on
/// `parallel`.
pub fn run_arms(arms: &[Arm], parallel: bool) -> Result<Vec<ArmResult>> {
    let mut results: Vec<Option<ArmResult>> = vec![None; arms.len()];
    let independent: Vec<usize> = (0..arms.len()).filter(|&i| arms[i].pretrained_from.is_none()).collect();
    if parallel {
        let done: Vec<(usize, Result<ArmResult>)> = std::thread::scope(|s| {
            let handles: Vec<_> = independent
                .iter()
                .map(|&i| (i, s.spawn(move || run_arm(&arms[i], None))))
                .collect();
            handles
                .into_iter()
                .map(|(i, h)| (i, h.join().expect("ablation arm panicked")))
                .collect()
        });
        for (i, r) in done {
            results[i] = Some(r?);
        }
    } else {
        for &i in &independent {
            results[i] = Some(run_arm(&arms[i], None)?);
        }
    }
    for i in 0..arms.len() {
        if let Some(src) = arms[i].pretrained_from {
            let source = results
                .get(src)
                .and_then(Option::as_ref)
                .ok_or_else(|| Error::Contract(format!("arm {i} depends on missing arm {src}")))?;
            let params = source.report.params.clone();
            results[i] = Some(run_arm(&arms[i], Some(params))?);
        }
    }
    Ok(results.into_iter().map(|r| r.expect("every arm ran")).collect())
}

pub const SUMMARY_HEADER: &str = "arm,status,final_psnr,final_ssim";

pub fn summary_row(r: &ArmResult) -> String {
    match (&r.report.status, r.final_metrics()) {
        (RunStatus::Completed, Some(m)) => {
            format!("{},Completed,{},{}", r.label, fmt_sig9(m.psnr), fmt_sig9(m.ssim))
        }
        (RunStatus::Completed, None) => format!("{},Completed,,", r.label),
        (RunStatus::Collapsed { .. }, _) => format!("{},Collapsed,,", r.label),
    }
}

pub fn write_summary_csv(mut w: impl Write, results: &[ArmResult]) -> std::io::Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in results {
        writeln!(w, "{}", summary_row(r))?;
    }
    Ok(())
}

/// Runs `grid` and writes `summary.csv` plus `<arm>/metrics.csv` under `out`.
pub fn run_grid(grid: Grid, base: &TrainConfig, out: &Path, parallel: bool) -> Result<Vec<ArmResult>> {
    let arms = arms(grid, base);
    for a in &arms {
        a.cfg.validate()?;
    }
    let results = run_arms(&arms, parallel)?;
    fs::create_dir_all(out)?;
    for r in &results {
        let dir = out.join(&r.label);
        fs::create_dir_all(&dir)?;
        write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?, &r.report.records)?;
    }
    write_summary_csv(fs::File::create(out.join("summary.csv"))?, &results)?;
    Ok(results)
}
