//! Line-based `key = value` run configuration.
//!
//! ```text
//! # comment
//! lambda = 1e-4
//! steps = 100, 500, 1000, 2000
//! net.depth = 2
//! ```
//!
//! Keys match `[a-z_.]+`; values are ints, floats, strings, bools or
//! comma-separated lists. Unknown and repeated keys are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::train::TrainConfig;

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn scalar<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| parse_err(line, format!("`{key}`: cannot parse `{value}`")))
}

fn list<T: FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| scalar(line, key, v.trim()))
        .collect()
}

fn range(line: usize, key: &str, value: &str) -> Result<(f64, f64)> {
    match list::<f64>(line, key, value)?.as_slice() {
        &[lo, hi] => Ok((lo, hi)),
        _ => Err(parse_err(line, format!("`{key}` takes two values `lo, hi`"))),
    }
}

fn named<T: FromStr<Err = String>>(line: usize, value: &str) -> Result<T> {
    value.parse().map_err(|e: String| parse_err(line, e))
}

fn valid_key(key: &str) -> bool {
    !key.is_empty() && key.bytes().all(|b| b.is_ascii_lowercase() || b == b'_' || b == b'.')
}

/// Applies `text` on top of `base`. The result is validated.
pub fn parse_onto(mut cfg: TrainConfig, text: &str) -> Result<TrainConfig> {
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| parse_err(line, "expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        if !valid_key(key) {
            return Err(parse_err(line, format!("invalid key `{key}`")));
        }
        if value.is_empty() {
            return Err(parse_err(line, format!("`{key}` has no value")));
        }
        if !seen.insert(key.to_string()) {
            return Err(parse_err(line, format!("duplicate key `{key}`")));
        }
        match key {
            "lambda" => cfg.lambda = scalar(line, key, value)?,
            "ema_w" => cfg.ema_w = scalar(line, key, value)?,
            "steps" => cfg.steps = list(line, key, value)?,
            "scale_steps" => cfg.scale_steps = scalar(line, key, value)?,
            "mode" => cfg.mode = named(line, value)?,
            "loss" => cfg.loss_kind = named(line, value)?,
            "lr" => cfg.lr = scalar(line, key, value)?,
            "total_iters" => cfg.total_iters = scalar(line, key, value)?,
            "batch" => cfg.batch = scalar(line, key, value)?,
            "seed" => cfg.seed = scalar(line, key, value)?,
            "eval_every" => cfg.eval_every = scalar(line, key, value)?,
            "channels" => cfg.set_channels(scalar(line, key, value)?),
            "pretrained" => cfg.pretrained = Some(PathBuf::from(value)),
            "net.depth" => cfg.net.depth = scalar(line, key, value)?,
            "net.width" => cfg.net.width = scalar(line, key, value)?,
            "net.kernel" => cfg.net.kernel = scalar(line, key, value)?,
            "embed.taps" => cfg.embed.taps = scalar(line, key, value)?,
            "embed.width" => cfg.embed.width = scalar(line, key, value)?,
            "embed.seed" => cfg.embed.seed = scalar(line, key, value)?,
            "data.task" => cfg.dataset.task = named(line, value)?,
            "data.count" => cfg.dataset.count = scalar(line, key, value)?,
            "data.size" => cfg.dataset.size = scalar(line, key, value)?,
            "data.seed" => cfg.dataset.seed = scalar(line, key, value)?,
            "data.haze_beta" => cfg.dataset.haze_beta = range(line, key, value)?,
            "data.haze_airlight" => cfg.dataset.haze_airlight = range(line, key, value)?,
            "data.rain_density" => cfg.dataset.rain_density = range(line, key, value)?,
            "data.rain_angle" => cfg.dataset.rain_angle = range(line, key, value)?,
            "data.blur_sigma" => cfg.dataset.blur_sigma = range(line, key, value)?,
            _ => return Err(parse_err(line, format!("unknown key `{key}`"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a config over [`TrainConfig::default`].
pub fn parse(text: &str) -> Result<TrainConfig> {
    parse_onto(TrainConfig::default(), text)
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainConfig> {
    parse(&std::fs::read_to_string(path)?)
}

/// Every key, in a form [`parse`] reads back to an equal config.
pub fn render(cfg: &TrainConfig) -> String {
    let mut s = String::new();
    let join = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(", ");
    let pair = |(a, b): (f64, f64)| format!("{a:?}, {b:?}");
    let _ = writeln!(s, "lambda = {:?}", cfg.lambda);
    let _ = writeln!(s, "ema_w = {:?}", cfg.ema_w);
    let _ = writeln!(s, "steps = {}", join(&cfg.steps));
    let _ = writeln!(s, "scale_steps = {}", cfg.scale_steps);
    let _ = writeln!(s, "mode = {}", cfg.mode);
    let _ = writeln!(s, "loss = {}", cfg.loss_kind);
    let _ = writeln!(s, "lr = {:?}", cfg.lr);
    let _ = writeln!(s, "total_iters = {}", cfg.total_iters);
    let _ = writeln!(s, "batch = {}", cfg.batch);
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "eval_every = {}", cfg.eval_every);
    let _ = writeln!(s, "channels = {}", cfg.net.in_channels);
    if let Some(p) = &cfg.pretrained {
        let _ = writeln!(s, "pretrained = {}", p.display());
    }
    let _ = writeln!(s, "net.depth = {}", cfg.net.depth);
    let _ = writeln!(s, "net.width = {}", cfg.net.width);
    let _ = writeln!(s, "net.kernel = {}", cfg.net.kernel);
    let _ = writeln!(s, "embed.taps = {}", cfg.embed.taps);
    let _ = writeln!(s, "embed.width = {}", cfg.embed.width);
    let _ = writeln!(s, "embed.seed = {}", cfg.embed.seed);
    let d = &cfg.dataset;
    let _ = writeln!(s, "data.task = {}", d.task);
    let _ = writeln!(s, "data.count = {}", d.count);
    let _ = writeln!(s, "data.size = {}", d.size);
    let _ = writeln!(s, "data.seed = {}", d.seed);
    let _ = writeln!(s, "data.haze_beta = {}", pair(d.haze_beta));
    let _ = writeln!(s, "data.haze_airlight = {}", pair(d.haze_airlight));
    let _ = writeln!(s, "data.rain_density = {}", pair(d.rain_density));
    let _ = writeln!(s, "data.rain_angle = {}", pair(d.rain_angle));
    let _ = writeln!(s, "data.blur_sigma = {}", pair(d.blur_sigma));
    s
}
