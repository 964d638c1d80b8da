//! Procedural clean images and the four degradation families.
//!
//! All operators are deterministic in their parameters and seed, and map
//! `[0, 1]` images to `[0, 1]` images. Images are `(1, c, h, w)` tensors.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::tensor::{Shape, Tensor};

pub const MIN_SIZE: usize = 16;

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Single-channel synthetic clean image.
pub fn synth_clean(size: usize, seed: u64) -> Result<Tensor> {
    synth_clean_channels(size, 1, seed)
}

/// Smooth low-frequency background plus hard-edged rectangles, disks and
/// thin strokes. Each structure gets an independent value per channel.
pub fn synth_clean_channels(size: usize, channels: usize, seed: u64) -> Result<Tensor> {
    if size < MIN_SIZE {
        return Err(config_err(format!("image size must be >= {MIN_SIZE}, got {size}")));
    }
    if channels == 0 {
        return Err(config_err("image needs at least one channel"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(1, channels, size, size);
    let mut img = Tensor::zeros(shape);
    let n = size as f64;

    for c in 0..channels {
        let (gx, gy) = (uniform(&mut rng, -1.0, 1.0), uniform(&mut rng, -1.0, 1.0));
        let waves: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| {
                (
                    uniform(&mut rng, 0.5, 2.5) * 2.0 * PI / n,
                    uniform(&mut rng, 0.5, 2.5) * 2.0 * PI / n,
                    uniform(&mut rng, 0.0, 2.0 * PI),
                    uniform(&mut rng, 0.3, 1.0),
                )
            })
            .collect();
        let plane = &mut img.data_mut()[c * size * size..(c + 1) * size * size];
        for y in 0..size {
            for x in 0..size {
                let (xf, yf) = (x as f64, y as f64);
                let mut v = gx * xf / n + gy * yf / n;
                for &(fx, fy, phase, amp) in &waves {
                    v += amp * (fx * xf + fy * yf + phase).sin();
                }
                plane[y * size + x] = v;
            }
        }
        let (lo, hi) = plane
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = (hi - lo).max(1e-12);
        plane
            .iter_mut()
            .for_each(|v| *v = 0.15 + 0.7 * (*v - lo) / span);
    }

    let paint = |img: &mut Tensor, rng: &mut ChaCha8Rng, inside: &dyn Fn(f64, f64) -> bool| {
        let values: Vec<f64> = (0..channels).map(|_| rng.gen::<f64>()).collect();
        for y in 0..size {
            for x in 0..size {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    for (c, &v) in values.iter().enumerate() {
                        img.data_mut()[shape.offset(0, c, y, x)] = v;
                    }
                }
            }
        }
    };

    for _ in 0..rng.gen_range(2..=4) {
        let (x0, y0) = (uniform(&mut rng, 0.0, n * 0.8), uniform(&mut rng, 0.0, n * 0.8));
        let (w, h) = (uniform(&mut rng, n * 0.1, n * 0.45), uniform(&mut rng, n * 0.1, n * 0.45));
        paint(&mut img, &mut rng, &|x, y| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h);
    }
    for _ in 0..rng.gen_range(1..=3) {
        let (cx, cy) = (uniform(&mut rng, 0.0, n), uniform(&mut rng, 0.0, n));
        let r = uniform(&mut rng, n * 0.06, n * 0.2);
        paint(&mut img, &mut rng, &|x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r);
    }
    for _ in 0..rng.gen_range(2..=4) {
        let (ax, ay) = (uniform(&mut rng, 0.0, n), uniform(&mut rng, 0.0, n));
        let (bx, by) = (uniform(&mut rng, 0.0, n), uniform(&mut rng, 0.0, n));
        let half_width = uniform(&mut rng, 0.5, 1.0);
        paint(&mut img, &mut rng, &|x, y| {
            segment_distance(x, y, ax, ay, bx, by) <= half_width
        });
    }
    Ok(img)
}

fn segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    ((px - ax - t * dx).powi(2) + (py - ay - t * dy).powi(2)).sqrt()
}

/// Catmull-Rom cubic (Keys kernel with a = −0.5).
pub fn catmull_rom(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Resampling factor `num/den`; one of 1/4, 1/2, 2, 4.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: usize,
    pub den: usize,
}

impl Ratio {
    pub fn new(num: usize, den: usize) -> Result<Self> {
        match (num, den) {
            (1, 4) | (1, 2) | (2, 1) | (4, 1) => Ok(Ratio { num, den }),
            _ => Err(config_err(format!(
                "resample scale must be one of 1/4, 1/2, 2, 4; got {num}/{den}"
            ))),
        }
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    fn apply(&self, len: usize) -> Result<usize> {
        if !(len * self.num).is_multiple_of(self.den) {
            return Err(config_err(format!(
                "scaling {len} by {}/{} is not integral",
                self.num, self.den
            )));
        }
        Ok(len * self.num / self.den)
    }
}

/// Source taps `(index, weight)` for each output position along one axis.
/// Downscaling stretches the kernel by `1/scale` (antialiasing); weights
/// are normalized and out-of-range indices clamp to the border.
pub fn resample_taps(in_len: usize, out_len: usize, scale: f64) -> Vec<Vec<(usize, f64)>> {
    let stretch = scale.min(1.0);
    let support = 2.0 / stretch;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let first = (center - support).ceil() as isize;
            let last = (center + support).floor() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for j in first..=last {
                let w = catmull_rom((center - j as f64) * stretch);
                if w == 0.0 {
                    continue;
                }
                total += w;
                let idx = j.clamp(0, in_len as isize - 1) as usize;
                match taps.iter_mut().find(|(i, _)| *i == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

pub fn bicubic_resample(img: &Tensor, scale: Ratio) -> Result<Tensor> {
    let s = img.shape();
    let (oh, ow) = (scale.apply(s.h)?, scale.apply(s.w)?);
    let f = scale.value();
    let (tx, ty) = (resample_taps(s.w, ow, f), resample_taps(s.h, oh, f));
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let mut rows = vec![0.0; s.h * ow];
    for nc in 0..s.n * s.c {
        let src = &img.data()[nc * s.h * s.w..(nc + 1) * s.h * s.w];
        for y in 0..s.h {
            for (x, taps) in tx.iter().enumerate() {
                rows[y * ow + x] = taps.iter().map(|&(i, w)| w * src[y * s.w + i]).sum();
            }
        }
        let dst = &mut out.data_mut()[nc * oh * ow..(nc + 1) * oh * ow];
        for (y, taps) in ty.iter().enumerate() {
            for x in 0..ow {
                let v: f64 = taps.iter().map(|&(i, w)| w * rows[i * ow + x]).sum();
                dst[y * ow + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Seeded smooth pseudo-depth in `[0, 1]`.
pub fn depth_field(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gx, gy) = (uniform(&mut rng, -1.0, 1.0), uniform(&mut rng, 0.2, 1.0));
    let (f, phase) = (uniform(&mut rng, 0.5, 1.5), uniform(&mut rng, 0.0, 2.0 * PI));
    let mut d: Vec<f64> = (0..h * w)
        .map(|i| {
            let (x, y) = ((i % w) as f64 / w as f64, (i / w) as f64 / h as f64);
            gx * x + gy * y + 0.3 * (2.0 * PI * f * (x + 0.5 * y) + phase).sin()
        })
        .collect();
    let (lo, hi) = d
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(1e-12);
    d.iter_mut().for_each(|v| *v = (*v - lo) / span);
    d
}

/// Atmospheric scattering `I = J·t + A·(1 − t)`, `t = exp(−β·d)` with an
/// explicit per-pixel depth map shared by all channels.
pub fn apply_haze_with_depth(img: &Tensor, depth: &[f64], beta: f64, airlight: f64) -> Result<Tensor> {
    let s = img.shape();
    if depth.len() != s.plane() {
        return Err(config_err("depth map size does not match image"));
    }
    if !beta.is_finite() || beta < 0.0 {
        return Err(config_err(format!("haze beta must be >= 0, got {beta}")));
    }
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let t = (-beta * depth[i % s.plane()]).exp();
        *v = (*v * t + airlight * (1.0 - t)).clamp(0.0, 1.0);
    }
    Ok(out)
}

pub const HAZE_BETA_MAX: f64 = 2.0;
pub const HAZE_AIRLIGHT: (f64, f64) = (0.7, 1.0);

/// Haze over a seeded pseudo-depth. `beta` in `[0, 2]` (0 is the identity),
/// `airlight` in `[0.7, 1]`.
pub fn apply_haze(img: &Tensor, beta: f64, airlight: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..=HAZE_BETA_MAX).contains(&beta) {
        return Err(config_err(format!("haze beta must lie in [0, 2], got {beta}")));
    }
    if !(HAZE_AIRLIGHT.0..=HAZE_AIRLIGHT.1).contains(&airlight) {
        return Err(config_err(format!("haze airlight must lie in [0.7, 1], got {airlight}")));
    }
    let s = img.shape();
    apply_haze_with_depth(img, &depth_field(s.h, s.w, seed), beta, airlight)
}

pub const RAIN_DENSITY_MAX: f64 = 0.2;

/// Additive bright streaks at `angle` degrees from vertical. The streak
/// count is `⌊density · h · w / mean_length⌋`, so tiny densities draw
/// nothing.
pub fn apply_rain(img: &Tensor, density: f64, angle: f64, seed: u64) -> Result<Tensor> {
    if !(density > 0.0 && density <= RAIN_DENSITY_MAX) {
        return Err(config_err(format!("rain density must lie in (0, 0.2], got {density}")));
    }
    if !angle.is_finite() {
        return Err(config_err("rain angle must be finite"));
    }
    let s = img.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (len_lo, len_hi) = ((s.h.min(s.w) as f64 / 8.0).max(3.0), (s.h.min(s.w) as f64 / 4.0).max(4.0));
    let count = (density * (s.h * s.w) as f64 / (0.5 * (len_lo + len_hi))).floor() as usize;
    let (dx, dy) = (angle.to_radians().sin(), angle.to_radians().cos());
    let mut added = vec![0.0; s.plane()];
    let mut mask = vec![false; s.plane()];
    for _ in 0..count {
        let (x0, y0) = (uniform(&mut rng, 0.0, s.w as f64), uniform(&mut rng, 0.0, s.h as f64));
        let len = uniform(&mut rng, len_lo, len_hi);
        let intensity = uniform(&mut rng, 0.25, 0.6);
        mask.iter_mut().for_each(|m| *m = false);
        let samples = (2.0 * len).ceil() as usize;
        for k in 0..=samples {
            let t = k as f64 * 0.5;
            let (x, y) = ((x0 + t * dx).floor(), (y0 + t * dy).floor());
            if x >= 0.0 && y >= 0.0 && (x as usize) < s.w && (y as usize) < s.h {
                mask[y as usize * s.w + x as usize] = true;
            }
        }
        for (a, &m) in added.iter_mut().zip(&mask) {
            if m {
                *a += intensity;
            }
        }
    }
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v + added[i % s.plane()]).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Normalized Gaussian taps over `±⌈3σ⌉`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

pub const BLUR_SIGMA: (f64, f64) = (0.5, 3.0);

/// Separable truncated Gaussian blur with border clamping.
pub fn apply_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(BLUR_SIGMA.0..=BLUR_SIGMA.1).contains(&sigma) {
        return Err(config_err(format!("blur sigma must lie in [0.5, 3], got {sigma}")));
    }
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let s = img.shape();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = Tensor::zeros(s);
    let mut tmp = vec![0.0; s.plane()];
    for nc in 0..s.n * s.c {
        let src = &img.data()[nc * s.plane()..(nc + 1) * s.plane()];
        for y in 0..s.h {
            for x in 0..s.w {
                tmp[y * s.w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * src[y * s.w + clamp(x as isize + k as isize - r, s.w)])
                    .sum();
            }
        }
        let dst = &mut out.data_mut()[nc * s.plane()..(nc + 1) * s.plane()];
        for y in 0..s.h {
            for x in 0..s.w {
                let v: f64 = taps
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * tmp[clamp(y as isize + k as isize - r, s.h) * s.w + x])
                    .sum();
                dst[y * s.w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Rounds values onto the 8-bit grid `k/255`.
pub fn quantize(img: &Tensor) -> Tensor {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Sr2x,
    Sr4x,
    Haze,
    Rain,
    Blur,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Sr2x, Task::Sr4x, Task::Haze, Task::Rain, Task::Blur];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Sr2x => "sr2x",
            Task::Sr4x => "sr4x",
            Task::Haze => "haze",
            Task::Rain => "rain",
            Task::Blur => "blur",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown task `{s}` (expected sr2x, sr4x, haze, rain or blur)"))
    }
}

/// Parameters that turned one clean image into its degraded partner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    /// Bicubic down by `factor`, then back up to the original size.
    Downsample { factor: usize },
    Haze { beta: f64, airlight: f64, seed: u64 },
    Rain { density: f64, angle: f64, seed: u64 },
    Blur { sigma: f64 },
}

impl Degradation {
    pub fn apply(&self, hq: &Tensor) -> Result<Tensor> {
        match *self {
            Degradation::Downsample { factor } => {
                let down = bicubic_resample(hq, Ratio::new(1, factor)?)?;
                bicubic_resample(&down, Ratio::new(factor, 1)?)
            }
            Degradation::Haze {
                beta,
                airlight,
                seed,
            } => apply_haze(hq, beta, airlight, seed),
            Degradation::Rain {
                density,
                angle,
                seed,
            } => apply_rain(hq, density, angle, seed),
            Degradation::Blur { sigma } => apply_blur(hq, sigma),
        }
    }

    /// `key=value` fields, floats in round-trip form.
    pub fn describe(&self) -> String {
        match *self {
            Degradation::Downsample { factor } => format!("factor={factor}"),
            Degradation::Haze {
                beta,
                airlight,
                seed,
            } => format!("beta={beta:?} airlight={airlight:?} op_seed={seed}"),
            Degradation::Rain {
                density,
                angle,
                seed,
            } => format!("density={density:?} angle={angle:?} op_seed={seed}"),
            Degradation::Blur { sigma } => format!("sigma={sigma:?}"),
        }
    }

    /// Inverse of [`Degradation::describe`] given the task.
    pub fn parse(task: Task, fields: &[(&str, &str)]) -> std::result::Result<Self, String> {
        let get = |k: &str| {
            fields
                .iter()
                .find(|(name, _)| *name == k)
                .map(|(_, v)| *v)
                .ok_or_else(|| format!("missing field `{k}`"))
        };
        let f = |k: &str| -> std::result::Result<f64, String> {
            get(k)?.parse().map_err(|e| format!("field `{k}`: {e}"))
        };
        let u = |k: &str| -> std::result::Result<u64, String> {
            get(k)?.parse().map_err(|e| format!("field `{k}`: {e}"))
        };
        Ok(match task {
            Task::Sr2x | Task::Sr4x => Degradation::Downsample {
                factor: u("factor")? as usize,
            },
            Task::Haze => Degradation::Haze {
                beta: f("beta")?,
                airlight: f("airlight")?,
                seed: u("op_seed")?,
            },
            Task::Rain => Degradation::Rain {
                density: f("density")?,
                angle: f("angle")?,
                seed: u("op_seed")?,
            },
            Task::Blur => Degradation::Blur { sigma: f("sigma")? },
        })
    }
}

/// Degraded/clean pair on the 8-bit grid, both at target resolution.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub lq: Tensor,
    pub hq: Tensor,
    pub task: Task,
    pub meta: Degradation,
    /// Seed of the clean image.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub task: Task,
    pub count: usize,
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
    pub haze_beta: (f64, f64),
    pub haze_airlight: (f64, f64),
    pub rain_density: (f64, f64),
    pub rain_angle: (f64, f64),
    pub blur_sigma: (f64, f64),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            task: Task::Sr2x,
            count: 64,
            size: 48,
            channels: 1,
            seed: 0,
            haze_beta: (0.4, 2.0),
            haze_airlight: HAZE_AIRLIGHT,
            rain_density: (0.02, 0.08),
            rain_angle: (-20.0, 20.0),
            blur_sigma: (0.8, 2.0),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_SIZE {
            return Err(config_err(format!("data.size must be >= {MIN_SIZE}")));
        }
        if self.count == 0 || self.channels == 0 {
            return Err(config_err("data.count and data.channels must be positive"));
        }
        let within = |name: &str, (lo, hi): (f64, f64), min: f64, max: f64, open_lo: bool| {
            let lo_ok = if open_lo { lo > min } else { lo >= min };
            if lo_ok && lo <= hi && hi <= max {
                Ok(())
            } else {
                Err(config_err(format!("{name} range ({lo}, {hi}) outside [{min}, {max}]")))
            }
        };
        match self.task {
            Task::Sr2x | Task::Sr4x => {
                let f = if self.task == Task::Sr2x { 2 } else { 4 };
                if !self.size.is_multiple_of(f) {
                    return Err(config_err(format!("data.size must be divisible by {f}")));
                }
                Ok(())
            }
            Task::Haze => {
                within("data.haze_beta", self.haze_beta, 0.4, HAZE_BETA_MAX, false)?;
                within("data.haze_airlight", self.haze_airlight, HAZE_AIRLIGHT.0, HAZE_AIRLIGHT.1, false)
            }
            Task::Rain => {
                within("data.rain_density", self.rain_density, 0.0, RAIN_DENSITY_MAX, true)?;
                within("data.rain_angle", self.rain_angle, -90.0, 90.0, false)
            }
            Task::Blur => within("data.blur_sigma", self.blur_sigma, BLUR_SIGMA.0, BLUR_SIGMA.1, false),
        }
    }
}

/// Generates `spec.count` pairs. Clean images and degraded outputs are
/// rounded to the 8-bit grid so they survive PGM/PPM export bit-exactly.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Vec<ImagePair>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pairs = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let seed = rng.gen::<u64>();
        let hq = quantize(&synth_clean_channels(spec.size, spec.channels, seed)?);
        let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| uniform(rng, lo, hi);
        let meta = match spec.task {
            Task::Sr2x => Degradation::Downsample { factor: 2 },
            Task::Sr4x => Degradation::Downsample { factor: 4 },
            Task::Haze => Degradation::Haze {
                beta: draw(&mut rng, spec.haze_beta),
                airlight: draw(&mut rng, spec.haze_airlight),
                seed: rng.gen(),
            },
            Task::Rain => Degradation::Rain {
                density: draw(&mut rng, spec.rain_density),
                angle: draw(&mut rng, spec.rain_angle),
                seed: rng.gen(),
            },
            Task::Blur => Degradation::Blur {
                sigma: draw(&mut rng, spec.blur_sigma),
            },
        };
        let lq = quantize(&meta.apply(&hq)?);
        pairs.push(ImagePair {
            lq,
            hq,
            task: spec.task,
            meta,
            seed,
        });
    }
    Ok(pairs)
}
