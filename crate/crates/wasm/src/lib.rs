//! Browser bindings: degradation previews, a small in-page training
//! session and an EMA lag trace.

use mclab::degrade::{
    apply_blur, apply_haze, apply_rain, bicubic_resample, quantize, synth_clean, Ratio,
};
use mclab::metrics;
use mclab::negbank::{NegativeBank, NegativeMode};
use mclab::nets::{restore, ParamSet};
use mclab::train::{TrainConfig, Trainer};
use mclab::{Shape, Tensor};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Horizontally concatenated grayscale panels as RGBA bytes.
fn rgba_strip(panels: &[&Tensor]) -> Vec<u8> {
    let s = panels[0].shape();
    let width = s.w * panels.len();
    let mut out = vec![255u8; width * s.h * 4];
    for (i, p) in panels.iter().enumerate() {
        for y in 0..s.h {
            for x in 0..s.w {
                let v = (p.at(0, 0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                let o = ((y * width) + i * s.w + x) * 4;
                out[o..o + 3].fill(v);
            }
        }
    }
    out
}

#[wasm_bindgen]
pub struct Preview {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    psnr: f64,
    ssim: f64,
}

#[wasm_bindgen]
impl Preview {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Clean and degraded images side by side.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn psnr(&self) -> f64 {
        self.psnr
    }

    #[wasm_bindgen(getter)]
    pub fn ssim(&self) -> f64 {
        self.ssim
    }
}

/// Degrades a synthetic image. `strength` in [0, 1] maps onto each
/// task's parameter range; for `sr` it picks 2x below 0.5 and 4x above.
#[wasm_bindgen]
pub fn degrade_preview(task: &str, strength: f64, size: usize, seed: u64) -> Result<Preview, JsError> {
    let t = strength.clamp(0.0, 1.0);
    let clean = quantize(&synth_clean(size, seed).map_err(js_err)?);
    let lq = match task {
        "sr" => {
            let f = if t < 0.5 { 2 } else { 4 };
            let down = bicubic_resample(&clean, Ratio::new(1, f).map_err(js_err)?).map_err(js_err)?;
            bicubic_resample(&down, Ratio::new(f, 1).map_err(js_err)?).map_err(js_err)?
        }
        "haze" => apply_haze(&clean, 2.0 * t, 0.85, seed).map_err(js_err)?,
        "rain" => apply_rain(&clean, 0.005 + 0.195 * t, 15.0, seed).map_err(js_err)?,
        "blur" => apply_blur(&clean, 0.5 + 2.5 * t).map_err(js_err)?,
        other => return Err(JsError::new(&format!("unknown task `{other}`"))),
    };
    let lq = quantize(&lq);
    let m = metrics::evaluate(&lq, &clean).map_err(js_err)?;
    Ok(Preview {
        width: 2 * size,
        height: size,
        rgba: rgba_strip(&[&clean, &lq]),
        psnr: m.psnr,
        ssim: m.ssim,
    })
}

/// Incremental training on a tiny 2x super-resolution set.
#[wasm_bindgen]
pub struct TrainSession {
    trainer: Trainer,
    last: [f64; 3],
}

#[wasm_bindgen]
impl TrainSession {
    #[wasm_bindgen(constructor)]
    pub fn new(lambda: f64, ema_w: f64, seed: u64) -> Result<TrainSession, JsError> {
        let mut cfg = TrainConfig::desk_sr2x();
        cfg.lambda = lambda;
        cfg.ema_w = ema_w;
        cfg.seed = seed;
        cfg.batch = 2;
        cfg.total_iters = 2000;
        cfg.dataset.count = 16;
        let trainer = Trainer::new(cfg, None).map_err(js_err)?;
        Ok(TrainSession { trainer, last: [0.0; 3] })
    }

    /// Runs `n` iterations; returns `[rec, neg, total]` of the last one.
    pub fn step(&mut self, n: u32) -> Result<Vec<f64>, JsError> {
        for _ in 0..n {
            let l = self.trainer.step().map_err(js_err)?;
            self.last = [l.rec, l.neg, l.total];
        }
        Ok(self.last.to_vec())
    }

    #[wasm_bindgen(getter)]
    pub fn iteration(&self) -> u64 {
        self.trainer.iteration()
    }

    /// Mean eval `[psnr, ssim]` of the current network and of the inputs.
    pub fn scores(&self) -> Result<Vec<f64>, JsError> {
        let m = self.trainer.evaluate().map_err(js_err)?;
        let i = mclab::train::input_metrics(self.trainer.eval_pairs()).map_err(js_err)?;
        Ok(vec![m.psnr, m.ssim, i.psnr, i.ssim])
    }

    /// Width of [`TrainSession::render`] in pixels (height is a third of it).
    #[wasm_bindgen(getter)]
    pub fn render_width(&self) -> usize {
        3 * self.trainer.config().dataset.size
    }

    /// Input, restoration and target of the first eval pair as RGBA.
    pub fn render(&self) -> Result<Vec<u8>, JsError> {
        let p = &self.trainer.eval_pairs()[0];
        let out = restore(self.trainer.params(), &p.lq).map_err(js_err)?;
        Ok(rgba_strip(&[&p.lq, &out, &p.hq]))
    }
}

/// Follows a single scalar target drifting linearly from 0 to 1 over
/// `total` iterations and returns rows `[t, target, shadow_1, ..]`
/// flattened, one row per iteration.
#[wasm_bindgen]
pub fn ema_trace(w: f64, steps: Vec<u64>, total: u64) -> Result<Vec<f64>, JsError> {
    let scalar = |v: f64| Tensor::from_vec(Shape::SCALAR, vec![v]).map_err(js_err);
    let mut target = ParamSet::new("scalar", vec![("theta".to_string(), scalar(0.0)?)]).map_err(js_err)?;
    let mut bank = NegativeBank::new(NegativeMode::Latency, &target, &steps, w, 0, None).map_err(js_err)?;
    let mut rows = Vec::with_capacity(total as usize * (2 + steps.len()));
    for t in 1..=total {
        let v = t as f64 / total as f64;
        *target.get_mut("theta").expect("theta").data_mut().first_mut().expect("scalar") = v;
        bank.maybe_update(&target, t).map_err(js_err)?;
        rows.push(t as f64);
        rows.push(v);
        rows.extend(bank.shadows().iter().map(|s| s.params.entries()[0].1.item()));
    }
    Ok(rows)
}
