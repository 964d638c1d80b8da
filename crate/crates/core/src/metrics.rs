//! PSNR and SSIM.

use crate::error::Result;
use crate::tensor::{Tensor, TensorError};

/// Reported when the mean squared error is below `1e-12`.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue {
    pub psnr: f64,
    pub ssim: f64,
}

fn check_same(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    for (axis, x, y) in [("n", sa.n, sb.n), ("c", sa.c, sb.c), ("h", sa.h, sb.h), ("w", sa.w, sb.w)] {
        if x != y {
            return Err(TensorError::Dimension {
                op,
                axis,
                expected: x,
                found: y,
            }
            .into());
        }
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same(a, b, "mse")?;
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(total / a.len() as f64)
}

/// `10·log10(peak² / mse)` with peak 1.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    psnr_with_peak(a, b, 1.0)
}

pub fn psnr_with_peak(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-12 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Normalized 11-tap Gaussian (σ = 1.5), used separably.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// "Valid" separable filtering of one plane.
fn filter_valid(src: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = win
                .iter()
                .enumerate()
                .map(|(k, c)| c * src[y * w + x + k])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = win
                .iter()
                .enumerate()
                .map(|(k, c)| c * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over all fully-contained 11×11 Gaussian windows of every
/// `(n, c)` plane.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same(a, b, "ssim")?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        let (axis, found) = if s.h < SSIM_WINDOW { ("h", s.h) } else { ("w", s.w) };
        return Err(TensorError::Dimension {
            op: "ssim",
            axis,
            expected: SSIM_WINDOW,
            found,
        }
        .into());
    }
    let win = gaussian_window();
    let plane = s.plane();
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..s.n * s.c {
        let x = &a.data()[p * plane..(p + 1) * plane];
        let y = &b.data()[p * plane..(p + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(x, s.h, s.w, &win);
        let my = filter_valid(y, s.h, s.w, &win);
        let sxx = filter_valid(&xx, s.h, s.w, &win);
        let syy = filter_valid(&yy, s.h, s.w, &win);
        let sxy = filter_valid(&xy, s.h, s.w, &win);
        for i in 0..mx.len() {
            total += ssim_index(mx[i], my[i], sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i]);
        }
        count += mx.len();
    }
    Ok(total / count as f64)
}

#[inline]
fn ssim_index(mx: f64, my: f64, vx: f64, vy: f64, cov: f64) -> f64 {
    ((2.0 * mx * my + C1) * (2.0 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
}

pub fn evaluate(a: &Tensor, b: &Tensor) -> Result<MetricValue> {
    Ok(MetricValue {
        psnr: psnr(a, b)?,
        ssim: ssim(a, b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn checker(size: usize, delta: f64) -> Tensor {
        let mut t = Tensor::zeros(Shape::new(1, 1, size, size));
        for y in 0..size {
            for x in 0..size {
                t.data_mut()[y * size + x] = if (x + y) % 2 == 0 { 0.5 + delta } else { 0.5 - delta };
            }
        }
        t
    }

    #[test]
    fn psnr_values() {
        let x = crate::degrade::synth_clean(24, 1).unwrap();
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
        let a = Tensor::zeros(Shape::new(1, 1, 12, 12));
        let b = Tensor::full(Shape::new(1, 1, 12, 12), 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
        let y = crate::degrade::synth_clean(24, 2).unwrap();
        assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        assert!(psnr(&a, &Tensor::zeros(Shape::new(1, 1, 12, 13))).is_err());
    }

    #[test]
    fn psnr_monotone_in_mse() {
        let a = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let mut last = f64::INFINITY;
        for k in 1..20 {
            let b = Tensor::full(a.shape(), k as f64 * 0.01);
            let p = psnr(&a, &b).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let x = crate::degrade::synth_clean(32, 3).unwrap();
        let y = crate::degrade::apply_blur(&x, 1.0).unwrap();
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let (p, q) = (ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        assert!((p - q).abs() < 1e-12);
        assert!(p < 1.0 && p > -1.0);
        assert!(ssim(&Tensor::zeros(Shape::new(1, 1, 10, 30)), &Tensor::zeros(Shape::new(1, 1, 10, 30))).is_err());
    }

    #[test]
    fn ssim_inverted_checkerboard_is_negative() {
        let x = checker(11, 0.2);
        let y = x.map(|v| 1.0 - v);
        let got = ssim(&x, &y).unwrap();

        // one window, evaluated directly from the definition
        let w = gaussian_window();
        let (mut mx, mut my) = (0.0, 0.0);
        for i in 0..11 {
            for j in 0..11 {
                mx += w[i] * w[j] * x.at(0, 0, i, j);
                my += w[i] * w[j] * y.at(0, 0, i, j);
            }
        }
        let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
        for i in 0..11 {
            for j in 0..11 {
                let (dx, dy) = (x.at(0, 0, i, j) - mx, y.at(0, 0, i, j) - my);
                vx += w[i] * w[j] * dx * dx;
                vy += w[i] * w[j] * dy * dy;
                cov += w[i] * w[j] * dx * dy;
            }
        }
        let want = ((2.0 * mx * my + C1) * (2.0 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
        assert!(want < 0.0);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}
