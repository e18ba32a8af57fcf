//! Full-reference image quality: PSNR and SSIM on [0,1] images.

use crate::error::{Error, Result};
use crate::image::MultiBandImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(a: &MultiBandImage, b: &MultiBandImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::contract(format!(
            "metric inputs differ in shape: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.bands(),
            b.height(),
            b.width(),
            b.bands()
        )));
    }
    Ok(())
}

/// PSNR in dB with peak 1. Identical images give `f64::INFINITY`.
pub fn psnr(a: &MultiBandImage, b: &MultiBandImage) -> Result<f64> {
    check_pair(a, b)?;
    psnr_values(&a.to_f64(), &b.to_f64())
}

/// PSNR of two equally long sample vectors in f64 arithmetic.
pub fn psnr_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::contract(format!(
            "psnr needs equal non-empty inputs, got {} and {} samples",
            a.len(),
            b.len()
        )));
    }
    // Running mean: exact when every squared difference is equal.
    let mut mse = 0.0;
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        let d = x - y;
        mse += (d * d - mse) / (k + 1) as f64;
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut t = [0.0; SSIM_WINDOW];
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

/// Gaussian-weighted local means at every valid window position.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(k, t)| t * plane[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(k, t)| t * rows[(i + k) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM over bands and valid 11×11 window positions, data range 1.
pub fn ssim(a: &MultiBandImage, b: &MultiBandImage) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for band in 0..a.bands() {
        let x: Vec<f64> = a.band(band).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.band(band).iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &taps);
        let my = filter_valid(&y, h, w, &taps);
        let exx = filter_valid(&xx, h, w, &taps);
        let eyy = filter_valid(&yy, h, w, &taps);
        let exy = filter_valid(&xy, h, w, &taps);
        for k in 0..mx.len() {
            let (ux, uy) = (mx[k], my[k]);
            let vx = exx[k] - ux * ux;
            let vy = eyy[k] - uy * uy;
            let cxy = exy[k] - ux * uy;
            let num = (2.0 * ux * uy + c1) * (2.0 * cxy + c2);
            let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<ImageScore>,
}

impl MetricsReport {
    pub fn push(&mut self, id: impl Into<String>, enhanced: &MultiBandImage, reference: &MultiBandImage) -> Result<()> {
        self.rows.push(ImageScore {
            id: id.into(),
            psnr_db: psnr(enhanced, reference)?,
            ssim: ssim(enhanced, reference)?,
        });
        Ok(())
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    /// `id,psnr_db,ssim` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr_db,ssim\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.6},{:.6}\n", r.id, r.psnr_db, r.ssim));
        }
        s.push_str(&format!("mean,{:.6},{:.6}\n", self.mean_psnr(), self.mean_ssim()));
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}
