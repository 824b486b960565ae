//! PSNR, SSIM and the evaluation report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::image::Image;

pub const PSNR_CAP: f64 = 99.0;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check(a: &Image, b: &Image) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )))
    }
}

/// `10·log10(1/MSE)` over all pixels and channels, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.data.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let r = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "valid" Gaussian filtering of a `w×h` plane.
fn filter(plane: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - WINDOW + 1, h - WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_formula(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2)) / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2))
}

/// Mean SSIM of the channel-mean grey images over all 11×11 Gaussian
/// windows. Images smaller than the window use whole-image statistics.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let ga: Vec<f64> = a.luma_mean().data.iter().map(|&v| v as f64).collect();
    let gb: Vec<f64> = b.luma_mean().data.iter().map(|&v| v as f64).collect();
    let (w, h) = (a.width, a.height);
    if w < WINDOW || h < WINDOW {
        let n = ga.len() as f64;
        let ma = ga.iter().sum::<f64>() / n;
        let mb = gb.iter().sum::<f64>() / n;
        let va = ga.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
        let vb = gb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
        let cov = ga.iter().zip(&gb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        return Ok(ssim_formula(ma, mb, va, vb, cov));
    }
    let k = gaussian_kernel();
    let sq = |p: &[f64]| p.iter().map(|v| v * v).collect::<Vec<_>>();
    let prod: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| x * y).collect();
    let mu_a = filter(&ga, w, h, &k);
    let mu_b = filter(&gb, w, h, &k);
    let e_aa = filter(&sq(&ga), w, h, &k);
    let e_bb = filter(&sq(&gb), w, h, &k);
    let e_ab = filter(&prod, w, h, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            ssim_formula(ma, mb, e_aa[i] - ma * ma, e_bb[i] - mb * mb, e_ab[i] - ma * mb)
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub camera_id: usize,
    pub block: Option<usize>,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub run_id: String,
    pub config_hash: String,
    pub count: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub images: Vec<ImageMetrics>,
    /// Additional named scalars, such as cross-block consistency.
    pub extra: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new(config_hash: String, images: Vec<ImageMetrics>, extra: BTreeMap<String, f64>) -> Self {
        let count = images.len();
        let n = count.max(1) as f64;
        let mean_psnr = images.iter().map(|m| m.psnr).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|m| m.ssim).sum::<f64>() / n;
        let mut report = Self {
            run_id: String::new(),
            config_hash,
            count,
            mean_psnr,
            mean_ssim,
            images,
            extra,
        };
        let body = serde_json::to_vec(&report).expect("report serializes");
        let digest = Sha256::digest(&body);
        report.run_id = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        report
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path).at(path)?)?)
    }
}
