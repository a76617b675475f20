//! Image quality metrics on `[0, 1]` RGB images.
//!
//! SSIM uses a 7x7 uniform window, K1 = 0.01, K2 = 0.03, data range 1 and
//! sample (N-1) covariance normalization; it is evaluated on every window
//! that lies fully inside the image, per channel, and averaged. This matches
//! scikit-image's `structural_similarity` defaults.

use crate::error::{Error, Result};
use crate::raster::Image;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_pair(reference: &Image, candidate: &Image) -> Result<()> {
    if (reference.width, reference.height) != (candidate.width, candidate.height) {
        return Err(Error::contract(format!(
            "image sizes differ: {}x{} vs {}x{}",
            reference.width, reference.height, candidate.width, candidate.height
        )));
    }
    let in_range = |img: &Image| {
        img.pixels
            .iter()
            .all(|p| p.iter().all(|c| (0.0..=1.0).contains(c)))
    };
    if !in_range(reference) || !in_range(candidate) {
        return Err(Error::contract("metric inputs must lie in [0, 1]"));
    }
    Ok(())
}

pub fn mse(reference: &Image, candidate: &Image) -> Result<f64> {
    check_pair(reference, candidate)?;
    let n = 3 * reference.pixels.len();
    if n == 0 {
        return Err(Error::contract("empty images"));
    }
    let sum: f64 = reference
        .pixels
        .iter()
        .zip(&candidate.pixels)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok(sum / n as f64)
}

pub fn psnr(reference: &Image, candidate: &Image) -> Result<f64> {
    let m = mse(reference, candidate)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

pub fn ssim(reference: &Image, candidate: &Image) -> Result<f64> {
    check_pair(reference, candidate)?;
    let (w, h) = (reference.width as usize, reference.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let np = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let cov_norm = np / (np - 1.0);
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = reference.pixels.iter().map(|p| p[c]).collect();
        let y: Vec<f64> = candidate.pixels.iter().map(|p| p[c]).collect();
        let mut sum = 0.0;
        for r0 in 0..=h - SSIM_WINDOW {
            for c0 in 0..=w - SSIM_WINDOW {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for r in r0..r0 + SSIM_WINDOW {
                    for i in r * w + c0..r * w + c0 + SSIM_WINDOW {
                        let (a, b) = (x[i], y[i]);
                        sx += a;
                        sy += b;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                let (ux, uy) = (sx / np, sy / np);
                let vx = cov_norm * (sxx / np - ux * ux);
                let vy = cov_norm * (syy / np - uy * uy);
                let vxy = cov_norm * (sxy / np - ux * uy);
                sum += ((2.0 * ux * uy + c1) * (2.0 * vxy + c2))
                    / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            }
        }
        total += sum / ((h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)) as f64;
    }
    Ok(total / 3.0)
}
