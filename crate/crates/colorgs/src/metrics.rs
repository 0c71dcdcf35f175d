//! Masked PSNR and single-scale SSIM.

use crate::error::{Error, Result};
use crate::img::ColorImage;

/// Zero-MSE (and general) PSNR ceiling, keeping logs finite.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    /// (frame index, psnr, ssim) rows.
    pub per_frame: Vec<(usize, f64, f64)>,
}

fn check_inputs(a: &ColorImage, b: &ColorImage, mask: &[bool]) -> Result<()> {
    if a.width != b.width || a.height != b.height || mask.len() != a.data.len() {
        return Err(Error::Config("metric inputs must share dimensions".into()));
    }
    if mask.iter().all(|&m| !m) {
        return Err(Error::Config("metric mask is empty".into()));
    }
    Ok(())
}

/// 10 log10(1 / MSE) over masked pixels and channels, capped at 99 dB.
pub fn psnr(a: &ColorImage, b: &ColorImage, mask: &[bool]) -> Result<f64> {
    check_inputs(a, b, mask)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((pa, pb), &m) in a.data.iter().zip(&b.data).zip(mask) {
        if !m {
            continue;
        }
        sum += (pa - pb).norm_squared();
        count += 3;
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for dy in -half..=half {
        for dx in -half..=half {
            let r2 = (dx * dx + dy * dy) as f64;
            w.push((-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1. Computed per channel then averaged; windows
/// touching any masked-out pixel are excluded.
pub fn ssim(a: &ColorImage, b: &ColorImage, mask: &[bool]) -> Result<f64> {
    check_inputs(a, b, mask)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "image {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            a.width, a.height
        )));
    }
    let window = gaussian_window();
    let half = SSIM_WINDOW / 2;
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let mut acc = 0.0;
    let mut windows = 0usize;
    for cy in half..a.height - half {
        'window: for cx in half..a.width - half {
            // Exclude windows that straddle the mask.
            for wy in 0..SSIM_WINDOW {
                let row = (cy + wy - half) * a.width + cx - half;
                for wx in 0..SSIM_WINDOW {
                    if !mask[row + wx] {
                        continue 'window;
                    }
                }
            }

            for ch in 0..3 {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                let mut wi = 0;
                for wy in 0..SSIM_WINDOW {
                    let row = (cy + wy - half) * a.width + cx - half;
                    for wx in 0..SSIM_WINDOW {
                        let w = window[wi];
                        wi += 1;
                        let va = a.data[row + wx][ch];
                        let vb = b.data[row + wx][ch];
                        mu_a += w * va;
                        mu_b += w * vb;
                        aa += w * va * va;
                        bb += w * vb * vb;
                        ab += w * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let value = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                acc += value;
                windows += 1;
            }
        }
    }
    if windows == 0 {
        return Err(Error::Config(
            "no SSIM window avoids the masked-out region".into(),
        ));
    }
    Ok(acc / windows as f64)
}
