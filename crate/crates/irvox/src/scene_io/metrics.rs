//! Image quality metrics on linear float images: PSNR, SSIM, normal mean
//! angular error, and the per-channel global albedo alignment used before
//! albedo PSNR.

use super::IoError;

/// PSNR in dB for `[0, 1]` images; reports are capped at 99 dB when the
/// MSE drops below 1e-10.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64, IoError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(IoError::Metric(format!(
            "shape mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse < 1e-10 {
        return Ok(99.0);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Gaussian-windowed SSIM (11x11, sigma 1.5, K1 = 0.01, K2 = 0.03) on
/// each channel over the interior region where the window fits, averaged
/// over channels.
pub fn ssim(a: &[f32], b: &[f32], width: usize, height: usize) -> Result<f64, IoError> {
    let channels = a.len() / (width * height);
    if a.len() != b.len() || a.len() != width * height * channels || channels == 0 {
        return Err(IoError::Metric("shape mismatch".into()));
    }
    const WIN: usize = 11;
    const HALF: usize = 5;
    const SIGMA: f64 = 1.5;
    if width < WIN || height < WIN {
        return Err(IoError::Metric(format!(
            "image {width}x{height} smaller than the {WIN}x{WIN} window"
        )));
    }
    let mut kernel = [0f64; WIN];
    let mut total = 0.0;
    for (i, k) in kernel.iter_mut().enumerate() {
        let d = i as f64 - HALF as f64;
        *k = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        total += *k;
    }
    for k in kernel.iter_mut() {
        *k /= total;
    }
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let at = |img: &[f32], x: usize, y: usize, c: usize| img[(y * width + x) * channels + c] as f64;
    let mut acc = 0.0;
    let mut count = 0usize;
    for c in 0..channels {
        for y in HALF..height - HALF {
            for x in HALF..width - HALF {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for wy in 0..WIN {
                    for wx in 0..WIN {
                        let wgt = kernel[wy] * kernel[wx];
                        let pa = at(a, x + wx - HALF, y + wy - HALF, c);
                        let pb = at(b, x + wx - HALF, y + wy - HALF, c);
                        ma += wgt * pa;
                        mb += wgt * pb;
                        va += wgt * pa * pa;
                        vb += wgt * pb * pb;
                        cov += wgt * pa * pb;
                    }
                }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                acc += s;
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// Mean angular error in degrees between unit normal maps over a mask.
pub fn normal_mae(pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<f64, IoError> {
    if pred.len() != gt.len() || pred.len() != mask.len() * 3 {
        return Err(IoError::Metric("shape mismatch".into()));
    }
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for (p, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let dot: f64 = (0..3)
            .map(|c| pred[3 * p + c] as f64 * gt[3 * p + c] as f64)
            .sum();
        acc += dot.clamp(-1.0, 1.0).acos();
        count += 1;
    }
    if count == 0 {
        return Err(IoError::Metric("empty mask".into()));
    }
    Ok(acc / count as f64 * 180.0 / std::f64::consts::PI)
}

/// Result of the per-channel albedo alignment.
#[derive(Clone, Debug)]
pub struct AlbedoAlignment {
    /// Least-squares scale per RGB channel.
    pub scales: [f64; 3],
    /// Channels whose prediction was identically zero (scale pinned to 1).
    pub degenerate: [bool; 3],
    /// Scaled prediction.
    pub scaled: Vec<f32>,
}

/// Scales each predicted RGB channel by the global least-squares factor
/// `s_c = sum(pred*gt) / sum(pred^2)` over the mask.
pub fn align_albedo(pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<AlbedoAlignment, IoError> {
    if pred.len() != gt.len() || pred.len() != mask.len() * 3 {
        return Err(IoError::Metric("shape mismatch".into()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(IoError::Metric("empty mask".into()));
    }
    let mut num = [0.0f64; 3];
    let mut den = [0.0f64; 3];
    for (p, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for c in 0..3 {
            let pv = pred[3 * p + c] as f64;
            num[c] += pv * gt[3 * p + c] as f64;
            den[c] += pv * pv;
        }
    }
    let mut scales = [1.0f64; 3];
    let mut degenerate = [false; 3];
    for c in 0..3 {
        if den[c] > 0.0 {
            scales[c] = num[c] / den[c];
        } else {
            degenerate[c] = true;
        }
    }
    let scaled = pred
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 * scales[i % 3]) as f32)
        .collect();
    Ok(AlbedoAlignment {
        scales,
        degenerate,
        scaled,
    })
}

/// Masked MSE helper used by the alignment tests.
pub fn masked_mse(a: &[f32], b: &[f32], mask: &[bool]) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (p, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for c in 0..3 {
            let d = a[3 * p + c] as f64 - b[3 * p + c] as f64;
            acc += d * d;
            n += 1;
        }
    }
    acc / n.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{RngKey, StreamTag};

    #[test]
    fn psnr_basics() {
        let a = vec![0.3f32; 300];
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        // MSE 0.01 => 20 dB.
        let b: Vec<f32> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
        // Symmetry.
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &[0.0; 2]).is_err());
    }

    #[test]
    fn ssim_identical_is_one_and_noise_lowers_it() {
        let (w, h) = (24usize, 16usize);
        let mut rng = RngKey(3).stream(StreamTag::Misc, 0, 0);
        let img: Vec<f32> = (0..w * h * 3)
            .map(|i| (i as f32 * 0.05).sin() * 0.4 + 0.5)
            .collect();
        assert!((ssim(&img, &img, w, h).unwrap() - 1.0).abs() < 1e-12);
        let noisy: Vec<f32> = img
            .iter()
            .map(|v| (v + (rng.next_f64() as f32 - 0.5) * 0.2).clamp(0.0, 1.0))
            .collect();
        let s = ssim(&img, &noisy, w, h).unwrap();
        assert!(s < 0.99 && s > 0.0, "s = {s}");
    }

    #[test]
    fn normal_mae_extremes() {
        let n = vec![0.0f32, 0.0, 1.0, 1.0, 0.0, 0.0];
        let mask = vec![true, true];
        assert_eq!(normal_mae(&n, &n, &mask).unwrap(), 0.0);
        let anti: Vec<f32> = n.iter().map(|v| -v).collect();
        assert!((normal_mae(&n, &anti, &mask).unwrap() - 180.0).abs() < 1e-9);
    }

    #[test]
    fn albedo_alignment_recovers_scale() {
        let gt: Vec<f32> = (0..30).map(|i| 0.1 + (i % 7) as f32 * 0.1).collect();
        let pred: Vec<f32> = gt.iter().map(|v| v * 2.0).collect();
        let mask = vec![true; 10];
        let al = align_albedo(&pred, &gt, &mask).unwrap();
        for c in 0..3 {
            assert!((al.scales[c] - 0.5).abs() < 1e-6);
        }
        assert_eq!(psnr(&al.scaled, &gt).unwrap(), 99.0);
        // pred == gt => scale 1.
        let al = align_albedo(&gt, &gt, &mask).unwrap();
        for c in 0..3 {
            assert!((al.scales[c] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn albedo_alignment_is_least_squares_optimal() {
        let mut rng = RngKey(9).stream(StreamTag::Misc, 0, 0);
        let n = 50usize;
        let pred: Vec<f32> = (0..n * 3).map(|_| rng.next_f64() as f32).collect();
        let gt: Vec<f32> = (0..n * 3).map(|_| rng.next_f64() as f32).collect();
        let mask: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
        let al = align_albedo(&pred, &gt, &mask).unwrap();
        let best = masked_mse(&al.scaled, &gt, &mask);
        // Dense scan over scales cannot beat the closed form.
        for c in 0..3 {
            for k in 0..200 {
                let s = 0.01 + k as f64 * 0.02;
                let mut trial = al.scaled.clone();
                for (i, v) in trial.iter_mut().enumerate() {
                    if i % 3 == c {
                        *v = pred[i] * s as f32;
                    }
                }
                let mse = masked_mse(&trial, &gt, &mask);
                assert!(mse >= best - 1e-9, "scan beat closed form: {mse} < {best}");
            }
        }
        // Alignment never worsens the masked MSE.
        assert!(best <= masked_mse(&pred, &gt, &mask) + 1e-12);
    }

    #[test]
    fn albedo_alignment_flags_zero_channel() {
        let pred = vec![0.0f32, 0.5, 0.5, 0.0, 0.2, 0.7];
        let gt = vec![0.3f32, 0.5, 0.5, 0.4, 0.2, 0.7];
        let al = align_albedo(&pred, &gt, &[true, true]).unwrap();
        assert!(al.degenerate[0]);
        assert_eq!(al.scales[0], 1.0);
    }
}
