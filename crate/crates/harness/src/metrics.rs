//! PSNR and SSIM on images in [0, peak]. Both clamp their inputs first.

use ddt_core::{Scalar, Tensor};

use crate::error::{HarnessError, Result};

fn check_shapes<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(HarnessError::Config(format!(
            "{op}: shape {:?} does not match {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)`; identical images give `+∞`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    check_shapes("psnr", a, b)?;
    let n = a.numel() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64().unwrap_or(f64::NAN).clamp(0.0, peak)
                - y.to_f64().unwrap_or(f64::NAN).clamp(0.0, peak);
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size - 1) as f64 / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an h×w plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let size = WINDOW.min(h).min(w);
    let k = gaussian_window(size, WINDOW_SIGMA);
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let (mu_a, ho, wo) = filter_valid(a, h, w, &k);
    let (mu_b, ..) = filter_valid(b, h, w, &k);
    let (aa, ..) = filter_valid(&prod(a, a), h, w, &k);
    let (bb, ..) = filter_valid(&prod(b, b), h, w, &k);
    let (ab, ..) = filter_valid(&prod(a, b), h, w, &k);
    let mut total = 0.0;
    for i in 0..ho * wo {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / (ho * wo) as f64
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over every
/// channel plane. Accepts [C, H, W] or [N, C, H, W]; planes smaller than the
/// window use a window as large as the plane.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    check_shapes("ssim", a, b)?;
    let s = a.shape();
    if s.len() < 2 {
        return Err(HarnessError::Config(format!(
            "ssim needs an image, got shape {s:?}"
        )));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let to_f64 = |t: &Tensor<T>| -> Vec<f64> {
        t.data()
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN).clamp(0.0, peak))
            .collect()
    };
    let (fa, fb) = (to_f64(a), to_f64(b));
    let planes = a.numel() / (h * w);
    let total: f64 = (0..planes)
        .map(|p| {
            let r = p * h * w..(p + 1) * h * w;
            ssim_plane(&fa[r.clone()], &fb[r], h, w, peak)
        })
        .sum();
    Ok(total / planes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Tensor<f64> {
        Tensor::from_fn(&[3, 16, 16], |i| (i % 97) as f64 / 200.0)
    }

    #[test]
    fn constant_offset_psnr() {
        let a = ramp();
        let b = a.map(|v| v + 10.0 / 255.0);
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 20.0 * (25.5f64).log10()).abs() < 1e-9);
        assert!((p - 28.13).abs() < 0.005);
    }

    #[test]
    fn identical_images() {
        let a = ramp();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverted_binary_image_is_anticorrelated() {
        let a = Tensor::<f64>::from_fn(&[1, 32, 32], |i| ((i * 2654435761) >> 7 & 1) as f64);
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &b, 1.0).unwrap() < -0.5);
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[3, 4, 4]);
        let b = Tensor::<f64>::zeros(&[3, 4, 5]);
        assert!(psnr(&a, &b, 1.0).is_err());
        assert!(ssim(&a, &b, 1.0).is_err());
    }

    #[test]
    fn ssim_is_bounded_and_decreases_with_noise() {
        let a = ramp();
        let noisy = |amp: f64| {
            Tensor::from_fn(&[3, 16, 16], |i| {
                a.data()[i] + amp * (((i * 7919) % 13) as f64 / 13.0 - 0.5)
            })
        };
        let s1 = ssim(&a, &noisy(0.05), 1.0).unwrap();
        let s2 = ssim(&a, &noisy(0.3), 1.0).unwrap();
        assert!(s1 <= 1.0 && s2 >= -1.0 && s2 < s1);
    }
}
