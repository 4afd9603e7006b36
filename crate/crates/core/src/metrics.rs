//! Image quality metrics: PSNR and SSIM.

use crate::error::{PahsError, Result};
use crate::tensor::{check_same, Real, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB. Identical inputs give `+inf`.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> Result<f64> {
    check_same("psnr", a.shape(), b.shape())?;
    if a.numel() == 0 {
        return Err(PahsError::Contract("psnr of empty images".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Normalised 1-D Gaussian taps.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let centre = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - centre;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * plane[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over valid 11x11 Gaussian-window positions (sigma 1.5),
/// averaged over channels and batch items.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> Result<f64> {
    check_same("ssim", a.shape(), b.shape())?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(PahsError::Contract(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            s.h, s.w
        )));
    }
    if s.n * s.c == 0 {
        return Err(PahsError::Contract("ssim of empty images".into()));
    }
    let c1 = (SSIM_K1 * max_val).powi(2);
    let c2 = (SSIM_K2 * max_val).powi(2);
    let taps = gaussian_taps();
    let plane = s.plane();
    let mut total = 0.0;
    for (pa, pb) in a.data().chunks(plane).zip(b.data().chunks(plane)) {
        let x: Vec<f64> = pa.iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = pb.iter().map(|v| v.as_f64()).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = filter_valid(&x, s.h, s.w, &taps);
        let mu_y = filter_valid(&y, s.h, s.w, &taps);
        let e_xx = filter_valid(&xx, s.h, s.w, &taps);
        let e_yy = filter_valid(&yy, s.h, s.w, &taps);
        let e_xy = filter_valid(&xy, s.h, s.w, &taps);
        let mut sum = 0.0;
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = e_xx[i] - mx * mx;
            let var_y = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
        }
        total += sum / mu_x.len() as f64;
    }
    Ok(total / (s.n * s.c) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn psnr_closed_forms() {
        let s = Tensor::<f64>::full(Shape::new(1, 3, 8, 8), 0.3);
        assert_eq!(psnr(&s, &s, 1.0).unwrap(), f64::INFINITY);
        let l = s.map(|v| v + 0.1);
        assert!((psnr(&l, &s, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let l = s.map(|v| v + 1.0);
        assert!(psnr(&l, &s, 1.0).unwrap().abs() < 1e-9);
    }

    #[test]
    fn ssim_identical_is_exactly_one() {
        let t = Tensor::<f64>::from_fn(Shape::new(1, 3, 16, 16), |_, c, h, w| {
            ((c * 7 + h * 3 + w * w) % 11) as f64 / 10.0
        });
        assert_eq!(ssim(&t, &t, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 1, 10, 40));
        assert!(ssim(&t, &t, 1.0).is_err());
    }

    #[test]
    fn taps_are_normalised_and_symmetric() {
        let taps = gaussian_taps();
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(taps[i], taps[SSIM_WINDOW - 1 - i]);
        }
    }
}
