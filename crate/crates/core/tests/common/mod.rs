#![allow(dead_code)]

use pahs_core::model::{Bound, Net, PahsParameters};
use pahs_core::{ModelConfig, Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_frame<T: pahs_core::Real>(h: usize, w: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| T::from_f64_lossy(rng.gen_range(0.0..1.0)))
}

pub fn random_tensor<T: pahs_core::Real>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        c: 12,
        n_pp: 2,
        future_window: 2,
        extractor_blocks: 1,
        head_blocks: 1,
        tail_blocks: 1,
        ..ModelConfig::desk()
    }
}

/// Binds `params` as constants and hands the tape and net to `f`.
pub fn with_net<T: pahs_core::Real, R>(
    params: &PahsParameters<T>,
    f: impl FnOnce(&mut Tape<T>, Net<'_>) -> R,
) -> R {
    let mut tape = Tape::new();
    let bound: Bound = params.bind(&mut tape, false);
    let net = Net {
        config: &params.config,
        params: &bound,
    };
    f(&mut tape, net)
}

/// Zeroes every tensor of the named layer.
pub fn zero_layer<T: pahs_core::Real>(params: &mut PahsParameters<T>, layer: &str) {
    for suffix in ["weight", "bias"] {
        if let Some(t) = params.store.get_mut(&format!("{layer}.{suffix}")) {
            t.fill(T::zero());
        }
    }
}

/// PSNR from a plain squared-error loop.
pub fn psnr_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        se += (a[i] - b[i]) * (a[i] - b[i]);
    }
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// SSIM with an explicit 2-D Gaussian window evaluated at every valid
/// position, planes of `h x w` stored back to back.
pub fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let mut weights = vec![vec![0.0; k]; k];
    let mut total = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let planes = a.len() / (h * w);
    let mut acc = 0.0;
    for p in 0..planes {
        let base = p * h * w;
        let mut sum = 0.0;
        let mut count = 0usize;
        for y in 0..=h - k {
            for x in 0..=w - k {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = weights[i][j] / total;
                        mx += wt * a[base + (y + i) * w + x + j];
                        my += wt * b[base + (y + i) * w + x + j];
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = weights[i][j] / total;
                        let dx = a[base + (y + i) * w + x + j] - mx;
                        let dy = b[base + (y + i) * w + x + j] - my;
                        vx += wt * dx * dx;
                        vy += wt * dy * dy;
                        cov += wt * dx * dy;
                    }
                }
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc += sum / count as f64;
    }
    acc / planes as f64
}
