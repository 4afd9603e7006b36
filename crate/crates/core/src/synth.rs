//! Synthetic blurry/sharp video pairs.
//!
//! A scene is a static background plus textured shapes moving at constant
//! velocity. Each frame's exposure is sampled at `substeps` instants centred
//! on the frame time; the blurry frame is the mean of those renders and the
//! sharp frame is the centre render. Renders are quantised to 8-bit levels so
//! the averaging is exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PahsError, Result};
use crate::frames::FrameSequence;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub shapes: usize,
    /// Maximum per-axis displacement in pixels per frame.
    pub max_displacement: f64,
    /// Renders averaged per blurry frame; forced odd so the centre render
    /// coincides with the frame time.
    pub substeps: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            height: 64,
            width: 64,
            shapes: 6,
            max_displacement: 4.0,
            substeps: 9,
            frames: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Texture {
    Flat,
    Stripes { period: f64, angle: f64 },
    Checker { period: f64 },
}

#[derive(Clone, Copy, Debug)]
enum Outline {
    Rect { half_w: f64, half_h: f64 },
    Disc { radius: f64 },
}

#[derive(Clone, Debug)]
struct Sprite {
    x0: f64,
    y0: f64,
    vx: f64,
    vy: f64,
    outline: Outline,
    texture: Texture,
    colour_a: [u8; 3],
    colour_b: [u8; 3],
}

impl Sprite {
    /// Colour at pixel centre `(px, py)` at time `tau`, if covered.
    fn sample(&self, px: f64, py: f64, tau: f64) -> Option<[u8; 3]> {
        let dx = px - (self.x0 + self.vx * tau);
        let dy = py - (self.y0 + self.vy * tau);
        let inside = match self.outline {
            Outline::Rect { half_w, half_h } => dx.abs() <= half_w && dy.abs() <= half_h,
            Outline::Disc { radius } => dx * dx + dy * dy <= radius * radius,
        };
        if !inside {
            return None;
        }
        let use_a = match self.texture {
            Texture::Flat => true,
            Texture::Stripes { period, angle } => {
                let u = dx * angle.cos() + dy * angle.sin();
                (u / period).floor().rem_euclid(2.0) == 0.0
            }
            Texture::Checker { period } => {
                ((dx / period).floor() + (dy / period).floor()).rem_euclid(2.0) == 0.0
            }
        };
        Some(if use_a { self.colour_a } else { self.colour_b })
    }
}

/// A fully determined scene; rendering is a pure function of time.
#[derive(Clone, Debug)]
pub struct Scene {
    spec: SynthSpec,
    background: [[u8; 3]; 2],
    bg_period: f64,
    sprites: Vec<Sprite>,
}

fn colour(rng: &mut ChaCha8Rng) -> [u8; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

impl Scene {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        if spec.height == 0 || spec.width == 0 {
            return Err(PahsError::Contract(format!(
                "degenerate canvas {}x{}",
                spec.height, spec.width
            )));
        }
        if spec.frames == 0 || spec.substeps == 0 {
            return Err(PahsError::Contract("synthetic sequence needs frames and substeps".into()));
        }
        if !(spec.max_displacement >= 0.0 && spec.max_displacement.is_finite()) {
            return Err(PahsError::Contract("max_displacement must be finite and non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (h, w) = (spec.height as f64, spec.width as f64);
        let short = h.min(w);
        let background = [colour(&mut rng), colour(&mut rng)];
        let bg_period = rng.gen_range(0.25..0.5) * short;
        let d = spec.max_displacement;
        let sprites = (0..spec.shapes)
            .map(|_| {
                let size = rng.gen_range(0.08..0.22) * short;
                let outline = if rng.gen_bool(0.5) {
                    Outline::Rect {
                        half_w: size,
                        half_h: size * rng.gen_range(0.5..1.5),
                    }
                } else {
                    Outline::Disc { radius: size }
                };
                let texture = match rng.gen_range(0..3) {
                    0 => Texture::Flat,
                    1 => Texture::Stripes {
                        period: rng.gen_range(2.0..6.0),
                        angle: rng.gen_range(0.0..std::f64::consts::PI),
                    },
                    _ => Texture::Checker {
                        period: rng.gen_range(2.0..6.0),
                    },
                };
                let (vx, vy) = if d > 0.0 {
                    (rng.gen_range(-d..=d), rng.gen_range(-d..=d))
                } else {
                    (0.0, 0.0)
                };
                Sprite {
                    x0: rng.gen_range(0.0..w),
                    y0: rng.gen_range(0.0..h),
                    vx,
                    vy,
                    outline,
                    texture,
                    colour_a: colour(&mut rng),
                    colour_b: colour(&mut rng),
                }
            })
            .collect();
        Ok(Scene {
            spec: spec.clone(),
            background,
            bg_period,
            sprites,
        })
    }

    /// 8-bit render at time `tau` (in frames), interleaved `(h, w, rgb)`.
    pub fn render(&self, tau: f64) -> Vec<u8> {
        let (h, w) = (self.spec.height, self.spec.width);
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut c = {
                    let band = ((px + py) / self.bg_period).floor().rem_euclid(2.0) as usize;
                    self.background[band]
                };
                for s in &self.sprites {
                    if let Some(sc) = s.sample(px, py, tau) {
                        c = sc;
                    }
                }
                out.extend_from_slice(&c);
            }
        }
        out
    }

    /// Sample times of frame `t`'s exposure, centred on `t`.
    pub fn substep_times(&self, t: usize) -> Vec<f64> {
        let n = self.spec.substeps | 1;
        let half = (n / 2) as f64;
        (0..n)
            .map(|s| t as f64 + (s as f64 - half) / n as f64)
            .collect()
    }

    /// Every substep render of frame `t`.
    pub fn substeps(&self, t: usize) -> Vec<Vec<u8>> {
        self.substep_times(t).into_iter().map(|tau| self.render(tau)).collect()
    }
}

/// Converts interleaved 8-bit pixels (summed over `count` renders) to a
/// `(1, 3, H, W)` frame of means.
fn to_frame<T: Real>(sums: &[u32], count: u32, height: usize, width: usize) -> Tensor<T> {
    let denom = 255.0 * count as f64;
    Tensor::from_fn(Shape::new(1, 3, height, width), |_, c, y, x| {
        T::from_f64_lossy(sums[(y * width + x) * 3 + c] as f64 / denom)
    })
}

/// Blurry and sharp sequences for `spec`. Deterministic in `spec.seed`.
pub fn generate_synthetic<T: Real>(spec: &SynthSpec) -> Result<(FrameSequence<T>, FrameSequence<T>)> {
    let scene = Scene::new(spec)?;
    let (h, w) = (spec.height, spec.width);
    let mut blur = Vec::with_capacity(spec.frames);
    let mut sharp = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let renders = scene.substeps(t);
        let mut sums = vec![0u32; h * w * 3];
        for r in &renders {
            for (s, &v) in sums.iter_mut().zip(r) {
                *s += v as u32;
            }
        }
        blur.push(to_frame(&sums, renders.len() as u32, h, w));
        let centre: Vec<u32> = renders[renders.len() / 2].iter().map(|&v| v as u32).collect();
        sharp.push(to_frame(&centre, 1, h, w));
    }
    Ok((FrameSequence::from_frames(blur)?, FrameSequence::from_frames(sharp)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            height: 16,
            width: 24,
            frames: 3,
            substeps: 5,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn static_scene_has_no_blur() {
        let spec = SynthSpec {
            max_displacement: 0.0,
            ..small(3)
        };
        let (blur, sharp) = generate_synthetic::<f32>(&spec).unwrap();
        assert_eq!(blur, sharp);
    }

    #[test]
    fn blur_is_mean_of_regenerated_substeps() {
        let spec = small(11);
        let (blur, _) = generate_synthetic::<f64>(&spec).unwrap();
        let scene = Scene::new(&spec).unwrap();
        for t in 0..spec.frames {
            let renders = scene.substeps(t);
            let frame = &blur.frames()[t];
            for y in 0..spec.height {
                for x in 0..spec.width {
                    for c in 0..3 {
                        let i = (y * spec.width + x) * 3 + c;
                        let mean = renders.iter().map(|r| r[i] as f64 / 255.0).sum::<f64>()
                            / renders.len() as f64;
                        assert!((frame.at(0, c, y, x) - mean).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn seeded_and_bounded() {
        let a = generate_synthetic::<f32>(&small(5)).unwrap();
        let b = generate_synthetic::<f32>(&small(5)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic::<f32>(&small(6)).unwrap();
        assert_ne!(a.0, c.0);
        for f in a.0.frames().iter().chain(a.1.frames()) {
            assert!(f.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn degenerate_specs() {
        assert!(Scene::new(&SynthSpec { width: 0, ..small(0) }).is_err());
        assert!(Scene::new(&SynthSpec { frames: 0, ..small(0) }).is_err());
        assert!(Scene::new(&SynthSpec { max_displacement: f64::NAN, ..small(0) }).is_err());
    }

    #[test]
    fn centre_substep_is_frame_time() {
        let scene = Scene::new(&small(1)).unwrap();
        let times = scene.substep_times(4);
        assert_eq!(times[times.len() / 2], 4.0);
        // even substep counts are bumped to the next odd count
        let scene = Scene::new(&SynthSpec { substeps: 4, ..small(1) }).unwrap();
        assert_eq!(scene.substep_times(0).len(), 5);
    }
}
