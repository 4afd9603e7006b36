//! L1 training with Adam, and evaluation against sharp targets.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::{PahsError, Result};
use crate::frames::{clamp_unit, FrameSequence};
use crate::kernels;
use crate::metrics::{psnr, ssim};
use crate::model::cell::Net;
use crate::model::params::{ParameterStore, PahsParameters};
use crate::sequence::{forward_sequence, run};
use crate::tape::Tape;
use crate::tensor::{check_same, Real, Tensor};

/// Step-wise learning rate: `initial` halved at every milestone iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            milestones: Vec::new(),
        }
    }

    pub fn at(&self, iter: usize) -> f64 {
        let halvings = self.milestones.iter().filter(|&&m| iter >= m).count();
        self.initial * 0.5f64.powi(halvings as i32)
    }
}

/// Adam moments for every parameter tensor, kept in the parameters' order.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParameterStore<T>,
    pub v: ParameterStore<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParameterStore<T>) -> Self {
        let zeros = |s: &ParameterStore<T>| {
            let mut out = ParameterStore::new();
            for (name, t) in s.iter() {
                out.insert(name, Tensor::zeros(t.shape()));
            }
            out
        };
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }
}

/// One bias-corrected Adam update of every tensor in `params`. Tensors
/// missing from `grads` count as zero gradient.
pub fn adam_step<T: Real>(
    params: &mut ParameterStore<T>,
    grads: &ParameterStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| PahsError::Contract(format!("gradient for unknown parameter {name}")))?;
        check_same("adam_step", p.shape(), g.shape())?;
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (name, p) in params.iter_mut() {
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| PahsError::Contract(format!("no moment for {name}")))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| PahsError::Contract(format!("no moment for {name}")))?;
        let g = grads.get(name);
        for i in 0..p.numel() {
            let gi = g.map_or(0.0, |g| g.data()[i].as_f64());
            let mi = b1 * m.data()[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i].as_f64() + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = T::from_f64_lossy(mi);
            v.data_mut()[i] = T::from_f64_lossy(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            if update != 0.0 {
                let pi = p.data()[i].as_f64() - update;
                p.data_mut()[i] = T::from_f64_lossy(pi);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub iterations: usize,
    pub schedule: LrSchedule,
    /// Square patch side; `None` trains on whole frames.
    pub patch: Option<usize>,
    pub batch: usize,
    /// Frames per training clip; `None` uses the shortest sequence length.
    pub clip: Option<usize>,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            iterations: 500,
            schedule: LrSchedule::constant(1e-4),
            patch: Some(64),
            batch: 1,
            clip: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut out = String::from("iter,loss,lr\n");
    for r in log {
        let _ = writeln!(out, "{},{},{}", r.iter, r.loss, r.lr);
    }
    out
}

pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    fs::write(path, loss_log_csv(log)).map_err(|e| PahsError::io(path, e))
}

/// Patch origins aligned to `align`, drawn so a `side` square fits.
fn patch_origin(rng: &mut ChaCha8Rng, extent: usize, side: usize, align: usize) -> usize {
    let slots = (extent - side) / align + 1;
    rng.gen_range(0..slots) * align
}

/// A training batch: per time step, stacked blurry and sharp frames.
struct Batch<T> {
    blur: Vec<Tensor<T>>,
    sharp: Vec<Tensor<T>>,
}

fn sample_batch<T: Real>(
    data: &Dataset<T>,
    opts: &TrainOptions,
    clip: usize,
    align: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch<T>> {
    let mut blur_items: Vec<Vec<Tensor<T>>> = vec![Vec::new(); clip];
    let mut sharp_items: Vec<Vec<Tensor<T>>> = vec![Vec::new(); clip];
    for _ in 0..opts.batch {
        let seq = &data.sequences[rng.gen_range(0..data.len())];
        let shape = seq.blur.frame_shape();
        let start = rng.gen_range(0..=seq.len() - clip);
        let (ph, pw) = match opts.patch {
            Some(p) => (p, p),
            None => (shape.h, shape.w),
        };
        let top = patch_origin(rng, shape.h, ph, align);
        let left = patch_origin(rng, shape.w, pw, align);
        for t in 0..clip {
            blur_items[t].push(seq.blur.frames()[start + t].crop(top, left, ph, pw)?);
            sharp_items[t].push(seq.sharp.frames()[start + t].crop(top, left, ph, pw)?);
        }
    }
    Ok(Batch {
        blur: blur_items.iter().map(|b| Tensor::stack(b)).collect::<Result<_>>()?,
        sharp: sharp_items.iter().map(|b| Tensor::stack(b)).collect::<Result<_>>()?,
    })
}

/// Mean over time of the per-frame L1 loss, with gradients for every
/// parameter tensor.
pub fn loss_and_grads<T: Real>(
    params: &PahsParameters<T>,
    blur: &[Tensor<T>],
    sharp: &[Tensor<T>],
) -> Result<(f64, ParameterStore<T>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let net = Net {
        config: &params.config,
        params: &bound,
    };
    let frames: Vec<_> = blur.iter().map(|f| tape.constant(f.clone())).collect();
    let latents = forward_sequence(&mut tape, net, &frames)?;
    let mut losses = Vec::with_capacity(latents.len());
    for (l, s) in latents.iter().zip(sharp) {
        let target = tape.constant(s.clone());
        losses.push(tape.l1_loss(*l, target)?);
    }
    let loss = tape.mean_of(&losses)?;
    let mut grads = tape.backward(loss)?;
    let mut out = ParameterStore::new();
    for name in params.store.names() {
        out.insert(name, grads.take(bound.var(name)?));
    }
    Ok((tape.value(loss).data()[0].as_f64(), out))
}

pub struct TrainOutcome<T> {
    pub params: PahsParameters<T>,
    pub log: Vec<LossRecord>,
}

/// Runs `opts.iterations` steps of sample, forward, backward, Adam. The
/// callback sees every log record as it is produced.
pub fn train<T: Real>(
    mut params: PahsParameters<T>,
    data: &Dataset<T>,
    opts: &TrainOptions,
    mut on_iter: impl FnMut(&LossRecord),
) -> Result<TrainOutcome<T>> {
    if data.is_empty() {
        return Err(PahsError::Contract("empty dataset".into()));
    }
    if opts.batch == 0 {
        return Err(PahsError::Config("batch must be at least 1".into()));
    }
    let config = params.config.clone();
    let align = config.spatial_multiple();
    let clip = opts.clip.unwrap_or_else(|| data.min_len()).min(data.min_len());
    if clip == 0 {
        return Err(PahsError::Config("clip must be at least 1 frame".into()));
    }
    for seq in &data.sequences {
        let s = seq.blur.frame_shape();
        let (ph, pw) = opts.patch.map_or((s.h, s.w), |p| (p, p));
        if ph > s.h || pw > s.w {
            return Err(PahsError::Config(format!(
                "patch {ph}x{pw} larger than frames {}x{} of {}",
                s.h, s.w, seq.name
            )));
        }
        config.check_frame(ph, pw)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = AdamState::new(&params.store);
    let mut log = Vec::with_capacity(opts.iterations);
    for iter in 0..opts.iterations {
        let batch = sample_batch(data, opts, clip, align, &mut rng)?;
        let (loss, grads) = loss_and_grads(&params, &batch.blur, &batch.sharp)?;
        if !loss.is_finite() {
            return Err(PahsError::Contract(format!("loss diverged at iteration {iter}")));
        }
        let lr = opts.schedule.at(iter);
        adam_step(&mut params.store, &grads, &mut adam, lr)?;
        let rec = LossRecord { iter, loss, lr };
        on_iter(&rec);
        log.push(rec);
    }
    Ok(TrainOutcome { params, log })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean per-frame L1 loss of the raw outputs.
    pub loss: f64,
    /// Mean per-frame PSNR of clamped outputs.
    pub psnr: f64,
    pub ssim: f64,
    /// Mean per-frame PSNR of the blurry inputs.
    pub input_psnr: f64,
    pub input_ssim: f64,
    pub frames: usize,
}

/// Mean per-frame PSNR and SSIM between two equally long frame lists.
pub fn compare_frames<T: Real>(outputs: &[Tensor<T>], targets: &[Tensor<T>]) -> Result<(f64, f64)> {
    if outputs.len() != targets.len() {
        return Err(PahsError::shape("compare_frames", "frames", targets.len(), outputs.len()));
    }
    if outputs.is_empty() {
        return Err(PahsError::Contract("no frames to compare".into()));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for (o, t) in outputs.iter().zip(targets) {
        p += psnr(o, t, 1.0)?;
        s += ssim(o, t, 1.0)?;
    }
    let n = outputs.len() as f64;
    Ok((p / n, s / n))
}

/// Full-frame inference over every sequence of `data`.
pub fn evaluate<T: Real>(params: &PahsParameters<T>, data: &Dataset<T>) -> Result<EvalReport> {
    let mut outputs = Vec::new();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut loss = 0.0;
    for seq in &data.sequences {
        let restored = run(&seq.blur, params)?;
        for (o, s) in restored.iter().zip(seq.sharp.frames()) {
            loss += kernels::l1_loss(o, s)?;
        }
        outputs.extend(restored.iter().map(clamp_unit));
        inputs.extend(seq.blur.frames().iter().cloned());
        targets.extend(seq.sharp.frames().iter().cloned());
    }
    let (psnr_out, ssim_out) = compare_frames(&outputs, &targets)?;
    let (psnr_in, ssim_in) = compare_frames(&inputs, &targets)?;
    Ok(EvalReport {
        loss: loss / outputs.len() as f64,
        psnr: psnr_out,
        ssim: ssim_out,
        input_psnr: psnr_in,
        input_ssim: ssim_in,
        frames: outputs.len(),
    })
}

/// Restores every sequence, clamped to `[0, 1]`.
pub fn restore<T: Real>(params: &PahsParameters<T>, seq: &FrameSequence<T>) -> Result<Vec<Tensor<T>>> {
    Ok(run(seq, params)?.iter().map(clamp_unit).collect())
}
