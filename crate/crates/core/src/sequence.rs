//! Drives the recurrent cell over frame sequences.
//!
//! Unidirectional mode threads the carry forward from an all-zero state.
//! Bidirectional mode additionally runs a backward cell which, for output
//! frame `t`, restarts from zeros at frame `min(t + W, T - 1)` and walks back
//! to `t`; the forward and backward latent features of frame `t` are then
//! concatenated and fed to the fused reconstructor tail.

use std::fs;
use std::path::Path;

use crate::error::{PahsError, Result};
use crate::frames::FrameSequence;
use crate::model::cell::{
    cell_core, cell_step, extract_features, reconstruct_tail, AttentionBundle, Net, RecurrentCarry,
};
use crate::model::params::{PahsParameters, BACKWARD, FORWARD};
use crate::model::ModelConfig;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Per-frame latent features cached by a bidirectional pass.
#[derive(Clone, Debug)]
pub struct BidirState {
    pub forward_carry: RecurrentCarry,
    /// Carry of the last backward window (the one ending at frame 0).
    pub backward_carry: RecurrentCarry,
    pub f_forward: Vec<Var>,
    pub f_backward: Vec<Var>,
}

fn check_sequence<T: Real>(tape: &Tape<T>, config: &ModelConfig, frames: &[Var]) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| PahsError::Contract("no frames found".into()))?;
    let s = tape.shape(*first);
    config.check_frame(s.h, s.w)
}

/// Unidirectional recurrence on one tape. Returns one restored frame per
/// input frame.
pub fn forward_unidirectional<T: Real>(tape: &mut Tape<T>, net: Net<'_>, frames: &[Var]) -> Result<Vec<Var>> {
    check_sequence(tape, net.config, frames)?;
    let mut carry = RecurrentCarry::zeros(tape, net.config, tape.shape(frames[0]));
    let mut out = Vec::with_capacity(frames.len());
    for &frame in frames {
        let step = cell_step(tape, net, frame, carry)?;
        carry = step.carry;
        out.push(step.latent);
    }
    Ok(out)
}

/// Latent features of the backward cell for every frame, each from its own
/// window of `window` future frames.
pub fn backward_features<T: Real>(
    tape: &mut Tape<T>,
    net: Net<'_>,
    f_b: &[Var],
    window: usize,
    zero: RecurrentCarry,
) -> Result<(Vec<Var>, RecurrentCarry)> {
    let len = f_b.len();
    let mut out = vec![None; len];
    let mut last_carry = zero;
    if window >= len.saturating_sub(1) {
        // Every window reaches the last frame, so one reverse sweep yields
        // exactly the per-frame restarts.
        let mut carry = zero;
        for t in (0..len).rev() {
            let o = cell_core(tape, net, BACKWARD, f_b[t], carry)?;
            carry = o.next_carry();
            out[t] = Some(o.f_l);
        }
        last_carry = carry;
    } else {
        for t in 0..len {
            let end = (t + window).min(len - 1);
            let mut carry = zero;
            for j in (t..=end).rev() {
                let o = cell_core(tape, net, BACKWARD, f_b[j], carry)?;
                carry = o.next_carry();
                if j == t {
                    out[t] = Some(o.f_l);
                }
            }
            if t == 0 {
                last_carry = carry;
            }
        }
    }
    Ok((out.into_iter().map(|v| v.expect("every frame visited")).collect(), last_carry))
}

/// Bidirectional pass on one tape.
pub fn forward_bidirectional<T: Real>(
    tape: &mut Tape<T>,
    net: Net<'_>,
    frames: &[Var],
) -> Result<(Vec<Var>, BidirState)> {
    check_sequence(tape, net.config, frames)?;
    if !net.params.has_layer(&format!("{BACKWARD}.pp.conv_in")) {
        return Err(PahsError::Contract(
            "bidirectional inference needs the backward parameter set".into(),
        ));
    }
    let zero = RecurrentCarry::zeros(tape, net.config, tape.shape(frames[0]));

    let mut f_forward = Vec::with_capacity(frames.len());
    let mut carry = zero;
    for &frame in frames {
        let f_b = extract_features(tape, net, FORWARD, frame)?;
        let o = cell_core(tape, net, FORWARD, f_b, carry)?;
        carry = o.next_carry();
        f_forward.push(o.f_l);
    }

    let f_b_backward = frames
        .iter()
        .map(|&frame| extract_features(tape, net, BACKWARD, frame))
        .collect::<Result<Vec<_>>>()?;
    let (f_backward, backward_carry) =
        backward_features(tape, net, &f_b_backward, net.config.future_window, zero)?;

    let mut latents = Vec::with_capacity(frames.len());
    for (t, &frame) in frames.iter().enumerate() {
        let fused = tape.concat_channels(&[f_forward[t], f_backward[t]])?;
        latents.push(reconstruct_tail(tape, net, fused, frame)?);
    }
    Ok((
        latents,
        BidirState {
            forward_carry: carry,
            backward_carry,
            f_forward,
            f_backward,
        },
    ))
}

/// Runs whichever mode `net.config` selects.
pub fn forward_sequence<T: Real>(tape: &mut Tape<T>, net: Net<'_>, frames: &[Var]) -> Result<Vec<Var>> {
    if net.config.bidirectional {
        Ok(forward_bidirectional(tape, net, frames)?.0)
    } else {
        forward_unidirectional(tape, net, frames)
    }
}

/// Unidirectional inference. Each step runs on its own tape, so memory stays
/// flat in the sequence length.
pub fn run_unidirectional<T: Real>(seq: &FrameSequence<T>, params: &PahsParameters<T>) -> Result<Vec<Tensor<T>>> {
    let config = &params.config;
    if config.bidirectional {
        return Err(PahsError::Contract(
            "unidirectional inference needs a unidirectional parameter set".into(),
        ));
    }
    let s = seq.frame_shape();
    config.check_frame(s.h, s.w)?;
    let mut carry: Option<(Tensor<T>, Tensor<T>)> = None;
    let mut out = Vec::with_capacity(seq.len());
    for frame in seq.frames() {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let net = Net {
            config,
            params: &bound,
        };
        let c = match carry.take() {
            Some((h, f)) => RecurrentCarry {
                h: tape.constant(h),
                f_l_prev: tape.constant(f),
            },
            None => RecurrentCarry::zeros(&mut tape, config, s),
        };
        let x = tape.constant(frame.clone());
        let step = cell_step(&mut tape, net, x, c)?;
        carry = Some((
            tape.value(step.carry.h).clone(),
            tape.value(step.carry.f_l_prev).clone(),
        ));
        out.push(tape.value(step.latent).clone());
    }
    Ok(out)
}

/// Bidirectional inference with the window from `params.config`.
pub fn run_bidirectional<T: Real>(seq: &FrameSequence<T>, params: &PahsParameters<T>) -> Result<Vec<Tensor<T>>> {
    if !params.config.bidirectional {
        return Err(PahsError::Contract(
            "bidirectional inference needs the backward parameter set".into(),
        ));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let net = Net {
        config: &params.config,
        params: &bound,
    };
    let frames: Vec<Var> = seq.frames().iter().map(|f| tape.constant(f.clone())).collect();
    let (latents, _) = forward_bidirectional(&mut tape, net, &frames)?;
    Ok(latents.into_iter().map(|v| tape.value(v).clone()).collect())
}

pub fn run<T: Real>(seq: &FrameSequence<T>, params: &PahsParameters<T>) -> Result<Vec<Tensor<T>>> {
    if params.config.bidirectional {
        run_bidirectional(seq, params)
    } else {
        run_unidirectional(seq, params)
    }
}

/// Intermediate tensors of the forward cell at one frame.
#[derive(Clone, Debug)]
pub struct DebugDump<T> {
    pub f_b: Tensor<T>,
    /// Hidden state entering the step.
    pub h: Tensor<T>,
    /// Hidden state after the ping-pong recurrence.
    pub h_n: Tensor<T>,
    /// Hidden state after attention.
    pub h_tilde: Tensor<T>,
    pub f_l: Tensor<T>,
    pub attention: Option<AttentionBundle<T>>,
}

impl<T: Real> DebugDump<T> {
    /// `(file stem, tensor)` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![
            ("f_b", &self.f_b),
            ("h", &self.h),
            ("h_n", &self.h_n),
            ("h_tilde", &self.h_tilde),
            ("f_l", &self.f_l),
        ];
        if let Some(a) = &self.attention {
            out.extend([
                ("q", &a.q),
                ("k", &a.k),
                ("v", &a.v),
                ("s_nl", &a.s_nl),
                ("s_sel", &a.s_sel),
                ("att", &a.att),
            ]);
        }
        out
    }

    /// Writes every entry as `<stem>.pt4` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| PahsError::io(dir, e))?;
        for (stem, t) in self.entries() {
            t.save_pt4(&dir.join(format!("{stem}.pt4")))?;
        }
        Ok(())
    }
}

/// Runs the forward cell up to `frame_index` and captures its intermediates.
pub fn debug_dump<T: Real>(
    seq: &FrameSequence<T>,
    params: &PahsParameters<T>,
    frame_index: usize,
) -> Result<DebugDump<T>> {
    if frame_index >= seq.len() {
        return Err(PahsError::Contract(format!(
            "frame index {frame_index} out of range for {} frames",
            seq.len()
        )));
    }
    let config = &params.config;
    let s = seq.frame_shape();
    config.check_frame(s.h, s.w)?;
    let mut carry: Option<(Tensor<T>, Tensor<T>)> = None;
    for (t, frame) in seq.frames().iter().enumerate().take(frame_index + 1) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let net = Net {
            config,
            params: &bound,
        };
        let c = match carry.take() {
            Some((h, f)) => RecurrentCarry {
                h: tape.constant(h),
                f_l_prev: tape.constant(f),
            },
            None => RecurrentCarry::zeros(&mut tape, config, s),
        };
        let x = tape.constant(frame.clone());
        let f_b = extract_features(&mut tape, net, FORWARD, x)?;
        let o = cell_core(&mut tape, net, FORWARD, f_b, c)?;
        if t == frame_index {
            return Ok(DebugDump {
                f_b: tape.value(f_b).clone(),
                h: tape.value(c.h).clone(),
                h_n: tape.value(o.h_n).clone(),
                h_tilde: tape.value(o.h_tilde).clone(),
                f_l: tape.value(o.f_l).clone(),
                attention: o.attention.map(|a| a.materialize(&tape)),
            });
        }
        carry = Some((tape.value(o.h).clone(), tape.value(o.f_l).clone()));
    }
    unreachable!("frame_index checked against sequence length")
}
