//! One recurrent step: feature extraction, ping-pong hidden-state updates,
//! selective non-local attention, reconstruction and hidden-state extraction.
//!
//! Every function records onto a [`Tape`] so the same code serves inference
//! and training. Layer names are resolved through a [`Bound`] parameter set;
//! `cell` is the parameter prefix of the recurrent cell (`fwd` or `bwd`).

use super::config::{AttentionKind, AttentionSource, ModelConfig, UpdateOrder};
use super::params::{Bound, TAIL};
use crate::error::{PahsError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

/// A model configuration together with its parameters bound to one tape.
#[derive(Clone, Copy, Debug)]
pub struct Net<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a Bound,
}

/// State threaded between time steps: hidden state `h` at `c/3` channels and
/// the previous latent feature at `c` channels, both at quarter resolution.
#[derive(Clone, Copy, Debug)]
pub struct RecurrentCarry {
    pub h: Var,
    pub f_l_prev: Var,
}

impl RecurrentCarry {
    /// All-zero carry for a sequence of frames with the given shape.
    pub fn zeros<T: Real>(tape: &mut Tape<T>, config: &ModelConfig, frame: Shape) -> Self {
        let (h4, w4) = (frame.h / 4, frame.w / 4);
        let h = tape.constant(Tensor::zeros(Shape::new(frame.n, config.hidden_channels(), h4, w4)));
        let f_l_prev = tape.constant(Tensor::zeros(Shape::new(frame.n, config.c, h4, w4)));
        RecurrentCarry { h, f_l_prev }
    }
}

/// Intermediate attention products, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    /// Query tokens `(n, 1, T, d)`.
    pub q: Var,
    /// Key tokens `(n, 1, T, d)`.
    pub k: Var,
    /// Value tokens `(n, 1, T, c/3)`.
    pub v: Var,
    /// Raw scores `q k^T`, `(n, 1, T, T)`.
    pub scores: Var,
    /// Row-stochastic attention map `(n, 1, T, T)`.
    pub s_nl: Var,
    /// Per-query selection score `(n, 1, T, 1)`; absent for plain non-local attention.
    pub s_sel: Option<Var>,
    /// Attention output aligned with the hidden state.
    pub att: Var,
}

/// Attention products copied off the tape.
#[derive(Clone, Debug)]
pub struct AttentionBundle<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub s_nl: Tensor<T>,
    /// Ones when the selection score is disabled.
    pub s_sel: Tensor<T>,
    pub att: Tensor<T>,
}

impl AttentionVars {
    pub fn materialize<T: Real>(&self, tape: &Tape<T>) -> AttentionBundle<T> {
        let s_nl = tape.value(self.s_nl).clone();
        let s_sel = match self.s_sel {
            Some(s) => tape.value(s).clone(),
            None => {
                let sh = s_nl.shape();
                Tensor::full(Shape::new(sh.n, sh.c, sh.h, 1), T::one())
            }
        };
        AttentionBundle {
            q: tape.value(self.q).clone(),
            k: tape.value(self.k).clone(),
            v: tape.value(self.v).clone(),
            s_nl,
            s_sel,
            att: tape.value(self.att).clone(),
        }
    }
}

/// Everything one recurrent cell produces before the reconstructor tail.
#[derive(Clone, Copy, Debug)]
pub struct CellOutput {
    /// Updated hidden state after the ping-pong recurrence.
    pub h_n: Var,
    /// Hidden state after attention.
    pub h_tilde: Var,
    /// Latent feature fed to the tail and to the next step.
    pub f_l: Var,
    /// Hidden state for the next step.
    pub h: Var,
    pub attention: Option<AttentionVars>,
}

impl CellOutput {
    pub fn next_carry(&self) -> RecurrentCarry {
        RecurrentCarry {
            h: self.h,
            f_l_prev: self.f_l,
        }
    }
}

fn apply_conv<T: Real>(tape: &mut Tape<T>, net: Net<'_>, layer: &str, x: Var) -> Result<Var> {
    let c = net.params.conv(layer)?;
    tape.conv(x, c.weight, c.bias, c.spec)
}

/// `x + conv2(relu(conv1(x)))`.
pub fn res_block<T: Real>(tape: &mut Tape<T>, net: Net<'_>, layer: &str, x: Var) -> Result<Var> {
    let a = apply_conv(tape, net, &format!("{layer}.conv1"), x)?;
    let a = tape.relu(a);
    let a = apply_conv(tape, net, &format!("{layer}.conv2"), a)?;
    tape.add(x, a)
}

/// Blurry frame `(n, 3, H, W)` to feature `(n, c, H/4, W/4)`.
pub fn extract_features<T: Real>(tape: &mut Tape<T>, net: Net<'_>, cell: &str, frame: Var) -> Result<Var> {
    let s = tape.shape(frame);
    if s.c != 3 {
        return Err(PahsError::shape("extract_features", "channels", 3, s.c));
    }
    for (axis, len) in [("height", s.h), ("width", s.w)] {
        if len % 4 != 0 {
            return Err(PahsError::shape("extract_features", axis, len.next_multiple_of(4), len));
        }
    }
    let mut x = apply_conv(tape, net, &format!("{cell}.extractor.stem"), frame)?;
    x = apply_conv(tape, net, &format!("{cell}.extractor.down1"), x)?;
    for i in 0..net.config.extractor_blocks {
        x = res_block(tape, net, &format!("{cell}.extractor.stage1.rb{i}"), x)?;
    }
    x = apply_conv(tape, net, &format!("{cell}.extractor.down2"), x)?;
    for i in 0..net.config.extractor_blocks {
        x = res_block(tape, net, &format!("{cell}.extractor.stage2.rb{i}"), x)?;
    }
    Ok(x)
}

/// The ping-pong block: `state + conv_out(rb(conv_in([feature, state])))`.
pub fn pp_block<T: Real>(tape: &mut Tape<T>, net: Net<'_>, cell: &str, feature: Var, state: Var) -> Result<Var> {
    let (fs, ss) = (tape.shape(feature), tape.shape(state));
    if (fs.h, fs.w) != (ss.h, ss.w) {
        let (axis, e, a) = if fs.h != ss.h {
            ("height", fs.h, ss.h)
        } else {
            ("width", fs.w, ss.w)
        };
        return Err(PahsError::shape("pp_block", axis, e, a));
    }
    let x = tape.concat_channels(&[feature, state])?;
    let x = apply_conv(tape, net, &format!("{cell}.pp.conv_in"), x)?;
    let x = res_block(tape, net, &format!("{cell}.pp.rb"), x)?;
    let x = apply_conv(tape, net, &format!("{cell}.pp.conv_out"), x)?;
    tape.add(state, x)
}

/// Runs `config.n_pp` ping-pong recurrences on the hidden state, alternating
/// between the blurry feature and the previous latent feature. Both roles use
/// the same block weights. With `n_pp == 0` the input state is returned as is.
pub fn pprnn_update<T: Real>(
    tape: &mut Tape<T>,
    net: Net<'_>,
    cell: &str,
    carry: RecurrentCarry,
    f_b: Var,
) -> Result<Var> {
    let (first, second) = match net.config.update_order {
        UpdateOrder::BlurFirst => (f_b, carry.f_l_prev),
        UpdateOrder::LatentFirst => (carry.f_l_prev, f_b),
    };
    let mut h = carry.h;
    for _ in 0..net.config.n_pp {
        let g = pp_block(tape, net, cell, first, h)?;
        h = pp_block(tape, net, cell, second, g)?;
    }
    Ok(h)
}

/// Selective non-local attention over the hidden state.
///
/// Queries come from `f_b` (or from `h_n` in self-attention mode), keys and
/// values from `h_n`. Returns `h_n + Att` and the attention products, or
/// `h_n` unchanged when attention is disabled.
pub fn snla<T: Real>(
    tape: &mut Tape<T>,
    net: Net<'_>,
    cell: &str,
    f_b: Var,
    h_n: Var,
) -> Result<(Var, Option<AttentionVars>)> {
    let cfg = net.config;
    if cfg.attention == AttentionKind::None {
        return Ok((h_n, None));
    }
    let (fs, hs) = (tape.shape(f_b), tape.shape(h_n));
    if (fs.h, fs.w) != (hs.h, hs.w) {
        return Err(PahsError::shape("snla", "height", fs.h, hs.h));
    }
    let stride = cfg.attn_stride;
    for (axis, len) in [("height", hs.h), ("width", hs.w)] {
        if len % stride != 0 {
            return Err(PahsError::Contract(format!(
                "snla: feature {axis} {len} does not tile into stride-{stride} tokens"
            )));
        }
    }
    let (grid_h, grid_w) = (hs.h / stride, hs.w / stride);

    let q_src = match cfg.attention_source {
        AttentionSource::Cross => f_b,
        AttentionSource::SelfAttention => h_n,
    };
    let q_map = apply_conv(tape, net, &format!("{cell}.snla.query"), q_src)?;
    let k_map = apply_conv(tape, net, &format!("{cell}.snla.key"), h_n)?;
    let v_map = apply_conv(tape, net, &format!("{cell}.snla.value"), h_n)?;
    let q = tape.to_tokens(q_map);
    let k = tape.to_tokens(k_map);
    let v = tape.to_tokens(v_map);

    let scores = tape.matmul(q, k, false, true)?;
    let s_nl = tape.softmax_rows(scores);
    let (weighted, s_sel) = match cfg.attention {
        AttentionKind::Selective => {
            let pooled = tape.mean_rows(scores);
            let (w, b) = net.params.linear(&format!("{cell}.snla.filter"))?;
            let logits = tape.fully_connected(pooled, w, b)?;
            let s_sel = tape.sigmoid(logits);
            (tape.scale_rows(s_nl, s_sel)?, Some(s_sel))
        }
        _ => (s_nl, None),
    };
    let attended = tape.matmul(weighted, v, false, false)?;
    let att_map = tape.from_tokens(attended, grid_h, grid_w)?;
    let att = apply_conv(tape, net, &format!("{cell}.snla.out"), att_map)?;
    let h_tilde = tape.add(h_n, att)?;
    Ok((
        h_tilde,
        Some(AttentionVars {
            q,
            k,
            v,
            scores,
            s_nl,
            s_sel,
            att,
        }),
    ))
}

/// Reconstructor head: fuses `[h_tilde, f_b]` and runs the first ResBlocks,
/// producing the latent feature `f_L` at `c` channels.
pub fn reconstruct_head<T: Real>(
    tape: &mut Tape<T>,
    net: Net<'_>,
    cell: &str,
    f_b: Var,
    h_tilde: Var,
) -> Result<Var> {
    let x = tape.concat_channels(&[h_tilde, f_b])?;
    let mut x = apply_conv(tape, net, &format!("{cell}.head.fuse"), x)?;
    for i in 0..net.config.head_blocks {
        x = res_block(tape, net, &format!("{cell}.head.rb{i}"), x)?;
    }
    Ok(x)
}

/// Reconstructor tail: two transposed-conv upsamplings with interleaved
/// ResBlocks down to three channels, plus the blurry frame when the global
/// skip is enabled. `features` is `f_L` (unidirectional) or `[f_L^f, f_L^b]`.
pub fn reconstruct_tail<T: Real>(tape: &mut Tape<T>, net: Net<'_>, features: Var, frame: Var) -> Result<Var> {
    let mut x = apply_conv(tape, net, &format!("{TAIL}.up1"), features)?;
    for i in 0..net.config.tail_blocks {
        x = res_block(tape, net, &format!("{TAIL}.stage1.rb{i}"), x)?;
    }
    x = apply_conv(tape, net, &format!("{TAIL}.up2"), x)?;
    for i in 0..net.config.tail_blocks {
        x = res_block(tape, net, &format!("{TAIL}.stage2.rb{i}"), x)?;
    }
    x = apply_conv(tape, net, &format!("{TAIL}.out"), x)?;
    if net.config.global_skip {
        x = tape.add(frame, x)?;
    }
    Ok(x)
}

/// `conv -> ResBlock -> conv`, reducing `f_L` to the `c/3`-channel hidden state.
pub fn extract_hidden<T: Real>(tape: &mut Tape<T>, net: Net<'_>, cell: &str, f_l: Var) -> Result<Var> {
    let s = tape.shape(f_l);
    if s.c != net.config.c {
        return Err(PahsError::shape("extract_hidden", "channels", net.config.c, s.c));
    }
    let x = apply_conv(tape, net, &format!("{cell}.hidden.conv_in"), f_l)?;
    let x = res_block(tape, net, &format!("{cell}.hidden.rb"), x)?;
    apply_conv(tape, net, &format!("{cell}.hidden.conv_out"), x)
}

/// The recurrent part of a step, given an already extracted blurry feature.
pub fn cell_core<T: Real>(
    tape: &mut Tape<T>,
    net: Net<'_>,
    cell: &str,
    f_b: Var,
    carry: RecurrentCarry,
) -> Result<CellOutput> {
    let h_n = pprnn_update(tape, net, cell, carry, f_b)?;
    let (h_tilde, attention) = snla(tape, net, cell, f_b, h_n)?;
    let f_l = reconstruct_head(tape, net, cell, f_b, h_tilde)?;
    let h = extract_hidden(tape, net, cell, f_l)?;
    Ok(CellOutput {
        h_n,
        h_tilde,
        f_l,
        h,
        attention,
    })
}

/// Result of one unidirectional step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// Restored frame `(n, 3, H, W)`.
    pub latent: Var,
    pub f_b: Var,
    pub carry: RecurrentCarry,
    pub cell: CellOutput,
}

/// One full unidirectional step with the forward cell and the tail.
pub fn cell_step<T: Real>(tape: &mut Tape<T>, net: Net<'_>, frame: Var, carry: RecurrentCarry) -> Result<StepOutput> {
    let cell = super::params::FORWARD;
    let f_b = extract_features(tape, net, cell, frame)?;
    let out = cell_core(tape, net, cell, f_b, carry)?;
    let latent = reconstruct_tail(tape, net, out.f_l, frame)?;
    Ok(StepOutput {
        latent,
        f_b,
        carry: out.next_carry(),
        cell: out,
    })
}
