//! Finite-difference verification of every differentiable operation and of
//! one full recurrent step, in 64-bit.
//!
//! Each check reduces the operation's output to a scalar with a fixed random
//! projection, then compares the tape gradient against central differences.
//! The relative error of one coordinate is `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels::ConvSpec;
use crate::model::cell::{cell_step, Net, RecurrentCarry};
use crate::model::params::{Bound, PahsParameters};
use crate::model::ModelConfig;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Denominator floor of the relative error.
pub const GRAD_FLOOR: f64 = 1e-6;
pub const KERNEL_TOL: f64 = 1e-4;
pub const CELL_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub seeds: u64,
    /// Central-difference step.
    pub step: f64,
    /// Seeds for the full-cell check.
    pub cell_seeds: u64,
    /// Coordinates sampled per parameter tensor in the full-cell check.
    pub cell_samples: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seeds: 20,
            step: 1e-5,
            cell_seeds: 20,
            cell_samples: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Coordinates whose difference interval straddled a kink; these are
    /// checked against the one-sided slope instead.
    pub kinks: usize,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Random direction of unit length, split over several tensors.
fn unit_projection(shapes: &[Shape], rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let parts: Vec<_> = shapes.iter().map(|&s| random(s, rng)).collect();
    let norm = parts.iter().map(|p| p.dot(p).unwrap_or(0.0)).sum::<f64>().sqrt();
    parts.into_iter().map(|p| p.map(|v| v / norm)).collect()
}

/// Values bounded away from zero, so kinks at the origin stay out of reach
/// of the difference step.
fn random_off_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Which coordinates of an input to probe.
#[derive(Clone, Debug)]
pub enum Probe {
    All,
    Sample(usize),
}

/// Generic check: `build` maps input handles to an output; the scalar loss
/// is the output dotted with a random unit projection.
pub fn check_function(
    name: &str,
    inputs: &[Tensor<f64>],
    probes: &[Probe],
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    step: f64,
    tolerance: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let projection = unit_projection(&[tape.shape(out)], rng).remove(0);
    let loss = tape.dot_const(out, projection.clone())?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).dot(&projection)
    };

    let base = eval(inputs)?;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut kinks = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, probe) in probes.iter().enumerate() {
        let g = grads.get(vars[i]);
        let n = inputs[i].numel();
        let coords: Vec<usize> = match probe {
            Probe::All => (0..n).collect(),
            Probe::Sample(k) => (0..(*k).min(n)).map(|_| rng.gen_range(0..n)).collect(),
        };
        for j in coords {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = g.data()[j];
            let mut err = rel_error(a, numeric);
            let (right, left) = ((plus - base) / step, (base - minus) / step);
            if err > tolerance && rel_error(right, left) > tolerance {
                // the one-sided slopes disagree, so a kink lies within one
                // step of x; x sits on one side and its gradient is that side's slope
                err = rel_error(a, right).min(rel_error(a, left));
                kinks += 1;
            }
            worst = worst.max(err);
            count += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        coordinates: count,
        kinks,
        tolerance,
    })
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct KernelCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: Builder,
}

fn conv_case(name: &'static str, spec: ConvSpec, n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> KernelCase {
    let mut inputs = vec![
        random(Shape::new(n, spec.in_channels, h, w), rng),
        random(spec.weight_shape(), rng),
    ];
    if spec.bias {
        inputs.push(random(spec.bias_shape(), rng));
    }
    KernelCase {
        name,
        inputs,
        build: Box::new(move |t, v| t.conv(v[0], v[1], v.get(2).copied(), spec)),
    }
}

fn kernel_cases(rng: &mut ChaCha8Rng) -> Vec<KernelCase> {
    let tok = Shape::matrix;
    let mut cases = vec![
        conv_case("conv2d_3x3_same", ConvSpec::same(2, 3), 2, 5, 4, rng),
        conv_case("conv2d_3x3_stride2", ConvSpec::down(2, 2), 1, 6, 5, rng),
        conv_case("conv2d_patchify", ConvSpec::patchify(2, 3, 2).without_bias(), 1, 4, 6, rng),
        conv_case("conv_transpose_up", ConvSpec::up(3, 2), 1, 3, 4, rng),
        conv_case("conv_transpose_unpatchify", ConvSpec::unpatchify(2, 2, 2), 2, 2, 3, rng),
    ];
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { tok(2, 3, 4) } else { tok(2, 4, 3) };
        let b = if tb { tok(2, 5, 3) } else { tok(2, 3, 5) };
        cases.push(KernelCase {
            name: match (ta, tb) {
                (false, false) => "matmul",
                (true, false) => "matmul_ta",
                (false, true) => "matmul_tb",
                _ => "matmul_ta_tb",
            },
            inputs: vec![random(a, rng), random(b, rng)],
            build: Box::new(move |t, v| t.matmul(v[0], v[1], ta, tb)),
        });
    }
    let scores = random(tok(2, 4, 5), rng).map(|x| 3.0 * x);
    cases.push(KernelCase {
        name: "softmax_rows",
        inputs: vec![scores],
        build: Box::new(|t, v| Ok(t.softmax_rows(v[0]))),
    });
    cases.push(KernelCase {
        name: "sigmoid",
        inputs: vec![random(Shape::new(2, 2, 3, 3), rng).map(|x| 4.0 * x)],
        build: Box::new(|t, v| Ok(t.sigmoid(v[0]))),
    });
    cases.push(KernelCase {
        name: "relu",
        inputs: vec![random_off_zero(Shape::new(2, 2, 3, 3), rng)],
        build: Box::new(|t, v| Ok(t.relu(v[0]))),
    });
    cases.push(KernelCase {
        name: "mean_rows",
        inputs: vec![random(Shape::new(2, 2, 3, 4), rng)],
        build: Box::new(|t, v| Ok(t.mean_rows(v[0]))),
    });
    cases.push(KernelCase {
        name: "fully_connected",
        inputs: vec![
            random(tok(2, 4, 3), rng),
            random(tok(1, 2, 3), rng),
            random(tok(1, 1, 2), rng),
        ],
        build: Box::new(|t, v| t.fully_connected(v[0], v[1], v[2])),
    });
    cases.push(KernelCase {
        name: "concat_channels",
        inputs: vec![
            random(Shape::new(2, 1, 3, 3), rng),
            random(Shape::new(2, 2, 3, 3), rng),
        ],
        build: Box::new(|t, v| t.concat_channels(&[v[0], v[1]])),
    });
    cases.push(KernelCase {
        name: "to_tokens",
        inputs: vec![random(Shape::new(2, 3, 2, 3), rng)],
        build: Box::new(|t, v| Ok(t.to_tokens(v[0]))),
    });
    cases.push(KernelCase {
        name: "from_tokens",
        inputs: vec![random(tok(2, 6, 3), rng)],
        build: Box::new(|t, v| t.from_tokens(v[0], 2, 3)),
    });
    cases.push(KernelCase {
        name: "scale_rows",
        inputs: vec![random(tok(2, 4, 4), rng), random(tok(2, 4, 1), rng)],
        build: Box::new(|t, v| t.scale_rows(v[0], v[1])),
    });
    cases.push(KernelCase {
        name: "add",
        inputs: vec![
            random(Shape::new(1, 2, 3, 3), rng),
            random(Shape::new(1, 2, 3, 3), rng),
        ],
        build: Box::new(|t, v| t.add(v[0], v[1])),
    });
    cases.push(KernelCase {
        name: "scale",
        inputs: vec![random(Shape::new(1, 2, 3, 3), rng)],
        build: Box::new(|t, v| Ok(t.scale(v[0], -0.75))),
    });
    let a = random(Shape::new(1, 3, 3, 3), rng);
    let offset = random_off_zero(a.shape(), rng);
    let mut b = a.clone();
    b.add_assign(&offset).expect("same shape");
    cases.push(KernelCase {
        name: "l1_loss",
        inputs: vec![a, b],
        build: Box::new(|t, v| t.l1_loss(v[0], v[1])),
    });
    cases.push(KernelCase {
        name: "sum_squares",
        inputs: vec![random(Shape::new(1, 2, 3, 3), rng)],
        build: Box::new(|t, v| Ok(t.sum_squares(v[0]))),
    });
    cases
}

/// Every kernel check, once per seed. Results are aggregated per kernel.
pub fn check_kernels(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut merged: Vec<CheckResult> = Vec::new();
    for seed in 0..opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for case in kernel_cases(&mut rng) {
            let probes = vec![Probe::All; case.inputs.len()];
            let r = check_function(case.name, &case.inputs, &probes, &*case.build, opts.step, KERNEL_TOL, &mut rng)?;
            match merged.iter_mut().find(|m| m.name == r.name) {
                Some(m) => {
                    m.max_rel_error = m.max_rel_error.max(r.max_rel_error);
                    m.coordinates += r.coordinates;
                    m.kinks += r.kinks;
                }
                None => merged.push(r),
            }
        }
    }
    Ok(merged)
}

/// Configuration of the full-cell check: unidirectional, `c = 12`, one
/// ping-pong iteration.
pub fn cell_check_config(seed: u64) -> ModelConfig {
    ModelConfig {
        c: 12,
        n_pp: 1,
        bidirectional: false,
        seed,
        ..ModelConfig::desk()
    }
}

/// Gradient of one full step with a random nonzero carry, w.r.t. the frame,
/// both carry tensors, and a sample of every parameter tensor. The loss
/// projects the restored frame, the next hidden state and the latent feature.
pub fn check_cell(seed: u64, opts: &GradcheckOptions) -> Result<CheckResult> {
    let config = cell_check_config(seed);
    let params = PahsParameters::<f64>::init(&config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (h, w) = (16, 16);
    let frame = Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| rng.gen_range(0.0..1.0));
    let carry_h = random(Shape::new(1, config.hidden_channels(), h / 4, w / 4), &mut rng);
    let carry_f = random(Shape::new(1, config.c, h / 4, w / 4), &mut rng);

    let names: Vec<String> = params.store.names().map(str::to_string).collect();
    let mut inputs = vec![frame, carry_h, carry_f];
    inputs.extend(names.iter().map(|n| params.store.get(n).expect("listed").clone()));
    let mut probes = vec![Probe::Sample(4), Probe::Sample(4), Probe::Sample(4)];
    probes.extend(names.iter().map(|_| Probe::Sample(opts.cell_samples)));

    let mut r = unit_projection(
        &[
            Shape::new(1, 3, h, w),
            Shape::new(1, config.hidden_channels() + config.c, h / 4, w / 4),
        ],
        &mut rng,
    );
    let (r_latent, r_state) = (r.remove(0), r.remove(0));
    let layout = params.layout.clone();
    let build = move |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let bound = Bound::from_vars(names.iter().cloned().zip(v[3..].iter().copied()), layout.clone());
        let net = Net {
            config: &config,
            params: &bound,
        };
        let carry = RecurrentCarry {
            h: v[1],
            f_l_prev: v[2],
        };
        let step = cell_step(tape, net, v[0], carry)?;
        let state = tape.concat_channels(&[step.cell.h, step.cell.f_l])?;
        let a = tape.dot_const(step.latent, r_latent.clone())?;
        let b = tape.dot_const(state, r_state.clone())?;
        tape.add(a, b)
    };
    let mut r = check_function("cell_step", &inputs, &probes, &build, opts.step, CELL_TOL, &mut rng)?;
    r.name = format!("cell_step[seed={seed}]");
    Ok(r)
}

/// The whole suite: every kernel, then the full cell once per seed.
pub fn run_suite(opts: &GradcheckOptions, mut on_result: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let mut out = check_kernels(opts)?;
    out.iter().for_each(&mut on_result);
    for seed in 0..opts.cell_seeds {
        let r = check_cell(seed, opts)?;
        on_result(&r);
        out.push(r);
    }
    Ok(out)
}
