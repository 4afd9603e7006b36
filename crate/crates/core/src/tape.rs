//! Reverse-mode differentiation over the kernels in [`crate::kernels`].
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. Nodes are appended after their inputs, so the node order
//! is a topological order and [`Tape::backward`] simply walks it in reverse,
//! visiting each node once.

use crate::error::{PahsError, Result};
use crate::kernels::{self, ConvSpec};
use crate::tensor::{check_same, Real, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Matmul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Softmax(Var),
    Sigmoid(Var),
    Relu(Var),
    MeanRows(Var),
    FullyConnected {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat(Vec<Var>),
    ToTokens(Var),
    FromTokens(Var),
    ScaleRows {
        m: Var,
        s: Var,
    },
    Add(Var, Var),
    Scale(Var, f64),
    L1 {
        a: Var,
        b: Var,
    },
    Dot {
        x: Var,
        weights: Tensor<T>,
    },
    SumSquares(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, keyed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Shape>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `var`; exactly zero if the loss does not
    /// depend on it.
    pub fn get(&self, var: Var) -> Tensor<T> {
        self.try_get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0]))
    }

    pub fn try_get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Moves the gradient of `var` out.
    pub fn take(&mut self, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0]))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (a learnable parameter or a checked input).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> Shape {
        self.nodes[var.0].value.shape()
    }

    /// Direct or transposed convolution, chosen by `spec.transposed`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let bias = b.map(|b| self.value(b));
        let out = if spec.transposed {
            kernels::conv2d_transpose(self.value(x), self.value(w), bias, &spec)?
        } else {
            kernels::conv2d(self.value(x), self.value(w), bias, &spec)?
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b, spec }, &inputs))
    }

    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let out = kernels::matmul_ex(self.value(a), self.value(b), trans_a, trans_b)?;
        Ok(self.push(
            out,
            Op::Matmul {
                a,
                b,
                trans_a,
                trans_b,
            },
            &[a, b],
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = kernels::softmax_rows(self.value(x));
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = kernels::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let out = kernels::mean_rows(self.value(x));
        self.push(out, Op::MeanRows(x), &[x])
    }

    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::fully_connected(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::FullyConnected { x, w, b }, &[x, w, b]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_channels(&values)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn to_tokens(&mut self, x: Var) -> Var {
        let out = kernels::to_tokens(self.value(x));
        self.push(out, Op::ToTokens(x), &[x])
    }

    pub fn from_tokens(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let out = kernels::from_tokens(self.value(x), height, width)?;
        Ok(self.push(out, Op::FromTokens(x), &[x]))
    }

    pub fn scale_rows(&mut self, m: Var, s: Var) -> Result<Var> {
        let out = kernels::scale_rows(self.value(m), self.value(s))?;
        Ok(self.push(out, Op::ScaleRows { m, s }, &[m, s]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let k = T::from_f64_lossy(factor);
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// Scalar mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let loss = kernels::l1_loss(self.value(a), self.value(b))?;
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::L1 { a, b },
            &[a, b],
        ))
    }

    /// Scalar `sum(x * weights)` for a constant `weights`.
    pub fn dot_const(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let v = self.value(x).dot(&weights)?;
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(v)),
            Op::Dot { x, weights },
            &[x],
        ))
    }

    /// Scalar `sum(x^2)`.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.dot(v).expect("same shape");
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::SumSquares(x), &[x])
    }

    /// Arithmetic mean of equally shaped nodes.
    pub fn mean_of(&mut self, items: &[Var]) -> Result<Var> {
        let (&first, rest) = items
            .split_first()
            .ok_or_else(|| PahsError::Contract("mean of zero nodes".into()))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(self.scale(acc, 1.0 / items.len() as f64))
    }

    /// Propagates d(loss)/d(node) back to every node that needs a gradient.
    ///
    /// `loss` must hold exactly one element.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss);
        if loss_shape.numel() != 1 {
            return Err(PahsError::Contract(format!(
                "backward needs a scalar loss, got shape {loss_shape}"
            )));
        }
        let shapes: Vec<Shape> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_shape, T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let (dx, dw, db) = if spec.transposed {
                    kernels::conv2d_transpose_backward(self.value(*x), self.value(*w), spec, g)?
                } else {
                    kernels::conv2d_backward(self.value(*x), self.value(*w), spec, g)?
                };
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *w, dw)?;
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Matmul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                // C = op(A) op(B)
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = if *trans_a {
                    kernels::matmul_ex(bv, g, *trans_b, true)?
                } else {
                    kernels::matmul_ex(g, bv, false, !*trans_b)?
                };
                let db = if *trans_b {
                    kernels::matmul_ex(g, av, true, *trans_a)?
                } else {
                    kernels::matmul_ex(av, g, !*trans_a, false)?
                };
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Softmax(x) => {
                let dx = kernels::softmax_rows_backward(&node.value, g);
                self.accumulate(grads, *x, dx)?;
            }
            Op::Sigmoid(x) => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d = *d * y * (T::one() - y);
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::MeanRows(x) => {
                let xs = self.shape(*x);
                let inv = T::from_f64_lossy(1.0 / xs.w.max(1) as f64);
                let mut dx = Tensor::zeros(xs);
                for (row, &gv) in dx.data_mut().chunks_mut(xs.w.max(1)).zip(g.data()) {
                    row.iter_mut().for_each(|v| *v = gv * inv);
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::FullyConnected { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let rows = xs.n * xs.c * xs.h;
                let (fan_out, fan_in) = (ws.h, ws.w);
                let mut dx = vec![T::zero(); xs.numel()];
                T::gemm(
                    rows, fan_out, fan_in,
                    g.data(), (fan_out, 1),
                    self.value(*w).data(), (fan_in, 1),
                    &mut dx, (fan_in, 1),
                    false,
                );
                let mut dw = vec![T::zero(); ws.numel()];
                T::gemm(
                    fan_out, rows, fan_in,
                    g.data(), (1, fan_out),
                    self.value(*x).data(), (fan_in, 1),
                    &mut dw, (fan_in, 1),
                    false,
                );
                let mut db = vec![0.0f64; fan_out];
                for row in g.data().chunks(fan_out.max(1)) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v.as_f64();
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, dx)?)?;
                self.accumulate(grads, *w, Tensor::new(ws, dw)?)?;
                let db = db.into_iter().map(T::from_f64_lossy).collect();
                self.accumulate(grads, *b, Tensor::new(self.shape(*b), db)?)?;
            }
            Op::Concat(parts) => {
                let gs = g.shape();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    let piece = Tensor::from_fn(ps, |n, c, h, w| g.at(n, offset + c, h, w));
                    offset += ps.c;
                    debug_assert!(offset <= gs.c);
                    self.accumulate(grads, p, piece)?;
                }
            }
            Op::ToTokens(x) => {
                let xs = self.shape(*x);
                let dx = kernels::from_tokens(g, xs.h, xs.w)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::FromTokens(x) => {
                self.accumulate(grads, *x, kernels::to_tokens(g))?;
            }
            Op::ScaleRows { m, s } => {
                let (mv, sv) = (self.value(*m), self.value(*s));
                let dm = kernels::scale_rows(g, sv)?;
                let width = mv.shape().w.max(1);
                let ds: Vec<T> = g
                    .data()
                    .chunks(width)
                    .zip(mv.data().chunks(width))
                    .map(|(gr, mr)| {
                        T::from_f64_lossy(gr.iter().zip(mr).map(|(a, b)| a.as_f64() * b.as_f64()).sum())
                    })
                    .collect();
                self.accumulate(grads, *m, dm)?;
                self.accumulate(grads, *s, Tensor::new(sv.shape(), ds)?)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Scale(x, factor) => {
                let k = T::from_f64_lossy(*factor);
                self.accumulate(grads, *x, g.map(|v| v * k))?;
            }
            Op::L1 { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = g.data()[0] / T::from_usize(av.numel()).unwrap_or_else(T::one);
                let mut da = Tensor::zeros(av.shape());
                for ((d, &x), &y) in da.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                    *d = if x > y {
                        k
                    } else if x < y {
                        -k
                    } else {
                        T::zero()
                    };
                }
                let db = da.map(|v| -v);
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Dot { x, weights } => {
                let k = g.data()[0];
                self.accumulate(grads, *x, weights.map(|v| v * k))?;
            }
            Op::SumSquares(x) => {
                let k = g.data()[0] + g.data()[0];
                self.accumulate(grads, *x, self.value(*x).map(|v| v * k))?;
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[var.0].needs_grad {
            return Ok(());
        }
        check_same("backward", self.shape(var), g.shape())?;
        match &mut grads[var.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}
