//! Reverse-mode differentiation over a linear tape.
//!
//! Each op appends a node holding its output value and enough information to
//! route gradients back to its inputs. Nodes are appended in evaluation order,
//! so a reverse sweep over the tape is a valid topological order. A tape is
//! differentiated at most once.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{self, Shape4, Tensor4};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    LeakyRelu(Var),
    Sigmoid(Var),
    Upsample(Var),
    Concat(Var, Var),
    Add(Var, Var),
    SplitToDepth {
        input: Var,
        grid: usize,
    },
    Sum(Var),
    SumSquares(Var),
    /// Scalar whose gradient with respect to `input` was computed in the
    /// forward pass (used by the fused detection loss).
    Fused {
        input: Var,
        grad: Tensor4,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor4>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Tensor4>>,
    consumed: bool,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, value: Cow<'a, Tensor4>, op: Op, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Owned leaf.
    pub fn leaf(&mut self, value: Tensor4, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("leaf")?;
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Borrowed trainable leaf; weights are not copied onto the tape.
    pub fn param(&mut self, value: &'a Tensor4) -> Result<Var> {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Borrowed leaf that does not receive a gradient.
    pub fn constant(&mut self, value: &'a Tensor4) -> Result<Var> {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Gradient of the last backward pass with respect to `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor4> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor4> {
        self.grads[v.0].take()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let out = tensor::conv2d_raw(self.value(input), self.value(weight), self.value(bias), stride)?;
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(
            Cow::Owned(out),
            Op::Conv {
                input,
                weight,
                bias,
                stride,
            },
            rg,
        )
    }

    pub fn leaky_relu(&mut self, input: Var) -> Result<Var> {
        let out = tensor::leaky_relu(self.value(input));
        let rg = self.needs(input);
        self.push(Cow::Owned(out), Op::LeakyRelu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = tensor::sigmoid(self.value(input));
        let rg = self.needs(input);
        self.push(Cow::Owned(out), Op::Sigmoid(input), rg)
    }

    pub fn upsample_nearest_2x(&mut self, input: Var) -> Result<Var> {
        let out = tensor::upsample_nearest_2x(self.value(input));
        let rg = self.needs(input);
        self.push(Cow::Owned(out), Op::Upsample(input), rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::concat_channels(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(out), Op::Concat(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(out), Op::Add(a, b), rg)
    }

    pub fn split_to_depth(&mut self, input: Var, grid: usize) -> Result<Var> {
        let out = crate::net::split_to_depth(self.value(input), grid)?;
        let rg = self.needs(input);
        self.push(Cow::Owned(out), Op::SplitToDepth { input, grid }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = Tensor4::scalar(self.value(input).sum());
        out.ensure_finite("sum")?;
        let rg = self.needs(input);
        self.push(Cow::Owned(out), Op::Sum(input), rg)
    }

    pub fn sum_squares(&mut self, input: Var) -> Result<Var> {
        let out = Tensor4::scalar(self.value(input).data().iter().map(|v| v * v).sum());
        out.ensure_finite("sum_squares")?;
        let rg = self.needs(input);
        self.push(Cow::Owned(out), Op::SumSquares(input), rg)
    }

    /// Records a scalar `value` with a precomputed gradient `d value / d input`.
    pub(crate) fn fused_scalar(&mut self, input: Var, value: f64, grad: Tensor4) -> Result<Var> {
        if grad.shape() != self.value(input).shape() {
            return Err(Error::Dimension(format!(
                "fused gradient shape {} does not match input {}",
                grad.shape(),
                self.value(input).shape()
            )));
        }
        let out = Tensor4::scalar(value);
        out.ensure_finite("loss")?;
        grad.ensure_finite("loss gradient")?;
        let rg = self.needs(input);
        self.push(Cow::Owned(out), Op::Fused { input, grad }, rg)
    }

    fn accumulate(&mut self, v: Var, g: Tensor4) {
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Populates gradients of `loss` for every node that requires one, then
    /// marks the tape consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("loss node {} is not on this tape", loss.0)));
        }
        let shape = self.value(loss).shape();
        if shape != Shape4::new(1, 1, 1, 1) {
            return Err(Error::Dimension(format!(
                "backward needs a (1, 1, 1, 1) loss, got {shape}"
            )));
        }
        self.consumed = true;
        if !self.needs(loss) {
            return Ok(());
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor4::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            // Leaves keep their gradient; interior nodes keep theirs too but
            // a clone is routed to the inputs.
            let Some(g) = self.grads[idx].as_ref() else {
                continue;
            };
            let routed = self.route(idx, g)?;
            for (v, gi) in routed {
                if self.needs(v) {
                    gi.ensure_finite("backward")?;
                    self.accumulate(v, gi);
                }
            }
        }
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        Ok(())
    }

    fn route(&self, idx: usize, g: &Tensor4) -> Result<Vec<(Var, Tensor4)>> {
        let node = &self.nodes[idx];
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv {
                input,
                weight,
                bias,
                stride,
            } => {
                let (dx, dw, db) = tensor::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    *stride,
                    g,
                    self.needs(*input),
                );
                let mut out = vec![(*weight, dw), (*bias, db)];
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                out
            }
            Op::LeakyRelu(x) => vec![(*x, tensor::leaky_relu_backward(self.value(*x), g))],
            Op::Sigmoid(x) => vec![(*x, tensor::sigmoid_backward(&node.value, g))],
            Op::Upsample(x) => vec![(
                *x,
                tensor::upsample_nearest_2x_backward(self.value(*x).shape(), g),
            )],
            Op::Concat(a, b) => {
                let (ga, gb) = tensor::split_channels(g, self.value(*a).shape().channels)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::SplitToDepth { input, grid } => {
                vec![(*input, crate::net::merge_from_depth(g, *grid)?)]
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                vec![(*x, Tensor4::filled(self.value(*x).shape(), s))]
            }
            Op::SumSquares(x) => {
                let s = g.data()[0];
                vec![(*x, self.value(*x).map(|v| 2.0 * s * v))]
            }
            Op::Fused { input, grad } => {
                let s = g.data()[0];
                vec![(*input, grad.map(|v| s * v))]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvParams;

    fn pseudo(shape: impl Into<Shape4>, seed: u64) -> Tensor4 {
        let mut state = seed ^ 0x9E37_79B9_7F4A_7C15;
        Tensor4::from_fn(shape, |_, _, _, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(pseudo([1, 2, 3, 3], 1), true).unwrap();
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn power_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor4::scalar(3.0), true).unwrap();
        let l = tape.sum_squares(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn second_backward_is_a_state_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor4::scalar(1.0), true).unwrap();
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::GraphConsumed)));
        assert!(matches!(tape.sum(x), Err(Error::GraphConsumed)));
    }

    #[test]
    fn backward_needs_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(pseudo([1, 1, 2, 2], 2), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = sum(x + x) → grad 2
        let mut tape = Tape::new();
        let x = tape.leaf(pseudo([1, 1, 2, 2], 3), true).unwrap();
        let y = tape.add(x, x).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn constants_get_no_gradient() {
        let c = pseudo([1, 1, 2, 2], 4);
        let mut tape = Tape::new();
        let x = tape.leaf(pseudo([1, 1, 2, 2], 5), true).unwrap();
        let k = tape.constant(&c).unwrap();
        let y = tape.add(x, k).unwrap();
        let l = tape.sum_squares(y).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(k).is_none());
        assert!(tape.grad(x).is_some());
    }

    /// Builds loss = Σ (f(x))² for a small composed graph touching every op.
    fn composed_loss(x: &Tensor4, p1: &ConvParams, p2: &ConvParams, p3: &ConvParams) -> (f64, [Tensor4; 4]) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true).unwrap();
        let w1 = tape.param(&p1.weight).unwrap();
        let b1 = tape.param(&p1.bias).unwrap();
        let w2 = tape.param(&p2.weight).unwrap();
        let b2 = tape.param(&p2.bias).unwrap();
        let w3 = tape.param(&p3.weight).unwrap();
        let b3 = tape.param(&p3.bias).unwrap();

        let a = tape.conv2d(xv, w1, b1, 2).unwrap();
        let a = tape.leaky_relu(a).unwrap();
        let up = tape.upsample_nearest_2x(a).unwrap();
        let cat = tape.concat_channels(up, xv).unwrap();
        let c = tape.conv2d(cat, w2, b2, 1).unwrap();
        let c = tape.sigmoid(c).unwrap();
        let d = tape.conv2d(c, w3, b3, 1).unwrap();
        let d = tape.add(d, c).unwrap();
        let s = tape.split_to_depth(d, 2).unwrap();
        let l = tape.sum_squares(s).unwrap();
        let value = tape.value(l).data()[0];
        tape.backward(l).unwrap();
        (
            value,
            [
                tape.grad(xv).unwrap().clone(),
                tape.grad(w1).unwrap().clone(),
                tape.grad(w2).unwrap().clone(),
                tape.grad(b3).unwrap().clone(),
            ],
        )
    }

    #[test]
    fn composed_graph_matches_finite_differences() {
        // 2 ch/cell·... : d has 20 channels at 2×2 → split into a 2³ grid of 10 slots.
        let x = pseudo([1, 3, 2, 2], 10);
        let p1 = ConvParams::new(pseudo([4, 3, 3, 3], 11), pseudo([1, 4, 1, 1], 12), 2).unwrap();
        let p2 = ConvParams::new(pseudo([20, 7, 3, 3], 13), pseudo([1, 20, 1, 1], 14), 1).unwrap();
        let p3 = ConvParams::new(pseudo([20, 20, 1, 1], 15).map(|v| 0.3 * v), pseudo([1, 20, 1, 1], 16), 1).unwrap();
        let (_, grads) = composed_loss(&x, &p1, &p2, &p3);

        let eps = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * eps);
            if analytic.abs() > 1e-6 || fd.abs() > 1e-6 {
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
                assert!(rel < 1e-4, "analytic {analytic} vs fd {fd}");
            }
        };
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            check(
                grads[0].data()[i],
                composed_loss(&xp, &p1, &p2, &p3).0,
                composed_loss(&xm, &p1, &p2, &p3).0,
            );
        }
        for i in (0..p1.weight.len()).step_by(7) {
            let mut pp = p1.clone();
            pp.weight.data_mut()[i] += eps;
            let mut pm = p1.clone();
            pm.weight.data_mut()[i] -= eps;
            check(
                grads[1].data()[i],
                composed_loss(&x, &pp, &p2, &p3).0,
                composed_loss(&x, &pm, &p2, &p3).0,
            );
        }
        for i in (0..p2.weight.len()).step_by(37) {
            let mut pp = p2.clone();
            pp.weight.data_mut()[i] += eps;
            let mut pm = p2.clone();
            pm.weight.data_mut()[i] -= eps;
            check(
                grads[2].data()[i],
                composed_loss(&x, &p1, &pp, &p3).0,
                composed_loss(&x, &p1, &pm, &p3).0,
            );
        }
        for i in 0..p3.bias.len() {
            let mut pp = p3.clone();
            pp.bias.data_mut()[i] += eps;
            let mut pm = p3.clone();
            pm.bias.data_mut()[i] -= eps;
            check(
                grads[3].data()[i],
                composed_loss(&x, &p1, &p2, &pp).0,
                composed_loss(&x, &p1, &p2, &pm).0,
            );
        }
    }
}
