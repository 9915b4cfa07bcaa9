//! Reverse-mode automatic differentiation over a fixed operator set.
//!
//! A [`Graph`] is a define-by-run tape: every builder method evaluates its
//! op immediately, stores the result, and returns a [`Var`] handle. Node
//! indices are a topological order, so [`Graph::backward`] is a single
//! reverse sweep that visits each node once.
//!
//! Spiking nonlinearities use a [`SurrogateSpec`] in place of their true
//! derivative. In [`FireMode::Relaxed`] the hard step itself is replaced by
//! the surrogate's primitive, so finite differences of the forward pass
//! agree with the backward pass.

pub mod conv;
mod surrogate;

pub use self::conv::ConvGeom;
pub use self::surrogate::{SurrogateKind, SurrogateSpec};

use crate::error::{Error, Result};
use crate::substrate::{fire, fire_segment, FireMode, NeuronParams};
use crate::tensor::Tensor;

/// Handle to one output of a graph node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    node: usize,
    slot: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Maximum(Var, f64),
    Clamp(Var, f64, f64),
    Spike {
        u: Var,
        v_th: f64,
    },
    /// Fused leak-integrate-fire-reset. Outputs: spikes, membrane after
    /// reset, potential before reset.
    Neuron {
        u_prev: Option<Var>,
        x: Var,
        params: NeuronParams,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    outputs: Vec<Tensor>,
    needs_grad: bool,
}

/// Outputs of one neuron update.
#[derive(Clone, Copy, Debug)]
pub struct NeuronOut {
    pub spikes: Var,
    pub membrane: Var,
    pub potential: Var,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    surrogate: SurrogateSpec,
    mode: FireMode,
}

impl Graph {
    pub fn new(surrogate: SurrogateSpec) -> Self {
        Self::with_mode(surrogate, FireMode::Hard)
    }

    pub fn with_mode(surrogate: SurrogateSpec, mode: FireMode) -> Self {
        Self {
            nodes: Vec::new(),
            surrogate,
            mode,
        }
    }

    pub fn mode(&self) -> FireMode {
        self.mode
    }

    pub fn surrogate(&self) -> &SurrogateSpec {
        &self.surrogate
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.node].outputs[v.slot]
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn grad_flag(&self, v: Var) -> bool {
        self.nodes[v.node].needs_grad
    }

    fn push(&mut self, name: &'static str, op: Op, outputs: Vec<Tensor>, needs_grad: bool) -> Result<usize> {
        if !outputs.iter().all(Tensor::is_finite) {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            op,
            outputs,
            needs_grad,
        });
        Ok(self.nodes.len() - 1)
    }

    fn push1(&mut self, name: &'static str, op: Op, out: Tensor, needs_grad: bool) -> Result<Var> {
        let node = self.push(name, op, vec![out], needs_grad)?;
        Ok(Var { node, slot: 0 })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push1("leaf", Op::Leaf, value, requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// A leaf that does not.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// `x: [C_in, H, W]`, `w: [C_out, C_in, K, K]`, `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: vec![ws.first().copied().unwrap_or(0), xs.first().copied().unwrap_or(0)],
                got: ws,
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    expected: vec![ws[0]],
                    got: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            in_ch: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            out_ch: ws[0],
            kernel: ws[2],
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw().ok_or_else(|| {
            Error::InvalidConfig(format!("conv2d geometry {geom:?} yields an empty output"))
        })?;
        let data = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::from_vec(&[geom.out_ch, oh, ow], data)?;
        let ng = self.grad_flag(x) || self.grad_flag(w) || b.is_some_and(|b| self.grad_flag(b));
        self.push1("conv2d", Op::Conv2d { x, w, b, geom }, out, ng)
    }

    /// `y = W x + b` with `x` flattened, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let n_in = self.value(x).len();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[1] != n_in {
            return Err(Error::ShapeMismatch {
                op: "linear",
                expected: vec![ws.first().copied().unwrap_or(0), n_in],
                got: ws,
            });
        }
        let n_out = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [n_out] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    expected: vec![n_out],
                    got: self.shape(b).to_vec(),
                });
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let data: Vec<f64> = (0..n_out)
            .map(|i| {
                let row = &wd[i * n_in..(i + 1) * n_in];
                let dot: f64 = row.iter().zip(xd).map(|(a, b)| a * b).sum();
                dot + b.map_or(0.0, |b| self.value(b).data()[i])
            })
            .collect();
        let out = Tensor::from_vec(&[n_out], data)?;
        let ng = self.grad_flag(x) || self.grad_flag(w) || b.is_some_and(|b| self.grad_flag(b));
        self.push1("linear", Op::Linear { x, w, b }, out, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.grad_flag(a) || self.grad_flag(b);
        self.push1("add", Op::Add(a, b), out, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        let ng = self.grad_flag(a);
        self.push1("scale", Op::Scale(a, c), out, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.grad_flag(a) || self.grad_flag(b);
        self.push1("mul", Op::Mul(a, b), out, ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.grad_flag(a);
        self.push1("relu", Op::Relu(a), out, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let ng = self.grad_flag(a);
        self.push1("sigmoid", Op::Sigmoid(a), out, ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.grad_flag(a);
        self.push1("sum", Op::Sum(a), out, ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.grad_flag(a);
        self.push1("mean", Op::Mean(a), out, ng)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let sq: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(sq / ta.len() as f64);
        let ng = self.grad_flag(a) || self.grad_flag(b);
        self.push1("mse", Op::Mse(a, b), out, ng)
    }

    /// Elementwise `max(a, c)`.
    pub fn maximum(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(c));
        let ng = self.grad_flag(a);
        self.push1("maximum", Op::Maximum(a, c), out, ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.grad_flag(a);
        self.push1("clamp", Op::Clamp(a, lo, hi), out, ng)
    }

    /// Binary spikes where `u > v_th` (hard mode).
    pub fn spike(&mut self, u: Var, v_th: f64) -> Result<Var> {
        let s = self.surrogate;
        let out = match self.mode {
            FireMode::Hard => self.value(u).map(|x| if x > v_th { 1.0 } else { 0.0 }),
            FireMode::Relaxed => self.value(u).map(|x| s.primitive(x - v_th)),
        };
        let ng = self.grad_flag(u);
        self.push1("spike", Op::Spike { u, v_th }, out, ng)
    }

    /// One neuron update from membrane `u_prev` (resting when `None`) and
    /// input current `x`.
    pub fn neuron(&mut self, u_prev: Option<Var>, x: Var, params: NeuronParams) -> Result<NeuronOut> {
        if let Some(u) = u_prev {
            self.same_shape("neuron", u, x)?;
        }
        let beta = params.effective_beta();
        let shape = self.shape(x).to_vec();
        let xd = self.value(x).data();
        let n = xd.len();
        let mut potential = Vec::with_capacity(n);
        match u_prev {
            Some(u) => {
                let ud = self.value(u).data();
                potential.extend(ud.iter().zip(xd).map(|(u, x)| beta * u + x));
            }
            None => potential.extend_from_slice(xd),
        }
        let mut spikes = Vec::with_capacity(n);
        let mut membrane = Vec::with_capacity(n);
        for &v in &potential {
            let f = fire(&params, &self.surrogate, self.mode, v);
            spikes.push(f.spike);
            membrane.push(f.membrane);
        }
        let outputs = vec![
            Tensor::from_vec(&shape, spikes)?,
            Tensor::from_vec(&shape, membrane)?,
            Tensor::from_vec(&shape, potential)?,
        ];
        let ng = self.grad_flag(x) || u_prev.is_some_and(|u| self.grad_flag(u));
        let node = self.push("neuron", Op::Neuron { u_prev, x, params }, outputs, ng)?;
        Ok(NeuronOut {
            spikes: Var { node, slot: 0 },
            membrane: Var { node, slot: 1 },
            potential: Var { node, slot: 2 },
        })
    }

    /// Gradients of `output` with respect to every leaf that requires one.
    /// `seed` defaults to 1 for scalar outputs.
    pub fn backward(&self, output: Var, seed: Option<&Tensor>) -> Result<Gradients> {
        let node = self
            .nodes
            .get(output.node)
            .ok_or(Error::BackwardBeforeForward(output.node))?;
        let out_val = node
            .outputs
            .get(output.slot)
            .ok_or(Error::BackwardBeforeForward(output.node))?;
        let seed = match seed {
            Some(s) => {
                out_val.expect_shape("backward seed", s.shape())?;
                s.clone()
            }
            None if out_val.len() == 1 => Tensor::full(out_val.shape(), 1.0),
            None => {
                return Err(Error::ShapeMismatch {
                    op: "backward (implicit seed needs a scalar)",
                    expected: vec![],
                    got: out_val.shape().to_vec(),
                })
            }
        };

        let mut grads: Vec<Vec<Option<Tensor>>> =
            self.nodes.iter().map(|n| vec![None; n.outputs.len()]).collect();
        grads[output.node][output.slot] = Some(seed);

        for idx in (0..=output.node).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            if grads[idx].iter().all(Option::is_none) {
                continue;
            }
            let g_out = std::mem::take(&mut grads[idx]);
            self.backprop_node(node, &g_out, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g_out: &[Option<Tensor>], grads: &mut [Vec<Option<Tensor>>]) -> Result<()> {
        let g = |slot: usize| g_out[slot].as_ref();
        let send = |grads: &mut [Vec<Option<Tensor>>], v: Var, t: Tensor| -> Result<()> {
            if !self.grad_flag(v) {
                return Ok(());
            }
            match &mut grads[v.node][v.slot] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let go = g(0).expect("conv has one output");
                let mut gx = self.grad_flag(*x).then(|| vec![0.0; self.value(*x).len()]);
                let mut gw = self.grad_flag(*w).then(|| vec![0.0; self.value(*w).len()]);
                let mut gb = b
                    .filter(|b| self.grad_flag(*b))
                    .map(|_| vec![0.0; geom.out_ch]);
                conv::backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    go.data(),
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    send(grads, *x, Tensor::from_vec(self.shape(*x), gx)?)?;
                }
                if let Some(gw) = gw {
                    send(grads, *w, Tensor::from_vec(self.shape(*w), gw)?)?;
                }
                if let (Some(gb), Some(b)) = (gb, b) {
                    send(grads, *b, Tensor::from_vec(&[geom.out_ch], gb)?)?;
                }
            }
            Op::Linear { x, w, b } => {
                let go = g(0).expect("linear has one output").data();
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let n_in = xd.len();
                if self.grad_flag(*x) {
                    let mut gx = vec![0.0; n_in];
                    for (i, gi) in go.iter().enumerate() {
                        for (j, gxj) in gx.iter_mut().enumerate() {
                            *gxj += gi * wd[i * n_in + j];
                        }
                    }
                    send(grads, *x, Tensor::from_vec(self.shape(*x), gx)?)?;
                }
                if self.grad_flag(*w) {
                    let gw: Vec<f64> = go
                        .iter()
                        .flat_map(|gi| xd.iter().map(move |xj| gi * xj))
                        .collect();
                    send(grads, *w, Tensor::from_vec(self.shape(*w), gw)?)?;
                }
                if let Some(b) = b {
                    send(grads, *b, Tensor::from_vec(&[go.len()], go.to_vec())?)?;
                }
            }
            Op::Add(a, b) => {
                let go = g(0).unwrap();
                send(grads, *a, go.clone())?;
                send(grads, *b, go.clone())?;
            }
            Op::Scale(a, c) => {
                send(grads, *a, g(0).unwrap().map(|v| c * v))?;
            }
            Op::Mul(a, b) => {
                let go = g(0).unwrap();
                send(grads, *a, go.zip_map(self.value(*b), |g, y| g * y)?)?;
                send(grads, *b, go.zip_map(self.value(*a), |g, x| g * x)?)?;
            }
            Op::Relu(a) => {
                let t = g(0)
                    .unwrap()
                    .zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                send(grads, *a, t)?;
            }
            Op::Sigmoid(a) => {
                let t = g(0)
                    .unwrap()
                    .zip_map(&node.outputs[0], |g, y| g * y * (1.0 - y))?;
                send(grads, *a, t)?;
            }
            Op::Sum(a) => {
                let go = g(0).unwrap().item();
                send(grads, *a, Tensor::full(self.shape(*a), go))?;
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let go = g(0).unwrap().item();
                send(grads, *a, Tensor::full(self.shape(*a), go / n))?;
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len() as f64;
                let go = g(0).unwrap().item();
                let diff = self.value(*a).zip_map(self.value(*b), |x, y| 2.0 * go * (x - y) / n)?;
                send(grads, *b, diff.map(|v| -v))?;
                send(grads, *a, diff)?;
            }
            Op::Maximum(a, c) => {
                let t = g(0)
                    .unwrap()
                    .zip_map(self.value(*a), |g, x| if x > *c { g } else { 0.0 })?;
                send(grads, *a, t)?;
            }
            Op::Clamp(a, lo, hi) => {
                let t = g(0).unwrap().zip_map(self.value(*a), |g, x| {
                    if x >= *lo && x <= *hi {
                        g
                    } else {
                        0.0
                    }
                })?;
                send(grads, *a, t)?;
            }
            Op::Spike { u, v_th } => {
                let s = self.surrogate;
                let t = g(0)
                    .unwrap()
                    .zip_map(self.value(*u), |g, x| g * s.grad(x - v_th))?;
                send(grads, *u, t)?;
            }
            Op::Neuron { u_prev, x, params } => {
                let potential = &node.outputs[2];
                let mut dv = vec![0.0; potential.len()];
                for (i, &v) in potential.data().iter().enumerate() {
                    let f = fire(params, &self.surrogate, self.mode, v);
                    let mut acc = 0.0;
                    if let Some(gs) = g(0) {
                        acc += gs.data()[i] * f.d_spike;
                    }
                    if let Some(gu) = g(1) {
                        acc += gu.data()[i] * f.d_membrane;
                    }
                    if let Some(gv) = g(2) {
                        acc += gv.data()[i];
                    }
                    dv[i] = acc;
                }
                let dv = Tensor::from_vec(potential.shape(), dv)?;
                if let Some(u) = u_prev {
                    let beta = params.effective_beta();
                    send(grads, *u, dv.map(|v| beta * v))?;
                }
                send(grads, *x, dv)?;
            }
        }
        Ok(())
    }

    /// Fingerprint of which smooth piece every piecewise op is evaluated
    /// on. Two forward passes with equal signatures lie in a common region
    /// where the graph output is differentiable.
    pub fn kink_signature(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: i64| {
            h ^= v as u64;
            h = h.wrapping_mul(PRIME);
        };
        let s = self.surrogate;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => self.value(*a).data().iter().for_each(|&x| mix((x > 0.0) as i64)),
                Op::Maximum(a, c) => self.value(*a).data().iter().for_each(|&x| mix((x > *c) as i64)),
                Op::Clamp(a, lo, hi) => self
                    .value(*a)
                    .data()
                    .iter()
                    .for_each(|&x| mix((x < *lo) as i64 * 2 + (x > *hi) as i64)),
                Op::Spike { u, v_th } => self.value(*u).data().iter().for_each(|&x| {
                    mix(match self.mode {
                        FireMode::Hard => (x > *v_th) as i64,
                        FireMode::Relaxed => s.segment(x - v_th) as i64,
                    })
                }),
                Op::Neuron { params, .. } => node.outputs[2]
                    .data()
                    .iter()
                    .for_each(|&v| mix(fire_segment(params, &s, self.mode, v))),
                _ => {}
            }
        }
        h
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Vec<Option<Tensor>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.node)?.get(v.slot)?.as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.node)?.get_mut(v.slot)?.take()
    }
}

#[cfg(test)]
mod tests;
