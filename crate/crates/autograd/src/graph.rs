//! Define-by-run tape. Every op appends a node; `backward` walks the tape in
//! reverse and accumulates gradients into the leaves and parameters.

use std::collections::HashMap;

use crate::conv::{self, ConvSpec};
use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{self, AxisTaps, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// An op whose forward value is computed by the caller and whose backward is
/// supplied here.
pub trait CustomOp {
    fn name(&self) -> &str;

    /// Gradient w.r.t. each input, in the order the inputs were recorded.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Add(Var, Var),
    AddBroadcast {
        x: Var,
        b: Var,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    Lerp {
        gate: Var,
        a: Var,
        b: Var,
    },
    Sigmoid(Var),
    Relu(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
    Resize(Var),
    GlobalAvgPool(Var),
    SumAll(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    bound: HashMap<ParamId, Var>,
    store: Option<u64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A tape that records ops for backpropagation.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            bound: HashMap::new(),
            store: None,
        }
    }

    /// A tape that only evaluates values; `backward` yields no gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter; repeated binds return the same node.
    ///
    /// A graph serves one store. Binding from a second store panics, since
    /// parameter ids are only unique within a store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        match self.store {
            None => self.store = Some(store.uid()),
            Some(uid) => assert_eq!(uid, store.uid(), "graph already bound to another parameter store"),
        }
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let value = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, spec }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `x + b` where `b` is `[N or 1, C, 1, 1]`, broadcast over space (and batch).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.c != xs.c || bs.h != 1 || bs.w != 1 || (bs.n != xs.n && bs.n != 1) {
            return Err(TensorError::ShapeMismatch {
                expected: Shape::new(xs.n, xs.c, 1, 1),
                actual: bs,
            });
        }
        let mut value = self.value(x).clone();
        let bias = self.value(b);
        for n in 0..xs.n {
            for c in 0..xs.c {
                let add = bias.data()[if bs.n == 1 { c } else { n * xs.c + c }];
                value.plane_mut(n, c).iter_mut().for_each(|v| *v += add);
            }
        }
        Ok(self.push(value, Op::AddBroadcast { x, b }, &[x, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v * k);
        self.push(value, Op::Scale(x, k), &[x])
    }

    /// `gate ⊙ a + (1 − gate) ⊙ b`, evaluated as `b + gate ⊙ (a − b)` so that
    /// equal branches pass through unchanged.
    pub fn lerp(&mut self, gate: Var, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(gate);
        self.value(a).expect_shape(s)?;
        self.value(b).expect_shape(s)?;
        let (g, av, bv) = (self.value(gate), self.value(a), self.value(b));
        let data = g
            .data()
            .iter()
            .zip(av.data().iter().zip(bv.data()))
            .map(|(&w, (&x, &y))| y + w * (x - y))
            .collect();
        let value = Tensor::from_vec(s, data)?;
        Ok(self.push(value, Op::Lerp { gate, a, b }, &[gate, a, b]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    /// Group normalization with per-channel affine `gamma`, `beta` of shape `[1, C, 1, 1]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x);
        let affine = Shape::new(1, xs.c, 1, 1);
        self.value(gamma).expect_shape(affine)?;
        self.value(beta).expect_shape(affine)?;
        if groups == 0 || xs.c % groups != 0 {
            return Err(TensorError::Conv(format!("group norm: {groups} groups for {} channels", xs.c)));
        }
        let per_group = xs.c / groups * xs.plane();
        let mut xhat = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(xs.n * groups);
        for chunk in xhat.data_mut().chunks_mut(per_group) {
            let mean = chunk.iter().sum::<f64>() / per_group as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
            let istd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * istd);
            inv_std.push(istd);
        }
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut value = xhat.clone();
        for n in 0..xs.n {
            for c in 0..xs.c {
                let (g, b) = (gm[c], bt[c]);
                value.plane_mut(n, c).iter_mut().for_each(|v| *v = g * *v + b);
            }
        }
        let op = Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            xhat,
            inv_std,
        };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_channels(&tensors)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Bilinear resize to `h × w` (identity when the size already matches).
    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        if self.shape(x).spatial() == (h, w) {
            return Ok(x);
        }
        let value = tensor::resize_bilinear(self.value(x), h, w)?;
        Ok(self.push(value, Op::Resize(x), &[x]))
    }

    /// Per-plane mean. Each plane is summed in ascending value order, so any
    /// spatial permutation of the input pools to the same bits.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let inv = 1.0 / s.plane() as f64;
        let src = self.value(x);
        let data = src
            .data()
            .chunks(s.plane())
            .map(|p| {
                let mut sorted = p.to_vec();
                sorted.sort_by(f64::total_cmp);
                sorted.iter().sum::<f64>() * inv
            })
            .collect();
        let value = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pooled shape");
        self.push(value, Op::GlobalAvgPool(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != Shape::scalar() {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let keep = matches!(node.op, Op::Leaf | Op::Param);
            self.propagate(node, &g, &mut grads)?;
            if keep {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            params: self.bound.iter().map(|(&p, &v)| (p, v)).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&t)?,
            slot @ None => *slot = Some(t),
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, spec } => {
                let need = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let cg = conv::conv2d_backward(self.value(*x), self.value(*w), g, spec, need)?;
                if let Some(dx) = cg.input {
                    self.accumulate(grads, *x, dx)?;
                }
                if let Some(dw) = cg.weight {
                    self.accumulate(grads, *w, dw)?;
                }
                if let (Some(b), Some(db)) = (b, cg.bias) {
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::AddBroadcast { x, b } => {
                self.accumulate(grads, *x, g.clone())?;
                if self.needs(*b) {
                    let bs = self.shape(*b);
                    let gs = g.shape();
                    let mut db = Tensor::zeros(bs);
                    for n in 0..gs.n {
                        for c in 0..gs.c {
                            let idx = if bs.n == 1 { c } else { n * gs.c + c };
                            db.data_mut()[idx] += g.plane(n, c).iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, g.map(|v| v * k))?,
            Op::Lerp { gate, a, b } => {
                let w = self.value(*gate);
                if self.needs(*gate) {
                    let diff = self.value(*a).zip_map(self.value(*b), |x, y| x - y)?;
                    self.accumulate(grads, *gate, g.zip_map(&diff, |x, y| x * y)?)?;
                }
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(w, |x, y| x * y)?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(w, |x, y| x * (1.0 - y))?)?;
                }
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Relu(x) => {
                let d = g.zip_map(&node.value, |gv, y| if y > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => self.group_norm_backward(grads, g, (*x, *gamma, *beta), *groups, xhat, inv_std)?,
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p).c;
                    if self.needs(p) {
                        self.accumulate(grads, p, g.narrow_channels(start, c)?)?;
                    }
                    start += c;
                }
            }
            Op::Resize(x) => {
                let xs = self.shape(*x);
                self.accumulate(grads, *x, resize_bilinear_backward(g, xs))?;
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let inv = 1.0 / xs.plane() as f64;
                let d = Tensor::from_fn(xs, |n, c, _, _| g.get(n, c, 0, 0) * inv);
                self.accumulate(grads, *x, d)?;
            }
            Op::SumAll(x) => {
                let d = Tensor::full(self.shape(*x), g.data()[0]);
                self.accumulate(grads, *x, d)?;
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let ds = op.backward(&values, &node.value, g);
                for (&v, d) in inputs.iter().zip(ds) {
                    if let Some(d) = d {
                        d.expect_shape(self.shape(v))?;
                        self.accumulate(grads, v, d)?;
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        (x, gamma, beta): (Var, Var, Var),
        groups: usize,
        xhat: &Tensor,
        inv_std: &[f64],
    ) -> Result<()> {
        let s = g.shape();
        let gm = self.value(gamma).data();
        if self.needs(gamma) || self.needs(beta) {
            let mut dgamma = Tensor::zeros(Shape::new(1, s.c, 1, 1));
            let mut dbeta = Tensor::zeros(Shape::new(1, s.c, 1, 1));
            for n in 0..s.n {
                for c in 0..s.c {
                    let (gp, xp) = (g.plane(n, c), xhat.plane(n, c));
                    dgamma.data_mut()[c] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                    dbeta.data_mut()[c] += gp.iter().sum::<f64>();
                }
            }
            self.accumulate(grads, gamma, dgamma)?;
            self.accumulate(grads, beta, dbeta)?;
        }
        if self.needs(x) {
            let cpg = s.c / groups;
            let m = (cpg * s.plane()) as f64;
            let mut dx = Tensor::zeros(s);
            for n in 0..s.n {
                for grp in 0..groups {
                    let istd = inv_std[n * groups + grp];
                    let channels = grp * cpg..(grp + 1) * cpg;
                    // dxhat = dy * gamma
                    let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                    for c in channels.clone() {
                        for (gv, xv) in g.plane(n, c).iter().zip(xhat.plane(n, c)) {
                            let d = gv * gm[c];
                            sum_d += d;
                            sum_dx += d * xv;
                        }
                    }
                    let (mean_d, mean_dx) = (sum_d / m, sum_dx / m);
                    for c in channels {
                        let out = dx.plane_mut(n, c);
                        for ((o, gv), xv) in out.iter_mut().zip(g.plane(n, c)).zip(xhat.plane(n, c)) {
                            *o = istd * (gv * gm[c] - mean_d - xv * mean_dx);
                        }
                    }
                }
            }
            self.accumulate(grads, x, dx)?;
        }
        Ok(())
    }
}

/// Numerically stable logistic function, clamped to the open interval so
/// saturated logits still map strictly inside (0, 1).
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn resize_bilinear_backward(g: &Tensor, input: Shape) -> Tensor {
    let gs = g.shape();
    let ty = AxisTaps::new(input.h, gs.h);
    let tx = AxisTaps::new(input.w, gs.w);
    let mut out = Tensor::zeros(input);
    for (dst, src) in out
        .data_mut()
        .chunks_mut(input.plane())
        .zip(g.data().chunks(gs.plane()))
    {
        for oy in 0..gs.h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..gs.w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let v = src[oy * gs.w + ox];
                let top = v * (1.0 - fy);
                let bottom = v * fy;
                dst[y0 * input.w + x0] += top * (1.0 - fx);
                dst[y0 * input.w + x1] += top * fx;
                dst[y1 * input.w + x0] += bottom * (1.0 - fx);
                dst[y1 * input.w + x1] += bottom * fx;
            }
        }
    }
    out
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient w.r.t. a leaf or parameter node (`None` if it received none).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.wrt(v))
    }

    /// All parameter gradients, sorted by parameter id.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor)> {
        self.params.sort();
        let mut out = Vec::with_capacity(self.params.len());
        for (p, v) in self.params {
            if let Some(t) = self.grads[v.0].take() {
                out.push((p, t));
            }
        }
        out
    }
}
