//! Tape-based reverse-mode differentiation over dense arrays.
//!
//! Operations are appended to a [`Tape`] in evaluation order, so the tape
//! itself is a topological order of the graph. [`Tape::backward`] walks it
//! once in reverse, accumulating adjoints into lazily allocated buffers.
//! Nodes that do not depend on any parameter never receive a gradient.

use std::sync::Arc;

use super::array::{Array, Shape};
use super::kernels::{self, ConvGeometry};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Abs,
    Exp,
    Neg,
    Clamp(f64, f64),
    Sigmoid,
    LeakyRelu(f64),
    AddScalar(f64),
    MulScalar(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    ReduceMean {
        a: usize,
        mask: Option<Arc<Array>>,
        count: f64,
    },
    ChannelMean(usize),
    AvgPool3(usize),
    HSample {
        source: usize,
        coords: usize,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeometry,
    },
    BiasAdd {
        input: usize,
        bias: usize,
    },
    Correlation {
        left: usize,
        right: usize,
        max_disp: usize,
    },
    SoftArgmin {
        volume: usize,
        tau: f64,
        probs: Vec<f64>,
    },
    HFlip(usize),
    Crop {
        a: usize,
        x0: usize,
        y0: usize,
    },
    DiffX(usize),
    DiffY(usize),
}

struct Node {
    value: Arc<Array>,
    op: Op,
    requires_grad: bool,
}

/// Records a differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, materializing zeros when nothing flowed.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Array {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(tape.value(v).shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Array>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_arc(&mut self, value: Arc<Array>) -> Var {
        self.push_arc(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Array> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Shares the value of `v` as a new node that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value_arc(v);
        self.constant_arc(value)
    }

    fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = if sa == sb || sb.is_scalar() {
            sa
        } else if sa.is_scalar() {
            sb
        } else {
            return Err(Error::shape("elementwise", format!("{kind:?} of {sa} and {sb}")));
        };
        let va = self.value(a).data();
        let vb = self.value(b).data();
        if kind == Binary::Div && vb.iter().any(|v| v.abs() < 1e-12) {
            return Err(Error::invalid("division by a value with magnitude below 1e-12"));
        }
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let n = out_shape.len();
        let data: Vec<f64> = match (va.len() == n, vb.len() == n) {
            (true, true) => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            (true, false) => va.iter().map(|&x| f(x, vb[0])).collect(),
            (false, true) => vb.iter().map(|&y| f(va[0], y)).collect(),
            (false, false) => vec![f(va[0], vb[0])],
        };
        let value = Array::from_kernel("elementwise", out_shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(kind, a.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Rejects any divisor element with magnitude below 1e-12.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let va = self.value(a);
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            Unary::Abs => Box::new(f64::abs),
            Unary::Exp => Box::new(f64::exp),
            Unary::Neg => Box::new(|x: f64| -x),
            Unary::Clamp(lo, hi) => Box::new(move |x: f64| x.clamp(lo, hi)),
            Unary::Sigmoid => Box::new(sigmoid),
            Unary::LeakyRelu(s) => Box::new(move |x: f64| if x > 0.0 { x } else { s * x }),
            Unary::AddScalar(s) => Box::new(move |x: f64| x + s),
            Unary::MulScalar(s) => Box::new(move |x: f64| x * s),
        };
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = Array::from_kernel("elementwise", va.shape(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Unary(kind, a.0), rg))
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    /// Gradient passes only where `lo < a < hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(Unary::Clamp(lo, hi), a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(Unary::LeakyRelu(slope), a)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(s), a)
    }

    pub fn sub_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(-s), a)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(Unary::MulScalar(s), a)
    }

    pub fn div_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        if s.abs() < 1e-12 {
            return Err(Error::invalid("division by a scalar with magnitude below 1e-12"));
        }
        self.unary(Unary::MulScalar(1.0 / s), a)
    }

    /// `s - a`.
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.add_scalar(n, s)
    }

    // ---- reductions --------------------------------------------------

    /// Mean over all elements, or over elements whose pixel is 1 in `mask`
    /// (an H x W plane of 0/1 values applied to every channel). A masked
    /// mean divides by `max(selected, 1)`.
    pub fn reduce_mean(&mut self, a: Var, mask: Option<&Array>) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.is_empty() {
            return Err(Error::shape("reduce_mean", "empty array"));
        }
        let (sum, count, mask) = match mask {
            None => (va.data().iter().sum::<f64>(), s.len() as f64, None),
            Some(m) => {
                let ms = m.shape();
                if ms.channels != 1 || !ms.same_plane(&s) {
                    return Err(Error::shape("reduce_mean", format!("mask {ms} for input {s}")));
                }
                if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::invalid("reduce_mean mask must be binary"));
                }
                let n = s.plane_len();
                let mut sum = 0.0;
                for c in 0..s.channels {
                    let plane = &va.data()[c * n..(c + 1) * n];
                    sum += plane
                        .iter()
                        .zip(m.data())
                        .filter(|(_, &w)| w == 1.0)
                        .map(|(&v, _)| v)
                        .sum::<f64>();
                }
                let selected = m.data().iter().filter(|&&w| w == 1.0).count() * s.channels;
                (sum, selected.max(1) as f64, Some(Arc::new(m.clone())))
            }
        };
        let value = Array::from_kernel("reduce_mean", Shape::SCALAR, vec![sum / count])?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::ReduceMean { a: a.0, mask, count }, rg))
    }

    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).channel_mean();
        let rg = self.rg(a);
        Ok(self.push(value, Op::ChannelMean(a.0), rg))
    }

    // ---- spatial -----------------------------------------------------

    /// 3x3 box filter, same-size output via edge replication.
    pub fn avg_pool3(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.height < 3 || s.width < 3 {
            return Err(Error::shape("avg_pool3", format!("input {s} smaller than 3x3")));
        }
        let data = kernels::avg_pool3_forward(s, self.value(a).data());
        let value = Array::from_kernel("avg_pool3", s, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::AvgPool3(a.0), rg))
    }

    /// Horizontal bilinear sampling of `source` at per-pixel column
    /// coordinates `coords` (one plane). Coordinates outside `[0, W - 1]`
    /// produce 0 with zero gradient and are reported invalid in the
    /// returned plane.
    pub fn hsample(&mut self, source: Var, coords: Var) -> Result<(Var, Array)> {
        let ss = self.shape(source);
        let cs = self.shape(coords);
        if cs.channels != 1 || !cs.same_plane(&ss) {
            return Err(Error::shape("hsample", format!("coords {cs} for source {ss}")));
        }
        let (out, valid) = kernels::hsample_forward(ss, self.value(source).data(), self.value(coords).data());
        let value = Array::from_kernel("hsample", ss, out)?;
        let valid = Array::from_raw(cs, valid);
        let rg = self.rg(source) || self.rg(coords);
        let v = self.push(
            value,
            Op::HSample {
                source: source.0,
                coords: coords.0,
            },
            rg,
        );
        Ok((v, valid))
    }

    /// Cross-correlation. `kernel` holds `cout * cin` planes of `k x k`
    /// (output-major). With `groups > 1`, the input is split into `groups`
    /// consecutive blocks of `cin` channels and the same kernel is applied
    /// to each block.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        cout: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let is = self.shape(input);
        let ks = self.shape(kernel);
        let k = ks.width;
        if ks.height != k || k.is_multiple_of(2) {
            return Err(Error::shape("conv2d", format!("kernel {ks} is not odd and square")));
        }
        if stride == 0 || groups == 0 || cout == 0 || !is.channels.is_multiple_of(groups) {
            return Err(Error::shape(
                "conv2d",
                format!("stride {stride}, groups {groups}, cout {cout} for input {is}"),
            ));
        }
        let cin = is.channels / groups;
        if ks.channels != cout * cin {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {ks} incompatible with {cin} input / {cout} output channels"),
            ));
        }
        if is.height + 2 * padding < k || is.width + 2 * padding < k {
            return Err(Error::shape("conv2d", format!("input {is} smaller than kernel {k}")));
        }
        let geom = ConvGeometry {
            input: is,
            ksize: k,
            stride,
            padding,
            cin,
            cout,
            groups,
        };
        let data = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let value = Array::from_kernel("conv2d", geom.output(), data)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                geom,
            },
            rg,
        ))
    }

    /// Adds `bias[c]` (shape C x 1 x 1) to every pixel of channel `c`.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let is = self.shape(input);
        let bs = self.shape(bias);
        if bs != Shape::new(is.channels, 1, 1) {
            return Err(Error::shape("bias_add", format!("bias {bs} for input {is}")));
        }
        let n = is.plane_len();
        let b = self.value(bias).data();
        let data = self
            .value(input)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i / n])
            .collect();
        let value = Array::from_kernel("bias_add", is, data)?;
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(
            value,
            Op::BiasAdd {
                input: input.0,
                bias: bias.0,
            },
            rg,
        ))
    }

    /// Cost volume with `max_disp + 1` planes: plane `d` holds the
    /// channel-mean product of `left(x)` and `right(x - d)`.
    pub fn correlation(&mut self, left: Var, right: Var, max_disp: usize) -> Result<Var> {
        let (ls, rs) = (self.shape(left), self.shape(right));
        if ls != rs {
            return Err(Error::shape("correlation", format!("{ls} vs {rs}")));
        }
        let data = kernels::correlation_forward(ls, self.value(left).data(), self.value(right).data(), max_disp);
        let value = Array::from_kernel("correlation", Shape::new(max_disp + 1, ls.height, ls.width), data)?;
        let rg = self.rg(left) || self.rg(right);
        Ok(self.push(
            value,
            Op::Correlation {
                left: left.0,
                right: right.0,
                max_disp,
            },
            rg,
        ))
    }

    /// Expected plane index under `softmax(-volume / tau)` along channels.
    pub fn soft_argmin(&mut self, volume: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::invalid(format!("soft-argmin temperature {tau}")));
        }
        let vs = self.shape(volume);
        let mut probs = vec![0.0; vs.len()];
        let data = kernels::soft_argmin_forward(vs, self.value(volume).data(), tau, &mut probs);
        let value = Array::from_kernel("soft_argmin", Shape::plane(vs.height, vs.width), data)?;
        let rg = self.rg(volume);
        Ok(self.push(
            value,
            Op::SoftArgmin {
                volume: volume.0,
                tau,
                probs,
            },
            rg,
        ))
    }

    pub fn hflip(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).hflip();
        let rg = self.rg(a);
        Ok(self.push(value, Op::HFlip(a.0), rg))
    }

    pub fn crop(&mut self, a: Var, x0: usize, y0: usize, width: usize, height: usize) -> Result<Var> {
        let value = self.value(a).crop(x0, y0, width, height)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Crop { a: a.0, x0, y0 }, rg))
    }

    /// `a(x + 1) - a(x)`; the output is one column narrower.
    pub fn diff_x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.width < 2 {
            return Err(Error::shape("diff_x", format!("input {s}")));
        }
        let out = Shape::new(s.channels, s.height, s.width - 1);
        let va = self.value(a);
        let mut data = Vec::with_capacity(out.len());
        for row in va.data().chunks_exact(s.width) {
            data.extend(row.windows(2).map(|w| w[1] - w[0]));
        }
        let value = Array::from_kernel("diff_x", out, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::DiffX(a.0), rg))
    }

    /// `a(y + 1) - a(y)`; the output is one row shorter.
    pub fn diff_y(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.height < 2 {
            return Err(Error::shape("diff_y", format!("input {s}")));
        }
        let out = Shape::new(s.channels, s.height - 1, s.width);
        let va = self.value(a);
        let w = s.width;
        let mut data = Vec::with_capacity(out.len());
        for c in 0..s.channels {
            let plane = va.plane(c);
            for y in 0..s.height - 1 {
                data.extend((0..w).map(|x| plane[(y + 1) * w + x] - plane[y * w + x]));
            }
        }
        let value = Array::from_kernel("diff_y", out, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::DiffY(a.0), rg))
    }

    // ---- backward ----------------------------------------------------

    /// Gradients of a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let s = self.shape(output);
        if !s.is_scalar() {
            return Err(Error::shape("backward", format!("output {s} is not scalar")));
        }
        Ok(self.backward_with_seed(output, Array::from_raw(s, vec![1.0])))
    }

    /// Vector-Jacobian product with `seed` as the output adjoint.
    pub fn backward_with_seed(&self, output: Var, seed: Array) -> Gradients {
        assert_eq!(seed.shape(), self.shape(output), "seed shape");
        let mut grads: Vec<Option<Array>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        if self.rg(output) {
            grads[output.0] = Some(seed);
        }
        for i in (0..=output.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            let node = &self.nodes[i];
            self.propagate(node, g.data(), lower);
        }
        Gradients { grads }
    }

    /// Returns the gradient buffer of node `j`, allocating zeros, or `None`
    /// if `j` does not require a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Array>], j: usize) -> Option<&'g mut [f64]> {
        if !self.nodes[j].requires_grad {
            return None;
        }
        let shape = self.nodes[j].value.shape();
        Some(grads[j].get_or_insert_with(|| Array::zeros(shape)).data_mut())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Array>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let va = self.nodes[a].value.data();
                let vb = self.nodes[b].value.data();
                let full = va.len() == g.len() && vb.len() == g.len();
                if full {
                    // fast paths for same-shape operands
                    if let Some(ga) = self.slot(grads, a) {
                        match kind {
                            Binary::Add | Binary::Sub => ga.iter_mut().zip(g).for_each(|(t, &gi)| *t += gi),
                            Binary::Mul => ga.iter_mut().zip(g).zip(vb).for_each(|((t, &gi), &y)| *t += y * gi),
                            Binary::Div => ga
                                .iter_mut()
                                .zip(g)
                                .zip(vb)
                                .for_each(|((t, &gi), &y)| *t += 1.0 / y * gi),
                        }
                    }
                    if let Some(gb) = self.slot(grads, b) {
                        match kind {
                            Binary::Add => gb.iter_mut().zip(g).for_each(|(t, &gi)| *t += gi),
                            Binary::Sub => gb.iter_mut().zip(g).for_each(|(t, &gi)| *t += -gi),
                            Binary::Mul => gb.iter_mut().zip(g).zip(va).for_each(|((t, &gi), &x)| *t += x * gi),
                            Binary::Div => gb
                                .iter_mut()
                                .zip(g)
                                .zip(va.iter().zip(vb))
                                .for_each(|((t, &gi), (&x, &y))| *t += -x / (y * y) * gi),
                        }
                    }
                    return;
                }
                let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                // d out / d a, d out / d b at element i
                let da = |i: usize| match kind {
                    Binary::Add | Binary::Sub => 1.0,
                    Binary::Mul => at(vb, i),
                    Binary::Div => 1.0 / at(vb, i),
                };
                let db = |i: usize| match kind {
                    Binary::Add => 1.0,
                    Binary::Sub => -1.0,
                    Binary::Mul => at(va, i),
                    Binary::Div => -at(va, i) / (at(vb, i) * at(vb, i)),
                };
                if let Some(ga) = self.slot(grads, a) {
                    accumulate_broadcast(ga, g, da);
                }
                if let Some(gb) = self.slot(grads, b) {
                    accumulate_broadcast(gb, g, db);
                }
            }
            Op::Unary(kind, a) => {
                let va = self.nodes[*a].value.data();
                if let Some(ga) = self.slot(grads, *a) {
                    let it = ga.iter_mut().zip(g).zip(va).zip(out);
                    match *kind {
                        Unary::Abs => it.for_each(|(((v, &gi), &x), _)| {
                            if x > 0.0 {
                                *v += gi;
                            } else if x < 0.0 {
                                *v -= gi;
                            }
                        }),
                        Unary::Exp => it.for_each(|(((v, &gi), _), &o)| *v += o * gi),
                        Unary::Neg => it.for_each(|(((v, &gi), _), _)| *v -= gi),
                        Unary::Clamp(lo, hi) => it.for_each(|(((v, &gi), &x), _)| {
                            if x > lo && x < hi {
                                *v += gi;
                            }
                        }),
                        Unary::Sigmoid => it.for_each(|(((v, &gi), _), &o)| *v += o * (1.0 - o) * gi),
                        Unary::LeakyRelu(sl) => it.for_each(|(((v, &gi), &x), _)| {
                            *v += if x > 0.0 { gi } else { sl * gi };
                        }),
                        Unary::AddScalar(_) => it.for_each(|(((v, &gi), _), _)| *v += gi),
                        Unary::MulScalar(sl) => it.for_each(|(((v, &gi), _), _)| *v += sl * gi),
                    }
                }
            }
            Op::ReduceMean { a, mask, count } => {
                let shape = self.nodes[*a].value.shape();
                if let Some(ga) = self.slot(grads, *a) {
                    let share = g[0] / count;
                    match mask {
                        None => ga.iter_mut().for_each(|v| *v += share),
                        Some(m) => {
                            let n = shape.plane_len();
                            for c in 0..shape.channels {
                                for (v, &w) in ga[c * n..(c + 1) * n].iter_mut().zip(m.data()) {
                                    if w == 1.0 {
                                        *v += share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::ChannelMean(a) => {
                let shape = self.nodes[*a].value.shape();
                if let Some(ga) = self.slot(grads, *a) {
                    let n = shape.plane_len();
                    let inv = 1.0 / shape.channels as f64;
                    for c in 0..shape.channels {
                        for (v, &gv) in ga[c * n..(c + 1) * n].iter_mut().zip(g) {
                            *v += gv * inv;
                        }
                    }
                }
            }
            Op::AvgPool3(a) => {
                let shape = self.nodes[*a].value.shape();
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::avg_pool3_backward(shape, g, ga);
                }
            }
            Op::HSample { source, coords } => {
                let (source, coords) = (*source, *coords);
                let ss = self.nodes[source].value.shape();
                let sv = Arc::clone(&self.nodes[source].value);
                let cv = Arc::clone(&self.nodes[coords].value);
                // source and coords are distinct nodes in every graph we
                // build; take the two slots one at a time.
                let mut gs = self.take_slot(grads, source);
                let mut gc = self.take_slot(grads, coords);
                kernels::hsample_backward(
                    ss,
                    sv.data(),
                    cv.data(),
                    g,
                    gs.as_mut().map(|a| a.data_mut()),
                    gc.as_mut().map(|a| a.data_mut()),
                );
                self.put_slot(grads, source, gs);
                self.put_slot(grads, coords, gc);
            }
            Op::Conv2d { input, kernel, geom } => {
                let (input, kernel) = (*input, *kernel);
                let iv = Arc::clone(&self.nodes[input].value);
                let kv = Arc::clone(&self.nodes[kernel].value);
                let mut gi = self.take_slot(grads, input);
                let mut gk = self.take_slot(grads, kernel);
                kernels::conv2d_backward(
                    geom,
                    iv.data(),
                    kv.data(),
                    g,
                    gi.as_mut().map(|a| a.data_mut()),
                    gk.as_mut().map(|a| a.data_mut()),
                );
                self.put_slot(grads, input, gi);
                self.put_slot(grads, kernel, gk);
            }
            Op::BiasAdd { input, bias } => {
                let n = self.nodes[*input].value.shape().plane_len();
                if let Some(gi) = self.slot(grads, *input) {
                    gi.iter_mut().zip(g).for_each(|(v, &gv)| *v += gv);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for (c, v) in gb.iter_mut().enumerate() {
                        *v += g[c * n..(c + 1) * n].iter().sum::<f64>();
                    }
                }
            }
            Op::Correlation { left, right, max_disp } => {
                let (left, right) = (*left, *right);
                let fs = self.nodes[left].value.shape();
                let lv = Arc::clone(&self.nodes[left].value);
                let rv = Arc::clone(&self.nodes[right].value);
                let mut gl = self.take_slot(grads, left);
                let mut gr = self.take_slot(grads, right);
                kernels::correlation_backward(
                    fs,
                    lv.data(),
                    rv.data(),
                    *max_disp,
                    g,
                    gl.as_mut().map(|a| a.data_mut()),
                    gr.as_mut().map(|a| a.data_mut()),
                );
                self.put_slot(grads, left, gl);
                self.put_slot(grads, right, gr);
            }
            Op::SoftArgmin { volume, tau, probs } => {
                let vs = self.nodes[*volume].value.shape();
                if let Some(gv) = self.slot(grads, *volume) {
                    kernels::soft_argmin_backward(vs, probs, out, *tau, g, gv);
                }
            }
            Op::HFlip(a) => {
                let w = node.value.shape().width;
                if let Some(ga) = self.slot(grads, *a) {
                    for (grow, orow) in ga.chunks_exact_mut(w).zip(g.chunks_exact(w)) {
                        for (v, &gv) in grow.iter_mut().zip(orow.iter().rev()) {
                            *v += gv;
                        }
                    }
                }
            }
            Op::Crop { a, x0, y0 } => {
                let src = self.nodes[*a].value.shape();
                let dst = node.value.shape();
                if let Some(ga) = self.slot(grads, *a) {
                    for c in 0..dst.channels {
                        for y in 0..dst.height {
                            let gi = (c * src.height + y + y0) * src.width + x0;
                            let oi = (c * dst.height + y) * dst.width;
                            for x in 0..dst.width {
                                ga[gi + x] += g[oi + x];
                            }
                        }
                    }
                }
            }
            Op::DiffX(a) => {
                let w = self.nodes[*a].value.shape().width;
                if let Some(ga) = self.slot(grads, *a) {
                    for (grow, orow) in ga.chunks_exact_mut(w).zip(g.chunks_exact(w - 1)) {
                        for (x, &gv) in orow.iter().enumerate() {
                            grow[x + 1] += gv;
                            grow[x] -= gv;
                        }
                    }
                }
            }
            Op::DiffY(a) => {
                let s = self.nodes[*a].value.shape();
                let w = s.width;
                if let Some(ga) = self.slot(grads, *a) {
                    for c in 0..s.channels {
                        for y in 0..s.height - 1 {
                            let oi = (c * (s.height - 1) + y) * w;
                            let gi = (c * s.height + y) * w;
                            for x in 0..w {
                                ga[gi + w + x] += g[oi + x];
                                ga[gi + x] -= g[oi + x];
                            }
                        }
                    }
                }
            }
        }
    }

    fn take_slot(&self, grads: &mut [Option<Array>], j: usize) -> Option<Array> {
        if !self.nodes[j].requires_grad {
            return None;
        }
        let shape = self.nodes[j].value.shape();
        Some(grads[j].take().unwrap_or_else(|| Array::zeros(shape)))
    }

    fn put_slot(&self, grads: &mut [Option<Array>], j: usize, g: Option<Array>) {
        if let Some(g) = g {
            match grads[j].as_mut() {
                // Both operands were the same node: merge the two halves.
                Some(existing) => existing.data_mut().iter_mut().zip(g.data()).for_each(|(e, v)| *e += v),
                None => grads[j] = Some(g),
            }
        }
    }
}

fn accumulate_broadcast(target: &mut [f64], g: &[f64], d: impl Fn(usize) -> f64) {
    if target.len() == g.len() {
        for (i, t) in target.iter_mut().enumerate() {
            *t += d(i) * g[i];
        }
    } else {
        // scalar operand broadcast over the output
        target[0] += (0..g.len()).map(|i| d(i) * g[i]).sum::<f64>();
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
