//! Tape-based reverse-mode differentiation over [`Tensor`] values.

use std::cell::RefCell;
use std::f64::consts::{LN_2, PI};
use std::sync::Arc;

use super::gemm::{gemm, with_scratch, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Sigmoid,
    Tanh,
    Softplus,
    Square,
    Sqrt,
    Rsqrt,
    Abs,
}

enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvT { x: Var, w: Var, b: Option<Var>, geo: ConvGeom },
    PixelShuffle { x: Var, r: usize },
    Concat { parts: Vec<Var> },
    Narrow { x: Var, start: usize },
    Crop { x: Var },
    Reshape { x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, b: Var },
    MulBias { x: Var, b: Var },
    MulConst { x: Var, c: Arc<Tensor> },
    Shift { x: Var },
    Scale { x: Var, s: f64 },
    Unary { x: Var, f: Unary },
    LowerBound { x: Var, bound: f64 },
    RoundCentered { x: Var },
    GaussLik { v: Var, sigma: Var },
    NegLog2 { x: Var, floor: f64 },
    ChanMatmul { w: Var, x: Var },
    Sum { x: Var },
    SoftmaxXent { logits: Var, labels: Arc<Vec<usize>> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass.
///
/// An inference graph (`Graph::inference`) never keeps backward state; both
/// kinds compute bitwise identical forward values.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Discretized zero-mean Gaussian mass of the unit bin around `v`.
pub fn gauss_bin_mass(v: f64, sigma: f64) -> f64 {
    let a = v.abs();
    std_normal_cdf((0.5 - a) / sigma) - std_normal_cdf((-0.5 - a) / sigma)
}

/// Round half away from zero.
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Gelu => gelu(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Softplus => softplus(x),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Rsqrt => 1.0 / x.sqrt(),
            Unary::Abs => x.abs(),
        }
    }

    fn grad(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Gelu => gelu_grad(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => sigmoid(x),
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Rsqrt => -0.5 * y * y * y,
            Unary::Abs => x.signum(),
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records operations for differentiation.
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A forward-only graph.
    pub fn inference() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let nodes = &mut *self.nodes.borrow_mut();
        let needs_grad = self.grad_enabled && parents.iter().any(|p| nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var(nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&self, t: Tensor) -> Var {
        let nodes = &mut *self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(t), op: Op::Leaf, needs_grad: false });
        Var(nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&self, t: Tensor) -> Var {
        self.param_shared(Arc::new(t))
    }

    /// A differentiable leaf backed by shared storage.
    pub fn param_shared(&self, t: Arc<Tensor>) -> Var {
        let nodes = &mut *self.nodes.borrow_mut();
        nodes.push(Node { value: t, op: Op::Leaf, needs_grad: self.grad_enabled });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    // ---- convolutions -------------------------------------------------

    /// 2-D cross-correlation. `x: [Ci,H,W]`, `w: [Co,Ci,k,k]`, `b: [Co]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (ci, h, wd) = xv.chw();
        let (co, wci, k) = match wv.shape()[..] {
            [co, wci, k, k2] if k == k2 => (co, wci, k),
            _ => return Err(Error::shape(format!("bad conv weight {:?}", wv.shape()))),
        };
        if wci != ci {
            return Err(Error::shape(format!("conv expects {} input channels, got {}", wci, ci)));
        }
        let geo = ConvGeom::new(ci, h, wd, k, stride, pad);
        let mut out = Tensor::zeros(&[co, geo.hout, geo.wout]);
        with_scratch(geo.rows() * geo.cols(), |cols| {
            geo.im2col_into(xv.data(), cols);
            gemm(co, geo.rows(), geo.cols(), wv.data(), false, cols, false, out.data_mut(), false);
        });
        if let Some(b) = b {
            add_channel_bias(&mut out, &self.value(b))?;
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b, stride, pad }, &parents))
    }

    /// Transposed convolution. `x: [Ci,H,W]`, `w: [Ci,Co,k,k]`.
    pub fn conv_transpose2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (ci, h, wd) = xv.chw();
        let (wci, co, k) = match wv.shape()[..] {
            [wci, co, k, k2] if k == k2 => (wci, co, k),
            _ => return Err(Error::shape(format!("bad deconv weight {:?}", wv.shape()))),
        };
        if wci != ci {
            return Err(Error::shape(format!("deconv expects {} input channels, got {}", wci, ci)));
        }
        let ho = (h - 1) * stride + k + out_pad - 2 * pad;
        let wo = (wd - 1) * stride + k + out_pad - 2 * pad;
        let geo = ConvGeom::new(co, ho, wo, k, stride, pad);
        debug_assert_eq!((geo.hout, geo.wout), (h, wd));
        let mut out = Tensor::zeros(&[co, ho, wo]);
        with_scratch(geo.rows() * geo.cols(), |cols| {
            gemm(geo.rows(), ci, geo.cols(), wv.data(), true, xv.data(), false, cols, false);
            geo.col2im(cols, out.data_mut());
        });
        if let Some(b) = b {
            add_channel_bias(&mut out, &self.value(b))?;
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, Op::ConvT { x, w, b, geo }, &parents))
    }

    /// `[C·r², H, W] -> [C, H·r, W·r]`.
    pub fn pixel_shuffle(&self, x: Var, r: usize) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        if c % (r * r) != 0 {
            return Err(Error::shape(format!("pixel shuffle of {} channels by {}", c, r)));
        }
        let co = c / (r * r);
        let mut out = Tensor::zeros(&[co, h * r, w * r]);
        shuffle_into(xv.data(), out.data_mut(), co, h, w, r, false);
        Ok(self.push(out, Op::PixelShuffle { x, r }, &[x]))
    }

    // ---- structural -----------------------------------------------------

    /// Concatenate along the leading axis. Empty `parts` is an error.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let first = vals.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let tail = first.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for v in &vals {
            if v.shape()[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "concat {:?} with {:?}",
                    first.shape(),
                    v.shape()
                )));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn narrow(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let lead = xv.shape()[0];
        if start + len > lead {
            return Err(Error::shape(format!("narrow {}..{} of {}", start, start + len, lead)));
        }
        let inner = xv.len() / lead.max(1);
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let out = Tensor::from_vec(&shape, xv.data()[start * inner..(start + len) * inner].to_vec())?;
        Ok(self.push(out, Op::Narrow { x, start }, &[x]))
    }

    /// Top-left spatial crop of a `[C,H,W]` tensor.
    pub fn crop(&self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        let (c, hi, wi) = xv.chw();
        if h > hi || w > wi {
            return Err(Error::shape(format!("crop {}x{} from {}x{}", h, w, hi, wi)));
        }
        if (h, w) == (hi, wi) {
            return Ok(x);
        }
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for y in 0..h {
                let src = &xv.data()[(ch * hi + y) * wi..(ch * hi + y) * wi + w];
                out.data_mut()[(ch * h + y) * w..(ch * h + y + 1) * w].copy_from_slice(src);
            }
        }
        Ok(self.push(out, Op::Crop { x }, &[x]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.value(x)).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!("elementwise {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.shape(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn broadcast(&self, x: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let xv = self.value(x);
        let bv = self.value(b);
        let inner = broadcast_inner(xv.shape(), bv.shape())?;
        let mut out = (*xv).clone();
        for (chunk, &bb) in out.data_mut().chunks_mut(inner).zip(bv.data()) {
            chunk.iter_mut().for_each(|v| *v = f(*v, bb));
        }
        Ok(out)
    }

    /// `x + b` with `b` broadcast over the trailing axes of `x`.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let out = self.broadcast(x, b, |v, bb| v + bb)?;
        Ok(self.push(out, Op::AddBias { x, b }, &[x, b]))
    }

    /// `x · b` with `b` broadcast over the trailing axes of `x`.
    pub fn mul_bias(&self, x: Var, b: Var) -> Result<Var> {
        let out = self.broadcast(x, b, |v, bb| v * bb)?;
        Ok(self.push(out, Op::MulBias { x, b }, &[x, b]))
    }

    /// Multiply by a constant tensor (masks).
    pub fn mul_const(&self, x: Var, c: Arc<Tensor>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(Error::shape(format!("mask {:?} vs {:?}", c.shape(), xv.shape())));
        }
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.push(out, Op::MulConst { x, c }, &[x]))
    }

    /// Add a constant tensor (additive quantization noise).
    pub fn shift(&self, x: Var, c: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(Error::shape(format!("shift {:?} vs {:?}", c.shape(), xv.shape())));
        }
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.push(out, Op::Shift { x }, &[x]))
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale { x, s }, &[x])
    }

    pub fn unary(&self, x: Var, f: Unary) -> Var {
        let out = self.value(x).map(|v| f.apply(v));
        self.push(out, Op::Unary { x, f }, &[x])
    }

    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    /// `max(x, bound)`; gradient passes only where `x ≥ bound`.
    pub fn lower_bound(&self, x: Var, bound: f64) -> Var {
        let out = self.value(x).map(|v| v.max(bound));
        self.push(out, Op::LowerBound { x, bound }, &[x])
    }

    /// `round(x − mu) + mu` with a straight-through (identity) gradient to `x`.
    pub fn round_centered(&self, x: Var, mu: Var) -> Result<Var> {
        let out = self.binary(x, mu, |a, m| round_half_away(a - m) + m)?;
        Ok(self.push(out, Op::RoundCentered { x }, &[x]))
    }

    /// Mass of the unit bin centred at `v` under `N(0, sigma²)`.
    pub fn gauss_likelihood(&self, v: Var, sigma: Var) -> Result<Var> {
        let out = self.binary(v, sigma, gauss_bin_mass)?;
        Ok(self.push(out, Op::GaussLik { v, sigma }, &[v, sigma]))
    }

    /// `−log2(max(x, floor))`.
    pub fn neg_log2(&self, x: Var, floor: f64) -> Var {
        let out = self.value(x).map(|v| -v.max(floor).log2());
        self.push(out, Op::NegLog2 { x, floor }, &[x])
    }

    /// Per-channel matrix product: `w: [C,o,i]`, `x: [C,i,P]` -> `[C,o,P]`.
    pub fn chan_matmul(&self, w: Var, x: Var) -> Result<Var> {
        let wv = self.value(w);
        let xv = self.value(x);
        let (c, o, i, p) = match (wv.shape(), xv.shape()) {
            ([c, o, i], [c2, i2, p]) if c == c2 && i == i2 => (*c, *o, *i, *p),
            (a, b) => return Err(Error::shape(format!("chan_matmul {:?} x {:?}", a, b))),
        };
        let mut out = Tensor::zeros(&[c, o, p]);
        for ch in 0..c {
            let wm = &wv.data()[ch * o * i..(ch + 1) * o * i];
            let xm = &xv.data()[ch * i * p..(ch + 1) * i * p];
            let om = &mut out.data_mut()[ch * o * p..(ch + 1) * o * p];
            for r in 0..o {
                for q in 0..i {
                    let wrq = wm[r * i + q];
                    for (dst, src) in om[r * p..(r + 1) * p].iter_mut().zip(&xm[q * p..(q + 1) * p]) {
                        *dst += wrq * src;
                    }
                }
            }
        }
        Ok(self.push(out, Op::ChanMatmul { w, x }, &[w, x]))
    }

    pub fn sum(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x }, &[x])
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.unary(d, Unary::Square);
        Ok(self.mean(sq))
    }

    /// Mean cross-entropy of `logits: [K,H,W]` against per-pixel class labels.
    pub fn softmax_xent(&self, logits: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
        let lv = self.value(logits);
        let (k, h, w) = lv.chw();
        let p = h * w;
        if labels.len() != p || labels.iter().any(|&l| l >= k) {
            return Err(Error::shape("labels do not match logits".to_string()));
        }
        let mut total = 0.0;
        for (px, &label) in labels.iter().enumerate() {
            let (m, lse) = log_sum_exp(lv.data(), k, p, px);
            total += m + lse - lv.data()[label * p + px];
        }
        let out = Tensor::scalar(total / p as f64);
        Ok(self.push(out, Op::SoftmaxXent { logits, labels }, &[logits]))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward needs a scalar loss".to_string()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = Some(g);
                continue;
            }
            let mut contribs: Vec<(Var, Tensor)> = Vec::new();
            backward_op(&nodes, node, &g, &mut contribs)?;
            grads[id] = Some(g);
            for (p, t) in contribs {
                if !nodes[p.0].needs_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn log_sum_exp(data: &[f64], k: usize, p: usize, px: usize) -> (f64, f64) {
    let m = (0..k).map(|c| data[c * p + px]).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = (0..k).map(|c| (data[c * p + px] - m).exp()).sum();
    (m, s.ln())
}

fn broadcast_inner(x: &[usize], b: &[usize]) -> Result<usize> {
    let bl: usize = b.iter().product();
    let xl: usize = x.iter().product();
    let lead = b.iter().rposition(|&d| d != 1).map_or(0, |i| i + 1);
    if lead > x.len() || b[..lead] != x[..lead] || bl == 0 || xl % bl != 0 {
        return Err(Error::shape(format!("cannot broadcast {:?} over {:?}", b, x)));
    }
    Ok(xl / bl)
}

fn add_channel_bias(out: &mut Tensor, b: &Tensor) -> Result<()> {
    let (c, h, w) = out.chw();
    if b.len() != c {
        return Err(Error::shape(format!("bias of {} for {} channels", b.len(), c)));
    }
    for (plane, &bv) in out.data_mut().chunks_mut(h * w).zip(b.data()) {
        plane.iter_mut().for_each(|v| *v += bv);
    }
    Ok(())
}

fn channel_sums(g: &Tensor) -> Tensor {
    let (c, h, w) = g.chw();
    let data = g.data().chunks(h * w).map(|p| p.iter().sum()).collect();
    Tensor::from_vec(&[c], data).expect("bias gradient shape")
}

/// Pixel-shuffle permutation; `inverse` maps the shuffled layout back.
fn shuffle_into(src: &[f64], dst: &mut [f64], co: usize, h: usize, w: usize, r: usize, inverse: bool) {
    let (ho, wo) = (h * r, w * r);
    for c in 0..co {
        for i in 0..r {
            for j in 0..r {
                let ic = c * r * r + i * r + j;
                for y in 0..h {
                    for x in 0..w {
                        let a = (ic * h + y) * w + x;
                        let b = (c * ho + y * r + i) * wo + x * r + j;
                        if inverse {
                            dst[a] = src[b];
                        } else {
                            dst[b] = src[a];
                        }
                    }
                }
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

fn backward_op(nodes: &[Node], node: &Node, g: &Tensor, out: &mut Vec<(Var, Tensor)>) -> Result<()> {
    let val = |v: Var| nodes[v.0].value.clone();
    let wants = |v: Var| nodes[v.0].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Conv { x, w, b, stride, pad } => {
            let xv = val(*x);
            let wv = val(*w);
            let (ci, h, wd) = xv.chw();
            let co = wv.shape()[0];
            let geo = ConvGeom::new(ci, h, wd, wv.shape()[2], *stride, *pad);
            if let Some(b) = b {
                out.push((*b, channel_sums(g)));
            }
            let need_w = wants(*w);
            let need_x = wants(*x);
            if need_w {
                let mut gw = Tensor::zeros(wv.shape());
                with_scratch(geo.rows() * geo.cols(), |cols| {
                    geo.im2col_into(xv.data(), cols);
                    gemm(co, geo.cols(), geo.rows(), g.data(), false, cols, true, gw.data_mut(), false);
                });
                out.push((*w, gw));
            }
            if need_x {
                let mut gx = Tensor::zeros(xv.shape());
                with_scratch(geo.rows() * geo.cols(), |gcols| {
                    gemm(geo.rows(), co, geo.cols(), wv.data(), true, g.data(), false, gcols, false);
                    geo.col2im(gcols, gx.data_mut());
                });
                out.push((*x, gx));
            }
        }
        Op::ConvT { x, w, b, geo } => {
            let xv = val(*x);
            let wv = val(*w);
            let ci = xv.shape()[0];
            if let Some(b) = b {
                out.push((*b, channel_sums(g)));
            }
            with_scratch(geo.rows() * geo.cols(), |gcols| {
                geo.im2col_into(g.data(), gcols);
                if wants(*w) {
                    let mut gw = Tensor::zeros(wv.shape());
                    gemm(ci, geo.cols(), geo.rows(), xv.data(), false, gcols, true, gw.data_mut(), false);
                    out.push((*w, gw));
                }
                if wants(*x) {
                    let mut gx = Tensor::zeros(xv.shape());
                    gemm(ci, geo.rows(), geo.cols(), wv.data(), false, gcols, false, gx.data_mut(), false);
                    out.push((*x, gx));
                }
            });
        }
        Op::PixelShuffle { x, r } => {
            let xv = val(*x);
            let (c, h, w) = xv.chw();
            let mut gx = Tensor::zeros(xv.shape());
            shuffle_into(g.data(), gx.data_mut(), c / (r * r), h, w, *r, true);
            out.push((*x, gx));
        }
        Op::Concat { parts } => {
            let mut off = 0;
            for p in parts {
                let n = val(*p).len();
                let t = Tensor::from_vec(val(*p).shape(), g.data()[off..off + n].to_vec())?;
                off += n;
                out.push((*p, t));
            }
        }
        Op::Narrow { x, start } => {
            let xv = val(*x);
            let inner = xv.len() / xv.shape()[0].max(1);
            let mut gx = Tensor::zeros(xv.shape());
            gx.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
            out.push((*x, gx));
        }
        Op::Crop { x } => {
            let xv = val(*x);
            let (c, hi, wi) = xv.chw();
            let (_, h, w) = g.chw();
            let mut gx = Tensor::zeros(xv.shape());
            for ch in 0..c {
                for y in 0..h {
                    gx.data_mut()[(ch * hi + y) * wi..(ch * hi + y) * wi + w]
                        .copy_from_slice(&g.data()[(ch * h + y) * w..(ch * h + y + 1) * w]);
                }
            }
            out.push((*x, gx));
        }
        Op::Reshape { x } => {
            out.push((*x, g.clone().reshaped(val(*x).shape())?));
        }
        Op::Add(a, b) => {
            out.push((*a, g.clone()));
            out.push((*b, g.clone()));
        }
        Op::Sub(a, b) => {
            out.push((*a, g.clone()));
            out.push((*b, g.map(|v| -v)));
        }
        Op::Mul(a, b) => {
            let av = val(*a);
            let bv = val(*b);
            out.push((*a, zip_map(g, &bv, |x, y| x * y)));
            out.push((*b, zip_map(g, &av, |x, y| x * y)));
        }
        Op::AddBias { x, b } => {
            let bv = val(*b);
            let inner = g.len() / bv.len();
            let data = g.data().chunks(inner).map(|c| c.iter().sum()).collect();
            out.push((*x, g.clone()));
            out.push((*b, Tensor::from_vec(bv.shape(), data)?));
        }
        Op::MulBias { x, b } => {
            let xv = val(*x);
            let bv = val(*b);
            let inner = g.len() / bv.len();
            let mut gx = g.clone();
            for (chunk, &bb) in gx.data_mut().chunks_mut(inner).zip(bv.data()) {
                chunk.iter_mut().for_each(|v| *v *= bb);
            }
            let data = g
                .data()
                .chunks(inner)
                .zip(xv.data().chunks(inner))
                .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                .collect();
            out.push((*x, gx));
            out.push((*b, Tensor::from_vec(bv.shape(), data)?));
        }
        Op::MulConst { x, c } => out.push((*x, zip_map(g, c, |a, b| a * b))),
        Op::Shift { x } => out.push((*x, g.clone())),
        Op::Scale { x, s } => out.push((*x, g.map(|v| v * s))),
        Op::Unary { x, f } => {
            let xv = val(*x);
            let y = &node.value;
            let data = g
                .data()
                .iter()
                .zip(xv.data().iter().zip(y.data()))
                .map(|(gv, (&xx, &yy))| gv * f.grad(xx, yy))
                .collect();
            out.push((*x, Tensor::from_vec(xv.shape(), data)?));
        }
        Op::LowerBound { x, bound } => {
            let xv = val(*x);
            out.push((*x, zip_map(g, &xv, |gv, xx| if xx >= *bound { gv } else { 0.0 })));
        }
        Op::RoundCentered { x } => out.push((*x, g.clone())),
        Op::GaussLik { v, sigma } => {
            let vv = val(*v);
            let sv = val(*sigma);
            let mut gv = Tensor::zeros(vv.shape());
            let mut gs = Tensor::zeros(sv.shape());
            for i in 0..g.len() {
                let x = vv.data()[i];
                let s = sv.data()[i];
                let a = (0.5 - x.abs()) / s;
                let b = (-0.5 - x.abs()) / s;
                let (pa, pb) = (std_normal_pdf(a), std_normal_pdf(b));
                gv.data_mut()[i] = g.data()[i] * x.signum() * (pb - pa) / s;
                gs.data_mut()[i] = g.data()[i] * (b * pb - a * pa) / s;
            }
            out.push((*v, gv));
            out.push((*sigma, gs));
        }
        Op::NegLog2 { x, floor } => {
            let xv = val(*x);
            out.push((*x, zip_map(g, &xv, |gv, xx| if xx > *floor { -gv / (xx * LN_2) } else { 0.0 })));
        }
        Op::ChanMatmul { w, x } => {
            let wv = val(*w);
            let xv = val(*x);
            let (c, o, i) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
            let p = xv.shape()[2];
            let mut gw = Tensor::zeros(wv.shape());
            let mut gx = Tensor::zeros(xv.shape());
            for ch in 0..c {
                let wm = &wv.data()[ch * o * i..(ch + 1) * o * i];
                let xm = &xv.data()[ch * i * p..(ch + 1) * i * p];
                let gm = &g.data()[ch * o * p..(ch + 1) * o * p];
                for r in 0..o {
                    let grow = &gm[r * p..(r + 1) * p];
                    for q in 0..i {
                        let xrow = &xm[q * p..(q + 1) * p];
                        gw.data_mut()[ch * o * i + r * i + q] = grow.iter().zip(xrow).map(|(a, b)| a * b).sum();
                        let wrq = wm[r * i + q];
                        let gxrow = &mut gx.data_mut()[ch * i * p + q * p..ch * i * p + (q + 1) * p];
                        for (d, gg) in gxrow.iter_mut().zip(grow) {
                            *d += wrq * gg;
                        }
                    }
                }
            }
            out.push((*w, gw));
            out.push((*x, gx));
        }
        Op::Sum { x } => {
            let xv = val(*x);
            out.push((*x, Tensor::full(xv.shape(), g.data()[0])));
        }
        Op::SoftmaxXent { logits, labels } => {
            let lv = val(*logits);
            let (k, h, w) = lv.chw();
            let p = h * w;
            let scale = g.data()[0] / p as f64;
            let mut gl = Tensor::zeros(lv.shape());
            for (px, &label) in labels.iter().enumerate() {
                let (m, lse) = log_sum_exp(lv.data(), k, p, px);
                for c in 0..k {
                    let sm = (lv.data()[c * p + px] - m - lse).exp();
                    let t = if c == label { 1.0 } else { 0.0 };
                    gl.data_mut()[c * p + px] = scale * (sm - t);
                }
            }
            out.push((*logits, gl));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    /// Central-difference check of d loss / d inputs for a graph builder.
    fn check<F>(inputs: Vec<Tensor>, build: F)
    where
        F: Fn(&Graph, &[Var]) -> Var,
    {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&g, &vars);
        let grads = g.backward(loss).unwrap();
        let eval = |ins: &[Tensor]| {
            let g = Graph::inference();
            let vs: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let l = build(&g, &vs);
            g.scalar(l)
        };
        let eps = 1e-6;
        for (vi, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[vi]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for i in 0..t.len() {
                let mut plus = inputs.clone();
                plus[vi].data_mut()[i] += eps;
                let mut minus = inputs.clone();
                minus[vi].data_mut()[i] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {} elem {}: analytic {} numeric {}", vi, i, a, numeric);
            }
        }
    }

    #[test]
    fn conv_and_deconv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 5, 6], 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3], 0.5);
        let b = rand_tensor(&mut rng, &[3], 0.5);
        check(vec![x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
            let s = g.unary(y, Unary::Square);
            g.sum(s)
        });
        let x = rand_tensor(&mut rng, &[2, 3, 4], 1.0);
        let w = rand_tensor(&mut rng, &[2, 3, 5, 5], 0.5);
        let b = rand_tensor(&mut rng, &[3], 0.5);
        check(vec![x, w, b], |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 2, 1).unwrap();
            assert_eq!(g.shape(y), vec![3, 6, 8]);
            let s = g.unary(y, Unary::Square);
            g.sum(s)
        });
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[8, 2, 2], 1.5);
        let b = rand_tensor(&mut rng, &[8, 2, 2], 1.5);
        let bias = rand_tensor(&mut rng, &[8], 1.0);
        check(vec![a, b, bias], |g, v| {
            let s = g.pixel_shuffle(v[0], 2).unwrap();
            let t = g.pixel_shuffle(v[1], 2).unwrap();
            let m = g.mul(s, t).unwrap();
            let c = g.concat(&[m, s]).unwrap();
            let n = g.narrow(c, 1, 3).unwrap();
            let cr = g.crop(n, 3, 2).unwrap();
            let acts: Vec<Var> = [Unary::Gelu, Unary::Sigmoid, Unary::Tanh, Unary::Softplus]
                .iter()
                .map(|&f| g.unary(cr, f))
                .collect();
            let mut acc = acts[0];
            for &x in &acts[1..] {
                acc = g.add(acc, x).unwrap();
            }
            let q = g.mul_bias(v[0], v[2]).unwrap();
            let r = g.add_bias(q, v[2]).unwrap();
            let sq = g.unary(r, Unary::Square);
            let l1 = g.sum(acc);
            let l2 = g.mean(sq);
            let tot = g.sub(l1, l2).unwrap();
            g.scale(tot, 0.7)
        });
    }

    #[test]
    fn likelihood_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = rand_tensor(&mut rng, &[4, 3, 3], 2.0);
        let s = rand_tensor(&mut rng, &[4, 3, 3], 1.0).map(|x| x.abs() + 0.3);
        check(vec![v, s], |g, x| {
            let sig = g.unary(x[1], Unary::Sqrt);
            let p = g.gauss_likelihood(x[0], sig).unwrap();
            let r = g.neg_log2(p, 1e-12);
            g.sum(r)
        });
        let w = rand_tensor(&mut rng, &[3, 2, 4], 1.0);
        let x = rand_tensor(&mut rng, &[3, 4, 5], 1.0);
        check(vec![w, x], |g, v| {
            let y = g.chan_matmul(v[0], v[1]).unwrap();
            let t = g.tanh(y);
            g.sum(t)
        });
        let logits = rand_tensor(&mut rng, &[3, 2, 3], 2.0);
        let labels = Arc::new(vec![0, 1, 2, 2, 1, 0]);
        check(vec![logits], move |g, v| g.softmax_xent(v[0], labels.clone()).unwrap());
    }

    #[test]
    fn gdn_style_composition_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 4, 4], 1.0);
        let gamma = rand_tensor(&mut rng, &[3, 3, 1, 1], 0.5).map(f64::abs);
        let beta = rand_tensor(&mut rng, &[3], 0.5).map(|v| v.abs() + 0.5);
        check(vec![x, gamma, beta], |g, v| {
            let sq = g.unary(v[0], Unary::Square);
            let n = g.conv2d(sq, v[1], Some(v[2]), 1, 0).unwrap();
            let r = g.unary(n, Unary::Rsqrt);
            let y = g.mul(v[0], r).unwrap();
            let s = g.unary(y, Unary::Abs);
            g.sum(s)
        });
    }

    #[test]
    fn inference_graph_matches_training_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[2, 8, 8], 1.0);
        let w = rand_tensor(&mut rng, &[4, 2, 5, 5], 0.3);
        let run = |g: &Graph| {
            let xv = g.constant(x.clone());
            let wv = g.param(w.clone());
            let y = g.conv2d(xv, wv, None, 2, 2).unwrap();
            g.value(g.gelu(y)).bits()
        };
        assert_eq!(run(&Graph::new()), run(&Graph::inference()));
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_half_away(-0.5), -1.0);
        assert_eq!(round_half_away(0.5), 1.0);
        assert_eq!(round_half_away(1.4999), 1.0);
    }
}
