use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::kernels as k;
use crate::ops::{bn_run, check_pow, sigmoid, BatchStats, BnMode, Ops};
use crate::{Float, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Affine(usize, F),
    Relu(usize),
    Sigmoid(usize),
    Sqr(usize),
    Abs(usize),
    Pow(usize, usize),
    Clamp(usize, F, F),
    SumAll(usize),
    MeanAll(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        pad: usize,
    },
    ConvT {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    MaxPool {
        x: usize,
        idx: Vec<usize>,
    },
    BatchNorm {
        x: usize,
        w: usize,
        b: usize,
        saved: k::BnSaved<F>,
        batch: bool,
    },
    GlobalAvg(usize),
    GlobalMax {
        x: usize,
        idx: Vec<usize>,
    },
    ChannelMean(usize),
    ChannelMax {
        x: usize,
        idx: Vec<usize>,
    },
    Concat(Vec<usize>),
    Narrow {
        x: usize,
        start: usize,
    },
    Filter {
        x: usize,
        kh: Arc<Vec<F>>,
        kw: Arc<Vec<F>>,
    },
    Tv(usize),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Define-by-run tape. Every operation appends a node; [`Graph::backward`]
/// walks the tape in reverse.
pub struct Graph<F> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by the leaf [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<F: Float>(slot: &mut Option<Tensor<F>>, g: Tensor<F>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

fn as_scalar<F: Float>(g: &Tensor<F>) -> F {
    g.data()[0]
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient will be reported by [`Graph::backward`].
    pub fn leaf(&self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn val(&self, v: Var) -> Tensor<F> {
        self.nodes.borrow()[v.0].value.clone()
    }

    fn rg(&self, vs: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vs.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn unary(&self, x: Var, value: Tensor<F>, op: Op<F>) -> Var {
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(invalid("backward", "loss must have one element"));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let rg = |j: usize| nodes[j].requires_grad;
            let v = |j: usize| &nodes[j].value;
            let send = |j: usize, t: Tensor<F>, grads: &mut Vec<Option<Tensor<F>>>| {
                if nodes[j].requires_grad {
                    accumulate(&mut grads[j], t);
                }
            };
            match &node.op {
                Op::Leaf => {
                    leaves[i] = Some(g);
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        send(*a, k::reduce_to(&g, v(*a).shape())?, &mut grads);
                    }
                    if rg(*b) {
                        send(*b, k::reduce_to(&g, v(*b).shape())?, &mut grads);
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        send(*a, k::reduce_to(&g, v(*a).shape())?, &mut grads);
                    }
                    if rg(*b) {
                        send(*b, k::reduce_to(&g.map(|x| -x), v(*b).shape())?, &mut grads);
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        let t = k::broadcast_binary(&g, v(*b), |x, y| x * y)?;
                        send(*a, k::reduce_to(&t, v(*a).shape())?, &mut grads);
                    }
                    if rg(*b) {
                        let t = k::broadcast_binary(&g, v(*a), |x, y| x * y)?;
                        send(*b, k::reduce_to(&t, v(*b).shape())?, &mut grads);
                    }
                }
                Op::Div(a, b) => {
                    if rg(*a) {
                        let t = k::broadcast_binary(&g, v(*b), |x, y| x / y)?;
                        send(*a, k::reduce_to(&t, v(*a).shape())?, &mut grads);
                    }
                    if rg(*b) {
                        // d(a/b)/db = -out / b
                        let t = g.zip_map(&node.value, |x, o| x * o)?;
                        let t = k::broadcast_binary(&t, v(*b), |x, y| -x / y)?;
                        send(*b, k::reduce_to(&t, v(*b).shape())?, &mut grads);
                    }
                }
                Op::Affine(x, scale) => {
                    let s = *scale;
                    send(*x, g.map(|t| t * s), &mut grads);
                }
                Op::Relu(x) => {
                    let t = g.zip_map(v(*x), |g, x| if x > F::zero() { g } else { F::zero() })?;
                    send(*x, t, &mut grads);
                }
                Op::Sigmoid(x) => {
                    let t = g.zip_map(&node.value, |g, y| g * y * (F::one() - y))?;
                    send(*x, t, &mut grads);
                }
                Op::Sqr(x) => {
                    let t = g.zip_map(v(*x), |g, x| g * (x + x))?;
                    send(*x, t, &mut grads);
                }
                Op::Abs(x) => {
                    let t = g.zip_map(v(*x), |g, x| {
                        if x > F::zero() {
                            g
                        } else if x < F::zero() {
                            -g
                        } else {
                            F::zero()
                        }
                    })?;
                    send(*x, t, &mut grads);
                }
                Op::Pow(b, e) => {
                    if rg(*b) {
                        let base = v(*b).data();
                        let exp = v(*e).data();
                        let d: Vec<F> = g
                            .data()
                            .iter()
                            .zip(base.iter().zip(exp))
                            .map(|(&g, (&b, &e))| g * e * b.powf(e - F::one()))
                            .collect();
                        send(*b, Tensor::from_vec(g.shape().to_vec(), d)?, &mut grads);
                    }
                    if rg(*e) {
                        let base = v(*b).data();
                        let d: Vec<F> = g
                            .data()
                            .iter()
                            .zip(node.value.data().iter().zip(base))
                            .map(|(&g, (&y, &b))| g * y * b.ln())
                            .collect();
                        send(*e, Tensor::from_vec(g.shape().to_vec(), d)?, &mut grads);
                    }
                }
                Op::Clamp(x, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let t = g.zip_map(v(*x), |g, x| {
                        if x >= lo && x <= hi {
                            g
                        } else {
                            F::zero()
                        }
                    })?;
                    send(*x, t, &mut grads);
                }
                Op::SumAll(x) => {
                    send(*x, Tensor::full(v(*x).shape().to_vec(), as_scalar(&g)), &mut grads);
                }
                Op::MeanAll(x) => {
                    let n = F::from_usize(v(*x).numel()).unwrap();
                    send(*x, Tensor::full(v(*x).shape().to_vec(), as_scalar(&g) / n), &mut grads);
                }
                Op::Conv2d { x, w, b, pad } => {
                    let cg = k::conv2d_backward(v(*x), v(*w), b.is_some(), *pad, &g, rg(*x))?;
                    if let Some(gx) = cg.x {
                        send(*x, gx, &mut grads);
                    }
                    send(*w, cg.w, &mut grads);
                    if let (Some(b), Some(gb)) = (b, cg.b) {
                        send(*b, gb, &mut grads);
                    }
                }
                Op::ConvT { x, w, b } => {
                    let cg = k::conv_transpose2x2_backward(v(*x), v(*w), b.is_some(), &g, rg(*x))?;
                    if let Some(gx) = cg.x {
                        send(*x, gx, &mut grads);
                    }
                    send(*w, cg.w, &mut grads);
                    if let (Some(b), Some(gb)) = (b, cg.b) {
                        send(*b, gb, &mut grads);
                    }
                }
                Op::MaxPool { x, idx } | Op::GlobalMax { x, idx } | Op::ChannelMax { x, idx } => {
                    send(*x, k::scatter_argmax(v(*x).shape(), idx, &g)?, &mut grads);
                }
                Op::BatchNorm {
                    x,
                    w,
                    b,
                    saved,
                    batch,
                } => {
                    let (gx, gw, gb) = k::batch_norm_backward(saved, v(*w), &g, *batch)?;
                    send(*x, gx, &mut grads);
                    send(*w, gw, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::GlobalAvg(x) => {
                    send(*x, k::global_avg_pool_backward(v(*x).shape(), &g)?, &mut grads);
                }
                Op::ChannelMean(x) => {
                    send(*x, k::channel_mean_backward(v(*x).shape(), &g)?, &mut grads);
                }
                Op::Concat(xs) => {
                    let mut start = 0;
                    for &x in xs {
                        let c = v(x).shape()[1];
                        if rg(x) {
                            send(x, k::narrow_channels(&g, start, c)?, &mut grads);
                        }
                        start += c;
                    }
                }
                Op::Narrow { x, start } => {
                    send(*x, k::unnarrow_channels(v(*x).shape(), *start, &g)?, &mut grads);
                }
                Op::Filter { x, kh, kw } => {
                    send(*x, k::separable_filter_backward(&g, kh, kw)?, &mut grads);
                }
                Op::Tv(x) => {
                    send(*x, k::tv_sum_backward(v(*x), as_scalar(&g))?, &mut grads);
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

impl<F: Float> Ops<F> for Graph<F> {
    type Value = Var;

    fn constant(&self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }
    fn parameter(&self, t: Tensor<F>) -> Var {
        self.leaf(t)
    }
    fn value(&self, v: &Var) -> Tensor<F> {
        self.val(*v)
    }
    fn shape(&self, v: &Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }
    fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let y = k::broadcast_binary(&self.val(*a), &self.val(*b), |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a.0, b.0), self.rg(&[*a, *b])))
    }
    fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let y = k::broadcast_binary(&self.val(*a), &self.val(*b), |x, y| x - y)?;
        Ok(self.push(y, Op::Sub(a.0, b.0), self.rg(&[*a, *b])))
    }
    fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let y = k::broadcast_binary(&self.val(*a), &self.val(*b), |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a.0, b.0), self.rg(&[*a, *b])))
    }
    fn div(&self, a: &Var, b: &Var) -> Result<Var> {
        let y = k::broadcast_binary(&self.val(*a), &self.val(*b), |x, y| x / y)?;
        Ok(self.push(y, Op::Div(a.0, b.0), self.rg(&[*a, *b])))
    }
    fn affine(&self, x: &Var, scale: F, shift: F) -> Result<Var> {
        let y = self.val(*x).map(|v| scale * v + shift);
        Ok(self.unary(*x, y, Op::Affine(x.0, scale)))
    }
    fn relu(&self, x: &Var) -> Result<Var> {
        let y = self.val(*x).map(|v| v.max(F::zero()));
        Ok(self.unary(*x, y, Op::Relu(x.0)))
    }
    fn sigmoid(&self, x: &Var) -> Result<Var> {
        let y = self.val(*x).map(sigmoid);
        Ok(self.unary(*x, y, Op::Sigmoid(x.0)))
    }
    fn sqr(&self, x: &Var) -> Result<Var> {
        let y = self.val(*x).map(|v| v * v);
        Ok(self.unary(*x, y, Op::Sqr(x.0)))
    }
    fn abs(&self, x: &Var) -> Result<Var> {
        let y = self.val(*x).map(|v| v.abs());
        Ok(self.unary(*x, y, Op::Abs(x.0)))
    }
    fn pow(&self, base: &Var, exponent: &Var) -> Result<Var> {
        let (b, e) = (self.val(*base), self.val(*exponent));
        check_pow(&b, &e)?;
        let y = b.zip_map(&e, |b, e| b.powf(e))?;
        Ok(self.push(y, Op::Pow(base.0, exponent.0), self.rg(&[*base, *exponent])))
    }
    fn clamp(&self, x: &Var, lo: F, hi: F) -> Result<Var> {
        let y = self.val(*x).map(|v| v.max(lo).min(hi));
        Ok(self.unary(*x, y, Op::Clamp(x.0, lo, hi)))
    }
    fn sum_all(&self, x: &Var) -> Result<Var> {
        let y = Tensor::scalar(self.val(*x).sum());
        Ok(self.unary(*x, y, Op::SumAll(x.0)))
    }
    fn mean_all(&self, x: &Var) -> Result<Var> {
        let y = Tensor::scalar(self.val(*x).mean());
        Ok(self.unary(*x, y, Op::MeanAll(x.0)))
    }
    fn conv2d(&self, x: &Var, w: &Var, b: Option<&Var>, pad: usize) -> Result<Var> {
        let bt = b.map(|b| self.val(*b));
        let y = k::conv2d(&self.val(*x), &self.val(*w), bt.as_ref(), pad)?;
        let mut deps = vec![*x, *w];
        deps.extend(b.copied());
        let op = Op::Conv2d {
            x: x.0,
            w: w.0,
            b: b.map(|b| b.0),
            pad,
        };
        Ok(self.push(y, op, self.rg(&deps)))
    }
    fn conv_transpose2x2(&self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let bt = b.map(|b| self.val(*b));
        let y = k::conv_transpose2x2(&self.val(*x), &self.val(*w), bt.as_ref())?;
        let mut deps = vec![*x, *w];
        deps.extend(b.copied());
        let op = Op::ConvT {
            x: x.0,
            w: w.0,
            b: b.map(|b| b.0),
        };
        Ok(self.push(y, op, self.rg(&deps)))
    }
    fn max_pool2x2(&self, x: &Var) -> Result<Var> {
        let (y, idx) = k::max_pool2x2(&self.val(*x))?;
        Ok(self.unary(*x, y, Op::MaxPool { x: x.0, idx }))
    }
    fn batch_norm(
        &self,
        x: &Var,
        weight: &Var,
        bias: &Var,
        mode: &BnMode<F>,
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        let (y, saved, stats) = bn_run(&self.val(*x), &self.val(*weight), &self.val(*bias), mode)?;
        let op = Op::BatchNorm {
            x: x.0,
            w: weight.0,
            b: bias.0,
            saved,
            batch: matches!(mode, BnMode::Batch { .. }),
        };
        Ok((self.push(y, op, self.rg(&[*x, *weight, *bias])), stats))
    }
    fn global_avg_pool(&self, x: &Var) -> Result<Var> {
        let y = k::global_avg_pool(&self.val(*x))?;
        Ok(self.unary(*x, y, Op::GlobalAvg(x.0)))
    }
    fn global_max_pool(&self, x: &Var) -> Result<Var> {
        let (y, idx) = k::global_max_pool(&self.val(*x))?;
        Ok(self.unary(*x, y, Op::GlobalMax { x: x.0, idx }))
    }
    fn channel_mean(&self, x: &Var) -> Result<Var> {
        let y = k::channel_mean(&self.val(*x))?;
        Ok(self.unary(*x, y, Op::ChannelMean(x.0)))
    }
    fn channel_max(&self, x: &Var) -> Result<Var> {
        let (y, idx) = k::channel_max(&self.val(*x))?;
        Ok(self.unary(*x, y, Op::ChannelMax { x: x.0, idx }))
    }
    fn concat_channels(&self, xs: &[&Var]) -> Result<Var> {
        let vals: Vec<Tensor<F>> = xs.iter().map(|v| self.val(**v)).collect();
        let refs: Vec<&Tensor<F>> = vals.iter().collect();
        let y = k::concat_channels(&refs)?;
        let deps: Vec<Var> = xs.iter().map(|v| **v).collect();
        let op = Op::Concat(deps.iter().map(|v| v.0).collect());
        Ok(self.push(y, op, self.rg(&deps)))
    }
    fn narrow_channels(&self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let y = k::narrow_channels(&self.val(*x), start, len)?;
        Ok(self.unary(*x, y, Op::Narrow { x: x.0, start }))
    }
    fn separable_filter(&self, x: &Var, kh: Arc<Vec<F>>, kw: Arc<Vec<F>>) -> Result<Var> {
        let y = k::separable_filter(&self.val(*x), &kh, &kw)?;
        Ok(self.unary(*x, y, Op::Filter { x: x.0, kh, kw }))
    }
    fn tv_sum(&self, x: &Var) -> Result<Var> {
        let y = Tensor::scalar(k::tv_sum(&self.val(*x))?);
        Ok(self.unary(*x, y, Op::Tv(x.0)))
    }
}
