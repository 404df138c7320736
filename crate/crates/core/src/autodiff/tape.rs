//! Wengert tape. Ops push nodes that only reference earlier nodes, so
//! the list is topologically ordered by construction and backward is one
//! reverse sweep. `backward` takes the tape by value: a consumed tape
//! cannot be replayed.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// Handle to a node on one specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    #[inline]
    fn i(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    /// Leaf that never receives a gradient (labels, noise draws, masks).
    /// Backward skips every edge into it, so large constant inputs cost
    /// no gradient buffers.
    ConstLeaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, S),
    AddScalar(Var, S),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, S),
    LeakyRelu(Var, S),
    Clamp(Var, S, S),
    ReduceSum(Var),
    ReduceMean(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Downsample(Var, usize),
    UpsampleNearest(Var, usize),
    /// Channel-axis concat of two [B,C,H,W] tensors.
    Concat(Var, Var),
    /// Channel-axis slice [start, start+len) of a [B,C,H,W] tensor.
    Narrow(Var, usize, usize),
    /// Elementwise classification loss on logits: BCE when `gamma` is
    /// None, focal loss with that exponent otherwise. Fused so each pass
    /// costs one exp per element instead of a chain of nodes.
    BaseLogitLoss {
        logit: Var,
        target: Var,
        gamma: Option<S>,
    },
    /// Elementwise base loss of the flip probability q = 0.5*sigmoid(raw)
    /// against a constant 0/1 indicator, with -ln q composed as
    /// softplus(-raw) + ln 2 so it never saturates.
    FlipNll {
        raw: Var,
        z: Var,
        gamma: Option<S>,
    },
    /// Monte-Carlo predictive-variance loss, fused across draws:
    /// mean_k base(logit + sigma*eps_k, x) with sigma =
    /// exp(clamp(log_var, lo, hi)/2). `draws` holds T draws per element,
    /// interleaved [element][draw]; it and `x` are data (no gradient).
    PredVar {
        logit: Var,
        log_var: Var,
        x: Var,
        draws: Var,
        lo: S,
        hi: S,
        gamma: Option<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    check_finite: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Checked mode: every recorded value is scanned for NaN/Inf and a
    /// violation panics immediately, naming the op. For tests and debugging.
    pub fn with_finite_checks() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.i()].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        if self.check_finite && !value.all_finite() {
            panic!("non-finite value produced by {op:?}");
        }
        let id = u32::try_from(self.nodes.len()).expect("tape node count fits u32");
        self.nodes.push(Node { value, op });
        Var(id)
    }

    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf for data that never needs a gradient (labels, masks, noise
    /// draws). `Grads::get` returns None for it; backward skips all work
    /// on edges into it.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::ConstLeaf)
    }

    fn binary_elementwise(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (ta, tb) = (&self.nodes[a.i()].value, &self.nodes[b.i()].value);
        assert_eq!(
            ta.shape, tb.shape,
            "shape mismatch: {:?} vs {:?}",
            ta.shape, tb.shape
        );
        let data = ta
            .data
            .iter()
            .zip(tb.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape.clone(), data)
    }

    fn unary_elementwise(&mut self, a: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let ta = &self.nodes[a.i()].value;
        Tensor::new(ta.shape.clone(), ta.data.iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary_elementwise(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary_elementwise(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary_elementwise(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let t = self.unary_elementwise(a, |x| -x);
        self.push(t, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let t = self.unary_elementwise(a, |x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let t = self.unary_elementwise(a, |x| x + c);
        self.push(t, Op::AddScalar(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary_elementwise(a, kernels::sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.unary_elementwise(a, kernels::softplus);
        self.push(t, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary_elementwise(a, |x| x.exp());
        self.push(t, Op::Exp(a))
    }

    /// Natural log; inputs must be strictly positive.
    pub fn ln(&mut self, a: Var) -> Var {
        let t = self.unary_elementwise(a, |x| x.ln());
        self.push(t, Op::Ln(a))
    }

    /// x^p; inputs must be strictly positive (real power).
    pub fn powf(&mut self, a: Var, p: S) -> Var {
        let t = self.unary_elementwise(a, |x| x.powf(p));
        self.push(t, Op::Powf(a, p))
    }

    /// Negative side is scaled by `slope`; the subgradient at 0 uses the
    /// negative-side slope.
    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Var {
        let t = self.unary_elementwise(a, |x| if x > S::zero() { x } else { x * slope });
        self.push(t, Op::LeakyRelu(a, slope))
    }

    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        assert!(lo <= hi, "clamp bounds inverted");
        let t = self.unary_elementwise(a, |x| x.max(lo).min(hi));
        self.push(t, Op::Clamp(a, lo, hi))
    }

    pub fn reduce_sum(&mut self, a: Var) -> Var {
        let mut acc = S::zero();
        for &v in &self.nodes[a.i()].value.data {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::ReduceSum(a))
    }

    pub fn reduce_mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.i()].value.len();
        let mut acc = S::zero();
        for &v in &self.nodes[a.i()].value.data {
            acc += v;
        }
        let t = Tensor::scalar(acc / S::from_count(n));
        self.push(t, Op::ReduceMean(a))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ti, tw, tb) = (
            &self.nodes[input.i()].value,
            &self.nodes[weight.i()].value,
            &self.nodes[bias.i()].value,
        );
        let geom = ConvGeom::infer(&ti.shape, &tw.shape, stride, dilation, padding)?;
        if tb.shape != [geom.c_out] {
            return Err(Error::Shape(format!(
                "conv2d bias shape {:?} != [{}]",
                tb.shape, geom.c_out
            )));
        }
        let mut out = Tensor::zeros(geom.out_shape(ti.shape.len()));
        kernels::conv2d_fwd(&geom, &ti.data, &tw.data, &tb.data, &mut out.data);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    fn bchw(&self, a: Var, what: &str) -> (usize, usize, usize, usize) {
        let s = &self.nodes[a.i()].value.shape;
        let &[b, c, h, w] = s.as_slice() else {
            panic!("{what} expects [B,C,H,W], got {s:?}");
        };
        (b, c, h, w)
    }

    pub fn downsample(&mut self, a: Var, factor: usize) -> Var {
        let (b, c, h, w) = self.bchw(a, "downsample");
        assert!(
            factor >= 1 && h % factor == 0 && w % factor == 0,
            "downsample factor {factor} does not divide spatial dims {h}x{w}"
        );
        let mut out = Tensor::zeros(vec![b, c, h / factor, w / factor]);
        kernels::downsample_fwd(b, c, h, w, factor, &self.nodes[a.i()].value.data, &mut out.data);
        self.push(out, Op::Downsample(a, factor))
    }

    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Var {
        let (b, c, h, w) = self.bchw(a, "upsample_nearest");
        assert!(factor >= 1);
        let mut out = Tensor::zeros(vec![b, c, h * factor, w * factor]);
        kernels::upsample_fwd(b, c, h, w, factor, &self.nodes[a.i()].value.data, &mut out.data);
        self.push(out, Op::UpsampleNearest(a, factor))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ba, ca, ha, wa) = self.bchw(a, "concat");
        let (bb, cb, hb, wb) = self.bchw(b, "concat");
        assert!(
            ba == bb && ha == hb && wa == wb,
            "concat shape mismatch: {:?} vs {:?}",
            self.nodes[a.i()].value.shape,
            self.nodes[b.i()].value.shape
        );
        let mut out = Tensor::zeros(vec![ba, ca + cb, ha, wa]);
        let plane = ha * wa;
        let (da, db) = (&self.nodes[a.i()].value.data, &self.nodes[b.i()].value.data);
        for bi in 0..ba {
            let dst = &mut out.data[bi * (ca + cb) * plane..][..(ca + cb) * plane];
            dst[..ca * plane].copy_from_slice(&da[bi * ca * plane..][..ca * plane]);
            dst[ca * plane..].copy_from_slice(&db[bi * cb * plane..][..cb * plane]);
        }
        self.push(out, Op::Concat(a, b))
    }

    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (b, c, h, w) = self.bchw(a, "narrow");
        assert!(start + len <= c, "narrow [{start},{}) exceeds {c} channels", start + len);
        let plane = h * w;
        let mut out = Tensor::zeros(vec![b, len, h, w]);
        let src = &self.nodes[a.i()].value.data;
        for bi in 0..b {
            out.data[bi * len * plane..][..len * plane].copy_from_slice(
                &src[(bi * c + start) * plane..][..len * plane],
            );
        }
        self.push(out, Op::Narrow(a, start, len))
    }

    /// Per-element classification loss on logits: the stable logit-space
    /// BCE max(l,0) - l*t + ln(1 + e^-|l|) when `gamma` is None, focal
    /// loss t*(1-p)^g*softplus(-l) + (1-t)*p^g*softplus(l) otherwise.
    pub fn base_logit_loss(&mut self, logit: Var, target: Var, gamma: Option<S>) -> Var {
        let t = self.binary_elementwise(logit, target, |l, t| match gamma {
            None => kernels::bce_logit(l, t),
            Some(g) => kernels::focal_logit(l, t, g),
        });
        self.push(t, Op::BaseLogitLoss { logit, target, gamma })
    }

    /// Per-element base loss of the flip probability q = 0.5*sigmoid(raw)
    /// against the 0/1 indicator `z`, with -ln q composed as
    /// softplus(-raw) + ln 2. `z` is data, not a variable: it receives no
    /// gradient even when built with `leaf`.
    pub fn flip_nll(&mut self, raw: Var, z: Var, gamma: Option<S>) -> Var {
        let t = self.binary_elementwise(raw, z, |r, z| kernels::flip_nll(r, z, gamma));
        self.push(t, Op::FlipNll { raw, z, gamma })
    }

    /// Monte-Carlo predictive-variance loss over T draws, fused into one
    /// node: out_i = (1/T) * sum_k base(logit_i + sigma_i * eps_ik, x_i)
    /// with sigma = exp(clamp(log_var, lo, hi)/2). `draws` holds the
    /// eps values interleaved [element][draw] (length T * n); `x` and
    /// `draws` are data and receive no gradient.
    pub fn predictive_variance(
        &mut self,
        logit: Var,
        log_var: Var,
        x: Var,
        draws: Var,
        lo: S,
        hi: S,
        gamma: Option<S>,
    ) -> Var {
        let shape = self.nodes[logit.i()].value.shape.clone();
        assert_eq!(self.nodes[log_var.i()].value.shape, shape, "log_var shape mismatch");
        assert_eq!(self.nodes[x.i()].value.shape, shape, "label shape mismatch");
        let n = self.nodes[logit.i()].value.len();
        let dn = self.nodes[draws.i()].value.len();
        assert!(
            n > 0 && dn % n == 0 && dn >= n,
            "draw count {dn} is not a positive multiple of {n} elements"
        );
        let t = dn / n;
        let inv_t = S::one() / S::from_count(t);
        let half = S::fp(0.5);
        let vl = &self.nodes[logit.i()].value.data;
        let vs = &self.nodes[log_var.i()].value.data;
        let vx = &self.nodes[x.i()].value.data;
        let vd = &self.nodes[draws.i()].value.data;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let sig = (vs[i].max(lo).min(hi) * half).exp();
            let mut a = S::zero();
            for &e in &vd[i * t..][..t] {
                let lp = vl[i] + sig * e;
                a = a + match gamma {
                    None => kernels::bce_logit(lp, vx[i]),
                    Some(g) => kernels::focal_logit(lp, vx[i], g),
                };
            }
            out.push(a * inv_t);
        }
        self.push(
            Tensor::new(shape, out),
            Op::PredVar { logit, log_var, x, draws, lo, hi, gamma },
        )
    }

    /// Reverse-mode sweep from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Grads<S>> {
        let n = self.nodes.len();
        if self.nodes[loss.i()].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.i()].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; n];
        grads[loss.i()] = Some(vec![S::one()]);

        // Gradients only flow to earlier nodes, so one reverse pass
        // visits every node exactly once.
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf => {
                    grads[i] = Some(g); // keep: leaves are what callers read
                }
                Op::ConstLeaf => {} // drop: constants never report gradients
                Op::Add(a, b) => {
                    axpy(acc(&mut grads, a, &self.nodes), S::one(), &g);
                    axpy(acc(&mut grads, b, &self.nodes), S::one(), &g);
                }
                Op::Sub(a, b) => {
                    axpy(acc(&mut grads, a, &self.nodes), S::one(), &g);
                    axpy(acc(&mut grads, b, &self.nodes), -S::one(), &g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.i()].value.data, &self.nodes[b.i()].value.data);
                    mul_acc(acc(&mut grads, a, &self.nodes), &g, vb);
                    mul_acc(acc(&mut grads, b, &self.nodes), &g, va);
                }
                Op::Neg(a) => axpy(acc(&mut grads, a, &self.nodes), -S::one(), &g),
                Op::Scale(a, c) => axpy(acc(&mut grads, a, &self.nodes), c, &g),
                Op::AddScalar(a, _) => axpy(acc(&mut grads, a, &self.nodes), S::one(), &g),
                Op::Sigmoid(a) => {
                    let y = &node.value.data;
                    if let Some(da) = acc(&mut grads, a, &self.nodes) {
                        for j in 0..g.len() {
                            da[j] += g[j] * y[j] * (S::one() - y[j]);
                        }
                    }
                }
                Op::Softplus(a) => {
                    let x = &self.nodes[a.i()].value.data;
                    if let Some(da) = acc(&mut grads, a, &self.nodes) {
                        for j in 0..g.len() {
                            da[j] += g[j] * kernels::sigmoid(x[j]);
                        }
                    }
                }
                Op::Exp(a) => {
                    let y = &node.value.data;
                    mul_acc(acc(&mut grads, a, &self.nodes), &g, y);
                }
                Op::Ln(a) => {
                    let x = &self.nodes[a.i()].value.data;
                    if let Some(da) = acc(&mut grads, a, &self.nodes) {
                        for j in 0..g.len() {
                            da[j] += g[j] / x[j];
                        }
                    }
                }
                Op::Powf(a, p) => {
                    // p == 0 has derivative identically 0; computing it as
                    // 0 * x^-1 would produce NaN when x underflows.
                    if p != S::zero() {
                        let x = &self.nodes[a.i()].value.data;
                        if let Some(da) = acc(&mut grads, a, &self.nodes) {
                            for j in 0..g.len() {
                                da[j] += g[j] * p * x[j].powf(p - S::one());
                            }
                        }
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let x = &self.nodes[a.i()].value.data;
                    if let Some(da) = acc(&mut grads, a, &self.nodes) {
                        for j in 0..g.len() {
                            da[j] += g[j] * if x[j] > S::zero() { S::one() } else { slope };
                        }
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.nodes[a.i()].value.data;
                    if let Some(da) = acc(&mut grads, a, &self.nodes) {
                        for j in 0..g.len() {
                            if x[j] >= lo && x[j] <= hi {
                                da[j] += g[j];
                            }
                        }
                    }
                }
                Op::ReduceSum(a) => {
                    if let Some(da) = acc(&mut grads, a, &self.nodes) {
                        for v in da.iter_mut() {
                            *v += g[0];
                        }
                    }
                }
                Op::ReduceMean(a) => {
                    let len = self.nodes[a.i()].value.len();
                    let gv = g[0] / S::from_count(len);
                    if let Some(da) = acc(&mut grads, a, &self.nodes) {
                        for v in da.iter_mut() {
                            *v += gv;
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    if let Some(di) = acc(&mut grads, input, &self.nodes) {
                        kernels::conv2d_bwd_input(
                            &geom,
                            &self.nodes[weight.i()].value.data,
                            &g,
                            di,
                        );
                    }
                    if let Some(dw) = acc(&mut grads, weight, &self.nodes) {
                        kernels::conv2d_bwd_weight(
                            &geom,
                            &self.nodes[input.i()].value.data,
                            &g,
                            dw,
                        );
                    }
                    if let Some(db) = acc(&mut grads, bias, &self.nodes) {
                        kernels::conv2d_bwd_bias(&geom, &g, db);
                    }
                }
                Op::Downsample(a, f) => {
                    let s = &self.nodes[a.i()].value.shape;
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    if let Some(da) = acc(&mut grads, a, &self.nodes) {
                        kernels::downsample_bwd(b, c, h, w, f, &g, da);
                    }
                }
                Op::UpsampleNearest(a, f) => {
                    let s = &self.nodes[a.i()].value.shape;
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    if let Some(da) = acc(&mut grads, a, &self.nodes) {
                        kernels::upsample_bwd(b, c, h, w, f, &g, da);
                    }
                }
                Op::Concat(a, b) => {
                    let sa = &self.nodes[a.i()].value.shape;
                    let sb = &self.nodes[b.i()].value.shape;
                    let (bs, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                    if let Some(da) = acc(&mut grads, a, &self.nodes) {
                        for bi in 0..bs {
                            let src = &g[bi * (ca + cb) * plane..][..ca * plane];
                            let dst = &mut da[bi * ca * plane..][..ca * plane];
                            for j in 0..dst.len() {
                                dst[j] += src[j];
                            }
                        }
                    }
                    if let Some(db) = acc(&mut grads, b, &self.nodes) {
                        for bi in 0..bs {
                            let src = &g[(bi * (ca + cb) + ca) * plane..][..cb * plane];
                            let dst = &mut db[bi * cb * plane..][..cb * plane];
                            for j in 0..dst.len() {
                                dst[j] += src[j];
                            }
                        }
                    }
                }
                Op::Narrow(a, start, len) => {
                    let s = &self.nodes[a.i()].value.shape;
                    let (bs, c, plane) = (s[0], s[1], s[2] * s[3]);
                    if let Some(da) = acc(&mut grads, a, &self.nodes) {
                        for bi in 0..bs {
                            let src = &g[bi * len * plane..][..len * plane];
                            let dst = &mut da[(bi * c + start) * plane..][..len * plane];
                            for j in 0..dst.len() {
                                dst[j] += src[j];
                            }
                        }
                    }
                }
                Op::BaseLogitLoss { logit, target, gamma } => {
                    let vl = &self.nodes[logit.i()].value.data;
                    let vt = &self.nodes[target.i()].value.data;
                    match gamma {
                        None => {
                            if let Some(dl) = acc(&mut grads, logit, &self.nodes) {
                                for j in 0..g.len() {
                                    dl[j] += g[j] * (kernels::sigmoid(vl[j]) - vt[j]);
                                }
                            }
                            if let Some(dt) = acc(&mut grads, target, &self.nodes) {
                                for j in 0..g.len() {
                                    dt[j] -= g[j] * vl[j];
                                }
                            }
                        }
                        Some(gam) => {
                            // One pass computes both partials; the target
                            // grad is staged in a scratch vec so the
                            // transcendentals are shared, not recomputed.
                            let need_dt = !matches!(self.nodes[target.i()].op, Op::ConstLeaf);
                            let mut dt_tmp = vec![S::zero(); if need_dt { g.len() } else { 0 }];
                            if let Some(dl) = acc(&mut grads, logit, &self.nodes) {
                                for j in 0..g.len() {
                                    let (dl_j, dt_j) = kernels::focal_logit_bwd(vl[j], vt[j], gam);
                                    dl[j] += g[j] * dl_j;
                                    if need_dt {
                                        dt_tmp[j] = g[j] * dt_j;
                                    }
                                }
                            } else if need_dt {
                                for j in 0..g.len() {
                                    let (_, dt_j) = kernels::focal_logit_bwd(vl[j], vt[j], gam);
                                    dt_tmp[j] = g[j] * dt_j;
                                }
                            }
                            if need_dt {
                                axpy(acc(&mut grads, target, &self.nodes), S::one(), &dt_tmp);
                            }
                        }
                    }
                }
                Op::FlipNll { raw, z, gamma } => {
                    let vr = &self.nodes[raw.i()].value.data;
                    let vz = &self.nodes[z.i()].value.data;
                    if let Some(dr) = acc(&mut grads, raw, &self.nodes) {
                        for j in 0..g.len() {
                            dr[j] += g[j] * kernels::flip_nll_bwd(vr[j], vz[j], gamma);
                        }
                    }
                    // z is a constant indicator: no gradient by design.
                }
                Op::PredVar { logit, log_var, x, draws, lo, hi, gamma } => {
                    let vl = &self.nodes[logit.i()].value.data;
                    let vs = &self.nodes[log_var.i()].value.data;
                    let vx = &self.nodes[x.i()].value.data;
                    let vd = &self.nodes[draws.i()].value.data;
                    let n = g.len();
                    let t = vd.len() / n;
                    let inv_t = S::one() / S::from_count(t);
                    let half = S::fp(0.5);
                    // One pass over the draws serves both partials; each
                    // is staged, then accumulated where a grad is wanted.
                    let mut dl_tmp = vec![S::zero(); n];
                    let mut ds_tmp = vec![S::zero(); n];
                    for i in 0..n {
                        let sig = (vs[i].max(lo).min(hi) * half).exp();
                        let (mut al, mut ae) = (S::zero(), S::zero());
                        for &e in &vd[i * t..][..t] {
                            let lp = vl[i] + sig * e;
                            let d = match gamma {
                                None => kernels::sigmoid(lp) - vx[i],
                                Some(gm) => kernels::focal_logit_bwd(lp, vx[i], gm).0,
                            };
                            al = al + d;
                            ae = ae + d * e;
                        }
                        dl_tmp[i] = g[i] * inv_t * al;
                        // d sigma / d log_var = sigma/2 inside the clamp
                        // window, zero outside (same rule as Op::Clamp).
                        if vs[i] >= lo && vs[i] <= hi {
                            ds_tmp[i] = g[i] * inv_t * ae * sig * half;
                        }
                    }
                    axpy(acc(&mut grads, logit, &self.nodes), S::one(), &dl_tmp);
                    axpy(acc(&mut grads, log_var, &self.nodes), S::one(), &ds_tmp);
                    // x and draws are data: no gradient by design.
                }
            }
        }

        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Grads { grads, shapes })
    }
}

/// Gradient accumulator for `v`, or None when `v` is a constant leaf and
/// the work can be skipped outright.
fn acc<'g, S: Scalar>(
    grads: &'g mut [Option<Vec<S>>],
    v: Var,
    nodes: &[Node<S>],
) -> Option<&'g mut Vec<S>> {
    if matches!(nodes[v.i()].op, Op::ConstLeaf) {
        return None;
    }
    Some(grads[v.i()].get_or_insert_with(|| vec![S::zero(); nodes[v.i()].value.len()]))
}

fn axpy<S: Scalar>(dst: Option<&mut Vec<S>>, a: S, x: &[S]) {
    let Some(dst) = dst else { return };
    for j in 0..dst.len() {
        dst[j] += a * x[j];
    }
}

fn mul_acc<S: Scalar>(dst: Option<&mut Vec<S>>, g: &[S], other: &[S]) {
    let Some(dst) = dst else { return };
    for j in 0..dst.len() {
        dst[j] += g[j] * other[j];
    }
}

/// Gradients per tape node, indexed by the `Var` handles of the
/// originating tape.
pub struct Grads<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of the loss w.r.t. `v`; None if no path reached it.
    pub fn get(&self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.i()]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.i()].clone(), g.clone()))
    }

    /// Gradient data without the shape copy.
    pub fn data(&self, v: Var) -> Option<&[S]> {
        self.grads[v.i()].as_deref()
    }
}
