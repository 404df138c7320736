//! Multi-task segmentation network: a slab of adjacent slices is reduced
//! to a 2D feature map, passed through a small encoder/decoder with a
//! densely connected dilated bottleneck, and mapped to one logit map per
//! task (plus one raw-uncertainty map per task in heteroscedastic modes).
//!
//! The topology is fixed; widths, depth, dilation ladder and nonlinearity
//! slope come from [`ArchConfig`]. All convolutions are 3x3 stride 1 with
//! size-preserving padding except the 1x1 output head, so spatial dims
//! are preserved end to end and resolution changes happen only in the
//! explicit pool / upsample steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::{Error, Result, Scalar};

/// Which uncertainty head the network carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeteroMode {
    /// Logits only.
    Plain,
    /// Logits + raw flip-probability head.
    LabelFlip,
    /// Logits + log-variance head.
    PredVar,
}

impl HeteroMode {
    pub fn head_width(self, n_tasks: usize) -> usize {
        match self {
            HeteroMode::Plain => n_tasks,
            HeteroMode::LabelFlip | HeteroMode::PredVar => 2 * n_tasks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub n_slices: usize,
    pub base_channels: usize,
    pub encoder_depth: usize,
    pub bottleneck_dilations: Vec<usize>,
    pub n_tasks: usize,
    pub hetero: HeteroMode,
    pub leaky_slope: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            n_slices: 7,
            base_channels: 16,
            encoder_depth: 2,
            bottleneck_dilations: vec![1, 2, 4, 8],
            n_tasks: 11,
            hetero: HeteroMode::Plain,
            leaky_slope: 0.1,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_slices == 0
            || self.base_channels == 0
            || self.n_tasks == 0
            || self.bottleneck_dilations.is_empty()
        {
            return Err(Error::Config(format!("degenerate architecture: {self:?}")));
        }
        if self.bottleneck_dilations.iter().any(|&d| d == 0) {
            return Err(Error::Config("bottleneck dilation 0".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config(format!("leaky slope {} outside [0,1)", self.leaky_slope)));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.hetero.head_width(self.n_tasks)
    }
}

/// One conv layer's static description: the single source of truth used
/// by initialization, the analytic parameter count and the forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
struct ConvSpec {
    name: &'static str,
    index: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    dilation: usize,
}

impl ConvSpec {
    fn padding(&self) -> usize {
        // Size-preserving for odd k: d*(k-1)/2.
        self.dilation * (self.k - 1) / 2
    }

    fn weight_name(&self) -> String {
        format!("{}{}.w", self.name, self.index)
    }

    fn bias_name(&self) -> String {
        format!("{}{}.b", self.name, self.index)
    }

    fn n_params(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k + self.c_out
    }
}

fn conv_plan(cfg: &ArchConfig) -> Vec<ConvSpec> {
    let c = cfg.base_channels;
    let mut plan = Vec::new();
    let mut push = |name, index, c_in, c_out, k, dilation| {
        plan.push(ConvSpec { name, index, c_in, c_out, k, dilation });
    };
    push("slicered", 0, cfg.n_slices, c, 3, 1);
    push("slicered", 1, c, c, 3, 1);
    for e in 0..cfg.encoder_depth {
        push("enc", e, c << e, c << (e + 1), 3, 1);
    }
    let bottleneck_in = c << cfg.encoder_depth;
    for (i, &d) in cfg.bottleneck_dilations.iter().enumerate() {
        push("bottleneck", i, bottleneck_in + i * c, c, 3, d);
    }
    for e in (0..cfg.encoder_depth).rev() {
        // Below carries c<<(e+1) for e = depth-1 ... wait: the block below
        // decoder level e outputs c<<(e+1) except the bottleneck, which
        // outputs c. The skip adds c<<(e+1).
        let from_below = if e + 1 == cfg.encoder_depth { c } else { c << (e + 1) };
        push("dec", e, from_below + (c << (e + 1)), c << e, 3, 1);
    }
    push("head", 0, c, cfg.head_width(), 1, 1);
    plan
}

/// The network: an [`ArchConfig`] plus its named parameter tensors.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub cfg: ArchConfig,
    params: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Model<S> {
    /// Deterministic He-style initialization: conv weights from
    /// N(0, sqrt(2 / fan_in)), all biases zero, and the head entirely
    /// zero so the initial prediction is the head bias alone (p = 0.5
    /// until [`Model::set_head_bias`] installs class priors).
    pub fn build(cfg: ArchConfig, seed: u64) -> Result<Model<S>> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for spec in conv_plan(&cfg) {
            let fan_in = (spec.c_in * spec.k * spec.k) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            let n = spec.c_out * spec.c_in * spec.k * spec.k;
            let data: Vec<S> = if spec.name == "head" {
                vec![S::zero(); n]
            } else {
                (0..n).map(|_| S::fp(normal.sample(&mut rng))).collect()
            };
            params.push((
                spec.weight_name(),
                Tensor::new(vec![spec.c_out, spec.c_in, spec.k, spec.k], data),
            ));
            params.push((spec.bias_name(), Tensor::new(vec![spec.c_out], vec![S::zero(); spec.c_out])));
        }
        Ok(Model { cfg, params })
    }

    /// Rebuild from checkpointed tensors; shapes must match the plan.
    pub fn from_params(cfg: ArchConfig, params: Vec<(String, Tensor<S>)>) -> Result<Model<S>> {
        cfg.validate()?;
        let fresh = Model::<S>::build(cfg.clone(), 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Contract(format!(
                "parameter count mismatch: {} stored vs {} planned",
                params.len(),
                fresh.params.len()
            )));
        }
        for ((want_name, want), (name, got)) in fresh.params.iter().zip(&params) {
            if want_name != name || want.shape != got.shape {
                return Err(Error::Contract(format!(
                    "parameter {name} {:?} does not match plan entry {want_name} {:?}",
                    got.shape, want.shape
                )));
            }
        }
        Ok(Model { cfg, params })
    }

    pub fn params(&self) -> &[(String, Tensor<S>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor<S>)] {
        &mut self.params
    }

    /// Install per-task prior logits into the logit half of the head
    /// bias; uncertainty-head biases stay at zero.
    pub fn set_head_bias(&mut self, prior_logits: &[S]) -> Result<()> {
        if prior_logits.len() != self.cfg.n_tasks {
            return Err(Error::Contract(format!(
                "{} prior logits for {} tasks",
                prior_logits.len(),
                self.cfg.n_tasks
            )));
        }
        let (_, bias) = self
            .params
            .iter_mut()
            .find(|(n, _)| n == "head0.b")
            .expect("head bias exists by construction");
        bias.data[..prior_logits.len()].copy_from_slice(prior_logits);
        Ok(())
    }

    /// Analytic parameter count; asserted equal to the enumeration of the
    /// built model in tests.
    pub fn count_params(cfg: &ArchConfig) -> usize {
        conv_plan(cfg).iter().map(ConvSpec::n_params).sum()
    }

    /// Insert every parameter as a tape leaf, in plan order.
    pub fn insert_params(&self, tape: &mut Tape<S>) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.leaf(t.clone())).collect()
    }

    /// Forward pass on the tape. `params` must come from
    /// [`Model::insert_params`] on the same tape. Input is
    /// [B, n_slices, H, W] with H and W divisible by 2^encoder_depth;
    /// output is [B, head_width, H, W].
    pub fn forward(&self, tape: &mut Tape<S>, params: &[Var], input: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let shape = &tape.value(input).shape;
        let (&[_, c_in, h, w] | &[c_in, h, w]) = shape.as_slice() else {
            return Err(Error::Shape(format!("forward input must be [B,S,H,W], got {shape:?}")));
        };
        if c_in != cfg.n_slices {
            return Err(Error::Shape(format!(
                "input has {c_in} slices, architecture expects {}",
                cfg.n_slices
            )));
        }
        let pool = 1usize << cfg.encoder_depth;
        if h % pool != 0 || w % pool != 0 {
            return Err(Error::Shape(format!(
                "spatial dims {h}x{w} not divisible by 2^encoder_depth = {pool}"
            )));
        }
        let slope = S::fp(cfg.leaky_slope);
        let plan = conv_plan(cfg);
        let mut next = 0usize;
        // Parameters were inserted in plan order: weight, bias, weight, ...
        let mut conv = |tape: &mut Tape<S>, x: Var, spec: &ConvSpec| -> Result<Var> {
            let w = params[2 * next];
            let b = params[2 * next + 1];
            next += 1;
            tape.conv2d(x, w, b, 1, spec.dilation, spec.padding())
        };

        let mut specs = plan.iter();
        let mut x = input;
        for _ in 0..2 {
            x = conv(tape, x, specs.next().unwrap())?;
            x = tape.leaky_relu(x, slope);
        }
        let mut skips = Vec::with_capacity(cfg.encoder_depth);
        for _ in 0..cfg.encoder_depth {
            x = conv(tape, x, specs.next().unwrap())?;
            x = tape.leaky_relu(x, slope);
            skips.push(x);
            x = tape.downsample(x, 2);
        }
        // Dense bottleneck: block i sees the bottleneck input and every
        // previous block output; the last block's output moves on.
        let bottleneck_in = x;
        let mut produced: Vec<Var> = Vec::with_capacity(cfg.bottleneck_dilations.len());
        for _ in 0..cfg.bottleneck_dilations.len() {
            let mut stacked = bottleneck_in;
            for &prev in &produced {
                stacked = tape.concat(stacked, prev);
            }
            let y = conv(tape, stacked, specs.next().unwrap())?;
            produced.push(tape.leaky_relu(y, slope));
        }
        x = *produced.last().expect("dilations nonempty");
        for skip in skips.iter().rev() {
            x = tape.upsample_nearest(x, 2);
            x = tape.concat(x, *skip);
            x = conv(tape, x, specs.next().unwrap())?;
            x = tape.leaky_relu(x, slope);
        }
        conv(tape, x, specs.next().unwrap())
    }

    /// Tapeless inference: runs [`Model::forward`] on a scratch tape so
    /// training and inference share one code path bit for bit.
    pub fn infer(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let params = self.insert_params(&mut tape);
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(out).clone())
    }
}

/// Split a raw head output [.., head_width, H, W] into (logits,
/// uncertainty): the channel axis splits in half for heteroscedastic
/// modes, with channel i of each half belonging to task i.
pub fn split_heads<S: Scalar>(
    out: &Tensor<S>,
    n_tasks: usize,
    hetero: HeteroMode,
) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
    let (b, c, h, w) = match out.shape.as_slice() {
        &[c, h, w] => (1, c, h, w),
        &[b, c, h, w] => (b, c, h, w),
        s => return Err(Error::Shape(format!("head output rank {s:?}"))),
    };
    if c != hetero.head_width(n_tasks) {
        return Err(Error::Shape(format!(
            "head width {c} does not match {n_tasks} tasks in {hetero:?} mode"
        )));
    }
    let rank4 = out.shape.len() == 4;
    let mk_shape = |ch: usize| if rank4 { vec![b, ch, h, w] } else { vec![ch, h, w] };
    if hetero == HeteroMode::Plain {
        return Ok((Tensor::new(mk_shape(c), out.data.clone()), None));
    }
    let plane = h * w;
    let mut logits = Vec::with_capacity(b * n_tasks * plane);
    let mut unc = Vec::with_capacity(b * n_tasks * plane);
    for bi in 0..b {
        let src = &out.data[bi * c * plane..][..c * plane];
        logits.extend_from_slice(&src[..n_tasks * plane]);
        unc.extend_from_slice(&src[n_tasks * plane..]);
    }
    Ok((
        Tensor::new(mk_shape(n_tasks), logits),
        Some(Tensor::new(mk_shape(n_tasks), unc)),
    ))
}
