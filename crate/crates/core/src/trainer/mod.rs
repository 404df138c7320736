//! Training: warm restarts with a cosine schedule, RMSProp, staged
//! introduction of the uncertainty head, and (for the label-flip loss)
//! periodic rejection of training voxels the model confidently
//! contradicts.
//!
//! A run is a fixed number of restarts, each `restart_period` gradient
//! steps long. Stages partition the restarts: a plain warmup that
//! ignores the uncertainty head, a stage training the configured loss,
//! and, for the label-flip loss only, a final stage whose voxel
//! rejection masks are refreshed every `refresh_period` restarts.
//! State is checkpointed at every restart boundary (parameters plus
//! optimizer state), so a run can resume exactly where it stopped; all
//! randomness is reseeded per restart from the run seed, making
//! training deterministic and resume byte-exact for f32 parameters.

mod sampler;

pub use sampler::{
    draw_params, extract_patch, full_mask, mirror_labels, mirror_volume, sample_batch, Patch,
    PatchBatch, PatchParams, SampleConfig, TrainCase,
};

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::eval::{self, Orientation};
use crate::losses::{self, BaseLoss};
use crate::model::{ArchConfig, HeteroMode, Model};
use crate::phantom::{self, CaseRecord, Split};
use crate::volio::{
    fmt_f64, read_checkpoint, read_label, write_checkpoint, write_label, Checkpoint, CsvTable,
    LabelField, ParamArray, ScalarField, TaskManifest,
};
use crate::{Error, Result, Scalar};

/// Slices per forward pass in whole-volume inference (validation
/// curves, rejection refresh).
pub const INFER_BATCH: usize = 8;
pub const CURVE_FILE: &str = "curve.csv";
pub const REJECTION_DIR: &str = "rejection";
pub const REJECTION_STATS_FILE: &str = "rejection_stats.csv";
/// Rewritten atomically at every restart boundary; the resume point.
pub const LATEST_CKPT: &str = "latest.mckp";

/// Base loss selector; the focal exponent lives in
/// [`TrainConfig::focal_gamma`] so the config stays flat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    Bce,
    Focal,
}

/// Labels the validation curve is scored against. Weak mirrors what the
/// loss sees; clean exposes memorization of the label noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveReference {
    Clean,
    Weak,
}

/// How the flip-probability condition combines across the three views
/// during rejection. Disagreement must be unanimous under every rule;
/// the rules differ only in which q must sit below the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionRule {
    /// q < threshold in every view independently.
    PerView,
    /// q of the view-averaged raw output < threshold.
    Ensembled,
    /// The smallest per-view q < threshold.
    MinView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hetero: HeteroMode,
    pub base: BaseKind,
    pub focal_gamma: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Steps per restart; the cosine schedule spans exactly one restart.
    pub restart_period: usize,
    pub batch_size: usize,
    pub warmup_restarts: usize,
    /// Restarts training the configured loss after warmup. None picks
    /// the stage defaults: 24 for the label-flip loss (rejection does
    /// the long haul), otherwise 120.
    pub hetero_restarts: Option<usize>,
    /// Restarts with voxel rejection active. None means 96 for the
    /// label-flip loss and 0 otherwise; a nonzero value with any other
    /// loss is a configuration error.
    pub rejection_restarts: Option<usize>,
    /// Flip-probability ceiling below which a confidently contradicted
    /// voxel is rejected.
    pub q_threshold: f64,
    /// How the q condition combines across views.
    pub rejection_rule: RejectionRule,
    /// Rejection masks are recomputed every this many restarts within
    /// the rejection stage.
    pub refresh_period: usize,
    /// Monte-Carlo draws per voxel for the predictive-variance loss.
    pub mc_samples: usize,
    pub augment_reflect: bool,
    pub augment_rotate: bool,
    pub augment_intensity: bool,
    pub rotation_max_deg: f64,
    /// Validation Dice is appended to curve.csv every this many restarts.
    pub curve_every: usize,
    pub curve_reference: CurveReference,
    /// latest.mckp is rewritten at every restart boundary; a numbered
    /// ckpt_NNNN.mckp is additionally kept every this many restarts
    /// (and always at restart 0 and at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hetero: HeteroMode::LabelFlip,
            base: BaseKind::Focal,
            focal_gamma: BaseLoss::DEFAULT_FOCAL_GAMMA,
            lr_max: 1e-4,
            lr_min: 1e-7,
            restart_period: 200,
            batch_size: 2,
            warmup_restarts: 5,
            hetero_restarts: None,
            rejection_restarts: None,
            q_threshold: 1e-3,
            rejection_rule: RejectionRule::PerView,
            refresh_period: 5,
            mc_samples: 10,
            augment_reflect: true,
            augment_rotate: true,
            augment_intensity: true,
            rotation_max_deg: 15.0,
            curve_every: 1,
            curve_reference: CurveReference::Clean,
            checkpoint_every: 10,
            seed: 0,
        }
    }
}

/// Which stage a restart belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StagePhase {
    /// Plain base loss on the logit head only.
    Warmup,
    /// The configured loss, full label set.
    Hetero,
    /// The configured loss under refreshed rejection masks.
    Rejection,
}

impl TrainConfig {
    pub fn base_loss(&self) -> BaseLoss {
        match self.base {
            BaseKind::Bce => BaseLoss::Bce,
            BaseKind::Focal => BaseLoss::Focal { gamma: self.focal_gamma },
        }
    }

    pub fn hetero_restarts(&self) -> usize {
        self.hetero_restarts.unwrap_or(match self.hetero {
            HeteroMode::LabelFlip => 24,
            HeteroMode::Plain | HeteroMode::PredVar => 120,
        })
    }

    pub fn rejection_restarts(&self) -> usize {
        self.rejection_restarts.unwrap_or(match self.hetero {
            HeteroMode::LabelFlip => 96,
            HeteroMode::Plain | HeteroMode::PredVar => 0,
        })
    }

    pub fn total_restarts(&self) -> usize {
        self.warmup_restarts + self.hetero_restarts() + self.rejection_restarts()
    }

    pub fn phase_of(&self, restart: usize) -> StagePhase {
        debug_assert!(restart < self.total_restarts());
        if restart < self.warmup_restarts {
            StagePhase::Warmup
        } else if restart < self.warmup_restarts + self.hetero_restarts() {
            StagePhase::Hetero
        } else {
            StagePhase::Rejection
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if !(self.lr_min.is_finite() && self.lr_max.is_finite() && 0.0 < self.lr_min) {
            return err(format!("learning rates must be finite and positive, got {} / {}", self.lr_min, self.lr_max));
        }
        if self.lr_min >= self.lr_max {
            return err(format!("lr_min {} must be below lr_max {}", self.lr_min, self.lr_max));
        }
        if self.restart_period == 0 || self.batch_size == 0 {
            return err("restart_period and batch_size must be >= 1".into());
        }
        if !self.focal_gamma.is_finite() || self.focal_gamma < 0.0 {
            return err(format!("focal_gamma {} must be finite and >= 0", self.focal_gamma));
        }
        if !(self.q_threshold > 0.0 && self.q_threshold < 0.5) {
            // q = 0.5 * sigmoid never leaves (0, 0.5)
            return err(format!("q_threshold {} outside (0, 0.5)", self.q_threshold));
        }
        if self.refresh_period == 0 || self.curve_every == 0 || self.checkpoint_every == 0 {
            return err("refresh_period, curve_every and checkpoint_every must be >= 1".into());
        }
        if self.mc_samples == 0 {
            return err("mc_samples must be >= 1".into());
        }
        if !self.rotation_max_deg.is_finite() || self.rotation_max_deg < 0.0 {
            return err(format!("rotation_max_deg {} must be finite and >= 0", self.rotation_max_deg));
        }
        if self.rejection_restarts() > 0 && self.hetero != HeteroMode::LabelFlip {
            return err("voxel rejection needs the flip-probability head; it is defined only for the label-flip loss".into());
        }
        Ok(())
    }

    fn sample_config(&self, n_slices: usize) -> SampleConfig {
        SampleConfig {
            n_slices,
            reflect: self.augment_reflect,
            rotate: self.augment_rotate,
            intensity: self.augment_intensity,
            rotation_max_deg: self.rotation_max_deg,
        }
    }
}

/// Cosine annealing within a restart: lr_max at step 0, decaying to
/// almost lr_min at step `restart_period - 1`, snapping back at the
/// boundary.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let frac = (step % cfg.restart_period) as f64 / cfg.restart_period as f64;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// RMSProp with per-element second-moment accumulators.
#[derive(Debug, Clone)]
pub struct RmsProp<S> {
    pub decay: f64,
    pub eps: f64,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> RmsProp<S> {
    pub fn new(params: &[(String, Tensor<S>)]) -> Self {
        RmsProp {
            decay: 0.9,
            eps: 1e-8,
            v: params.iter().map(|(_, t)| Tensor::zeros(t.shape.clone())).collect(),
        }
    }

    /// One update: v <- decay v + (1-decay) g^2, p <- p - lr g/(sqrt(v)+eps).
    /// If any gradient entry is non-finite the step is refused whole
    /// (nothing mutated) and false is returned; the caller logs and
    /// moves to the next batch.
    pub fn step(&mut self, params: &mut [(String, Tensor<S>)], grads: &[Tensor<S>], lr: f64) -> bool {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        assert_eq!(params.len(), self.v.len(), "optimizer built for another model");
        if grads.iter().any(|g| g.data.iter().any(|x| !x.is_finite())) {
            return false;
        }
        let (d, lr, eps) = (S::fp(self.decay), S::fp(lr), S::fp(self.eps));
        let rest = S::one() - d;
        for ((v, g), (_, p)) in self.v.iter_mut().zip(grads).zip(params.iter_mut()) {
            assert_eq!(v.shape, g.shape, "gradient shape drifted");
            for i in 0..g.data.len() {
                let gi = g.data[i];
                v.data[i] = d * v.data[i] + rest * gi * gi;
                p.data[i] -= lr * gi / (v.data[i].sqrt() + eps);
            }
        }
        true
    }
}

/// The loss actually wired into the graph for a given stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Plain,
    LabelFlip,
    PredVar,
}

pub fn loss_kind(mode: HeteroMode, phase: StagePhase) -> LossKind {
    match (mode, phase) {
        (_, StagePhase::Warmup) | (HeteroMode::Plain, _) => LossKind::Plain,
        (HeteroMode::LabelFlip, _) => LossKind::LabelFlip,
        (HeteroMode::PredVar, _) => LossKind::PredVar,
    }
}

/// Wire the per-voxel loss for `kind` onto `out` (the full head output,
/// [B, head_width, H, W]) and reduce it to a masked mean. `mc_draws` is
/// required exactly when `kind` is the predictive-variance loss; see
/// [`losses::mc_draw_block`] for its layout.
pub fn build_loss<S: Scalar>(
    tape: &mut Tape<S>,
    out: Var,
    n_tasks: usize,
    kind: LossKind,
    base: BaseLoss,
    labels: &Tensor<S>,
    mask: &Tensor<S>,
    mc_draws: Option<Tensor<S>>,
) -> Result<Var> {
    let width = tape.value(out).shape[1];
    let logits = if width > n_tasks { tape.narrow(out, 0, n_tasks) } else { out };
    let per_voxel = match kind {
        LossKind::Plain => {
            let target = tape.constant(labels.clone());
            losses::base_graph(tape, base, logits, target)
        }
        LossKind::LabelFlip => {
            let raw = tape.narrow(out, n_tasks, n_tasks);
            losses::label_flip_graph(tape, logits, raw, labels, base)
        }
        LossKind::PredVar => {
            let draws = mc_draws.ok_or_else(|| {
                Error::Contract("the predictive-variance loss needs a draw block".into())
            })?;
            let log_var = tape.narrow(out, n_tasks, n_tasks);
            losses::predictive_variance_graph_flat(tape, logits, log_var, labels, draws, base)
        }
    };
    Ok(losses::masked_mean_graph(tape, per_voxel, mask))
}

/// Per-task prior logits ln(p/(1-p)) from empirical label frequencies,
/// clamped away from the degenerate rates 0 and 1.
pub fn class_prior_logits<S: Scalar>(cases: &[TrainCase], n_tasks: usize) -> Vec<S> {
    let mut on = vec![0usize; n_tasks];
    let mut total = 0usize;
    for case in cases {
        for linear in 0..case.labels.n_voxels() {
            for (t, slot) in on.iter_mut().enumerate() {
                *slot += case.labels.get(linear, t) as usize;
            }
        }
        total += case.labels.n_voxels();
    }
    on.iter()
        .map(|&c| {
            let p = (c as f64 / total.max(1) as f64).clamp(1e-6, 1.0 - 1e-6);
            S::fp((p / (1.0 - p)).ln())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset loading.

/// A validation case: image plus both label versions, so curves can be
/// scored against either reference.
#[derive(Debug, Clone)]
pub struct ValCase {
    pub index: usize,
    pub image: ScalarField,
    pub clean: LabelField,
    pub weak: LabelField,
}

pub struct LoadedData {
    pub manifest: TaskManifest,
    pub train: Vec<TrainCase>,
    pub train_records: Vec<CaseRecord>,
    pub val: Vec<ValCase>,
}

/// Read the train and val splits of a generated dataset. Training cases
/// start with every voxel trainable; weak labels are the training
/// reference throughout.
pub fn load_dataset(data_dir: &Path) -> Result<LoadedData> {
    let manifest = TaskManifest::read(&data_dir.join(phantom::TASKS_FILE))?;
    let records = phantom::read_index(data_dir)?;
    let mut train = Vec::new();
    let mut train_records = Vec::new();
    let mut val = Vec::new();
    for rec in records {
        if rec.split == Split::Test {
            continue;
        }
        let case = phantom::read_case(&rec.dir)?;
        let dims = case.image.dims;
        if case.weak.n_tasks != manifest.n_tasks() {
            return Err(Error::Shape(format!(
                "case {}: {} label tasks vs manifest {}",
                rec.index,
                case.weak.n_tasks,
                manifest.n_tasks()
            )));
        }
        if dims.0 != dims.1 || dims.1 != dims.2 {
            return Err(Error::Contract(format!(
                "case {}: training requires cubic volumes, got {dims:?}",
                rec.index
            )));
        }
        match rec.split {
            Split::Train => {
                train.push(TrainCase::unmasked(case.image, case.weak));
                train_records.push(rec);
            }
            Split::Val => val.push(ValCase {
                index: rec.index,
                image: case.image,
                clean: case.clean,
                weak: case.weak,
            }),
            Split::Test => unreachable!(),
        }
    }
    if train.is_empty() {
        return Err(Error::Config("dataset has no training cases".into()));
    }
    if let Some(first) = train.first() {
        let dims = first.image.dims;
        if train.iter().any(|c| c.image.dims != dims) || val.iter().any(|c| c.image.dims != dims) {
            return Err(Error::Contract("all cases must share one volume shape".into()));
        }
    }
    Ok(LoadedData { manifest, train, train_records, val })
}

// ---------------------------------------------------------------------------
// Rejection refresh.

/// Per-case outcome of one rejection refresh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefreshStats {
    /// Position within the training split (not the dataset index).
    pub case: usize,
    /// Voxel-tasks masked out of training.
    pub masked: usize,
    /// Voxel-tasks where every view contradicts the weak label,
    /// regardless of confidence.
    pub disagreeing: usize,
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Recompute rejection masks from scratch: a voxel-task is masked out
/// iff, in all three orientations, the predicted label contradicts the
/// weak label AND the flip head is confident the label is clean
/// (q below `q_threshold`, combined across views per `rule`).
/// Agreement in any single view keeps the voxel, so a voxel the model
/// agrees with is never rejected. Returns one keep-mask per case
/// (bit set = train on it), aligned with `cases`.
pub fn rejection_refresh<S: Scalar>(
    model: &Model<S>,
    cases: &[TrainCase],
    q_threshold: f64,
    rule: RejectionRule,
) -> Result<(Vec<LabelField>, Vec<RefreshStats>)> {
    if model.cfg.hetero != HeteroMode::LabelFlip {
        return Err(Error::Contract(
            "voxel rejection requires a model with a flip-probability head".into(),
        ));
    }
    let n_tasks = model.cfg.n_tasks;
    let mut masks = Vec::with_capacity(cases.len());
    let mut stats = Vec::with_capacity(cases.len());
    for (ci, case) in cases.iter().enumerate() {
        let views = eval::predict_volume(model, &case.image, &Orientation::ALL, INFER_BATCH)?;
        let mut keep = full_mask(case.labels.dims, n_tasks);
        let (mut masked, mut disagreeing) = (0usize, 0usize);
        for linear in 0..case.labels.n_voxels() {
            for t in 0..n_tasks {
                let weak = case.labels.get(linear, t);
                let mut all_contradict = true;
                let mut raws = [0.0f64; 3];
                for (vi, view) in views.iter().enumerate() {
                    if (view.logits.at(t, linear).f64() > 0.0) == weak {
                        all_contradict = false;
                        break;
                    }
                    raws[vi] = view
                        .uncertainty
                        .as_ref()
                        .ok_or_else(|| {
                            Error::Contract("flip-head model produced no uncertainty volume".into())
                        })?
                        .at(t, linear)
                        .f64();
                }
                if all_contradict {
                    disagreeing += 1;
                    let q = |raw: f64| 0.5 * sigmoid64(raw);
                    let confident = match rule {
                        RejectionRule::PerView => raws.iter().all(|&r| q(r) < q_threshold),
                        RejectionRule::Ensembled => {
                            q(raws.iter().sum::<f64>() / raws.len() as f64) < q_threshold
                        }
                        RejectionRule::MinView => {
                            raws.iter().map(|&r| q(r)).fold(f64::INFINITY, f64::min) < q_threshold
                        }
                    };
                    if confident {
                        keep.set(linear, t, false);
                        masked += 1;
                    }
                }
            }
        }
        masks.push(keep);
        stats.push(RefreshStats { case: ci, masked, disagreeing });
    }
    Ok((masks, stats))
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing.

fn tensor_to_param<S: Scalar>(t: &Tensor<S>) -> ParamArray {
    ParamArray {
        shape: t.shape.clone(),
        data: t.data.iter().map(|x| x.f64() as f32).collect(),
    }
}

fn param_to_tensor<S: Scalar>(p: &ParamArray) -> Tensor<S> {
    Tensor::new(p.shape.clone(), p.data.iter().map(|&x| S::fp(x as f64)).collect())
}

fn hetero_name(mode: HeteroMode) -> &'static str {
    match mode {
        HeteroMode::Plain => "plain",
        HeteroMode::LabelFlip => "label_flip",
        HeteroMode::PredVar => "pred_var",
    }
}

fn parse_hetero(name: &str) -> Result<HeteroMode> {
    match name {
        "plain" => Ok(HeteroMode::Plain),
        "label_flip" => Ok(HeteroMode::LabelFlip),
        "pred_var" => Ok(HeteroMode::PredVar),
        other => Err(Error::Config(format!("unknown head mode {other:?} in checkpoint"))),
    }
}

/// Encode the architecture into checkpoint metadata, so a checkpoint is
/// self-describing and inference needs no side channel.
fn arch_meta(ckpt: &mut Checkpoint, arch: &ArchConfig) {
    ckpt.set_meta("n_slices", arch.n_slices.to_string());
    ckpt.set_meta("base_channels", arch.base_channels.to_string());
    ckpt.set_meta("encoder_depth", arch.encoder_depth.to_string());
    ckpt.set_meta(
        "bottleneck_dilations",
        arch.bottleneck_dilations.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
    );
    ckpt.set_meta("n_tasks", arch.n_tasks.to_string());
    ckpt.set_meta("hetero", hetero_name(arch.hetero));
    ckpt.set_meta("leaky_slope", arch.leaky_slope.to_string());
}

/// Rebuild the architecture a checkpoint was trained with.
pub fn arch_from_meta(ckpt: &Checkpoint) -> Result<ArchConfig> {
    let get = |key: &str| {
        ckpt.meta(key)
            .ok_or_else(|| Error::Config(format!("checkpoint metadata is missing {key}")))
    };
    let num = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::Config(format!("checkpoint metadata {key} is not a number")))
    };
    Ok(ArchConfig {
        n_slices: num("n_slices")?,
        base_channels: num("base_channels")?,
        encoder_depth: num("encoder_depth")?,
        bottleneck_dilations: get("bottleneck_dilations")?
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    Error::Config("checkpoint metadata bottleneck_dilations is malformed".into())
                })
            })
            .collect::<Result<_>>()?,
        n_tasks: num("n_tasks")?,
        hetero: parse_hetero(get("hetero")?)?,
        leaky_slope: get("leaky_slope")?
            .parse()
            .map_err(|_| Error::Config("checkpoint metadata leaky_slope is not a number".into()))?,
    })
}

fn ckpt_name(restart: usize) -> String {
    format!("ckpt_{restart:04}.mckp")
}

/// Write the resume point (latest.mckp, always) and optionally a
/// numbered history copy. Returns the numbered path when one was
/// written, otherwise the latest path.
fn save_state<S: Scalar>(
    out_dir: &Path,
    restart: usize,
    model: &Model<S>,
    opt: &RmsProp<S>,
    seed: u64,
    numbered: bool,
) -> Result<PathBuf> {
    let mut ckpt = Checkpoint { meta: Vec::new(), params: Vec::new() };
    ckpt.set_meta("schema", "1");
    ckpt.set_meta("restart", restart.to_string());
    ckpt.set_meta("seed", seed.to_string());
    arch_meta(&mut ckpt, &model.cfg);
    for (name, t) in model.params() {
        ckpt.params.push((name.clone(), tensor_to_param(t)));
    }
    // Optimizer accumulators ride along under a reserved prefix. They
    // round through f32 like everything else, so resume is bit-exact
    // exactly when training in f32.
    for ((name, _), v) in model.params().iter().zip(&opt.v) {
        ckpt.params.push((format!("opt.{name}"), tensor_to_param(v)));
    }
    let latest = out_dir.join(LATEST_CKPT);
    write_checkpoint(&ckpt, &latest)?;
    if numbered {
        let path = out_dir.join(ckpt_name(restart));
        write_checkpoint(&ckpt, &path)?;
        return Ok(path);
    }
    Ok(latest)
}

/// Load a model alone from a checkpoint (for inference).
pub fn load_model<S: Scalar>(path: &Path) -> Result<(Model<S>, Checkpoint)> {
    let ckpt = read_checkpoint(path)?;
    let arch = arch_from_meta(&ckpt)?;
    let params = ckpt
        .params
        .iter()
        .filter(|(name, _)| !name.starts_with("opt."))
        .map(|(name, p)| (name.clone(), param_to_tensor(p)))
        .collect();
    Ok((Model::from_params(arch, params)?, ckpt))
}

fn load_state<S: Scalar>(path: &Path) -> Result<(Model<S>, RmsProp<S>, usize)> {
    let (model, ckpt) = load_model(path)?;
    let mut opt = RmsProp::new(model.params());
    for (i, (name, t)) in model.params().iter().enumerate() {
        let v = ckpt
            .param(&format!("opt.{name}"))
            .ok_or_else(|| Error::Config(format!("checkpoint has no optimizer state for {name}")))?;
        if v.shape != t.shape {
            return Err(Error::Shape(format!("optimizer state for {name} has the wrong shape")));
        }
        opt.v[i] = param_to_tensor(v);
    }
    let restart = ckpt
        .meta("restart")
        .and_then(|r| r.parse().ok())
        .ok_or_else(|| Error::Config("checkpoint metadata is missing restart".into()))?;
    Ok((model, opt, restart))
}

/// Resume point of a run directory: latest.mckp when present, else the
/// highest-numbered history checkpoint.
pub fn latest_checkpoint(out_dir: &Path) -> Result<PathBuf> {
    let latest = out_dir.join(LATEST_CKPT);
    if latest.exists() {
        return Ok(latest);
    }
    let mut best: Option<(PathBuf, usize)> = None;
    for entry in fs::read_dir(out_dir)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(digits) = name.strip_prefix("ckpt_").and_then(|n| n.strip_suffix(".mckp")) {
            if let Ok(restart) = digits.parse::<usize>() {
                if best.as_ref().map_or(true, |(_, b)| restart > *b) {
                    best = Some((path, restart));
                }
            }
        }
    }
    best.map(|(path, _)| path)
        .ok_or_else(|| Error::Config(format!("no checkpoint found in {}", out_dir.display())))
}

// ---------------------------------------------------------------------------
// The training loop.

pub struct TrainOutcome {
    /// Restarts executed by this invocation (0 when already complete).
    pub restarts_run: usize,
    pub total_restarts: usize,
    pub final_checkpoint: PathBuf,
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    Ok(())
}

/// Drop rows whose `restart` column exceeds `keep_max`; used on resume
/// to erase rows from a restart that never reached its checkpoint.
fn truncate_rows(path: &Path, keep_max: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let table = CsvTable::read(path)?;
    let col = table
        .col("restart")
        .ok_or_else(|| Error::parse(path, "missing column restart"))?;
    let mut kept = CsvTable::new(&table.header.iter().map(String::as_str).collect::<Vec<_>>());
    for row in &table.rows {
        let restart: usize = row[col]
            .parse()
            .map_err(|_| Error::parse(path, format!("bad restart value {:?}", row[col])))?;
        if restart <= keep_max {
            kept.push(row.clone());
        }
    }
    kept.write(path)
}

fn mask_path(out_dir: &Path, record: &CaseRecord) -> PathBuf {
    out_dir.join(REJECTION_DIR).join(format!("case_{:03}.mvol", record.index))
}

/// Mean validation Dice per task, 3-view ensembled, appended as one row
/// per task labeled with the number of completed restarts.
fn append_curve<S: Scalar>(
    out_dir: &Path,
    restart: usize,
    model: &Model<S>,
    data: &LoadedData,
    reference: CurveReference,
) -> Result<()> {
    if data.val.is_empty() {
        return Ok(());
    }
    let n_tasks = data.manifest.n_tasks();
    let mut sums = vec![0.0f64; n_tasks];
    for case in &data.val {
        let views = eval::predict_volume(model, &case.image, &Orientation::ALL, INFER_BATCH)?;
        let logits: Vec<_> = views.iter().map(|v| &v.logits).collect();
        let pred = eval::ensemble(&logits)?;
        let labels = match reference {
            CurveReference::Clean => &case.clean,
            CurveReference::Weak => &case.weak,
        };
        for (t, sum) in sums.iter_mut().enumerate() {
            *sum += eval::dice(&pred, labels, t)?;
        }
    }
    let mut lines = String::new();
    for (t, task) in data.manifest.tasks().iter().enumerate() {
        let mean = sums[t] / data.val.len() as f64;
        lines.push_str(&format!("{restart},{},{}\n", task.name, fmt_f64(mean)));
    }
    append_line(&out_dir.join(CURVE_FILE), &lines)
}

/// Run (or finish) a training run. `out_dir` collects numbered
/// checkpoints, the validation curve, and rejection masks and stats;
/// with `resume` the run continues from the newest checkpoint, which
/// must match the configuration it was started with.
pub fn train<S: Scalar>(
    arch: &ArchConfig,
    cfg: &TrainConfig,
    data_dir: &Path,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    if arch.hetero != cfg.hetero {
        return Err(Error::Config(format!(
            "architecture head mode {:?} does not match training mode {:?}",
            arch.hetero, cfg.hetero
        )));
    }
    let data = load_dataset(data_dir)?;
    if arch.n_tasks != data.manifest.n_tasks() {
        return Err(Error::Config(format!(
            "architecture expects {} tasks, dataset has {}",
            arch.n_tasks,
            data.manifest.n_tasks()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let n_tasks = arch.n_tasks;
    let total = cfg.total_restarts();
    let mut train_cases = data.train.clone();

    let (mut model, mut opt, start) = if resume {
        let path = latest_checkpoint(out_dir)?;
        let (model, opt, done) = load_state::<S>(&path)?;
        if model.cfg != *arch {
            return Err(Error::Config(
                "checkpoint architecture does not match the configured one".into(),
            ));
        }
        if read_checkpoint(&path)?.meta("seed") != Some(cfg.seed.to_string().as_str()) {
            return Err(Error::Config("checkpoint seed does not match the configuration".into()));
        }
        if done > total {
            return Err(Error::Config(format!(
                "checkpoint is {done} restarts in, but the configuration stops at {total}"
            )));
        }
        // Masks persist at refresh time, so the newest files are the
        // ones in force when the checkpoint was written.
        for (case, rec) in train_cases.iter_mut().zip(&data.train_records) {
            let path = mask_path(out_dir, rec);
            if path.exists() {
                let mask = read_label(&path)?;
                if mask.dims != case.labels.dims || mask.n_tasks != case.labels.n_tasks {
                    return Err(Error::Shape(format!(
                        "persisted rejection mask {} does not fit its case",
                        path.display()
                    )));
                }
                case.keep = mask;
            }
        }
        truncate_rows(&out_dir.join(CURVE_FILE), done)?;
        truncate_rows(&out_dir.join(REJECTION_STATS_FILE), done.saturating_sub(1))?;
        (model, opt, done)
    } else {
        let mut model = Model::<S>::build(arch.clone(), cfg.seed)?;
        let priors = class_prior_logits::<S>(&train_cases, n_tasks);
        model.set_head_bias(&priors)?;
        let opt = RmsProp::new(model.params());
        fs::write(out_dir.join(CURVE_FILE), "restart,task,val_dice\n")?;
        if cfg.rejection_restarts() > 0 {
            fs::write(out_dir.join(REJECTION_STATS_FILE), "restart,case,masked,disagreeing\n")?;
        }
        save_state(out_dir, 0, &model, &opt, cfg.seed, true)?;
        (model, opt, 0)
    };

    let sc = cfg.sample_config(arch.n_slices);
    let base = cfg.base_loss();
    let mut final_ckpt = out_dir.join(ckpt_name(start));
    for restart in start..total {
        let phase = cfg.phase_of(restart);
        if phase == StagePhase::Rejection {
            let into_stage = restart - cfg.warmup_restarts - cfg.hetero_restarts();
            if into_stage % cfg.refresh_period == 0 {
                let (masks, stats) =
                    rejection_refresh(&model, &train_cases, cfg.q_threshold, cfg.rejection_rule)?;
                fs::create_dir_all(out_dir.join(REJECTION_DIR))?;
                let mut lines = String::new();
                for ((case, mask), rec) in
                    train_cases.iter_mut().zip(masks).zip(&data.train_records)
                {
                    case.keep = mask;
                    write_label(&case.keep, &mask_path(out_dir, rec))?;
                }
                for st in &stats {
                    let case = data.train_records[st.case].index;
                    lines.push_str(&format!("{restart},{case},{},{}\n", st.masked, st.disagreeing));
                }
                append_line(&out_dir.join(REJECTION_STATS_FILE), &lines)?;
                log::info!(
                    "restart {restart}: rejection refresh masked {} voxel-tasks",
                    stats.iter().map(|s| s.masked).sum::<usize>()
                );
            }
        }
        let kind = loss_kind(cfg.hetero, phase);

        // Every stream of randomness reseeds per restart, so a resumed
        // run replays the exact run it continues.
        let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        sample_rng.set_stream(1 + 2 * restart as u64);
        let mut mc_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        mc_rng.set_stream(2 + 2 * restart as u64);

        for step in 0..cfg.restart_period {
            let lr = cosine_lr(step, cfg);
            let batch =
                sample_batch::<S, _>(&train_cases, &data.manifest, &sc, cfg.batch_size, &mut sample_rng)?;
            let mut tape = Tape::new();
            let param_vars = model.insert_params(&mut tape);
            let input = tape.constant(batch.input);
            let out = model.forward(&mut tape, &param_vars, input)?;
            let draws = (kind == LossKind::PredVar)
                .then(|| losses::mc_draw_block(batch.labels.len(), cfg.mc_samples, &mut mc_rng));
            let loss =
                build_loss(&mut tape, out, n_tasks, kind, base, &batch.labels, &batch.mask, draws)?;
            let grads = tape.backward(loss)?;
            let grad_vec: Vec<Tensor<S>> = param_vars
                .iter()
                .zip(model.params())
                .map(|(v, (_, p))| grads.get(*v).unwrap_or_else(|| Tensor::zeros(p.shape.clone())))
                .collect();
            if !opt.step(model.params_mut(), &grad_vec, lr) {
                log::warn!("restart {restart} step {step}: non-finite gradient, batch skipped");
            }
        }

        let done = restart + 1;
        if done % cfg.curve_every == 0 || done == total {
            append_curve(out_dir, done, &model, &data, cfg.curve_reference)?;
        }
        let numbered = done % cfg.checkpoint_every == 0 || done == total;
        final_ckpt = save_state(out_dir, done, &model, &opt, cfg.seed, numbered)?;
    }

    Ok(TrainOutcome { restarts_run: total - start, total_restarts: total, final_checkpoint: final_ckpt })
}
