//! Full-volume inference, three-view logit ensembling, Dice metrics and
//! the Wilcoxon signed-rank comparison between models.
//!
//! Inference mirrors training: every slice of the volume is predicted
//! from its 7-slice slab (edges clamped by replication), in each of the
//! axial, sagittal and coronal orientations. Views are combined by
//! averaging logits and thresholding the mean at 0.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{split_heads, Model};
use crate::volio::{fmt_f64, CsvTable, LabelField, ScalarField, TaskManifest};
use crate::{Error, Result, Scalar};
use crate::autodiff::Tensor;

/// Slicing direction for slab extraction and full-volume inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Slices stacked along z; plane rows are y, columns x.
    Axial,
    /// Slices stacked along x; plane rows are z, columns y.
    Sagittal,
    /// Slices stacked along y; plane rows are z, columns x.
    Coronal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] =
        [Orientation::Axial, Orientation::Sagittal, Orientation::Coronal];

    pub fn name(self) -> &'static str {
        match self {
            Orientation::Axial => "axial",
            Orientation::Sagittal => "sagittal",
            Orientation::Coronal => "coronal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Orientation::Axial),
            "sagittal" => Ok(Orientation::Sagittal),
            "coronal" => Ok(Orientation::Coronal),
            other => Err(Error::Config(format!("unknown orientation {other:?}"))),
        }
    }

    /// Number of slices along this orientation's stacking axis.
    pub fn n_planes(self, dims: (usize, usize, usize)) -> usize {
        match self {
            Orientation::Axial => dims.2,
            Orientation::Sagittal => dims.0,
            Orientation::Coronal => dims.1,
        }
    }

    /// (rows, cols) of one slice plane.
    pub fn plane_dims(self, dims: (usize, usize, usize)) -> (usize, usize) {
        match self {
            Orientation::Axial => (dims.1, dims.0),
            Orientation::Sagittal => (dims.2, dims.1),
            Orientation::Coronal => (dims.2, dims.0),
        }
    }

    /// Volume coordinates of plane position (u=row, v=col) on slice k.
    #[inline]
    pub fn to_xyz(self, k: usize, u: usize, v: usize) -> (usize, usize, usize) {
        match self {
            Orientation::Axial => (v, u, k),
            Orientation::Sagittal => (k, v, u),
            Orientation::Coronal => (v, k, u),
        }
    }
}

/// One real-valued volume per task, task-major: `data[task * n + linear]`
/// with the same x-fastest linear order as [`ScalarField`].
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVolumes<S> {
    pub dims: (usize, usize, usize),
    pub n_tasks: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> TaskVolumes<S> {
    pub fn zeros(dims: (usize, usize, usize), n_tasks: usize) -> Self {
        TaskVolumes { dims, n_tasks, data: vec![S::zero(); dims.0 * dims.1 * dims.2 * n_tasks] }
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    #[inline]
    pub fn at(&self, task: usize, linear: usize) -> S {
        self.data[task * self.n_voxels() + linear]
    }
}

/// Per-orientation inference output: a logit volume per task, plus the
/// raw uncertainty-head volume in heteroscedastic modes.
#[derive(Debug, Clone)]
pub struct ViewPrediction<S> {
    pub orientation: Orientation,
    pub logits: TaskVolumes<S>,
    pub uncertainty: Option<TaskVolumes<S>>,
}

/// Predict every slice of `field` from its slab, in each requested
/// orientation. `batch` slices run through the network at once.
pub fn predict_volume<S: Scalar>(
    model: &Model<S>,
    field: &ScalarField,
    orientations: &[Orientation],
    batch: usize,
) -> Result<Vec<ViewPrediction<S>>> {
    if batch == 0 {
        return Err(Error::Contract("inference batch size 0".into()));
    }
    let cfg = &model.cfg;
    let dims = field.dims;
    let n_tasks = cfg.n_tasks;
    let mut out = Vec::with_capacity(orientations.len());
    for &orient in orientations {
        let (h, w) = orient.plane_dims(dims);
        let n_planes = orient.n_planes(dims);
        let pool = 1usize << cfg.encoder_depth;
        if h % pool != 0 || w % pool != 0 {
            return Err(Error::Shape(format!(
                "{} planes are {h}x{w}, not divisible by 2^encoder_depth = {pool}",
                orient.name()
            )));
        }
        let mut logits = TaskVolumes::zeros(dims, n_tasks);
        let mut unc = TaskVolumes::zeros(dims, n_tasks);
        let has_unc = cfg.head_width() != n_tasks;
        let plane = h * w;
        for chunk_start in (0..n_planes).step_by(batch) {
            let b = batch.min(n_planes - chunk_start);
            let mut input = vec![S::zero(); b * cfg.n_slices * plane];
            for bi in 0..b {
                let k = chunk_start + bi;
                for s in 0..cfg.n_slices {
                    // slab clamped at volume edges by replication
                    let src = (k + s).saturating_sub(cfg.n_slices / 2).min(n_planes - 1);
                    let dst = &mut input[(bi * cfg.n_slices + s) * plane..][..plane];
                    for u in 0..h {
                        for v in 0..w {
                            let (x, y, z) = orient.to_xyz(src, u, v);
                            dst[u * w + v] = S::fp(field.at(x, y, z) as f64);
                        }
                    }
                }
            }
            let pred = model.infer(&Tensor::new(vec![b, cfg.n_slices, h, w], input))?;
            let (lg, un) = split_heads(&pred, n_tasks, cfg.hetero)?;
            let nv = logits.n_voxels();
            for bi in 0..b {
                let k = chunk_start + bi;
                for t in 0..n_tasks {
                    let src = &lg.data[(bi * n_tasks + t) * plane..][..plane];
                    for u in 0..h {
                        for v in 0..w {
                            let (x, y, z) = orient.to_xyz(k, u, v);
                            logits.data[t * nv + field.idx(x, y, z)] = src[u * w + v];
                        }
                    }
                    if let Some(un) = &un {
                        let src = &un.data[(bi * n_tasks + t) * plane..][..plane];
                        for u in 0..h {
                            for v in 0..w {
                                let (x, y, z) = orient.to_xyz(k, u, v);
                                unc.data[t * nv + field.idx(x, y, z)] = src[u * w + v];
                            }
                        }
                    }
                }
            }
        }
        out.push(ViewPrediction {
            orientation: orient,
            logits,
            uncertainty: has_unc.then_some(unc),
        });
    }
    Ok(out)
}

/// Voxel-task mean logit across views.
pub fn mean_logits<S: Scalar>(views: &[&TaskVolumes<S>]) -> Result<TaskVolumes<S>> {
    let first = views.first().ok_or_else(|| Error::Contract("ensemble of 0 views".into()))?;
    for v in views {
        if v.dims != first.dims || v.n_tasks != first.n_tasks {
            return Err(Error::Shape(format!(
                "view {:?}/{} tasks vs {:?}/{}",
                v.dims, v.n_tasks, first.dims, first.n_tasks
            )));
        }
    }
    let inv = S::one() / S::from_count(views.len());
    let mut data = vec![S::zero(); first.data.len()];
    for v in views {
        for (d, &s) in data.iter_mut().zip(&v.data) {
            *d += s;
        }
    }
    for d in &mut data {
        *d *= inv;
    }
    Ok(TaskVolumes { dims: first.dims, n_tasks: first.n_tasks, data })
}

/// Ensemble decision: voxel-task bit set iff the mean logit over views
/// is positive (sigmoid of the mean above 0.5).
pub fn ensemble<S: Scalar>(views: &[&TaskVolumes<S>]) -> Result<LabelField> {
    let mean = mean_logits(views)?;
    let nv = mean.n_voxels();
    let mut out = LabelField::zeros(mean.dims, mean.n_tasks);
    for t in 0..mean.n_tasks {
        for i in 0..nv {
            if mean.data[t * nv + i] > S::zero() {
                out.data[i] |= 1 << t;
            }
        }
    }
    Ok(out)
}

/// Dice overlap for one task: 2|A∩B| / (|A|+|B|); 1.0 when both empty.
pub fn dice(pred: &LabelField, reference: &LabelField, task: usize) -> Result<f64> {
    if pred.dims != reference.dims {
        return Err(Error::Shape(format!(
            "dice dims {:?} vs {:?}",
            pred.dims, reference.dims
        )));
    }
    if task >= pred.n_tasks || task >= reference.n_tasks {
        return Err(Error::Contract(format!("task {task} out of range")));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&a, &b) in pred.data.iter().zip(&reference.data) {
        let (a, b) = (a >> task & 1, b >> task & 1);
        inter += (a & b) as usize;
        total += (a + b) as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// One Dice score per (case, task), as written to metrics files.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceRow {
    pub case: String,
    pub task: String,
    pub dice: f64,
}

/// Per-task Dice against a reference volume; errors when shapes or the
/// manifest disagree with the fields.
pub fn evaluate(
    case: &str,
    pred: &LabelField,
    reference: &LabelField,
    manifest: &TaskManifest,
) -> Result<Vec<DiceRow>> {
    if manifest.n_tasks() != pred.n_tasks || manifest.n_tasks() != reference.n_tasks {
        return Err(Error::Shape(format!(
            "manifest has {} tasks, volumes have {}/{}",
            manifest.n_tasks(),
            pred.n_tasks,
            reference.n_tasks
        )));
    }
    manifest
        .tasks()
        .iter()
        .enumerate()
        .map(|(t, entry)| {
            Ok(DiceRow {
                case: case.to_string(),
                task: entry.name.clone(),
                dice: dice(pred, reference, t)?,
            })
        })
        .collect()
}

/// Dice rows over many cases plus recomputable aggregates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiceTable {
    pub rows: Vec<DiceRow>,
}

impl DiceTable {
    pub fn push_rows(&mut self, rows: Vec<DiceRow>) {
        self.rows.extend(rows);
    }

    /// Task names in first-appearance order.
    pub fn task_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.task) {
                names.push(r.task.clone());
            }
        }
        names
    }

    pub fn dice_of(&self, case: &str, task: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.case == case && r.task == task).map(|r| r.dice)
    }

    /// Scores for one task, ordered by case id.
    pub fn task_scores(&self, task: &str) -> Vec<(String, f64)> {
        let mut v: Vec<(String, f64)> = self
            .rows
            .iter()
            .filter(|r| r.task == task)
            .map(|r| (r.case.clone(), r.dice))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn task_stats(&self, task: &str) -> Option<(f64, f64)> {
        let scores: Vec<f64> =
            self.rows.iter().filter(|r| r.task == task).map(|r| r.dice).collect();
        mean_std(&scores)
    }

    pub fn overall_stats(&self) -> Option<(f64, f64)> {
        let scores: Vec<f64> = self.rows.iter().map(|r| r.dice).collect();
        mean_std(&scores)
    }

    /// Rows sorted by (case, task) so assembly order never shows up in
    /// the written file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| (a.case.as_str(), a.task.as_str()).cmp(&(b.case.as_str(), b.task.as_str())));
        let mut table = CsvTable::new(&["case", "task", "dice"]);
        for r in rows {
            table.push(vec![r.case, r.task, fmt_f64(r.dice)]);
        }
        table.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let table = CsvTable::read(path)?;
        let (ci, ti, di) = match (table.col("case"), table.col("task"), table.col("dice")) {
            (Some(c), Some(t), Some(d)) => (c, t, d),
            _ => return Err(Error::parse(path, "metrics need case,task,dice columns")),
        };
        let mut rows = Vec::new();
        for row in &table.rows {
            rows.push(DiceRow {
                case: row[ci].clone(),
                task: row[ti].clone(),
                dice: row[di]
                    .parse::<f64>()
                    .map_err(|_| Error::parse(path, format!("bad dice {:?}", row[di])))?,
            });
        }
        Ok(DiceTable { rows })
    }
}

/// Population mean and std; None for an empty slice.
fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Which series ranked higher in a paired comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    AHigher,
    BHigher,
    Tie,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::AHigher => "a_higher",
            Direction::BHigher => "b_higher",
            Direction::Tie => "tie",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WilcoxonResult {
    /// min(W+, W-) over signed midranks.
    pub w: f64,
    /// Two-sided p.
    pub p: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n: usize,
    pub direction: Direction,
    /// Every difference was zero; p fixed at 1.
    pub degenerate: bool,
}

/// Largest n for which the exact sign-enumeration distribution is used;
/// above it the tie-corrected normal approximation takes over.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped; |d| ties get midranks. For n pairs
/// remaining, p = P(W+ <= w) + P(W+ >= S - w) with w = min(W+, W-),
/// computed exactly over all 2^n sign assignments for n <= 25 and by
/// normal approximation with tie-corrected variance and continuity
/// correction beyond.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Contract(format!(
            "paired test needs equal nonempty series, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Ok(WilcoxonResult { w: 0.0, p: 1.0, n: 0, direction: Direction::Tie, degenerate: true });
    }
    let n = diffs.len();
    // Midranks on |d|, doubled so ties stay exact integers.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).expect("finite dice"));
    let mut rank2 = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // positions i..=j (0-based) share midrank ((i+1)+(j+1))/2
        let r2 = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            rank2[k] = r2;
        }
        i = j + 1;
    }
    let s2: u64 = rank2.iter().sum();
    let w_plus2: u64 = diffs
        .iter()
        .zip(&rank2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let w_minus2 = s2 - w_plus2;
    let w2 = w_plus2.min(w_minus2);
    let direction = match w_plus2.cmp(&w_minus2) {
        std::cmp::Ordering::Greater => Direction::AHigher,
        std::cmp::Ordering::Less => Direction::BHigher,
        std::cmp::Ordering::Equal => Direction::Tie,
    };
    let p = if n <= WILCOXON_EXACT_MAX_N {
        exact_p(&rank2, w2)
    } else {
        normal_p(&rank2, w2)
    };
    Ok(WilcoxonResult { w: w2 as f64 / 2.0, p, n, direction, degenerate: false })
}

/// Exact two-sided p over all 2^n sign assignments via subset-sum counts
/// of the doubled ranks.
fn exact_p(rank2: &[u64], w2: u64) -> f64 {
    let s2: u64 = rank2.iter().sum();
    let mut counts = vec![0u64; s2 as usize + 1];
    counts[0] = 1;
    for &r in rank2 {
        for s in (r as usize..counts.len()).rev() {
            counts[s] += counts[s - r as usize];
        }
    }
    let total = (1u64 << rank2.len()) as f64;
    let low: u64 = counts[..=w2 as usize].iter().sum();
    let high: u64 = counts[(s2 - w2) as usize..].iter().sum();
    ((low + high) as f64 / total).min(1.0)
}

/// Normal approximation with tie-corrected variance and continuity
/// correction, on the doubled-rank scale.
fn normal_p(rank2: &[u64], w2: u64) -> f64 {
    let n = rank2.len() as f64;
    let mean2 = n * (n + 1.0) / 2.0;
    // var(2W+) = 4 var(W+) = n(n+1)(2n+1)/6 - sum(t^3 - t)/12
    let mut tie_term = 0.0;
    let mut sorted = rank2.to_vec();
    sorted.sort_unstable();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var2 = n * (n + 1.0) * (2.0 * n + 1.0) / 6.0 - tie_term / 12.0;
    if var2 <= 0.0 {
        return 1.0;
    }
    let z = (w2 as f64 - mean2 + 1.0) / var2.sqrt();
    libm::erfc(-z / std::f64::consts::SQRT_2).min(1.0)
}

/// Per-task Wilcoxon comparison row between two metrics tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub task: String,
    pub n: usize,
    pub w: f64,
    pub p: f64,
    pub direction: Direction,
}

/// Compare two Dice tables task by task over their shared cases.
pub fn compare(a: &DiceTable, b: &DiceTable) -> Result<Vec<ComparisonRow>> {
    let mut out = Vec::new();
    for task in a.task_names() {
        let sb = b.task_scores(&task);
        if sb.is_empty() {
            continue;
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (case, x) in a.task_scores(&task) {
            if let Some((_, y)) = sb.iter().find(|(c, _)| *c == case) {
                xs.push(x);
                ys.push(*y);
            }
        }
        if xs.is_empty() {
            continue;
        }
        let r = wilcoxon_signed_rank(&xs, &ys)?;
        out.push(ComparisonRow { task, n: r.n, w: r.w, p: r.p, direction: r.direction });
    }
    if out.is_empty() {
        return Err(Error::Contract("no shared (case, task) pairs to compare".into()));
    }
    Ok(out)
}

/// Write comparison rows: task, n, w, p, direction.
pub fn write_comparison(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    let mut table = CsvTable::new(&["task", "n", "w", "p", "direction"]);
    for r in rows {
        table.push(vec![
            r.task.clone(),
            r.n.to_string(),
            fmt_f64(r.w),
            fmt_f64(r.p),
            r.direction.as_str().to_string(),
        ]);
    }
    table.write(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchConfig, HeteroMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_arch(hetero: HeteroMode) -> ArchConfig {
        ArchConfig {
            base_channels: 3,
            encoder_depth: 1,
            bottleneck_dilations: vec![1, 2],
            n_tasks: 2,
            hetero,
            ..ArchConfig::default()
        }
    }

    /// Model with a randomized head so predictions are nonzero.
    fn lively_model(hetero: HeteroMode) -> Model<f64> {
        let mut model = Model::<f64>::build(small_arch(hetero), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (name, t) in model.params_mut() {
            if name.starts_with("head") {
                for v in &mut t.data {
                    *v = rng.gen_range(-0.5..0.5);
                }
            }
        }
        model
    }

    fn random_field(dims: (usize, usize, usize), seed: u64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2;
        ScalarField::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn orientation_maps_are_bijective() {
        let dims = (4, 6, 8);
        for orient in Orientation::ALL {
            let (h, w) = orient.plane_dims(dims);
            let mut seen = vec![false; dims.0 * dims.1 * dims.2];
            for k in 0..orient.n_planes(dims) {
                for u in 0..h {
                    for v in 0..w {
                        let (x, y, z) = orient.to_xyz(k, u, v);
                        let i = x + dims.0 * (y + dims.1 * z);
                        assert!(!seen[i], "{} hits voxel twice", orient.name());
                        seen[i] = true;
                    }
                }
            }
            assert!(seen.iter().all(|&s| s), "{} misses voxels", orient.name());
        }
    }

    #[test]
    fn zero_head_model_predicts_all_zero_logits() {
        let model = Model::<f64>::build(small_arch(HeteroMode::LabelFlip), 1).unwrap();
        let field = random_field((8, 8, 8), 2);
        let views = predict_volume(&model, &field, &Orientation::ALL, 3).unwrap();
        assert_eq!(views.len(), 3);
        for v in &views {
            assert_eq!(v.logits.dims, field.dims);
            assert_eq!(v.logits.n_tasks, 2);
            assert!(v.logits.data.iter().all(|&l| l == 0.0));
            let unc = v.uncertainty.as_ref().expect("labelflip mode has a second head");
            assert!(unc.data.iter().all(|&l| l == 0.0));
        }
    }

    #[test]
    fn volume_prediction_matches_manual_slab_inference() {
        let model = lively_model(HeteroMode::Plain);
        let dims = (8, 8, 8);
        let field = random_field(dims, 5);
        let views = predict_volume(&model, &field, &[Orientation::Sagittal], 4).unwrap();
        let logits = &views[0].logits;

        // slice k = 0 exercises the clamped slab edge
        for k in [0usize, 5] {
            let (h, w) = Orientation::Sagittal.plane_dims(dims);
            let mut input = vec![0.0f64; 7 * h * w];
            for s in 0..7 {
                let src = (k + s).saturating_sub(3).min(7);
                for u in 0..h {
                    for v in 0..w {
                        let (x, y, z) = Orientation::Sagittal.to_xyz(src, u, v);
                        input[(s * h + u) * w + v] = field.at(x, y, z) as f64;
                    }
                }
            }
            let out = model.infer(&Tensor::new(vec![1, 7, h, w], input)).unwrap();
            for t in 0..2 {
                for u in 0..h {
                    for v in 0..w {
                        let (x, y, z) = Orientation::Sagittal.to_xyz(k, u, v);
                        let got = logits.at(t, field.idx(x, y, z));
                        let want = out.data[(t * h + u) * w + v];
                        assert!((got - want).abs() < 1e-12, "task {t} slice {k}");
                    }
                }
            }
        }
    }

    #[test]
    fn ensemble_thresholds_the_mean_logit() {
        let mk = |vals: [f64; 2]| TaskVolumes::<f64> {
            dims: (1, 1, 2),
            n_tasks: 1,
            data: vals.to_vec(),
        };
        let (a, b, c) = (mk([3.0, -0.2]), mk([-1.0, -0.2]), mk([-1.0, 0.9]));
        let pred = ensemble(&[&a, &b, &c]).unwrap();
        // means: (3-1-1)/3 = +1/3 -> set; (-0.2-0.2+0.9)/3 > 0 -> set
        assert!(pred.get(0, 0));
        assert!(pred.get(1, 0));

        // idempotence on identical views, sign invariance under rescale
        let single = ensemble(&[&a]).unwrap();
        let triple = ensemble(&[&a, &a, &a]).unwrap();
        assert_eq!(single.data, triple.data);
        let scaled = TaskVolumes::<f64> {
            dims: a.dims,
            n_tasks: 1,
            data: a.data.iter().map(|v| v * 7.5).collect(),
        };
        assert_eq!(ensemble(&[&scaled]).unwrap().data, single.data);
    }

    #[test]
    fn ensemble_matches_brute_force_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = (3, 4, 5);
        let n = 60;
        let views: Vec<TaskVolumes<f64>> = (0..3)
            .map(|_| TaskVolumes {
                dims,
                n_tasks: 2,
                data: (0..2 * n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            })
            .collect();
        let refs: Vec<&TaskVolumes<f64>> = views.iter().collect();
        let pred = ensemble(&refs).unwrap();
        for t in 0..2 {
            for i in 0..n {
                let mean: f64 = views.iter().map(|v| v.at(t, i)).sum::<f64>() / 3.0;
                assert_eq!(pred.get(i, t), mean > 0.0);
            }
        }
    }

    #[test]
    fn dice_formula_and_conventions() {
        let mut a = LabelField::zeros((2, 2, 1), 1);
        let mut b = LabelField::zeros((2, 2, 1), 1);
        assert_eq!(dice(&a, &b, 0).unwrap(), 1.0); // both empty

        a.set(0, 0, true);
        a.set(1, 0, true);
        b.set(1, 0, true);
        b.set(2, 0, true);
        assert_eq!(dice(&a, &b, 0).unwrap(), 0.5); // |A|=|B|=2, overlap 1
        assert_eq!(dice(&a, &b, 0).unwrap(), dice(&b, &a, 0).unwrap());

        let mut c = LabelField::zeros((2, 2, 1), 1);
        c.set(3, 0, true);
        assert_eq!(dice(&a, &c, 0).unwrap(), 0.0); // disjoint
        assert_eq!(dice(&a, &a, 0).unwrap(), 1.0); // identical
    }

    #[test]
    fn wilcoxon_exact_frozen_case() {
        // diffs {1, 2, 3, -1}: |d| ranks (midranks) 1.5, 3, 4, 1.5
        // W+ = 8.5, W- = 1.5, W = 1.5
        // p = P(W+ <= 1.5) + P(W+ >= 8.5) = 3/16 + 3/16 = 0.375
        let a = [2.0, 3.0, 4.0, 0.0];
        let b = [1.0, 1.0, 1.0, 1.0];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.w, 1.5);
        assert!((r.p - 0.375).abs() < 1e-12, "p = {}", r.p);
        assert_eq!(r.n, 4);
        assert_eq!(r.direction, Direction::AHigher);
        assert!(!r.degenerate);
    }

    #[test]
    fn wilcoxon_degenerate_when_all_pairs_tie() {
        let a = [0.5, 0.7, 0.9];
        let r = wilcoxon_signed_rank(&a, &a).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p, 1.0);
        assert_eq!(r.n, 0);
        assert_eq!(r.direction, Direction::Tie);
    }

    #[test]
    fn wilcoxon_is_symmetric_under_swapping_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ab = wilcoxon_signed_rank(&a, &b).unwrap();
        let ba = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(ab.p, ba.p);
        assert_eq!(ab.w, ba.w);
        match ab.direction {
            Direction::AHigher => assert_eq!(ba.direction, Direction::BHigher),
            Direction::BHigher => assert_eq!(ba.direction, Direction::AHigher),
            Direction::Tie => assert_eq!(ba.direction, Direction::Tie),
        }
    }

    #[test]
    fn wilcoxon_exact_and_normal_agree_at_crossover() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..5 {
            let diffs: Vec<f64> = (0..WILCOXON_EXACT_MAX_N)
                .map(|_| rng.gen_range(-1.0..1.0))
                .filter(|d| *d != 0.0)
                .collect();
            let a: Vec<f64> = diffs.clone();
            let b = vec![0.0; diffs.len()];
            let exact = wilcoxon_signed_rank(&a, &b).unwrap();
            // recompute via the normal path on the same ranks
            let n = diffs.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
            let mut rank2 = vec![0u64; n];
            for (pos, &k) in order.iter().enumerate() {
                rank2[k] = 2 * (pos as u64 + 1);
            }
            let w2 = (exact.w * 2.0) as u64;
            let approx = normal_p(&rank2, w2);
            assert!(
                (exact.p - approx).abs() < 0.02,
                "exact {} vs normal {}",
                exact.p,
                approx
            );
        }
    }

    #[test]
    fn dice_table_aggregates_match_recomputation_and_roundtrip() {
        let mut table = DiceTable::default();
        table.push_rows(vec![
            DiceRow { case: "case_001".into(), task: "core".into(), dice: 0.8 },
            DiceRow { case: "case_000".into(), task: "core".into(), dice: 0.6 },
            DiceRow { case: "case_000".into(), task: "rim".into(), dice: 1.0 },
        ]);
        let (mean, std) = table.task_stats("core").unwrap();
        assert!((mean - 0.7).abs() < 1e-12);
        assert!((std - 0.1).abs() < 1e-12);
        let (om, _) = table.overall_stats().unwrap();
        assert!((om - 0.8).abs() < 1e-12);

        let path = std::env::temp_dir().join(format!("dice-{}.csv", std::process::id()));
        table.write(&path).unwrap();
        let back = DiceTable::read(&path).unwrap();
        std::fs::remove_file(&path).ok();
        // rows come back sorted by (case, task)
        assert_eq!(back.rows.len(), 3);
        assert_eq!(back.rows[0].case, "case_000");
        assert_eq!(back.dice_of("case_001", "core"), Some(0.8));
    }

    #[test]
    fn evaluate_scores_every_manifest_task() {
        let manifest = TaskManifest::new(vec![
            crate::volio::TaskEntry { name: "a".into(), mirror: None, auxiliary: false },
            crate::volio::TaskEntry { name: "b".into(), mirror: None, auxiliary: true },
        ])
        .unwrap();
        let mut pred = LabelField::zeros((2, 1, 1), 2);
        pred.set(0, 0, true);
        let rows = evaluate("c0", &pred, &pred, &manifest).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.dice == 1.0));

        let other = LabelField::zeros((2, 1, 1), 1);
        assert!(evaluate("c0", &pred, &other, &manifest).is_err());
    }

    #[test]
    fn compare_pairs_shared_cases_per_task() {
        let mut a = DiceTable::default();
        let mut b = DiceTable::default();
        for (i, (x, y)) in [(0.9, 0.6), (0.8, 0.7), (0.7, 0.5), (0.95, 0.9)].iter().enumerate() {
            a.push_rows(vec![DiceRow { case: format!("c{i}"), task: "core".into(), dice: *x }]);
            b.push_rows(vec![DiceRow { case: format!("c{i}"), task: "core".into(), dice: *y }]);
        }
        // extra case only in a: dropped from pairing
        a.push_rows(vec![DiceRow { case: "c9".into(), task: "core".into(), dice: 0.1 }]);
        let rows = compare(&a, &b).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].n, 4);
        assert_eq!(rows[0].direction, Direction::AHigher);
        assert!(rows[0].p <= 0.125 + 1e-12, "all-positive diffs: p = {}", rows[0].p);
    }
}
