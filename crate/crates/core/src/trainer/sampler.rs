//! Orientation-randomized slab sampling and augmentation.
//!
//! A patch is a slab of adjacent slices in one of the three principal
//! orientations, with the labels (and rejection mask) of its center
//! slice attached. Augmentation composes, in order: midline reflection
//! (with mirror-paired task bits swapped), rotation about a random
//! principal axis applied at the volume level before slicing, and a
//! global affine intensity shift. The whole chain is evaluated lazily
//! per output voxel, so no rotated volume is ever materialized:
//! intensities are sampled trilinearly, labels and masks nearest-
//! neighbor, all coordinates clamped to the volume.

use rand::Rng;

use crate::autodiff::Tensor;
use crate::eval::Orientation;
use crate::volio::{used_bits, LabelField, ScalarField, TaskManifest};
use crate::{Error, Result, Scalar};

/// One training case as the sampler sees it: normalized image, weak
/// labels, and the current rejection mask (bit set = train on it).
#[derive(Debug, Clone)]
pub struct TrainCase {
    pub image: ScalarField,
    pub labels: LabelField,
    pub keep: LabelField,
}

impl TrainCase {
    /// Case with every voxel-task trainable.
    pub fn unmasked(image: ScalarField, labels: LabelField) -> Self {
        let keep = full_mask(labels.dims, labels.n_tasks);
        TrainCase { image, labels, keep }
    }
}

/// All-ones rejection mask.
pub fn full_mask(dims: (usize, usize, usize), n_tasks: usize) -> LabelField {
    let mut mask = LabelField::zeros(dims, n_tasks);
    mask.data.fill(used_bits(n_tasks));
    mask
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub n_slices: usize,
    pub reflect: bool,
    pub rotate: bool,
    pub intensity: bool,
    pub rotation_max_deg: f64,
}

/// Sampled augmentation parameters for one patch. Extraction is a pure
/// function of these, so tests can drive it without an RNG.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchParams {
    pub case: usize,
    pub orientation: Orientation,
    pub center: usize,
    pub reflect: bool,
    /// (principal axis 0=x 1=y 2=z, angle in radians)
    pub rotation: Option<(usize, f64)>,
    pub gain: f64,
    pub shift: f64,
}

/// Fixed draw order: case, orientation, center slice, then one draw per
/// enabled augmentation (reflection coin, rotation axis + angle,
/// intensity gain + shift). Disabled augmentations consume no draws.
pub fn draw_params<R: Rng>(
    n_cases: usize,
    n_planes: usize,
    sc: &SampleConfig,
    rng: &mut R,
) -> PatchParams {
    let case = rng.gen_range(0..n_cases);
    let orientation = Orientation::ALL[rng.gen_range(0..3)];
    let center = rng.gen_range(0..n_planes);
    let reflect = sc.reflect && rng.gen::<f64>() < 0.5;
    let rotation = sc.rotate.then(|| {
        let axis = rng.gen_range(0..3usize);
        let max = sc.rotation_max_deg.to_radians();
        (axis, rng.gen_range(-max..=max))
    });
    let (gain, shift) = if sc.intensity {
        (rng.gen_range(0.9..=1.1), rng.gen_range(-0.1..=0.1))
    } else {
        (1.0, 0.0)
    };
    PatchParams { case, orientation, center, reflect, rotation, gain, shift }
}

/// A batch ready for the forward pass: slab intensities, center-slice
/// labels as 0/1 per task, and the matching trainability mask.
#[derive(Debug, Clone)]
pub struct PatchBatch<S> {
    /// [B, n_slices, H, W]
    pub input: Tensor<S>,
    /// [B, n_tasks, H, W]
    pub labels: Tensor<S>,
    /// [B, n_tasks, H, W], 1 = train on this voxel-task
    pub mask: Tensor<S>,
    pub params: Vec<PatchParams>,
}

pub fn sample_batch<S: Scalar, R: Rng>(
    cases: &[TrainCase],
    manifest: &TaskManifest,
    sc: &SampleConfig,
    batch: usize,
    rng: &mut R,
) -> Result<PatchBatch<S>> {
    if cases.is_empty() || batch == 0 {
        return Err(Error::Contract("sampling needs >= 1 case and batch >= 1".into()));
    }
    let dims = cases[0].image.dims;
    if dims.0 != dims.1 || dims.1 != dims.2 {
        // mixed-orientation batches need one shared plane shape
        return Err(Error::Contract(format!("sampler requires cubic volumes, got {dims:?}")));
    }
    let mut out: Option<PatchBatch<S>> = None;
    for bi in 0..batch {
        let params = draw_params(cases.len(), dims.2, sc, rng);
        let patch = extract_patch::<S>(&cases[params.case], manifest, sc, params)?;
        let slot = out.get_or_insert_with(|| PatchBatch {
            input: Tensor::zeros({
                let mut s = patch.input.shape.clone();
                s.insert(0, batch);
                s
            }),
            labels: Tensor::zeros({
                let mut s = patch.labels.shape.clone();
                s.insert(0, batch);
                s
            }),
            mask: Tensor::zeros({
                let mut s = patch.mask.shape.clone();
                s.insert(0, batch);
                s
            }),
            params: Vec::with_capacity(batch),
        });
        let n = patch.input.len();
        slot.input.data[bi * n..][..n].copy_from_slice(&patch.input.data);
        let m = patch.labels.len();
        slot.labels.data[bi * m..][..m].copy_from_slice(&patch.labels.data);
        slot.mask.data[bi * m..][..m].copy_from_slice(&patch.mask.data);
        slot.params.push(patch.params);
    }
    Ok(out.expect("batch >= 1"))
}

/// One patch: input [n_slices, H, W], labels and mask [n_tasks, H, W].
pub struct Patch<S> {
    pub input: Tensor<S>,
    pub labels: Tensor<S>,
    pub mask: Tensor<S>,
    pub params: PatchParams,
}

/// Deterministic patch extraction from explicit parameters.
pub fn extract_patch<S: Scalar>(
    case: &TrainCase,
    manifest: &TaskManifest,
    sc: &SampleConfig,
    params: PatchParams,
) -> Result<Patch<S>> {
    let dims = case.image.dims;
    if case.labels.dims != dims || case.keep.dims != dims {
        return Err(Error::Shape(format!(
            "case image {dims:?} vs labels {:?} / mask {:?}",
            case.labels.dims, case.keep.dims
        )));
    }
    let n_tasks = case.labels.n_tasks;
    if manifest.n_tasks() != n_tasks {
        return Err(Error::Shape(format!(
            "manifest has {} tasks, labels {}",
            manifest.n_tasks(),
            n_tasks
        )));
    }
    let orient = params.orientation;
    let (h, w) = orient.plane_dims(dims);
    let n_planes = orient.n_planes(dims);
    if params.center >= n_planes {
        return Err(Error::Contract(format!(
            "center slice {} outside 0..{n_planes}",
            params.center
        )));
    }
    let half = sc.n_slices / 2;
    let map = SourceMap::new(dims, &params);

    let mut input = vec![S::zero(); sc.n_slices * h * w];
    for s in 0..sc.n_slices {
        let k = (params.center + s).saturating_sub(half).min(n_planes - 1);
        let plane = &mut input[s * h * w..][..h * w];
        for u in 0..h {
            for v in 0..w {
                let p = map.source(orient.to_xyz(k, u, v));
                let raw = trilinear(&case.image, p);
                plane[u * w + v] = S::fp(params.gain * raw + params.shift);
            }
        }
    }

    // Labels and rejection mask attach for the center slice only,
    // nearest-neighbor through the same geometric map.
    let perm = manifest.mirror_permutation();
    let mut labels = vec![S::zero(); n_tasks * h * w];
    let mut mask = vec![S::zero(); n_tasks * h * w];
    for u in 0..h {
        for v in 0..w {
            let p = map.source(orient.to_xyz(params.center, u, v));
            let i = nearest(dims, p);
            let (lw, kw) = (case.labels.data[i], case.keep.data[i]);
            for t in 0..n_tasks {
                // a reflected patch reads task t's bit from its mirror partner
                let src = if params.reflect { perm[t] } else { t };
                if lw >> src & 1 == 1 {
                    labels[t * h * w + u * w + v] = S::one();
                }
                if kw >> src & 1 == 1 {
                    mask[t * h * w + u * w + v] = S::one();
                }
            }
        }
    }

    Ok(Patch {
        input: Tensor::new(vec![sc.n_slices, h, w], input),
        labels: Tensor::new(vec![n_tasks, h, w], labels),
        mask: Tensor::new(vec![n_tasks, h, w], mask),
        params,
    })
}

/// Composed inverse map from augmented-volume coordinates to source
/// coordinates: undo the rotation, then undo the reflection.
struct SourceMap {
    dims: (usize, usize, usize),
    reflect: bool,
    rotation: Option<(usize, f64, f64)>, // axis, cos, sin of the inverse angle
    center: (f64, f64, f64),
}

impl SourceMap {
    fn new(dims: (usize, usize, usize), params: &PatchParams) -> Self {
        SourceMap {
            dims,
            reflect: params.reflect,
            rotation: params
                .rotation
                .map(|(axis, angle)| (axis, (-angle).cos(), (-angle).sin())),
            center: (
                (dims.0 as f64 - 1.0) / 2.0,
                (dims.1 as f64 - 1.0) / 2.0,
                (dims.2 as f64 - 1.0) / 2.0,
            ),
        }
    }

    #[inline]
    fn source(&self, voxel: (usize, usize, usize)) -> (f64, f64, f64) {
        let (mut x, mut y, mut z) =
            (voxel.0 as f64, voxel.1 as f64, voxel.2 as f64);
        if let Some((axis, c, s)) = self.rotation {
            let (cx, cy, cz) = self.center;
            let (dx, dy, dz) = (x - cx, y - cy, z - cz);
            let (rx, ry, rz) = match axis {
                0 => (dx, c * dy - s * dz, s * dy + c * dz),
                1 => (c * dx + s * dz, dy, -s * dx + c * dz),
                _ => (c * dx - s * dy, s * dx + c * dy, dz),
            };
            x = rx + cx;
            y = ry + cy;
            z = rz + cz;
        }
        if self.reflect {
            x = self.dims.0 as f64 - 1.0 - x;
        }
        (x, y, z)
    }
}

/// Trilinear sample with corner clamping; exact at integer coordinates.
fn trilinear(field: &ScalarField, p: (f64, f64, f64)) -> f64 {
    let (sx, sy, sz) = field.dims;
    let clamp = |v: f64, n: usize| v.max(0.0).min(n as f64 - 1.0);
    let (x, y, z) = (clamp(p.0, sx), clamp(p.1, sy), clamp(p.2, sz));
    let (x0, y0, z0) = (x.floor() as usize, y.floor() as usize, z.floor() as usize);
    let (x1, y1, z1) = ((x0 + 1).min(sx - 1), (y0 + 1).min(sy - 1), (z0 + 1).min(sz - 1));
    let (fx, fy, fz) = (x - x0 as f64, y - y0 as f64, z - z0 as f64);
    let at = |x: usize, y: usize, z: usize| field.at(x, y, z) as f64;
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
    let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
    let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
    let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
    lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
}

/// Nearest voxel, clamped; used for labels and masks.
fn nearest(dims: (usize, usize, usize), p: (f64, f64, f64)) -> usize {
    let snap = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
    let (x, y, z) = (snap(p.0, dims.0), snap(p.1, dims.1), snap(p.2, dims.2));
    x + dims.0 * (y + dims.1 * z)
}

/// Flip a volume about the x midline.
pub fn mirror_volume(field: &ScalarField) -> ScalarField {
    let (sx, sy, sz) = field.dims;
    let mut out = ScalarField::zeros(field.dims);
    for z in 0..sz {
        for y in 0..sy {
            for x in 0..sx {
                let i = out.idx(x, y, z);
                out.data[i] = field.at(sx - 1 - x, y, z);
            }
        }
    }
    out
}

/// Flip labels about the x midline and swap mirror-paired task bits.
pub fn mirror_labels(labels: &LabelField, manifest: &TaskManifest) -> Result<LabelField> {
    if manifest.n_tasks() != labels.n_tasks {
        return Err(Error::Shape(format!(
            "manifest has {} tasks, labels {}",
            manifest.n_tasks(),
            labels.n_tasks
        )));
    }
    let perm = manifest.mirror_permutation();
    let (sx, sy, sz) = labels.dims;
    let mut out = LabelField::zeros(labels.dims, labels.n_tasks);
    for z in 0..sz {
        for y in 0..sy {
            for x in 0..sx {
                let src = labels.data[labels.idx(sx - 1 - x, y, z)];
                let mut word = 0u32;
                for (t, &p) in perm.iter().enumerate() {
                    word |= (src >> p & 1) << t;
                }
                let i = out.idx(x, y, z);
                out.data[i] = word;
            }
        }
    }
    Ok(out)
}
