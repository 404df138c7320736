//! Synthetic 3D phantoms with clean multi-task labels.
//!
//! A phantom is a nested-ellipsoid "head": parenchyma, a cortical shell,
//! an interior ventricle, two mirrored lateral blob pairs, and one tiny
//! bright speck whose foreground ratio (~1:1700) stands in for extreme
//! class imbalance. Left/right pairs are bit-exact mirror images about
//! the x midplane before texture noise. Three pseudo-vendor intensity
//! tables provide scanner-like heterogeneity; per-voxel texture noise is
//! i.i.d. from the case seed, so every case carries a unique intensity
//! signature. Everything is a pure function of the spec.

mod noise;

pub use noise::{corrupt_labels, ErrorLedger, NoiseSpec};

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::volio::{
    self, CsvTable, LabelField, ScalarField, TaskEntry, TaskManifest,
};
use crate::{Error, Result};

/// Structure tasks before any configured extra pairs.
pub const BASE_STRUCTURES: usize = 8;
/// Auxiliary tasks appended after the structure tasks.
pub const AUX_TASKS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// Cubic volume edge in voxels; even, so the mirror midplane falls
    /// between voxels and the left/right halves partition exactly.
    pub size: usize,
    pub seed: u64,
    /// Pseudo-vendor intensity table, 0..3.
    pub vendor: usize,
    /// Std of the additive i.i.d. texture noise on foreground voxels.
    pub sigma_texture: f64,
    /// Mean intensity of the tiny speck, before vendor gain.
    pub speck_brightness: f64,
    /// Additional mirrored blob pairs (2 tasks each) inserted between
    /// the base structures and the auxiliary tasks.
    pub extra_pairs: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 48,
            seed: 0,
            vendor: 0,
            sigma_texture: 0.35,
            speck_brightness: 2.6,
            extra_pairs: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        // 24 is the smallest size where the speck cannot rasterize to
        // zero voxels and worst-case jitter keeps everything interior.
        if self.size < 24 || self.size % 2 != 0 {
            return Err(Error::Config(format!(
                "phantom size {} must be even and >= 24",
                self.size
            )));
        }
        if self.vendor >= N_VENDORS {
            return Err(Error::Config(format!(
                "vendor {} outside 0..{N_VENDORS}",
                self.vendor
            )));
        }
        if !(self.sigma_texture >= 0.0 && self.sigma_texture.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_texture {} must be finite and >= 0",
                self.sigma_texture
            )));
        }
        if !(self.speck_brightness > 0.0 && self.speck_brightness.is_finite()) {
            return Err(Error::Config(format!(
                "speck_brightness {} must be finite and > 0",
                self.speck_brightness
            )));
        }
        if self.n_tasks() > 31 {
            return Err(Error::Config(format!(
                "extra_pairs {} gives {} tasks, over the 31-task cap",
                self.extra_pairs,
                self.n_tasks()
            )));
        }
        Ok(())
    }

    /// Total task count: structures, extra pairs, then auxiliaries.
    pub fn n_tasks(&self) -> usize {
        BASE_STRUCTURES + 2 * self.extra_pairs + AUX_TASKS
    }
}

pub const N_VENDORS: usize = 3;

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    cx: f64,
    cy: f64,
    cz: f64,
    rx: f64,
    ry: f64,
    rz: f64,
}

impl Ellipsoid {
    fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        let dz = (z - self.cz) / self.rz;
        dx * dx + dy * dy + dz * dz <= 1.0
    }

    fn scaled(&self, f: f64) -> Ellipsoid {
        Ellipsoid {
            rx: self.rx * f,
            ry: self.ry * f,
            rz: self.rz * f,
            ..*self
        }
    }
}

/// One rasterized structure mask plus its display intensity.
struct Structure {
    name: String,
    mask: Vec<bool>,
    mean: f64,
    mirror_of: Option<usize>,
}

/// Per-vendor intensity means, in structure order. The gain echoes a
/// global scanner calibration difference; shell/ventricle contrasts
/// shift independently so vendors are not a pure rescale of each other.
fn vendor_means(vendor: usize, speck: f64) -> VendorTable {
    let (gain, shell, ventricle) = match vendor {
        0 => (1.0, 1.35, 0.55),
        1 => (1.07, 1.48, 0.50),
        _ => (0.93, 1.24, 0.60),
    };
    VendorTable {
        parenchyma: 1.0 * gain,
        shell,
        ventricle,
        blob: 1.60 * gain,
        nodule: 1.85 * gain,
        speck: speck * gain,
        extra: 1.70 * gain,
    }
}

struct VendorTable {
    parenchyma: f64,
    shell: f64,
    ventricle: f64,
    blob: f64,
    nodule: f64,
    speck: f64,
    extra: f64,
}

/// Center jitter (up to ±3% of the volume edge per axis) and radius
/// scale (±7%) for one structure; mirrored pairs share a single draw.
fn jitter<R: Rng>(rng: &mut R, size: usize, e: Ellipsoid) -> Ellipsoid {
    let amp = 0.03 * size as f64;
    let j = |rng: &mut R| rng.gen_range(-amp..=amp);
    let (dx, dy, dz) = (j(rng), j(rng), j(rng));
    let f = rng.gen_range(0.93..=1.07);
    Ellipsoid {
        cx: e.cx + dx,
        cy: e.cy + dy,
        cz: e.cz + dz,
        rx: e.rx * f,
        ry: e.ry * f,
        rz: e.rz * f,
    }
}

fn rasterize(size: usize, e: &Ellipsoid) -> Vec<bool> {
    let mut mask = vec![false; size * size * size];
    // Bounding box keeps this O(structure volume), not O(volume).
    let clamp = |v: f64| (v.max(0.0) as usize).min(size - 1);
    let (x0, x1) = (clamp(e.cx - e.rx - 1.0), clamp(e.cx + e.rx + 1.0));
    let (y0, y1) = (clamp(e.cy - e.ry - 1.0), clamp(e.cy + e.ry + 1.0));
    let (z0, z1) = (clamp(e.cz - e.rz - 1.0), clamp(e.cz + e.rz + 1.0));
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                if e.contains(x as f64, y as f64, z as f64) {
                    mask[x + size * (y + size * z)] = true;
                }
            }
        }
    }
    mask
}

/// Mirror about the x midplane: x -> size-1-x. Copying (rather than
/// re-evaluating a mirrored ellipsoid) is what makes pairs bit-exact.
fn mirror_mask(size: usize, mask: &[bool]) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for z in 0..size {
        for y in 0..size {
            let row = size * (y + size * z);
            for x in 0..size {
                out[row + x] = mask[row + (size - 1 - x)];
            }
        }
    }
    out
}

fn build_structures(spec: &PhantomSpec) -> Result<Vec<Structure>> {
    let s = spec.size as f64;
    let mid = (s - 1.0) / 2.0;
    let rel = |c: f64| c * s;
    let means = vendor_means(spec.vendor, spec.speck_brightness);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Draw order is part of the on-disk contract: parenchyma, ventricle,
    // blob pair, nodule pair, speck, then extra pairs.
    let parenchyma = jitter(
        &mut rng,
        spec.size,
        Ellipsoid { cx: mid, cy: mid, cz: mid, rx: rel(0.40), ry: rel(0.38), rz: rel(0.36) },
    );
    let ventricle = jitter(
        &mut rng,
        spec.size,
        Ellipsoid { cx: mid, cy: mid, cz: mid, rx: rel(0.10), ry: rel(0.14), rz: rel(0.09) },
    );
    let blob = jitter(
        &mut rng,
        spec.size,
        Ellipsoid {
            cx: rel(0.30),
            cy: rel(0.48),
            cz: rel(0.52),
            rx: rel(0.085),
            ry: rel(0.075),
            rz: rel(0.080),
        },
    );
    let nodule = jitter(
        &mut rng,
        spec.size,
        Ellipsoid {
            cx: rel(0.36),
            cy: rel(0.62),
            cz: rel(0.40),
            rx: rel(0.055),
            ry: rel(0.060),
            rz: rel(0.050),
        },
    );
    let speck = jitter(
        &mut rng,
        spec.size,
        Ellipsoid {
            cx: rel(0.60),
            cy: rel(0.40),
            cz: rel(0.56),
            rx: rel(0.052),
            ry: rel(0.052),
            rz: rel(0.052),
        },
    );

    let paren_mask = rasterize(spec.size, &parenchyma);
    let inner = rasterize(spec.size, &parenchyma.scaled(0.86));
    let shell_mask: Vec<bool> =
        paren_mask.iter().zip(&inner).map(|(&o, &i)| o && !i).collect();

    let mut out = Vec::new();
    let mut push = |name: &str, mask: Vec<bool>, mean: f64| {
        out.push(Structure { name: name.to_string(), mask, mean, mirror_of: None });
    };
    push("parenchyma", paren_mask, means.parenchyma);
    push("cortex_shell", shell_mask, means.shell);
    push("ventricle", rasterize(spec.size, &ventricle), means.ventricle);

    let push_pair = |out: &mut Vec<Structure>, name: &str, e: &Ellipsoid, mean: f64| {
        let left = rasterize(spec.size, e);
        let right = mirror_mask(spec.size, &left);
        let li = out.len();
        out.push(Structure {
            name: format!("{name}_l"),
            mask: left,
            mean,
            mirror_of: Some(li + 1),
        });
        out.push(Structure {
            name: format!("{name}_r"),
            mask: right,
            mean,
            mirror_of: Some(li),
        });
    };
    push_pair(&mut out, "blob", &blob, means.blob);
    push_pair(&mut out, "nodule", &nodule, means.nodule);
    out.push(Structure {
        name: "speck".into(),
        mask: rasterize(spec.size, &speck),
        mean: means.speck,
        mirror_of: None,
    });

    for k in 0..spec.extra_pairs {
        // Extra pairs sit on a ring in the y-z plane so any count up to
        // the task cap stays inside the volume.
        let th = k as f64 / 10.0 * std::f64::consts::TAU;
        let e = jitter(
            &mut rng,
            spec.size,
            Ellipsoid {
                cx: rel(0.30),
                cy: mid + rel(0.24) * th.cos(),
                cz: mid + rel(0.24) * th.sin(),
                rx: rel(0.045),
                ry: rel(0.045),
                rz: rel(0.045),
            },
        );
        push_pair(&mut out, &format!("extra{k}"), &e, means.extra);
    }

    for st in &out {
        if touches_boundary(spec.size, &st.mask) {
            return Err(Error::Invariant(format!(
                "structure {} touches the volume boundary",
                st.name
            )));
        }
        if st.mask.iter().all(|&b| !b) {
            return Err(Error::Invariant(format!("structure {} is empty", st.name)));
        }
    }
    Ok(out)
}

fn touches_boundary(size: usize, mask: &[bool]) -> bool {
    let idx = |x: usize, y: usize, z: usize| x + size * (y + size * z);
    for a in 0..size {
        for b in 0..size {
            let faces = [
                idx(0, a, b),
                idx(size - 1, a, b),
                idx(a, 0, b),
                idx(a, size - 1, b),
                idx(a, b, 0),
                idx(a, b, size - 1),
            ];
            if faces.into_iter().any(|i| mask[i]) {
                return true;
            }
        }
    }
    false
}

/// Task names/mirrors/aux flags for a spec, in label-bit order.
pub fn task_manifest(spec: &PhantomSpec) -> Result<TaskManifest> {
    let structures = build_structures(&PhantomSpec { sigma_texture: 0.0, ..spec.clone() })?;
    manifest_from(&structures)
}

fn manifest_from(structures: &[Structure]) -> Result<TaskManifest> {
    let n_struct = structures.len();
    let mut tasks: Vec<TaskEntry> = structures
        .iter()
        .map(|s| TaskEntry { name: s.name.clone(), mirror: s.mirror_of, auxiliary: false })
        .collect();
    tasks.push(TaskEntry { name: "aux_left".into(), mirror: Some(n_struct + 1), auxiliary: true });
    tasks.push(TaskEntry { name: "aux_right".into(), mirror: Some(n_struct), auxiliary: true });
    tasks.push(TaskEntry { name: "whole".into(), mirror: None, auxiliary: true });
    TaskManifest::new(tasks)
}

/// Generate one phantom: raw (un-normalized) image, clean labels, and
/// the task manifest. Deterministic in the spec.
///
/// Tasks 0..n_structures are the structure masks (overlap allowed);
/// then aux_left = whole ∩ {x < size/2}, aux_right = whole ∩
/// {x >= size/2}, and whole = union of every structure mask.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(ScalarField, LabelField, TaskManifest)> {
    spec.validate()?;
    let structures = build_structures(spec)?;
    let manifest = manifest_from(&structures)?;
    let size = spec.size;
    let n = size * size * size;
    let n_struct = structures.len();
    let n_tasks = n_struct + AUX_TASKS;

    let mut labels = LabelField::zeros((size, size, size), n_tasks);
    let mut image = vec![0.0f64; n];
    for (t, st) in structures.iter().enumerate() {
        for (i, &on) in st.mask.iter().enumerate() {
            if on {
                labels.data[i] |= 1 << t;
                image[i] = st.mean; // later structures paint over earlier
            }
        }
    }

    let (t_left, t_right, t_whole) = (n_struct, n_struct + 1, n_struct + 2);
    let struct_bits: u32 = (1u32 << n_struct) - 1;
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let i = x + size * (y + size * z);
                if labels.data[i] & struct_bits != 0 {
                    labels.data[i] |= 1 << t_whole;
                    let half = if x < size / 2 { t_left } else { t_right };
                    labels.data[i] |= 1 << half;
                }
            }
        }
    }

    // Texture noise only inside structures; background stays exactly 0.
    // One normal draw per foreground voxel, in linear order.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7478_7572_655f_6e6f); // texture stream
    let data: Vec<f32> = image
        .iter()
        .map(|&v| {
            if v == 0.0 {
                0.0
            } else {
                let eps: f64 = rng.sample(StandardNormal);
                (v + spec.sigma_texture * eps) as f32
            }
        })
        .collect();

    Ok((ScalarField::new((size, size, size), data)?, labels, manifest))
}

/// Rescale the non-zero voxels to mean 0, std 1 (population); zero
/// voxels stay exactly 0.
pub fn normalize(field: &ScalarField) -> Result<ScalarField> {
    let nz: Vec<f64> = field.data.iter().filter(|v| **v != 0.0).map(|&v| v as f64).collect();
    if nz.len() < 2 {
        return Err(Error::Degenerate(format!(
            "normalize needs >= 2 non-zero voxels, found {}",
            nz.len()
        )));
    }
    let n = nz.len() as f64;
    let mean = nz.iter().sum::<f64>() / n;
    let var = nz.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::Degenerate(
            "normalize on a constant non-zero field".into(),
        ));
    }
    let std = var.sqrt();
    let data = field
        .data
        .iter()
        .map(|&v| if v == 0.0 { 0.0 } else { ((v as f64 - mean) / std) as f32 })
        .collect();
    ScalarField::new(field.dims, data)
}

// ---------------------------------------------------------------------------
// Dataset generation: cases on disk plus an index.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Template for every case; per-case seed and vendor are derived
    /// from `seed` and the case index.
    pub phantom: PhantomSpec,
    pub noise: NoiseSpec,
    /// Master seed; the only source of randomness for the dataset.
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_train: 9,
            n_val: 2,
            n_test: 20,
            phantom: PhantomSpec::default(),
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.noise.validate(self.phantom.n_tasks())?;
        if self.n_train == 0 {
            return Err(Error::Config("dataset needs >= 1 training case".into()));
        }
        Ok(())
    }

    pub fn n_cases(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub index: usize,
    pub split: Split,
    pub vendor: usize,
    pub phantom_seed: u64,
    pub noise_seed: u64,
    pub dir: PathBuf,
}

/// All artifacts of one case, as read back from its directory.
pub struct Case {
    pub image: ScalarField,
    pub clean: LabelField,
    pub weak: LabelField,
    pub ledger: ErrorLedger,
}

pub const INDEX_FILE: &str = "index.csv";
pub const TASKS_FILE: &str = "tasks.txt";

/// Generate the full dataset under `out`: per-case directories with the
/// normalized image, clean and weak labels, and the three-process error
/// ledger, plus the shared task manifest and an index table. Cases are
/// generated in parallel; every artifact is a pure function of the
/// per-case seeds drawn up front from the master seed.
pub fn gen_dataset(spec: &DatasetSpec, out: &Path) -> Result<Vec<CaseRecord>> {
    spec.validate()?;
    fs::create_dir_all(out)?;
    let mut seed_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let records: Vec<CaseRecord> = (0..spec.n_cases())
        .map(|i| CaseRecord {
            index: i,
            split: if i < spec.n_train {
                Split::Train
            } else if i < spec.n_train + spec.n_val {
                Split::Val
            } else {
                Split::Test
            },
            vendor: i % N_VENDORS,
            phantom_seed: seed_rng.gen(),
            noise_seed: seed_rng.gen(),
            dir: out.join(format!("case_{i:03}")),
        })
        .collect();

    let manifest = task_manifest(&spec.phantom)?;
    manifest.write(&out.join(TASKS_FILE))?;

    records
        .par_iter()
        .map(|rec| {
            let case_spec = PhantomSpec {
                seed: rec.phantom_seed,
                vendor: rec.vendor,
                ..spec.phantom.clone()
            };
            let (raw, clean, _) = generate_phantom(&case_spec)?;
            let image = normalize(&raw)?;
            let (weak, ledger) = corrupt_labels(&clean, &spec.noise, rec.noise_seed)?;
            fs::create_dir_all(&rec.dir)?;
            volio::write_scalar(&image, &rec.dir.join("image.mvol"))?;
            volio::write_label(&clean, &rec.dir.join("clean.mvol"))?;
            volio::write_label(&weak, &rec.dir.join("weak.mvol"))?;
            ledger.write(&rec.dir)?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;

    let mut table = CsvTable::new(&["case", "split", "vendor", "phantom_seed", "noise_seed", "dir"]);
    for rec in &records {
        table.push(vec![
            rec.index.to_string(),
            rec.split.as_str().to_string(),
            rec.vendor.to_string(),
            rec.phantom_seed.to_string(),
            rec.noise_seed.to_string(),
            rec.dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        ]);
    }
    table.write(&out.join(INDEX_FILE))?;
    Ok(records)
}

/// Read the index table written by [`gen_dataset`].
pub fn read_index(out: &Path) -> Result<Vec<CaseRecord>> {
    let path = out.join(INDEX_FILE);
    let table = CsvTable::read(&path)?;
    let col = |name: &str| {
        table
            .col(name)
            .ok_or_else(|| Error::parse(&path, format!("missing column {name}")))
    };
    let (ci, si, vi, pi, ni, di) = (
        col("case")?,
        col("split")?,
        col("vendor")?,
        col("phantom_seed")?,
        col("noise_seed")?,
        col("dir")?,
    );
    let mut records = Vec::new();
    for row in &table.rows {
        let parse_u64 = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| Error::parse(&path, format!("bad integer {s:?}")))
        };
        let split = match row[si].as_str() {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(Error::parse(&path, format!("bad split {other:?}"))),
        };
        records.push(CaseRecord {
            index: parse_u64(&row[ci])? as usize,
            split,
            vendor: parse_u64(&row[vi])? as usize,
            phantom_seed: parse_u64(&row[pi])?,
            noise_seed: parse_u64(&row[ni])?,
            dir: out.join(&row[di]),
        });
    }
    Ok(records)
}

/// Read one case directory back into memory.
pub fn read_case(dir: &Path) -> Result<Case> {
    Ok(Case {
        image: volio::read_scalar(&dir.join("image.mvol"))?,
        clean: volio::read_label(&dir.join("clean.mvol"))?,
        weak: volio::read_label(&dir.join("weak.mvol"))?,
        ledger: ErrorLedger::read(dir)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::{label_to_bytes, scalar_to_bytes};

    fn small_spec() -> PhantomSpec {
        PhantomSpec { size: 32, seed: 7, ..PhantomSpec::default() }
    }

    #[test]
    fn same_seed_gives_byte_identical_artifacts() {
        let (img_a, lab_a, man_a) = generate_phantom(&small_spec()).unwrap();
        let (img_b, lab_b, man_b) = generate_phantom(&small_spec()).unwrap();
        assert_eq!(scalar_to_bytes(&img_a).unwrap(), scalar_to_bytes(&img_b).unwrap());
        assert_eq!(label_to_bytes(&lab_a).unwrap(), label_to_bytes(&lab_b).unwrap());
        assert_eq!(man_a, man_b);
        let (img_c, _, _) =
            generate_phantom(&PhantomSpec { seed: 8, ..small_spec() }).unwrap();
        assert_ne!(img_a.data, img_c.data);
    }

    #[test]
    fn whole_task_is_exactly_the_union_of_structures() {
        let (_, labels, man) = generate_phantom(&small_spec()).unwrap();
        let n_struct = man.tasks().iter().filter(|t| !t.auxiliary).count();
        let whole = n_struct + 2;
        let struct_bits: u32 = (1 << n_struct) - 1;
        for &w in &labels.data {
            assert_eq!(w >> whole & 1 == 1, w & struct_bits != 0);
        }
    }

    #[test]
    fn left_right_aux_tasks_partition_the_whole_mask() {
        let spec = small_spec();
        let (_, labels, _) = generate_phantom(&spec).unwrap();
        let (l, r, w) = (BASE_STRUCTURES, BASE_STRUCTURES + 1, BASE_STRUCTURES + 2);
        for z in 0..spec.size {
            for y in 0..spec.size {
                for x in 0..spec.size {
                    let i = labels.idx(x, y, z);
                    let (lv, rv, wv) = (labels.get(i, l), labels.get(i, r), labels.get(i, w));
                    assert_eq!(lv || rv, wv);
                    assert!(!(lv && rv));
                    if lv {
                        assert!(x < spec.size / 2);
                    }
                    if rv {
                        assert!(x >= spec.size / 2);
                    }
                }
            }
        }
    }

    #[test]
    fn speck_foreground_ratio_matches_extreme_imbalance() {
        for seed in 0..5 {
            let spec = PhantomSpec { seed, ..PhantomSpec::default() };
            let (_, labels, man) = generate_phantom(&spec).unwrap();
            let t = man.tasks().iter().position(|t| t.name == "speck").unwrap();
            let ratio = labels.task_count(t) as f64 / labels.n_voxels() as f64;
            assert!(
                (1.0 / 5000.0..=1.0 / 500.0).contains(&ratio),
                "speck ratio {ratio} outside [1/5000, 1/500]"
            );
        }
    }

    #[test]
    fn mirror_pairs_are_bit_exact_before_noise() {
        let spec = PhantomSpec { extra_pairs: 2, ..small_spec() };
        let (_, labels, man) = generate_phantom(&spec).unwrap();
        let size = spec.size;
        for (t, task) in man.tasks().iter().enumerate() {
            let Some(m) = task.mirror else { continue };
            if task.auxiliary {
                continue; // aux halves mirror as sets only when the
                          // whole mask is symmetric, which jitter breaks
            }
            for z in 0..size {
                for y in 0..size {
                    for x in 0..size {
                        let i = labels.idx(x, y, z);
                        let j = labels.idx(size - 1 - x, y, z);
                        assert_eq!(labels.get(i, t), labels.get(j, m), "task {}", task.name);
                    }
                }
            }
        }
    }

    #[test]
    fn manifest_names_mirrors_and_aux_flags_line_up() {
        let man = task_manifest(&PhantomSpec::default()).unwrap();
        let names: Vec<&str> = man.tasks().iter().map(|t| t.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "parenchyma",
                "cortex_shell",
                "ventricle",
                "blob_l",
                "blob_r",
                "nodule_l",
                "nodule_r",
                "speck",
                "aux_left",
                "aux_right",
                "whole"
            ]
        );
        assert_eq!(man.tasks()[3].mirror, Some(4));
        assert_eq!(man.tasks()[4].mirror, Some(3));
        assert_eq!(man.tasks()[8].mirror, Some(9));
        assert!(man.tasks()[8..].iter().all(|t| t.auxiliary));
        assert!(man.tasks()[..8].iter().all(|t| !t.auxiliary));
    }

    #[test]
    fn vendors_change_intensities_but_not_labels() {
        let base = small_spec();
        let (img0, lab0, _) = generate_phantom(&base).unwrap();
        for vendor in 1..N_VENDORS {
            let (img, lab, _) =
                generate_phantom(&PhantomSpec { vendor, ..base.clone() }).unwrap();
            assert_eq!(lab0.data, lab.data, "labels must not depend on vendor");
            assert_ne!(img0.data, img.data, "vendor {vendor} should shift intensities");
        }
        assert!(PhantomSpec { vendor: 3, ..base }.validate().is_err());
    }

    #[test]
    fn background_is_exactly_zero_and_foreground_is_not_masked() {
        let (img, labels, man) = generate_phantom(&small_spec()).unwrap();
        let whole = man.tasks().len() - 1;
        for i in 0..img.data.len() {
            if !labels.get(i, whole) {
                assert_eq!(img.data[i], 0.0);
            }
        }
    }

    #[test]
    fn extra_pairs_scale_the_task_count_up_to_the_cap() {
        let spec = PhantomSpec { extra_pairs: 10, ..PhantomSpec::default() };
        assert_eq!(spec.n_tasks(), 31);
        spec.validate().unwrap();
        let (_, labels, man) = generate_phantom(&spec).unwrap();
        assert_eq!(labels.n_tasks, 31);
        assert_eq!(man.tasks().len(), 31);
        assert!(PhantomSpec { extra_pairs: 11, ..PhantomSpec::default() }
            .validate()
            .is_err());
    }

    #[test]
    fn normalize_hand_example_and_rules() {
        // {0, 1, 3}: non-zero mean 2, population std 1 -> {-1, 1}
        let f = ScalarField::new((3, 1, 1), vec![0.0, 1.0, 3.0]).unwrap();
        let n = normalize(&f).unwrap();
        assert_eq!(n.data, vec![0.0, -1.0, 1.0]);

        // idempotent within fp noise, zeros untouched
        let again = normalize(&n).unwrap();
        for (a, b) in n.data.iter().zip(&again.data) {
            assert!((a - b).abs() < 1e-6);
        }

        // degenerate inputs
        assert!(normalize(&ScalarField::zeros((2, 2, 2))).is_err());
        let constant = ScalarField::new((3, 1, 1), vec![0.0, 5.0, 5.0]).unwrap();
        assert!(normalize(&constant).is_err());
    }

    #[test]
    fn generated_image_normalizes_to_unit_stats_off_background() {
        let (raw, _, _) = generate_phantom(&small_spec()).unwrap();
        let img = normalize(&raw).unwrap();
        let nz: Vec<f64> = img.data.iter().filter(|v| **v != 0.0).map(|&v| v as f64).collect();
        let n = nz.len() as f64;
        let mean = nz.iter().sum::<f64>() / n;
        let var = nz.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-5, "std {}", var.sqrt());
    }

    #[test]
    fn dataset_roundtrips_index_and_cases() {
        let dir = tempdir();
        let spec = DatasetSpec {
            n_train: 3,
            n_val: 1,
            n_test: 2,
            phantom: PhantomSpec { size: 24, ..PhantomSpec::default() },
            noise: NoiseSpec { sporadic_rate: 0.02, ..NoiseSpec::default() },
            seed: 11,
        };
        let records = gen_dataset(&spec, &dir).unwrap();
        assert_eq!(records.len(), 6);
        assert_eq!(records.iter().filter(|r| r.split == Split::Train).count(), 3);
        assert_eq!(records[0].vendor, 0);
        assert_eq!(records[4].vendor, 1);

        let back = read_index(&dir).unwrap();
        assert_eq!(back, records);

        let case = read_case(&records[0].dir).unwrap();
        assert_eq!(case.image.dims, (24, 24, 24));
        // weak = clean ^ ledger, bit-exact, straight off disk
        let recomposed = case.ledger.apply(&case.clean).unwrap();
        assert_eq!(recomposed.data, case.weak.data);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn dataset_generation_is_deterministic_across_runs() {
        let spec = DatasetSpec {
            n_train: 1,
            n_val: 0,
            n_test: 1,
            phantom: PhantomSpec { size: 24, ..PhantomSpec::default() },
            noise: NoiseSpec { boundary_rate: 0.1, sporadic_rate: 0.01, ..NoiseSpec::default() },
            seed: 3,
        };
        let (da, db) = (tempdir(), tempdir());
        gen_dataset(&spec, &da).unwrap();
        gen_dataset(&spec, &db).unwrap();
        for rel in ["index.csv", "tasks.txt", "case_000/image.mvol", "case_000/weak.mvol", "case_001/ledger_spor.mvol"] {
            let a = std::fs::read(da.join(rel)).unwrap();
            let b = std::fs::read(db.join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between runs");
        }
        std::fs::remove_dir_all(&da).unwrap();
        std::fs::remove_dir_all(&db).unwrap();
    }

    fn tempdir() -> PathBuf {
        static NEXT: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
        let id = NEXT.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!(
            "hetseg-phantom-test-{}-{id}",
            std::process::id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
