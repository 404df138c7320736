//! Label corruption with a complete error ledger.
//!
//! Three processes stack, in a fixed order, on top of the clean labels:
//!
//! 1. systematic: morphological erosion of selected task masks, the
//!    same bias for every case sharing a spec (no randomness);
//! 2. predictable: i.i.d. flips restricted to voxels sitting on a
//!    label transition of the post-erosion masks;
//! 3. sporadic: i.i.d. flips anywhere, per voxel-task.
//!
//! Every flip is recorded in a per-process [`ErrorLedger`], so
//! `weak == clean ^ systematic ^ predictable ^ sporadic` holds
//! bit-exactly. Downstream noise handling can then be scored against
//! ground truth on exactly which voxels were corrupted and why.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::volio::{self, LabelField};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Task indices whose masks are eroded.
    pub erode_labels: Vec<usize>,
    /// Erosion depth in 6-connectivity steps.
    pub erode_radius: usize,
    /// Flip probability on label-transition voxels.
    pub boundary_rate: f64,
    /// Restrict transition detection to the y axis, mimicking an
    /// annotator bias tied to one slicing direction.
    pub axis_restricted: bool,
    /// Flip probability for every voxel-task pair.
    pub sporadic_rate: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            erode_labels: Vec::new(),
            erode_radius: 1,
            boundary_rate: 0.0,
            axis_restricted: false,
            sporadic_rate: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self, n_tasks: usize) -> Result<()> {
        for rate in [self.boundary_rate, self.sporadic_rate] {
            if !(0.0..0.5).contains(&rate) {
                return Err(Error::Config(format!(
                    "noise rate {rate} outside [0, 0.5)"
                )));
            }
        }
        if let Some(&t) = self.erode_labels.iter().find(|&&t| t >= n_tasks) {
            return Err(Error::Config(format!(
                "erode_labels entry {t} outside 0..{n_tasks}"
            )));
        }
        Ok(())
    }
}

/// Per-process flip masks; a set bit means that voxel-task was flipped
/// by that process. Processes compose by xor, so
/// `apply(clean) == clean ^ systematic ^ predictable ^ sporadic`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorLedger {
    pub systematic: LabelField,
    pub predictable: LabelField,
    pub sporadic: LabelField,
}

pub const LEDGER_FILES: [&str; 3] = ["ledger_sys.mvol", "ledger_pred.mvol", "ledger_spor.mvol"];

impl ErrorLedger {
    fn zeros(dims: (usize, usize, usize), n_tasks: usize) -> Self {
        ErrorLedger {
            systematic: LabelField::zeros(dims, n_tasks),
            predictable: LabelField::zeros(dims, n_tasks),
            sporadic: LabelField::zeros(dims, n_tasks),
        }
    }

    /// Recompose the weak labels from clean ones.
    pub fn apply(&self, clean: &LabelField) -> Result<LabelField> {
        for part in [&self.systematic, &self.predictable, &self.sporadic] {
            if part.dims != clean.dims || part.n_tasks != clean.n_tasks {
                return Err(Error::Shape(format!(
                    "ledger shape {:?}/{} does not match labels {:?}/{}",
                    part.dims, part.n_tasks, clean.dims, clean.n_tasks
                )));
            }
        }
        let data = clean
            .data
            .iter()
            .zip(&self.systematic.data)
            .zip(&self.predictable.data)
            .zip(&self.sporadic.data)
            .map(|(((&c, &s), &p), &r)| c ^ s ^ p ^ r)
            .collect();
        LabelField::new(clean.dims, data, clean.n_tasks)
    }

    /// Total flips recorded by the given part.
    pub fn count(part: &LabelField) -> usize {
        part.data.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (field, name) in
            [&self.systematic, &self.predictable, &self.sporadic].iter().zip(LEDGER_FILES)
        {
            volio::write_label(field, &dir.join(name))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(ErrorLedger {
            systematic: volio::read_label(&dir.join(LEDGER_FILES[0]))?,
            predictable: volio::read_label(&dir.join(LEDGER_FILES[1]))?,
            sporadic: volio::read_label(&dir.join(LEDGER_FILES[2]))?,
        })
    }
}

/// Corrupt clean labels per the spec, returning the weak labels and the
/// ledger of every flip. Deterministic in (labels, spec, seed).
///
/// Random draws are consumed in a fixed order: one per transition
/// voxel-task during the predictable pass (scan order, task-major
/// within a voxel), then one per voxel-task during the sporadic pass.
pub fn corrupt_labels(
    clean: &LabelField,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<(LabelField, ErrorLedger)> {
    noise.validate(clean.n_tasks)?;
    let mut weak = clean.clone();
    let mut ledger = ErrorLedger::zeros(clean.dims, clean.n_tasks);

    for &t in &noise.erode_labels {
        for _ in 0..noise.erode_radius {
            erode_once(&mut weak, t, &mut ledger.systematic);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if noise.boundary_rate > 0.0 {
        // Detect transitions on a snapshot so flips do not cascade.
        let base = weak.clone();
        let (sx, sy, sz) = base.dims;
        for z in 0..sz {
            for y in 0..sy {
                for x in 0..sx {
                    let i = base.idx(x, y, z);
                    for t in 0..base.n_tasks {
                        if is_transition(&base, x, y, z, t, noise.axis_restricted)
                            && rng.gen::<f64>() < noise.boundary_rate
                        {
                            weak.set(i, t, !weak.get(i, t));
                            ledger.predictable.set(i, t, true);
                        }
                    }
                }
            }
        }
    }

    if noise.sporadic_rate > 0.0 {
        for i in 0..weak.n_voxels() {
            for t in 0..weak.n_tasks {
                if rng.gen::<f64>() < noise.sporadic_rate {
                    weak.set(i, t, !weak.get(i, t));
                    ledger.sporadic.set(i, t, true);
                }
            }
        }
    }

    Ok((weak, ledger))
}

/// One 6-connectivity erosion step on task `t`: a voxel stays on only
/// if all six neighbors are on (out-of-volume counts as off). Flips are
/// recorded into `sys`.
fn erode_once(labels: &mut LabelField, t: usize, sys: &mut LabelField) {
    let (sx, sy, sz) = labels.dims;
    let n = labels.n_voxels();
    let snapshot: Vec<bool> = (0..n).map(|i| labels.get(i, t)).collect();
    let on = |x: isize, y: isize, z: isize| {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < sx
            && (y as usize) < sy
            && (z as usize) < sz
            && snapshot[x as usize + sx * (y as usize + sy * z as usize)]
    };
    for z in 0..sz {
        for y in 0..sy {
            for x in 0..sx {
                let i = x + sx * (y + sy * z);
                if !snapshot[i] {
                    continue;
                }
                let (xi, yi, zi) = (x as isize, y as isize, z as isize);
                let keep = on(xi - 1, yi, zi)
                    && on(xi + 1, yi, zi)
                    && on(xi, yi - 1, zi)
                    && on(xi, yi + 1, zi)
                    && on(xi, yi, zi - 1)
                    && on(xi, yi, zi + 1);
                if !keep {
                    labels.set(i, t, false);
                    sys.set(i, t, true);
                }
            }
        }
    }
}

/// Whether any (in-volume) neighbor along the allowed axes carries a
/// different label for task `t`.
fn is_transition(
    labels: &LabelField,
    x: usize,
    y: usize,
    z: usize,
    t: usize,
    axis_restricted: bool,
) -> bool {
    let (sx, sy, sz) = labels.dims;
    let v = labels.get(labels.idx(x, y, z), t);
    let differs = |x: usize, y: usize, z: usize| labels.get(labels.idx(x, y, z), t) != v;
    if y > 0 && differs(x, y - 1, z) || y + 1 < sy && differs(x, y + 1, z) {
        return true;
    }
    if axis_restricted {
        return false;
    }
    x > 0 && differs(x - 1, y, z)
        || x + 1 < sx && differs(x + 1, y, z)
        || z > 0 && differs(x, y, z - 1)
        || z + 1 < sz && differs(x, y, z + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    fn phantom_labels() -> LabelField {
        let spec = PhantomSpec { size: 32, seed: 5, ..PhantomSpec::default() };
        generate_phantom(&spec).unwrap().1
    }

    fn full_noise() -> NoiseSpec {
        NoiseSpec {
            erode_labels: vec![2],
            erode_radius: 1,
            boundary_rate: 0.2,
            axis_restricted: false,
            sporadic_rate: 0.01,
        }
    }

    #[test]
    fn zero_rates_leave_labels_untouched() {
        let clean = phantom_labels();
        let (weak, ledger) = corrupt_labels(&clean, &NoiseSpec::default(), 9).unwrap();
        assert_eq!(weak.data, clean.data);
        for part in [&ledger.systematic, &ledger.predictable, &ledger.sporadic] {
            assert_eq!(ErrorLedger::count(part), 0);
        }
    }

    #[test]
    fn weak_equals_clean_xor_ledger_bit_exactly() {
        let clean = phantom_labels();
        let (weak, ledger) = corrupt_labels(&clean, &full_noise(), 13).unwrap();
        assert_ne!(weak.data, clean.data);
        assert_eq!(ledger.apply(&clean).unwrap().data, weak.data);
    }

    #[test]
    fn corruption_is_deterministic_in_the_seed() {
        let clean = phantom_labels();
        let (wa, la) = corrupt_labels(&clean, &full_noise(), 21).unwrap();
        let (wb, lb) = corrupt_labels(&clean, &full_noise(), 21).unwrap();
        assert_eq!(wa.data, wb.data);
        assert_eq!(la, lb);
        let (wc, _) = corrupt_labels(&clean, &full_noise(), 22).unwrap();
        assert_ne!(wa.data, wc.data);
    }

    #[test]
    fn systematic_part_ignores_the_seed() {
        let clean = phantom_labels();
        let (_, la) = corrupt_labels(&clean, &full_noise(), 1).unwrap();
        let (_, lb) = corrupt_labels(&clean, &full_noise(), 2).unwrap();
        assert_eq!(la.systematic.data, lb.systematic.data);
        assert!(ErrorLedger::count(&la.systematic) > 0);
        assert_ne!(la.sporadic.data, lb.sporadic.data);
    }

    #[test]
    fn erosion_of_a_solid_cube_strips_exactly_the_surface() {
        // 9^3 cube at offset 3 in a 16^3 volume; radius r leaves (9-2r)^3.
        let mut clean = LabelField::zeros((16, 16, 16), 1);
        for z in 3..12 {
            for y in 3..12 {
                for x in 3..12 {
                    clean.set(clean.idx(x, y, z), 0, true);
                }
            }
        }
        for (radius, remain) in [(1usize, 7usize), (2, 5)] {
            let noise = NoiseSpec {
                erode_labels: vec![0],
                erode_radius: radius,
                ..NoiseSpec::default()
            };
            let (weak, ledger) = corrupt_labels(&clean, &noise, 0).unwrap();
            assert_eq!(weak.task_count(0), remain.pow(3));
            assert_eq!(
                ErrorLedger::count(&ledger.systematic),
                9usize.pow(3) - remain.pow(3)
            );
            let inner = |v: usize| (3 + radius..12 - radius).contains(&v);
            for z in 0..16 {
                for y in 0..16 {
                    for x in 0..16 {
                        let expect = inner(x) && inner(y) && inner(z);
                        assert_eq!(weak.get(weak.idx(x, y, z), 0), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn sporadic_flip_count_sits_within_five_sigma_of_binomial() {
        let clean = phantom_labels();
        let rate = 0.05;
        let noise = NoiseSpec { sporadic_rate: rate, ..NoiseSpec::default() };
        let (_, ledger) = corrupt_labels(&clean, &noise, 31).unwrap();
        let n = (clean.n_voxels() * clean.n_tasks) as f64;
        let mean = n * rate;
        let sigma = (n * rate * (1.0 - rate)).sqrt();
        let count = ErrorLedger::count(&ledger.sporadic) as f64;
        assert!(
            (count - mean).abs() < 5.0 * sigma,
            "count {count} vs mean {mean} sigma {sigma}"
        );
    }

    #[test]
    fn sporadic_flips_spread_uniformly_over_octants() {
        let clean = phantom_labels();
        let noise = NoiseSpec { sporadic_rate: 0.05, ..NoiseSpec::default() };
        let (_, ledger) = corrupt_labels(&clean, &noise, 17).unwrap();
        let (sx, sy, sz) = clean.dims;
        let mut counts = [0f64; 8];
        for z in 0..sz {
            for y in 0..sy {
                for x in 0..sx {
                    let i = clean.idx(x, y, z);
                    let oct = (x >= sx / 2) as usize
                        | ((y >= sy / 2) as usize) << 1
                        | ((z >= sz / 2) as usize) << 2;
                    counts[oct] += ledger.sporadic.data[i].count_ones() as f64;
                }
            }
        }
        let total: f64 = counts.iter().sum();
        let expected = total / 8.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected) * (c - expected) / expected).sum();
        // chi-square, 7 dof, p = 0.001 critical value
        assert!(chi2 < 24.322, "chi2 {chi2}, octants {counts:?}");
    }

    #[test]
    fn predictable_flips_stay_on_label_transitions() {
        let clean = phantom_labels();
        let noise = NoiseSpec { boundary_rate: 0.3, erode_labels: vec![0], ..NoiseSpec::default() };
        let (_, ledger) = corrupt_labels(&clean, &noise, 41).unwrap();
        assert!(ErrorLedger::count(&ledger.predictable) > 0);
        // flips must sit on transitions of the post-systematic labels
        let base = ErrorLedger {
            predictable: LabelField::zeros(clean.dims, clean.n_tasks),
            sporadic: LabelField::zeros(clean.dims, clean.n_tasks),
            ..ledger.clone()
        }
        .apply(&clean)
        .unwrap();
        let (sx, sy, sz) = clean.dims;
        for z in 0..sz {
            for y in 0..sy {
                for x in 0..sx {
                    let i = clean.idx(x, y, z);
                    for t in 0..clean.n_tasks {
                        if ledger.predictable.get(i, t) {
                            assert!(is_transition(&base, x, y, z, t, false));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn axis_restriction_limits_flips_to_y_transitions() {
        let clean = phantom_labels();
        let noise = NoiseSpec {
            boundary_rate: 0.3,
            axis_restricted: true,
            ..NoiseSpec::default()
        };
        let (_, ledger) = corrupt_labels(&clean, &noise, 43).unwrap();
        assert!(ErrorLedger::count(&ledger.predictable) > 0);
        let (sx, sy, sz) = clean.dims;
        for z in 0..sz {
            for y in 0..sy {
                for x in 0..sx {
                    let i = clean.idx(x, y, z);
                    for t in 0..clean.n_tasks {
                        if ledger.predictable.get(i, t) {
                            assert!(is_transition(&clean, x, y, z, t, true));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rates_and_task_indices_are_validated() {
        let clean = LabelField::zeros((4, 4, 4), 2);
        for bad in [
            NoiseSpec { boundary_rate: 0.5, ..NoiseSpec::default() },
            NoiseSpec { sporadic_rate: -0.01, ..NoiseSpec::default() },
            NoiseSpec { erode_labels: vec![2], ..NoiseSpec::default() },
        ] {
            assert!(corrupt_labels(&clean, &bad, 0).is_err());
        }
    }

    #[test]
    fn ledger_writes_and_reads_round_trip() {
        let clean = phantom_labels();
        let (_, ledger) = corrupt_labels(&clean, &full_noise(), 51).unwrap();
        let dir = std::env::temp_dir()
            .join(format!("hetseg-ledger-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        ledger.write(&dir).unwrap();
        let back = ErrorLedger::read(&dir).unwrap();
        assert_eq!(back, ledger);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
