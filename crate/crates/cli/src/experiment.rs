//! Three-arm comparison driver: one shared dataset, the plain /
//! predictive-variance / label-flip models trained on identical data,
//! test-split evaluation against both weak and clean references, and a
//! deterministic summary. Every stage failure names the stage; whatever
//! a failed run already wrote stays on disk.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use hetseg_core::config::RunConfig;
use hetseg_core::eval::{self, DiceTable, Orientation};
use hetseg_core::model::HeteroMode;
use hetseg_core::phantom::{self, CaseRecord, Split};
use hetseg_core::trainer::{self, INFER_BATCH, LATEST_CKPT};
use hetseg_core::volio::{self, fmt_f64, CsvTable, TaskManifest};

/// Paper column order; also the training and report order.
pub const ARMS: [(HeteroMode, &str); 3] = [
    (HeteroMode::Plain, "plain"),
    (HeteroMode::PredVar, "pred_var"),
    (HeteroMode::LabelFlip, "label_flip"),
];

pub const SUMMARY_FILE: &str = "summary.txt";
pub const REJECTION_PRECISION_FILE: &str = "rejection_precision.csv";

pub fn run(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).context("stage setup")?;
    cfg.write(&out.join("config.toml")).context("stage setup")?;

    // One dataset for every arm; regenerating is deterministic, so an
    // existing index means the data is already in place.
    let data_dir = out.join("dataset");
    if !data_dir.join(phantom::INDEX_FILE).exists() {
        phantom::gen_dataset(&cfg.dataset, &data_dir).context("stage dataset")?;
    }
    let records = phantom::read_index(&data_dir).context("stage dataset")?;
    let manifest =
        TaskManifest::read(&data_dir.join(phantom::TASKS_FILE)).context("stage dataset")?;

    // Arms are independent runs into disjoint directories, so they can
    // train concurrently. Each hashes the data it is about to read;
    // matching digests across arm directories certify that all three
    // saw the same bytes.
    let checkpoints: Vec<PathBuf> = ARMS
        .par_iter()
        .map(|&(mode, name)| {
            let arm_dir = out.join("arms").join(name);
            let stage = || format!("stage train[{name}]");
            fs::create_dir_all(&arm_dir).with_context(stage)?;
            let digest = hash_dataset(&data_dir, &records).with_context(stage)?;
            fs::write(arm_dir.join("data_sha256.txt"), format!("{digest}\n"))
                .with_context(stage)?;
            let arm_cfg = arm_config(cfg, mode);
            arm_cfg.write(&arm_dir.join("config.toml")).with_context(stage)?;
            let resume = arm_dir.join(LATEST_CKPT).exists();
            let outcome =
                trainer::train::<f32>(&arm_cfg.arch, &arm_cfg.train, &data_dir, &arm_dir, resume)
                    .with_context(stage)?;
            log::info!(
                "arm {name}: {} restarts complete, checkpoint {}",
                outcome.total_restarts,
                outcome.final_checkpoint.display()
            );
            Ok(outcome.final_checkpoint)
        })
        .collect::<Result<_>>()?;

    let eval_dir = out.join("eval");
    fs::create_dir_all(&eval_dir).context("stage evaluate")?;
    let test: Vec<&CaseRecord> = records.iter().filter(|r| r.split == Split::Test).collect();

    // tables[arm] = (vs clean, vs weak)
    let mut tables: Vec<(DiceTable, DiceTable)> = Vec::new();
    for (&(_, name), ckpt) in ARMS.iter().zip(&checkpoints) {
        let (clean_t, weak_t) = evaluate_arm(ckpt, &test, &manifest)
            .with_context(|| format!("stage evaluate[{name}]"))?;
        clean_t.write(&eval_dir.join(format!("dice_{name}_vs_clean.csv")))
            .with_context(|| format!("stage evaluate[{name}]"))?;
        weak_t.write(&eval_dir.join(format!("dice_{name}_vs_weak.csv")))
            .with_context(|| format!("stage evaluate[{name}]"))?;
        tables.push((clean_t, weak_t));
    }

    let mut comparisons = Vec::new();
    if !test.is_empty() {
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            for (reference, pick) in references() {
                let a = pick(&tables[i]);
                let b = pick(&tables[j]);
                let rows = eval::compare(a, b).context("stage compare")?;
                let file = format!("wilcoxon_{}_vs_{}_{reference}.csv", ARMS[i].1, ARMS[j].1);
                eval::write_comparison(&rows, &eval_dir.join(file)).context("stage compare")?;
                comparisons.push((i, j, reference, rows));
            }
        }
    }

    let rejection = rejection_precision(out, &records).context("stage rejection")?;
    if let Some(rows) = &rejection {
        write_rejection_csv(rows, &eval_dir.join(REJECTION_PRECISION_FILE))
            .context("stage rejection")?;
    }

    let summary = render_summary(cfg, &manifest, &records, &tables, &comparisons, &rejection);
    fs::write(out.join(SUMMARY_FILE), &summary).context("stage summary")?;
    println!("experiment complete: {}", out.join(SUMMARY_FILE).display());
    Ok(())
}

fn references() -> [(&'static str, fn(&(DiceTable, DiceTable)) -> &DiceTable); 2] {
    [("clean", |t| &t.0), ("weak", |t| &t.1)]
}

/// One arm's configuration. An explicit rejection stage in the shared
/// config belongs to the label-flip arm; rejection is undefined
/// elsewhere, so the other arms get it pinned to zero.
fn arm_config(cfg: &RunConfig, mode: HeteroMode) -> RunConfig {
    let mut arm = cfg.clone();
    arm.set_mode(mode);
    if mode != HeteroMode::LabelFlip {
        arm.train.rejection_restarts = Some(0);
    }
    arm
}

/// Digest of everything the trainer reads: the manifest, the index, and
/// every file of every non-test case, in sorted relative order.
fn hash_dataset(data_dir: &Path, records: &[CaseRecord]) -> Result<String> {
    let mut files: Vec<PathBuf> =
        vec![data_dir.join(phantom::TASKS_FILE), data_dir.join(phantom::INDEX_FILE)];
    for rec in records.iter().filter(|r| r.split != Split::Test) {
        let mut names: Vec<PathBuf> = fs::read_dir(&rec.dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .collect();
        names.sort();
        files.extend(names);
    }
    let mut hasher = Sha256::new();
    for path in &files {
        let rel = path.strip_prefix(data_dir).unwrap_or(path);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update(fs::read(path)?);
    }
    let mut digest = String::with_capacity(64);
    for byte in hasher.finalize() {
        digest.push_str(&format!("{byte:02x}"));
    }
    Ok(digest)
}

fn case_id(rec: &CaseRecord) -> String {
    format!("case_{:03}", rec.index)
}

/// Three-view ensembled prediction per test case, scored against both
/// label sets.
fn evaluate_arm(
    ckpt: &Path,
    test: &[&CaseRecord],
    manifest: &TaskManifest,
) -> Result<(DiceTable, DiceTable)> {
    let (model, _) = trainer::load_model::<f32>(ckpt)?;
    let per_case: Vec<(Vec<eval::DiceRow>, Vec<eval::DiceRow>)> = test
        .par_iter()
        .map(|rec| {
            let case = phantom::read_case(&rec.dir)?;
            let views = eval::predict_volume(&model, &case.image, &Orientation::ALL, INFER_BATCH)?;
            let logits: Vec<_> = views.iter().map(|v| &v.logits).collect();
            let decision = eval::ensemble(&logits)?;
            let id = case_id(rec);
            Ok((
                eval::evaluate(&id, &decision, &case.clean, manifest)?,
                eval::evaluate(&id, &decision, &case.weak, manifest)?,
            ))
        })
        .collect::<hetseg_core::Result<_>>()?;
    let mut clean_t = DiceTable::default();
    let mut weak_t = DiceTable::default();
    for (c, w) in per_case {
        clean_t.push_rows(c);
        weak_t.push_rows(w);
    }
    Ok((clean_t, weak_t))
}

struct RejectionRow {
    case: String,
    rejected: usize,
    sporadic_hits: usize,
    agreeing_hits: usize,
}

impl RejectionRow {
    fn precision(&self) -> f64 {
        self.sporadic_hits as f64 / self.rejected as f64
    }
}

/// Confront the label-flip arm's final rejection masks with the noise
/// ledger: how many rejected voxel-tasks are recorded sporadic flips,
/// and how many (ideally none) carry a label that was never corrupted.
/// None when the arm kept no masks.
fn rejection_precision(out: &Path, records: &[CaseRecord]) -> Result<Option<Vec<RejectionRow>>> {
    let mask_dir = out.join("arms").join("label_flip").join(trainer::REJECTION_DIR);
    let mut rows = Vec::new();
    for rec in records.iter().filter(|r| r.split == Split::Train) {
        let mask_path = mask_dir.join(format!("{}.mvol", case_id(rec)));
        if !mask_path.exists() {
            continue;
        }
        let keep = volio::read_label(&mask_path)?;
        let case = phantom::read_case(&rec.dir)?;
        let mut row = RejectionRow {
            case: case_id(rec),
            rejected: 0,
            sporadic_hits: 0,
            agreeing_hits: 0,
        };
        for i in 0..keep.n_voxels() {
            for t in 0..keep.n_tasks {
                if keep.get(i, t) {
                    continue;
                }
                row.rejected += 1;
                if case.ledger.sporadic.get(i, t) {
                    row.sporadic_hits += 1;
                }
                if case.weak.get(i, t) == case.clean.get(i, t) {
                    row.agreeing_hits += 1;
                }
            }
        }
        rows.push(row);
    }
    Ok(if rows.is_empty() { None } else { Some(rows) })
}

fn write_rejection_csv(rows: &[RejectionRow], path: &Path) -> Result<()> {
    let mut table =
        CsvTable::new(&["case", "rejected", "sporadic_hits", "agreeing_hits", "precision"]);
    for r in rows {
        let precision = if r.rejected == 0 { String::from("nan") } else { fmt_f64(r.precision()) };
        table.push(vec![
            r.case.clone(),
            r.rejected.to_string(),
            r.sporadic_hits.to_string(),
            r.agreeing_hits.to_string(),
            precision,
        ]);
    }
    table.write(path)?;
    Ok(())
}

fn stats_cell(stats: Option<(f64, f64)>) -> String {
    match stats {
        Some((mean, std)) => format!("{} ± {}", fmt_f64(mean), fmt_f64(std)),
        None => String::from("-"),
    }
}

/// Human-readable report. Deliberately free of paths and timing so the
/// same config and seed render byte-identical text.
fn render_summary(
    cfg: &RunConfig,
    manifest: &TaskManifest,
    records: &[CaseRecord],
    tables: &[(DiceTable, DiceTable)],
    comparisons: &[(usize, usize, &str, Vec<eval::ComparisonRow>)],
    rejection: &Option<Vec<RejectionRow>>,
) -> String {
    let mut s = String::new();
    let d = &cfg.dataset;
    let n_test = records.iter().filter(|r| r.split == Split::Test).count();
    s.push_str("three-arm phantom comparison\n");
    s.push_str("============================\n\n");
    s.push_str(&format!(
        "master seed {}; {} train / {} val / {} test phantoms at {}^3, {} tasks\n",
        d.seed,
        d.n_train,
        d.n_val,
        d.n_test,
        d.phantom.size,
        manifest.n_tasks()
    ));
    s.push_str(&format!(
        "noise: sporadic {}, boundary {}{}, eroded labels {:?} radius {}\n",
        d.noise.sporadic_rate,
        d.noise.boundary_rate,
        if d.noise.axis_restricted { " (one plane family)" } else { "" },
        d.noise.erode_labels,
        d.noise.erode_radius,
    ));
    let samples = cfg.train.restart_period * cfg.train.batch_size;
    for (mode, name) in ARMS {
        let total = arm_config(cfg, mode).train.total_restarts();
        s.push_str(&format!("arm {name}: {total} restarts, {} samples\n", total * samples));
    }

    if n_test == 0 {
        s.push_str("\nno test cases; evaluation skipped\n");
        return s;
    }

    let width = manifest
        .tasks()
        .iter()
        .map(|t| t.name.len())
        .max()
        .unwrap_or(0)
        .max("overall".len());
    for (reference, pick) in references() {
        s.push_str(&format!("\nmean dice vs {reference} labels (test, n={n_test})\n"));
        s.push_str(&format!("{:width$}", "task"));
        for (_, name) in ARMS {
            s.push_str(&format!("  {name:>21}"));
        }
        s.push('\n');
        let mut lines: Vec<(String, Vec<Option<(f64, f64)>>)> = manifest
            .tasks()
            .iter()
            .map(|t| {
                let cells = tables.iter().map(|pair| pick(pair).task_stats(&t.name)).collect();
                (t.name.clone(), cells)
            })
            .collect();
        lines.push((
            "overall".into(),
            tables.iter().map(|pair| pick(pair).overall_stats()).collect(),
        ));
        for (task, cells) in lines {
            s.push_str(&format!("{task:width$}"));
            for cell in cells {
                s.push_str(&format!("  {:>21}", stats_cell(cell)));
            }
            s.push('\n');
        }
    }

    s.push_str("\nwilcoxon signed-rank on per-case dice (two-sided)\n");
    for (i, j, reference, rows) in comparisons {
        s.push_str(&format!("{} vs {} ({reference} reference)\n", ARMS[*i].1, ARMS[*j].1));
        for r in rows {
            s.push_str(&format!(
                "  {:width$}  n={:<3} w={:<10} p={:<10} {}\n",
                r.task,
                r.n,
                fmt_f64(r.w),
                fmt_f64(r.p),
                r.direction.as_str()
            ));
        }
    }

    match rejection {
        None => s.push_str("\nno rejection masks recorded\n"),
        Some(rows) => {
            s.push_str("\nrejection at the final refresh (label_flip arm, train split)\n");
            let (mut rejected, mut sporadic, mut agreeing) = (0usize, 0usize, 0usize);
            for r in rows {
                s.push_str(&format!(
                    "  {}: rejected {}, sporadic flips {}, uncorrupted {}\n",
                    r.case, r.rejected, r.sporadic_hits, r.agreeing_hits
                ));
                rejected += r.rejected;
                sporadic += r.sporadic_hits;
                agreeing += r.agreeing_hits;
            }
            let precision =
                if rejected == 0 { String::from("nan") } else { fmt_f64(sporadic as f64 / rejected as f64) };
            s.push_str(&format!(
                "  total: rejected {rejected}, precision vs sporadic ledger {precision}, uncorrupted rejected {agreeing}\n"
            ));
        }
    }
    s
}
