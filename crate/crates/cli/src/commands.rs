//! Subcommand implementations.
//!
//! Every command resolves the run configuration, writes the fully resolved
//! copy under the output directory, puts the human-readable summary on
//! stdout and leaves progress notes on stderr. File formats are owned by
//! the core crate; this module only wires them together.

use std::path::{Path, PathBuf};
use std::time::Instant;

use unode_core::augment::{CorruptionSpec, ImageSample};
use unode_core::autoaugood::AugWeightTable;
use unode_core::evaluation::{
    auroc, corrupted_protocol, gen_synth, oneclass_protocol, EvalReport, LabeledDataset,
    SynthSpec,
};
use unode_core::network::{HeadKind, Model};
use unode_core::pipeline::{
    make_optimizer, run_training_steps, select_weights, LossRow, PipelineConfig,
};
use unode_core::scoring::{
    calibrate, calibrate_labeled, combined_scores, score_set, write_scores_csv,
    ScoreCalibration, TrainBank,
};
use unode_core::theory::{sweep_d, write_sweep_csv};
use unode_core::evaluation::multiclass_eval;
use unode_core::{Error, Result};

use crate::config::RunConfig;

pub const RESOLVED_FILE: &str = "resolved.config";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss_log.csv";
pub const BANK_FILE: &str = "bank.bin";
pub const CALIBRATION_FILE: &str = "calibration.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const ONECLASS_FILE: &str = "eval_oneclass.csv";
pub const CORRUPT_FILE: &str = "eval_corrupt.csv";
pub const MULTICLASS_FILE: &str = "eval_multiclass.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Synthetic outlier sets must not reuse the inlier generator stream.
const OUTLIER_SEED_SALT: u64 = 0x6f75746c;

/// Creates the output directory and records the resolved configuration.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join(RESOLVED_FILE);
    std::fs::write(&path, cfg.render())?;
    Ok(cfg.out.clone())
}

fn require_file(path: &Path, hint: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing '{}' ({hint})", path.display()),
        )))
    }
}

/// The samples a training-style command works on: one class for the binary
/// head, the pooled labeled set for an n-class head.
fn training_split(cfg: &RunConfig, ds: &LabeledDataset, pcfg: &PipelineConfig) -> Result<Vec<ImageSample>> {
    match pcfg.model.head {
        HeadKind::Binary => {
            let t = ds.train_of(cfg.inlier_class);
            if t.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "inlier_class {} has no training samples (available: {:?})",
                    cfg.inlier_class,
                    ds.classes()
                )));
            }
            Ok(t)
        }
        HeadKind::NClass(k) => {
            for (i, x) in ds.train.iter().enumerate() {
                match x.label {
                    None => {
                        return Err(Error::InvalidArgument(format!(
                            "training sample {i} has no label"
                        )))
                    }
                    Some(l) if l >= k => {
                        return Err(Error::InvalidArgument(format!(
                            "label {l} outside the {k}-class head"
                        )))
                    }
                    _ => {}
                }
            }
            Ok(ds.train.clone())
        }
    }
}

fn weight_bars(table: &AugWeightTable) -> String {
    let mut order: Vec<usize> = (0..table.kinds.len()).collect();
    order.sort_by(|&a, &b| table.weights[b].total_cmp(&table.weights[a]));
    let peak = table.weights[order[0]].max(f32::MIN_POSITIVE);
    let mut s = String::new();
    s.push_str("augmentation      j-score   weight\n");
    for i in order {
        let bar = "#".repeat((table.weights[i] / peak * 28.0).round() as usize);
        s.push_str(&format!(
            "{:<16} {:>8.4} {:>8.4} {bar}\n",
            table.kinds[i].name(),
            table.j_scores[i],
            table.weights[i]
        ));
    }
    s
}

pub fn cmd_augweights(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let ds = cfg.dataset()?;
    let pcfg = cfg.pipeline_config(&ds)?;
    let train = training_split(cfg, &ds, &pcfg)?;
    eprintln!("weighting {} candidate augmentations on {} samples", pcfg.kinds.len(), train.len());
    let t0 = Instant::now();
    let table = select_weights(&train, &pcfg)?;
    table.write_csv(&out.join(WEIGHTS_FILE))?;
    print!("{}", weight_bars(&table));
    println!("selection took {:.1} s", t0.elapsed().as_secs_f64());
    println!("weight table -> {}", out.join(WEIGHTS_FILE).display());
    Ok(())
}

fn write_calibration(path: &Path, cal: &ScoreCalibration) -> Result<()> {
    std::fs::write(path, format!("mean_bin,mean_norm\n{},{}\n", cal.mean_bin, cal.mean_norm))?;
    Ok(())
}

fn read_calibration(path: &Path) -> Result<ScoreCalibration> {
    let text = std::fs::read_to_string(path)?;
    let line = text
        .lines()
        .nth(1)
        .ok_or_else(|| Error::Parse(format!("'{}' has no data row", path.display())))?;
    let mut cells = line.split(',');
    let mut next = || -> Result<f32> {
        let c = cells
            .next()
            .ok_or_else(|| Error::Parse("calibration row needs two fields".into()))?;
        c.parse().map_err(|e| Error::Parse(format!("bad calibration value '{c}': {e}")))
    };
    ScoreCalibration::new(next()?, next()?)
}

fn append_loss_rows(path: &Path, rows: &[LossRow], fresh: bool) -> Result<()> {
    use std::io::Write as _;
    let mut f = if fresh || !path.exists() {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "step,epoch,lr,con,ce,total")?;
        f
    } else {
        std::fs::OpenOptions::new().append(true).open(path)?
    };
    for r in rows {
        writeln!(f, "{},{},{},{},{},{}", r.step, r.epoch, r.lr, r.con, r.ce, r.total)?;
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, resume: bool, max_steps: Option<u64>) -> Result<()> {
    let out = prepare_out(cfg)?;
    let ds = cfg.dataset()?;
    let pcfg = cfg.pipeline_config(&ds)?;
    let train = training_split(cfg, &ds, &pcfg)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let weights = out.join(WEIGHTS_FILE);

    let (mut model, velocities, table) = if resume {
        require_file(&ckpt, "nothing to resume; run `train` without --resume first")?;
        require_file(&weights, "the weight table is part of the training state")?;
        let (model, velocities) = Model::load_train_state(pcfg.model.clone(), pcfg.seed, &ckpt)?;
        (model, velocities, AugWeightTable::read_csv(&weights)?)
    } else {
        let table = select_weights(&train, &pcfg)?;
        table.write_csv(&weights)?;
        (Model::new(pcfg.model.clone(), pcfg.seed)?, Vec::new(), table)
    };

    let params = model.params();
    let mut opt = make_optimizer(&pcfg, &params);
    if !velocities.is_empty() {
        opt.set_buffers(velocities)?;
    }

    let steps_per_epoch = (train.len() / pcfg.batch_size) as u64;
    let total_steps = pcfg.epochs as u64 * steps_per_epoch;
    let start = model.step;
    eprintln!(
        "training on {} samples: step {start} of {total_steps} ({} epochs x {steps_per_epoch} steps)",
        train.len(),
        pcfg.epochs
    );
    let t0 = Instant::now();
    let rows = run_training_steps(
        &mut model,
        &train,
        &table,
        &pcfg,
        &mut opt,
        max_steps.map(|n| start.saturating_add(n)),
    )?;
    model.save_train_state(&ckpt, opt.buffers())?;
    append_loss_rows(&out.join(LOSS_FILE), &rows, !resume)?;

    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        println!(
            "ran {} steps in {:.1} s, loss {:.4} -> {:.4}",
            rows.len(),
            t0.elapsed().as_secs_f64(),
            first.total,
            last.total
        );
    } else {
        println!("nothing to do: checkpoint is already at step {start} of {total_steps}");
    }
    if model.step < total_steps {
        println!("paused at step {} of {total_steps}; continue with `train --resume`", model.step);
    } else {
        let bank = TrainBank::build(&model, &train)?;
        let cal = match pcfg.model.head {
            HeadKind::Binary => calibrate(&model, &train)?,
            HeadKind::NClass(_) => calibrate_labeled(&model, &train)?,
        };
        bank.save(&out.join(BANK_FILE))?;
        write_calibration(&out.join(CALIBRATION_FILE), &cal)?;
        println!(
            "artifacts -> {}, {}, {}, {}",
            ckpt.display(),
            out.join(LOSS_FILE).display(),
            out.join(BANK_FILE).display(),
            out.join(CALIBRATION_FILE).display()
        );
    }
    Ok(())
}

pub fn cmd_score(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let ds = cfg.dataset()?;
    let pcfg = cfg.pipeline_config(&ds)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    require_file(&ckpt, "run `train` first")?;
    require_file(&out.join(BANK_FILE), "run `train` to completion first")?;
    require_file(&out.join(CALIBRATION_FILE), "run `train` to completion first")?;
    let model = Model::load(pcfg.model.clone(), pcfg.seed, &ckpt)?;
    let bank = TrainBank::load(&out.join(BANK_FILE))?;
    let cal = read_calibration(&out.join(CALIBRATION_FILE))?;
    if ds.test.is_empty() {
        return Err(Error::InvalidArgument("dataset has no test samples".into()));
    }
    let rows = score_set(&ds.test, &model, &bank, &cal)?;
    write_scores_csv(&out.join(SCORES_FILE), &rows)?;
    println!("scored {} test samples -> {}", rows.len(), out.join(SCORES_FILE).display());

    let inlier = Some(cfg.inlier_class);
    let (s_in, s_out): (Vec<f32>, Vec<f32>) = (
        rows.iter().filter(|r| r.label == inlier).map(|r| r.combined).collect(),
        rows.iter().filter(|r| r.label != inlier).map(|r| r.combined).collect(),
    );
    if !s_in.is_empty() && !s_out.is_empty() {
        println!(
            "class {} vs rest: AUROC {:.4} ({} inliers, {} outliers)",
            cfg.inlier_class,
            auroc(&s_in, &s_out)?,
            s_in.len(),
            s_out.len()
        );
    }
    Ok(())
}

/// Scores every class with a freshly initialized model: the no-training
/// baseline that a trained run has to beat.
fn untrained_oneclass(ds: &LabeledDataset, cfg: &PipelineConfig) -> Result<EvalReport> {
    let classes = ds.classes();
    if classes.is_empty() {
        return Err(Error::InvalidArgument("dataset has no labeled classes".into()));
    }
    let mut rows = Vec::with_capacity(classes.len());
    for &c in &classes {
        let train = ds.train_of(c);
        if train.is_empty() {
            return Err(Error::InvalidArgument(format!("class {c} has no training samples")));
        }
        let model = Model::new(cfg.model.clone(), cfg.seed.wrapping_add(c as u64))?;
        let bank = TrainBank::build(&model, &train)?;
        let cal = calibrate(&model, &train)?;
        let (test_in, test_out) = ds.test_split(c);
        if test_in.is_empty() || test_out.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "class {c} needs test inliers and outliers"
            )));
        }
        let s_in = combined_scores(&test_in, &model, &bank, &cal)?;
        let s_out = combined_scores(&test_out, &model, &bank, &cal)?;
        rows.push((format!("class{c}"), auroc(&s_in, &s_out)?));
    }
    EvalReport::new("one-class-untrained", None, rows)
}

pub fn cmd_eval_oneclass(cfg: &RunConfig, untrained: bool) -> Result<()> {
    let out = prepare_out(cfg)?;
    let ds = cfg.dataset()?;
    let pcfg = cfg.pipeline_config(&ds)?;
    if pcfg.model.head != HeadKind::Binary {
        return Err(Error::Config("the one-class protocol needs head = binary".into()));
    }
    let t0 = Instant::now();
    let report = if untrained {
        untrained_oneclass(&ds, &pcfg)?
    } else {
        eprintln!("training {} one-class models", ds.classes().len());
        oneclass_protocol(&ds, &pcfg)?
    };
    report.write_csv(&out.join(ONECLASS_FILE))?;
    print!("{}", report.text_table());
    println!("protocol took {:.1} s", t0.elapsed().as_secs_f64());
    println!("report -> {}", out.join(ONECLASS_FILE).display());
    Ok(())
}

pub fn cmd_eval_corrupt(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let ds = cfg.dataset()?;
    let pcfg = cfg.pipeline_config(&ds)?;
    if pcfg.model.head != HeadKind::Binary {
        return Err(Error::Config("the corrupted protocol needs head = binary".into()));
    }
    let specs: Vec<CorruptionSpec> = cfg
        .corruptions
        .iter()
        .flat_map(|&kind| cfg.severities.iter().map(move |&severity| CorruptionSpec { kind, severity }))
        .collect();
    eprintln!(
        "training {} one-class models, {} corruption settings each",
        ds.classes().len(),
        specs.len()
    );
    let t0 = Instant::now();
    let grid = corrupted_protocol(&ds, &specs, &pcfg)?;
    grid.write_csv(&out.join(CORRUPT_FILE))?;

    let width = grid.tags.iter().map(|t| t.len()).max().unwrap_or(8).max(8) + 2;
    let mut line = format!("{:<10}", "class");
    for t in &grid.tags {
        line.push_str(&format!("{t:>width$}"));
    }
    println!("{line}");
    for (i, c) in grid.classes.iter().enumerate() {
        let mut line = format!("{:<10}", format!("class{c}"));
        for v in &grid.auroc[i] {
            line.push_str(&format!("{v:>width$.4}"));
        }
        println!("{line}");
    }
    let mut line = format!("{:<10}", "Mean");
    for v in grid.mean_by_corruption() {
        line.push_str(&format!("{v:>width$.4}"));
    }
    println!("{line}");
    println!("protocol took {:.1} s", t0.elapsed().as_secs_f64());
    println!("grid -> {}", out.join(CORRUPT_FILE).display());
    Ok(())
}

pub fn cmd_eval_multiclass(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let ds = cfg.dataset()?;
    let pcfg = cfg.pipeline_config(&ds)?;
    if cfg.outlier_classes.is_empty() {
        return Err(Error::Config(
            "eval-multiclass needs key 'outlier_classes' (synthetic classes scored as outliers)"
                .into(),
        ));
    }
    let first = ds
        .train
        .first()
        .ok_or_else(|| Error::InvalidArgument("dataset has no training samples".into()))?;
    if first.channels != 1 || first.height != first.width {
        return Err(Error::InvalidArgument(
            "synthetic outlier sets need single-channel square inlier images".into(),
        ));
    }
    let mut out_sets = Vec::with_capacity(cfg.outlier_classes.len());
    for &c in &cfg.outlier_classes {
        let xs = gen_synth(&SynthSpec {
            classes: vec![c],
            side: first.height,
            n_per_class: cfg.n_test,
            seed: cfg.seed ^ OUTLIER_SEED_SALT,
        })?;
        out_sets.push((c.name().to_string(), xs));
    }
    eprintln!(
        "training one pooled model on {} samples, {} outlier sets",
        ds.train.len(),
        out_sets.len()
    );
    let t0 = Instant::now();
    let report = multiclass_eval(&ds, &out_sets, cfg.multiclass, &pcfg)?;
    report.write_csv(&out.join(MULTICLASS_FILE))?;
    print!("{}", report.text_table());
    println!("protocol took {:.1} s", t0.elapsed().as_secs_f64());
    println!("report -> {}", out.join(MULTICLASS_FILE).display());
    Ok(())
}

pub fn cmd_theory(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    if cfg.theory_points == 0 {
        return Err(Error::Config("theory_points must be at least 1".into()));
    }
    let grid: Vec<f32> = if cfg.theory_points == 1 {
        vec![0.0]
    } else {
        (0..cfg.theory_points)
            .map(|i| cfg.theory_d_max * i as f32 / (cfg.theory_points - 1) as f32)
            .collect()
    };
    eprintln!(
        "sweeping {} gap values at {} draws per class in {} dimensions",
        grid.len(),
        cfg.theory_samples,
        cfg.theory_dim
    );
    let t0 = Instant::now();
    let rows = sweep_d(
        cfg.theory_a_norm,
        cfg.theory_eps,
        &grid,
        cfg.theory_dim,
        cfg.theory_samples,
        cfg.seed,
    )?;
    write_sweep_csv(&rows, &out.join(SWEEP_FILE))?;

    println!("{:>8} {:>10} {:>10} {:>10}", "d", "analytic", "mc", "ci");
    for r in &rows {
        println!("{:>8.3} {:>10.6} {:>10.6} {:>10.6}", r.d, r.analytic, r.mc, r.ci);
    }
    let misses: Vec<f32> =
        rows.iter().filter(|r| (r.mc - r.analytic).abs() > r.ci).map(|r| r.d).collect();
    println!(
        "{} of {} points inside the Monte Carlo confidence band, {:.1} s",
        rows.len() - misses.len(),
        rows.len(),
        t0.elapsed().as_secs_f64()
    );
    println!("sweep -> {}", out.join(SWEEP_FILE).display());
    if !misses.is_empty() {
        return Err(Error::Numeric(format!(
            "simulation disagrees with the closed form at d = {misses:?}"
        )));
    }
    Ok(())
}
