//! End-to-end training driver: hard-augmentation selection, the combined
//! contrastive + rejection objective, and the inference artifacts (embedding
//! bank and score calibration).

use crate::augment::{HardAugKind, ImageSample};
use crate::autoaugood::{run_selection, AugWeightTable, Extractor, TsneParams, DENSITY_BINS};
use crate::error::{Error, Result};
use crate::network::{HeadKind, Model, ModelConfig};
use crate::numcore::{OptimKind, OptimState, Rng, Tensor};
use crate::objective::{build_pairs, batch_contrastive, ce_loss, ce_loss_labeled, LossBreakdown};
use crate::scoring::{calibrate, calibrate_labeled, ScoreCalibration, TrainBank};
use std::io::Write;
use std::path::Path;

const STREAM_SHUFFLE: u64 = 0x7368756600000000;
const STREAM_STEP: u64 = 0x7374657000000000;
const STREAM_SELECT: u64 = 0x73656c6563740000;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub epochs: u32,
    pub batch_size: usize,
    pub optimizer: OptimKind,
    pub lr_peak: f32,
    pub warmup_epochs: u32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub lambda_loss: f32,
    pub temperature: f32,
    pub r_max: u32,
    pub kinds: Vec<HardAugKind>,
    pub tsne: TsneParams,
    /// Histogram resolution for the projected-density comparison.
    pub density_bins: usize,
    /// Selection embeds at most this many inliers (cost is quadratic).
    pub selection_max: usize,
    pub seed: u64,
}

impl PipelineConfig {
    /// Desk-scale defaults around a given model.
    pub fn desk_default(model: ModelConfig) -> PipelineConfig {
        PipelineConfig {
            model,
            epochs: 30,
            batch_size: 32,
            optimizer: OptimKind::Lars,
            lr_peak: 1.0,
            warmup_epochs: 3,
            momentum: 0.9,
            weight_decay: 1e-6,
            lambda_loss: 1.0,
            temperature: 0.5,
            r_max: 2,
            kinds: HardAugKind::ALL
                .iter()
                .copied()
                .filter(|k| *k != HardAugKind::MixUp)
                .collect(),
            tsne: TsneParams::default(),
            density_bins: DENSITY_BINS,
            selection_max: 128,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup of {} epochs does not fit a {}-epoch schedule",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::Config("at least one candidate augmentation required".into()));
        }
        if self.r_max == 0 || self.r_max as usize > self.kinds.len() {
            return Err(Error::Config(format!(
                "composition bound {} outside 1..={}",
                self.r_max,
                self.kinds.len()
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.lr_peak > 0.0) {
            return Err(Error::Config("peak learning rate must be positive".into()));
        }
        if self.lambda_loss < 0.0 {
            return Err(Error::Config("loss weight must be nonnegative".into()));
        }
        if self.density_bins < 2 {
            return Err(Error::Config("density comparison needs at least 2 bins".into()));
        }
        if self.selection_max < 8 {
            return Err(Error::Config("selection needs at least 8 samples".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub epoch: u32,
    pub lr: f32,
    pub con: f32,
    pub ce: f32,
    pub total: f32,
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,epoch,lr,con,ce,total")?;
    for r in rows {
        writeln!(f, "{},{},{},{},{},{}", r.step, r.epoch, r.lr, r.con, r.ce, r.total)?;
    }
    Ok(())
}

pub struct TrainArtifacts {
    pub model: Model,
    pub bank: TrainBank,
    pub calibration: ScoreCalibration,
    pub weight_table: AugWeightTable,
    pub loss_log: Vec<LossRow>,
}

/// Runs the selector on a deterministic subsample of the training set.
pub fn select_weights(train: &[ImageSample], cfg: &PipelineConfig) -> Result<AugWeightTable> {
    let subset: Vec<ImageSample> = if train.len() > cfg.selection_max {
        let mut rng = Rng::with_stream(cfg.seed, STREAM_SELECT);
        rng.permutation(train.len())[..cfg.selection_max]
            .iter()
            .map(|&i| train[i].clone())
            .collect()
    } else {
        train.to_vec()
    };
    let mut tsne = cfg.tsne.clone();
    tsne.seed = cfg.seed;
    run_selection(&subset, &cfg.kinds, &Extractor::Flatten, &tsne, cfg.density_bins, cfg.seed)
}

/// One-class training: selection, then the contrastive + binary rejection
/// objective over shuffled batches (partial trailing batches dropped).
pub fn train_one_class(train: &[ImageSample], cfg: &PipelineConfig) -> Result<TrainArtifacts> {
    cfg.validate()?;
    if cfg.model.head != HeadKind::Binary {
        return Err(Error::Config("one-class training needs the binary head".into()));
    }
    let table = select_weights(train, cfg)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let loss_log = run_training(&mut model, train, &table, cfg)?;
    finish(model, train, table, loss_log, false)
}

/// Labeled multi-class training: the rejection head classifies the K inlier
/// classes, hard-augmented samples get a uniform target.
pub fn train_multiclass_labeled(
    train: &[ImageSample],
    cfg: &PipelineConfig,
) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let n_classes = match cfg.model.head {
        HeadKind::NClass(n) => n,
        HeadKind::Binary => {
            return Err(Error::Config("labeled training needs the n-class head".into()))
        }
    };
    for (i, x) in train.iter().enumerate() {
        match x.label {
            None => {
                return Err(Error::InvalidArgument(format!("training sample {i} has no label")))
            }
            Some(l) if l >= n_classes => {
                return Err(Error::InvalidArgument(format!(
                    "label {l} outside the {n_classes}-class head"
                )))
            }
            _ => {}
        }
    }
    let table = select_weights(train, cfg)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let loss_log = run_training(&mut model, train, &table, cfg)?;
    finish(model, train, table, loss_log, true)
}

fn finish(
    model: Model,
    train: &[ImageSample],
    table: AugWeightTable,
    loss_log: Vec<LossRow>,
    labeled: bool,
) -> Result<TrainArtifacts> {
    let bank = TrainBank::build(&model, train)?;
    let calibration = if labeled {
        calibrate_labeled(&model, train)?
    } else {
        calibrate(&model, train)?
    };
    Ok(TrainArtifacts { model, bank, calibration, weight_table: table, loss_log })
}

/// The training loop itself, resumable: starts at the model's step counter
/// and derives every stochastic choice from (seed, epoch or step), so a
/// resumed run continues the exact sequence of a longer one.
pub fn run_training(
    model: &mut Model,
    train: &[ImageSample],
    table: &AugWeightTable,
    cfg: &PipelineConfig,
) -> Result<Vec<LossRow>> {
    let mut opt = make_optimizer(cfg, &model.params());
    run_training_steps(model, train, table, cfg, &mut opt, None)
}

/// Builds the optimizer the config describes, with zeroed momentum buffers.
pub fn make_optimizer(cfg: &PipelineConfig, params: &[Tensor]) -> OptimState {
    OptimState::new(
        cfg.optimizer,
        cfg.lr_peak,
        cfg.momentum,
        cfg.weight_decay,
        cfg.warmup_epochs,
        cfg.epochs,
        params,
    )
}

/// Same as [`run_training`] but with the optimizer state held by the caller,
/// and an optional pause point: training stops once `model.step` reaches
/// `stop_at` (an absolute step index), leaving the model ready to resume
/// under the same config. Every step derives its batch order and
/// augmentation randomness from the step counter alone, so a run paused and
/// resumed with the same optimizer state (kept in memory, or round-tripped
/// through [`Model::save_train_state`]) matches an uninterrupted one bit
/// for bit.
pub fn run_training_steps(
    model: &mut Model,
    train: &[ImageSample],
    table: &AugWeightTable,
    cfg: &PipelineConfig,
    opt: &mut OptimState,
    stop_at: Option<u64>,
) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    let steps_per_epoch = (train.len() / cfg.batch_size) as u64;
    if steps_per_epoch == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot fill one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let labeled = matches!(cfg.model.head, HeadKind::NClass(_));
    let params = model.params();
    let total_steps = cfg.epochs as u64 * steps_per_epoch;
    let stop = stop_at.unwrap_or(u64::MAX).min(total_steps);
    let mut log = Vec::with_capacity((stop - model.step.min(stop)) as usize);
    while model.step < stop {
        let epoch = (model.step / steps_per_epoch) as u32;
        let within = (model.step % steps_per_epoch) as usize;
        let order = Rng::with_stream(cfg.seed, STREAM_SHUFFLE ^ epoch as u64)
            .permutation(train.len());
        let batch: Vec<ImageSample> = order[within * cfg.batch_size..(within + 1) * cfg.batch_size]
            .iter()
            .map(|&i| train[i].clone())
            .collect();
        let mut step_rng = Rng::with_stream(cfg.seed, STREAM_STEP ^ model.step);
        let cb = build_pairs(&batch, table, &mut step_rng, cfg.r_max)?;
        for t in &params {
            t.zero_grad();
        }
        let con = batch_contrastive(&cb, model, cfg.temperature)?;
        let ce = if labeled {
            let labels: Vec<u32> = batch.iter().map(|x| x.label.unwrap()).collect();
            ce_loss_labeled(model, &cb.anchors, &labels, &cb.hard)?
        } else {
            ce_loss(model, &cb.anchors, &cb.hard)?
        };
        let total = con.add(&ce.scale(cfg.lambda_loss));
        let bd = LossBreakdown {
            con: con.value(),
            ce: ce.value(),
            total: total.value(),
            lambda_loss: cfg.lambda_loss,
        };
        if !bd.total.is_finite() {
            return Err(Error::Numeric(format!(
                "loss diverged at step {}: {}",
                model.step, bd.total
            )));
        }
        total.backward()?;
        let lr = opt.lr_at(model.step, steps_per_epoch)?;
        opt.step(&params, lr)?;
        log.push(LossRow { step: model.step, epoch, lr, con: bd.con, ce: bd.ce, total: bd.total });
        model.step += 1;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{gen_synth, SynthClass, SynthSpec};
    use crate::scoring::combined_scores;

    fn mini_cfg() -> PipelineConfig {
        let mut cfg = PipelineConfig::desk_default(ModelConfig::mlp(1, 12, 12));
        cfg.epochs = 2;
        cfg.warmup_epochs = 1;
        cfg.batch_size = 8;
        // The production optimizer settings are tuned for the full-size
        // model; the 12-unit test net needs a gentler step to stay out of
        // saturation.
        cfg.optimizer = OptimKind::SgdMomentum;
        cfg.lr_peak = 0.1;
        cfg.kinds = vec![HardAugKind::Rotate90, HardAugKind::GaussianNoise, HardAugKind::CutOut];
        cfg.r_max = 2;
        cfg.tsne.iters = 120;
        cfg.selection_max = 24;
        cfg.seed = 7;
        cfg
    }

    fn bars(n: usize, seed: u64) -> Vec<ImageSample> {
        gen_synth(&SynthSpec {
            classes: vec![SynthClass::OrientedBars],
            side: 12,
            n_per_class: n,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let good = mini_cfg();
        assert!(good.validate().is_ok());
        let mut c = mini_cfg();
        c.epochs = 0;
        assert!(c.validate().is_err());
        c = mini_cfg();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        c = mini_cfg();
        c.r_max = 4;
        assert!(c.validate().is_err());
        c = mini_cfg();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        c = mini_cfg();
        c.kinds.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn train_produces_consistent_artifacts() {
        let cfg = mini_cfg();
        let train = bars(24, 1);
        let art = train_one_class(&train, &cfg).unwrap();
        let spe = train.len() / cfg.batch_size;
        assert_eq!(art.loss_log.len(), cfg.epochs as usize * spe);
        assert_eq!(art.model.step, art.loss_log.len() as u64);
        for (i, row) in art.loss_log.iter().enumerate() {
            assert_eq!(row.step, i as u64);
            assert_eq!(row.epoch as usize, i / spe);
            assert!(row.total.is_finite());
            assert!((row.total - (row.con + cfg.lambda_loss * row.ce)).abs() < 1e-5);
        }
        assert_eq!(art.bank.len(), train.len());
        assert!(art.calibration.mean_bin > 0.0);
        assert_eq!(art.weight_table.kinds.len(), cfg.kinds.len());
        // Scores come out for every sample with the trained artifacts.
        let s = combined_scores(&train[..4], &art.model, &art.bank, &art.calibration).unwrap();
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let cfg = mini_cfg();
        let train = bars(24, 2);
        let a = train_one_class(&train, &cfg).unwrap();
        let b = train_one_class(&train, &cfg).unwrap();
        assert_eq!(a.loss_log, b.loss_log);
        for ((na, ta), (nb, tb)) in a.model.named_params().iter().zip(b.model.named_params()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec(), "parameter {na} differs");
        }
        let mut cfg2 = cfg.clone();
        cfg2.seed = 8;
        let c = train_one_class(&train, &cfg2).unwrap();
        assert_ne!(
            a.loss_log.first().map(|r| r.total),
            c.loss_log.first().map(|r| r.total),
            "different seeds should differ"
        );
    }

    #[test]
    fn resumed_training_continues_the_full_run() {
        let cfg = mini_cfg();
        let train = bars(24, 3);
        let table = select_weights(&train, &cfg).unwrap();

        let mut full = Model::new(cfg.model.clone(), cfg.seed).unwrap();
        let full_log = run_training(&mut full, &train, &table, &cfg).unwrap();

        // Same run paused mid-schedule, saved, reloaded, and resumed.
        let mut part = Model::new(cfg.model.clone(), cfg.seed).unwrap();
        let mut opt = make_optimizer(&cfg, &part.params());
        let mut log =
            run_training_steps(&mut part, &train, &table, &cfg, &mut opt, Some(3)).unwrap();
        assert_eq!(part.step, 3);

        let dir = std::env::temp_dir().join(format!("resume_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let ckpt = dir.join("state.ckpt");
        part.save_train_state(&ckpt, opt.buffers()).unwrap();
        let (mut resumed, vel) =
            Model::load_train_state(cfg.model.clone(), cfg.seed, &ckpt).unwrap();
        std::fs::remove_dir_all(&dir).unwrap();
        assert_eq!(resumed.step, 3);
        let mut opt2 = make_optimizer(&cfg, &resumed.params());
        opt2.set_buffers(vel).unwrap();
        log.extend(
            run_training_steps(&mut resumed, &train, &table, &cfg, &mut opt2, None).unwrap(),
        );

        assert_eq!(log, full_log);
        for ((na, ta), (_, tb)) in full.named_params().iter().zip(resumed.named_params()) {
            assert_eq!(ta.to_vec(), tb.to_vec(), "parameter {na} differs after resume");
        }
    }

    #[test]
    fn training_needs_a_full_batch_and_matching_head() {
        let cfg = mini_cfg();
        assert!(train_one_class(&bars(4, 4), &cfg).is_err());
        let mut labeled_cfg = mini_cfg();
        labeled_cfg.model.head = HeadKind::NClass(3);
        assert!(train_one_class(&bars(24, 4), &labeled_cfg).is_err());
        // Labeled training rejects unlabeled samples.
        let mut unlabeled = bars(24, 5);
        for x in &mut unlabeled {
            x.label = None;
        }
        assert!(train_multiclass_labeled(&unlabeled, &labeled_cfg).is_err());
    }

    #[test]
    fn labeled_training_runs_and_calibrates_on_msp() {
        let mut cfg = mini_cfg();
        cfg.model.head = HeadKind::NClass(2);
        let train = gen_synth(&SynthSpec {
            classes: vec![SynthClass::OrientedBars, SynthClass::Checker],
            side: 12,
            n_per_class: 12,
            seed: 6,
        })
        .unwrap();
        let art = train_multiclass_labeled(&train, &cfg).unwrap();
        assert!(art.calibration.mean_bin >= 0.5 - 1e-3, "mean MSP below uniform floor");
        assert!(!art.loss_log.is_empty());
    }

    #[test]
    fn loss_csv_has_one_row_per_step() {
        let rows = vec![
            LossRow { step: 0, epoch: 0, lr: 0.5, con: 2.0, ce: 1.5, total: 3.5 },
            LossRow { step: 1, epoch: 0, lr: 0.75, con: 1.5, ce: 1.25, total: 2.75 },
        ];
        let dir = std::env::temp_dir().join(format!("loss_csv_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("loss.csv");
        write_loss_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,epoch,lr,con,ce,total");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "0,0,0.5,2,1.5,3.5");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
