//! Flat `key = value` run configuration shared by every subcommand.
//!
//! The format is one assignment per line, `#` starts a comment, and every
//! key not listed in [`RunConfig`] is rejected so a typo cannot silently
//! fall back to a default. Each command writes the fully resolved
//! configuration (defaults filled in, command-line overrides applied) next
//! to its outputs; that file reparses to the identical run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use unode_core::augment::{CorruptionKind, HardAugKind};
use unode_core::autoaugood::{TsneParams, DENSITY_BINS};
use unode_core::evaluation::{load_idx, synth_dataset, LabeledDataset, MulticlassMode, SynthClass};
use unode_core::network::{EncoderKind, HeadKind, ModelConfig};
use unode_core::numcore::OptimKind;
use unode_core::pipeline::PipelineConfig;
use unode_core::{Error, Result};

/// Where the samples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataMode {
    /// Procedural images from the built-in class generators.
    Synth,
    /// Big-endian IDX image/label file pairs.
    Idx,
}

/// Rejection-head choice; an n-class head sizes itself to the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadChoice {
    Binary,
    NClass,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,

    pub data: DataMode,
    pub classes: Vec<SynthClass>,
    pub side: u32,
    pub n_train: usize,
    pub n_test: usize,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Class trained on by `train`, `score`, and `augweights` when the head
    /// is binary.
    pub inlier_class: u32,

    pub encoder: EncoderKind,
    pub feat_dim: u32,
    pub proj_dim: u32,
    pub head: HeadChoice,

    pub epochs: u32,
    pub batch_size: usize,
    pub optimizer: OptimKind,
    pub lr: f32,
    pub warmup_epochs: u32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub lambda: f32,
    pub temperature: f32,
    pub r_max: u32,
    pub augmentations: Vec<HardAugKind>,

    pub tsne_perplexity: f32,
    pub tsne_iters: u32,
    pub tsne_lr: f32,
    pub tsne_exaggeration: f32,
    pub bins: usize,
    pub selection_max: usize,

    pub corruptions: Vec<CorruptionKind>,
    /// 0 scores the clean test set; 1..=5 apply the corruption.
    pub severities: Vec<u32>,
    pub multiclass: MulticlassMode,
    pub outlier_classes: Vec<SynthClass>,

    pub theory_a_norm: f32,
    pub theory_eps: f32,
    pub theory_dim: usize,
    pub theory_d_max: f32,
    pub theory_points: usize,
    pub theory_samples: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = PipelineConfig::desk_default(ModelConfig::conv(1, 32, 32));
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataMode::Synth,
            classes: SynthClass::ALL.to_vec(),
            side: 32,
            n_train: 500,
            n_test: 200,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            inlier_class: 0,
            encoder: EncoderKind::Conv,
            feat_dim: 64,
            proj_dim: 128,
            head: HeadChoice::Binary,
            epochs: desk.epochs,
            batch_size: desk.batch_size,
            optimizer: desk.optimizer,
            lr: desk.lr_peak,
            warmup_epochs: desk.warmup_epochs,
            momentum: desk.momentum,
            weight_decay: desk.weight_decay,
            lambda: desk.lambda_loss,
            temperature: desk.temperature,
            r_max: desk.r_max,
            augmentations: desk.kinds,
            tsne_perplexity: desk.tsne.perplexity,
            tsne_iters: desk.tsne.iters,
            tsne_lr: desk.tsne.lr,
            tsne_exaggeration: desk.tsne.early_exaggeration,
            bins: DENSITY_BINS,
            selection_max: desk.selection_max,
            corruptions: CorruptionKind::ALL.to_vec(),
            severities: vec![3],
            multiclass: MulticlassMode::Unlabeled,
            outlier_classes: Vec::new(),
            theory_a_norm: 4.0,
            theory_eps: 0.5,
            theory_dim: 8,
            theory_d_max: 2.0,
            theory_points: 10,
            theory_samples: 1_000_000,
        }
    }
}

fn bad(key: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("key '{key}': {why}"))
}

fn num<T: std::str::FromStr>(key: &str, s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| bad(key, format!("cannot parse '{s}': {e}")))
}

fn list<T>(key: &str, s: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<&str> = s.split(',').map(str::trim).filter(|t| !t.is_empty()).collect();
    if items.is_empty() {
        return Err(bad(key, "empty list"));
    }
    items.iter().map(|t| parse(t).map_err(|e| bad(key, e))).collect()
}

/// Splits the text into `key = value` pairs; duplicate keys are rejected.
fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got '{line}'", i + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", i + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("duplicate key '{k}'")));
        }
    }
    Ok(map)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config '{}': {e}", path.display()))
        })?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut map = parse_pairs(text)?;
        let mut cfg = RunConfig::default();

        // Takes one key out of the map and stores its parsed value, leaving
        // unknown keys behind for the final check.
        macro_rules! set {
            ($key:literal, $field:expr, $parse:expr) => {
                if let Some(raw) = map.remove($key) {
                    #[allow(clippy::redundant_closure_call)]
                    {
                        $field = $parse($key, raw.as_str())?;
                    }
                }
            };
        }
        let path = |_: &str, s: &str| -> Result<Option<PathBuf>> { Ok(Some(PathBuf::from(s))) };

        set!("seed", cfg.seed, num::<u64>);
        set!("out", cfg.out, |_, s: &str| -> Result<PathBuf> { Ok(PathBuf::from(s)) });

        set!("data", cfg.data, |k, s: &str| match s {
            "synth" => Ok(DataMode::Synth),
            "idx" => Ok(DataMode::Idx),
            other => Err(bad(k, format!("expected synth or idx, got '{other}'"))),
        });
        set!("classes", cfg.classes, |k, s: &str| list(k, s, SynthClass::parse));
        set!("side", cfg.side, num::<u32>);
        set!("n_train", cfg.n_train, num::<usize>);
        set!("n_test", cfg.n_test, num::<usize>);
        set!("train_images", cfg.train_images, path);
        set!("train_labels", cfg.train_labels, path);
        set!("test_images", cfg.test_images, path);
        set!("test_labels", cfg.test_labels, path);
        set!("inlier_class", cfg.inlier_class, num::<u32>);

        set!("encoder", cfg.encoder, |k, s: &str| match s {
            "conv" => Ok(EncoderKind::Conv),
            "mlp" => Ok(EncoderKind::Mlp),
            other => Err(bad(k, format!("expected conv or mlp, got '{other}'"))),
        });
        set!("feat_dim", cfg.feat_dim, num::<u32>);
        set!("proj_dim", cfg.proj_dim, num::<u32>);
        set!("head", cfg.head, |k, s: &str| match s {
            "binary" => Ok(HeadChoice::Binary),
            "nclass" => Ok(HeadChoice::NClass),
            other => Err(bad(k, format!("expected binary or nclass, got '{other}'"))),
        });

        set!("epochs", cfg.epochs, num::<u32>);
        set!("batch_size", cfg.batch_size, num::<usize>);
        set!("optimizer", cfg.optimizer, |k, s: &str| match s {
            "lars" => Ok(OptimKind::Lars),
            "sgd" => Ok(OptimKind::SgdMomentum),
            other => Err(bad(k, format!("expected lars or sgd, got '{other}'"))),
        });
        set!("lr", cfg.lr, num::<f32>);
        set!("warmup_epochs", cfg.warmup_epochs, num::<u32>);
        set!("momentum", cfg.momentum, num::<f32>);
        set!("weight_decay", cfg.weight_decay, num::<f32>);
        set!("lambda", cfg.lambda, num::<f32>);
        set!("temperature", cfg.temperature, num::<f32>);
        set!("r_max", cfg.r_max, num::<u32>);
        set!("augmentations", cfg.augmentations, |k, s: &str| list(k, s, HardAugKind::parse));

        set!("tsne_perplexity", cfg.tsne_perplexity, num::<f32>);
        set!("tsne_iters", cfg.tsne_iters, num::<u32>);
        set!("tsne_lr", cfg.tsne_lr, num::<f32>);
        set!("tsne_exaggeration", cfg.tsne_exaggeration, num::<f32>);
        set!("bins", cfg.bins, num::<usize>);
        set!("selection_max", cfg.selection_max, num::<usize>);

        set!("corruptions", cfg.corruptions, |k, s: &str| list(k, s, CorruptionKind::parse));
        set!("severities", cfg.severities, |k, s: &str| {
            let v = list(k, s, |t| num::<u32>(k, t))?;
            if let Some(x) = v.iter().find(|x| **x > 5) {
                return Err(bad(k, format!("severity {x} outside 0..=5")));
            }
            Ok(v)
        });
        set!("multiclass", cfg.multiclass, |k, s: &str| match s {
            "unlabeled" => Ok(MulticlassMode::Unlabeled),
            "labeled" => Ok(MulticlassMode::Labeled),
            other => Err(bad(k, format!("expected unlabeled or labeled, got '{other}'"))),
        });
        set!("outlier_classes", cfg.outlier_classes, |k, s: &str| list(k, s, SynthClass::parse));

        set!("theory_a_norm", cfg.theory_a_norm, num::<f32>);
        set!("theory_eps", cfg.theory_eps, num::<f32>);
        set!("theory_dim", cfg.theory_dim, num::<usize>);
        set!("theory_d_max", cfg.theory_d_max, num::<f32>);
        set!("theory_points", cfg.theory_points, num::<usize>);
        set!("theory_samples", cfg.theory_samples, num::<u64>);

        if !map.is_empty() {
            let unknown: Vec<String> = map.into_keys().collect();
            return Err(Error::Config(format!(
                "unknown config key{} {}",
                if unknown.len() == 1 { "" } else { "s" },
                unknown.join(", ")
            )));
        }
        Ok(cfg)
    }

    /// Renders every key with its current value; `parse_str` of the result
    /// reproduces this configuration exactly.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let names = |v: &[SynthClass]| -> String {
            v.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")
        };
        let _ = writeln!(s, "# run");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "\n# data");
        let _ = writeln!(
            s,
            "data = {}",
            match self.data {
                DataMode::Synth => "synth",
                DataMode::Idx => "idx",
            }
        );
        let _ = writeln!(s, "classes = {}", names(&self.classes));
        let _ = writeln!(s, "side = {}", self.side);
        let _ = writeln!(s, "n_train = {}", self.n_train);
        let _ = writeln!(s, "n_test = {}", self.n_test);
        for (key, p) in [
            ("train_images", &self.train_images),
            ("train_labels", &self.train_labels),
            ("test_images", &self.test_images),
            ("test_labels", &self.test_labels),
        ] {
            if let Some(p) = p {
                let _ = writeln!(s, "{key} = {}", p.display());
            }
        }
        let _ = writeln!(s, "inlier_class = {}", self.inlier_class);
        let _ = writeln!(s, "\n# model");
        let _ = writeln!(
            s,
            "encoder = {}",
            match self.encoder {
                EncoderKind::Conv => "conv",
                EncoderKind::Mlp => "mlp",
            }
        );
        let _ = writeln!(s, "feat_dim = {}", self.feat_dim);
        let _ = writeln!(s, "proj_dim = {}", self.proj_dim);
        let _ = writeln!(
            s,
            "head = {}",
            match self.head {
                HeadChoice::Binary => "binary",
                HeadChoice::NClass => "nclass",
            }
        );
        let _ = writeln!(s, "\n# training");
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(
            s,
            "optimizer = {}",
            match self.optimizer {
                OptimKind::Lars => "lars",
                OptimKind::SgdMomentum => "sgd",
            }
        );
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "warmup_epochs = {}", self.warmup_epochs);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "temperature = {}", self.temperature);
        let _ = writeln!(s, "r_max = {}", self.r_max);
        let _ = writeln!(
            s,
            "augmentations = {}",
            self.augmentations.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(s, "\n# augmentation selection");
        let _ = writeln!(s, "tsne_perplexity = {}", self.tsne_perplexity);
        let _ = writeln!(s, "tsne_iters = {}", self.tsne_iters);
        let _ = writeln!(s, "tsne_lr = {}", self.tsne_lr);
        let _ = writeln!(s, "tsne_exaggeration = {}", self.tsne_exaggeration);
        let _ = writeln!(s, "bins = {}", self.bins);
        let _ = writeln!(s, "selection_max = {}", self.selection_max);
        let _ = writeln!(s, "\n# evaluation");
        let _ = writeln!(
            s,
            "corruptions = {}",
            self.corruptions.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(
            s,
            "severities = {}",
            self.severities.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(
            s,
            "multiclass = {}",
            match self.multiclass {
                MulticlassMode::Unlabeled => "unlabeled",
                MulticlassMode::Labeled => "labeled",
            }
        );
        if !self.outlier_classes.is_empty() {
            let _ = writeln!(s, "outlier_classes = {}", names(&self.outlier_classes));
        }
        let _ = writeln!(s, "\n# theory");
        let _ = writeln!(s, "theory_a_norm = {}", self.theory_a_norm);
        let _ = writeln!(s, "theory_eps = {}", self.theory_eps);
        let _ = writeln!(s, "theory_dim = {}", self.theory_dim);
        let _ = writeln!(s, "theory_d_max = {}", self.theory_d_max);
        let _ = writeln!(s, "theory_points = {}", self.theory_points);
        let _ = writeln!(s, "theory_samples = {}", self.theory_samples);
        s
    }

    /// Loads the configured dataset.
    pub fn dataset(&self) -> Result<LabeledDataset> {
        match self.data {
            DataMode::Synth => {
                synth_dataset(&self.classes, self.side, self.n_train, self.n_test, self.seed)
            }
            DataMode::Idx => {
                let need = |p: &Option<PathBuf>, key: &str| -> Result<PathBuf> {
                    p.clone().ok_or_else(|| Error::Config(format!("idx data needs key '{key}'")))
                };
                let train = load_idx(
                    &need(&self.train_images, "train_images")?,
                    &need(&self.train_labels, "train_labels")?,
                )?;
                let test = load_idx(
                    &need(&self.test_images, "test_images")?,
                    &need(&self.test_labels, "test_labels")?,
                )?;
                Ok(LabeledDataset { train, test })
            }
        }
    }

    /// Model shape for this dataset; an n-class head takes the class count
    /// from the training labels.
    pub fn model_config(&self, ds: &LabeledDataset) -> Result<ModelConfig> {
        let first = ds
            .train
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset has no training samples".into()))?;
        let head = match self.head {
            HeadChoice::Binary => HeadKind::Binary,
            HeadChoice::NClass => {
                let k = ds.classes().len() as u32;
                if k == 0 {
                    return Err(Error::Config("nclass head needs labeled training data".into()));
                }
                HeadKind::NClass(k)
            }
        };
        Ok(ModelConfig {
            in_channels: first.channels,
            height: first.height,
            width: first.width,
            encoder: self.encoder,
            feat_dim: self.feat_dim,
            proj_dim: self.proj_dim,
            head,
        })
    }

    /// Full training/selection configuration for this dataset.
    pub fn pipeline_config(&self, ds: &LabeledDataset) -> Result<PipelineConfig> {
        let cfg = PipelineConfig {
            model: self.model_config(ds)?,
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            lr_peak: self.lr,
            warmup_epochs: self.warmup_epochs,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lambda_loss: self.lambda,
            temperature: self.temperature,
            r_max: self.r_max,
            kinds: self.augmentations.clone(),
            tsne: TsneParams {
                perplexity: self.tsne_perplexity,
                iters: self.tsne_iters,
                lr: self.tsne_lr,
                early_exaggeration: self.tsne_exaggeration,
                seed: self.seed,
            },
            density_bins: self.bins,
            selection_max: self.selection_max,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
