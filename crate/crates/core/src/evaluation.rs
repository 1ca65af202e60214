//! AUROC, synthetic image classes, IDX dataset ingestion, and the
//! one-class / corrupted / multi-class evaluation protocols.

use crate::augment::{corrupt, CorruptionSpec, ImageSample};
use crate::error::{Error, Result};
use crate::network::HeadKind;
use crate::numcore::special::{det_exp, det_sin};
use crate::numcore::Rng;
use crate::pipeline::{train_multiclass_labeled, train_one_class, PipelineConfig, TrainArtifacts};
use crate::scoring::combined_scores;
use std::io::{Read, Write};
use std::path::Path;

const STREAM_CORRUPT: u64 = 0x636f727200000000;
const TEST_SEED_SALT: u64 = 0x7465737400000000;

/// Rank-based AUROC with ties counted half. Scores must be oriented so
/// that higher means more inlier-like; the result is the probability that
/// a random inlier outscores a random outlier.
pub fn auroc(inlier: &[f32], outlier: &[f32]) -> Result<f32> {
    if inlier.is_empty() || outlier.is_empty() {
        return Err(Error::InvalidArgument("auroc needs both score lists nonempty".into()));
    }
    if inlier.iter().chain(outlier).any(|s| s.is_nan()) {
        return Err(Error::Numeric("auroc scores contain NaN".into()));
    }
    let mut all: Vec<(f32, bool)> = inlier
        .iter()
        .map(|&s| (s, true))
        .chain(outlier.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum_in = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j share the group's midrank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        rank_sum_in += midrank * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let n_in = inlier.len() as f64;
    let n_out = outlier.len() as f64;
    let u = rank_sum_in - n_in * (n_in + 1.0) / 2.0;
    Ok((u / (n_in * n_out)) as f32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthClass {
    /// Parallel horizontal bars; orientation makes the class
    /// rotation-variant.
    OrientedBars,
    /// Concentric rings around the image center; exactly invariant under
    /// quarter rotation.
    Rings,
    /// A few Gaussian bumps at random positions.
    Blobs,
    /// Two-level checkerboard with random cell size and offset.
    Checker,
}

impl SynthClass {
    pub const ALL: [SynthClass; 4] =
        [SynthClass::OrientedBars, SynthClass::Rings, SynthClass::Blobs, SynthClass::Checker];

    pub fn name(&self) -> &'static str {
        match self {
            SynthClass::OrientedBars => "oriented_bars",
            SynthClass::Rings => "rings",
            SynthClass::Blobs => "blobs",
            SynthClass::Checker => "checker",
        }
    }

    pub fn parse(name: &str) -> Result<SynthClass> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown synthetic class '{name}'")))
    }
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub classes: Vec<SynthClass>,
    pub side: u32,
    pub n_per_class: usize,
    pub seed: u64,
}

const TAU: f64 = std::f64::consts::TAU;

fn render(class: SynthClass, side: u32, rng: &mut Rng) -> ImageSample {
    let mut img = ImageSample::zeros(1, side, side);
    let center = (side as f32 - 1.0) / 2.0;
    match class {
        SynthClass::OrientedBars => {
            let period = rng.uniform(2.5, 5.0);
            let phase = rng.uniform(0.0, period);
            for y in 0..side {
                let v = 0.5 + 0.45 * det_sin(TAU * ((y as f32 + phase) / period) as f64) as f32;
                for x in 0..side {
                    img.set(0, y, x, v);
                }
            }
        }
        SynthClass::Rings => {
            let period = rng.uniform(2.5, 5.0);
            let phase = rng.uniform(0.0, period);
            for y in 0..side {
                for x in 0..side {
                    let dy = y as f32 - center;
                    let dx = x as f32 - center;
                    let r = (dy * dy + dx * dx).sqrt();
                    let v = 0.5 + 0.45 * det_sin(TAU * ((r + phase) / period) as f64) as f32;
                    img.set(0, y, x, v);
                }
            }
        }
        SynthClass::Blobs => {
            let k = 2 + rng.range(3);
            let bumps: Vec<(f32, f32, f32, f32)> = (0..k)
                .map(|_| {
                    (
                        rng.uniform(1.5, side as f32 - 2.5),
                        rng.uniform(1.5, side as f32 - 2.5),
                        rng.uniform(1.2, 2.5),
                        rng.uniform(0.6, 1.0),
                    )
                })
                .collect();
            for y in 0..side {
                for x in 0..side {
                    let mut v = 0.0f32;
                    for (cy, cx, sigma, amp) in &bumps {
                        let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                        v += amp * det_exp((-d2 / (2.0 * sigma * sigma)) as f64) as f32;
                    }
                    img.set(0, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
        SynthClass::Checker => {
            let cell = 2 + rng.range(3) as u32;
            let oy = rng.range(cell as u64) as u32;
            let ox = rng.range(cell as u64) as u32;
            let lo = rng.uniform(0.05, 0.25);
            let hi = rng.uniform(0.75, 0.95);
            for y in 0..side {
                for x in 0..side {
                    let parity = ((y + oy) / cell + (x + ox) / cell) % 2;
                    img.set(0, y, x, if parity == 0 { lo } else { hi });
                }
            }
        }
    }
    img
}

/// Deterministic synthetic dataset; labels index into `spec.classes`.
pub fn gen_synth(spec: &SynthSpec) -> Result<Vec<ImageSample>> {
    if spec.classes.is_empty() || spec.n_per_class == 0 {
        return Err(Error::InvalidArgument("synthetic spec needs classes and a count".into()));
    }
    if spec.side < 8 {
        return Err(Error::InvalidArgument("synthetic images need side >= 8".into()));
    }
    let mut out = Vec::with_capacity(spec.classes.len() * spec.n_per_class);
    for (c, class) in spec.classes.iter().enumerate() {
        for i in 0..spec.n_per_class {
            let mut rng = Rng::with_stream(spec.seed, ((c as u64) << 40) | i as u64);
            let mut img = render(*class, spec.side, &mut rng);
            img.label = Some(c as u32);
            out.push(img);
        }
    }
    Ok(out)
}

/// Train/test split container; labels are class indices.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

impl LabeledDataset {
    /// Sorted distinct labels of the training split.
    pub fn classes(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.train.iter().filter_map(|x| x.label).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn train_of(&self, class_id: u32) -> Vec<ImageSample> {
        self.train.iter().filter(|x| x.label == Some(class_id)).cloned().collect()
    }

    /// Test inliers of the class and everything else as outliers.
    pub fn test_split(&self, class_id: u32) -> (Vec<ImageSample>, Vec<ImageSample>) {
        let (inl, out): (Vec<_>, Vec<_>) =
            self.test.iter().cloned().partition(|x| x.label == Some(class_id));
        (inl, out)
    }
}

/// Synthetic dataset with disjoint train/test randomness.
pub fn synth_dataset(
    classes: &[SynthClass],
    side: u32,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let train = gen_synth(&SynthSpec {
        classes: classes.to_vec(),
        side,
        n_per_class: n_train,
        seed,
    })?;
    let test = gen_synth(&SynthSpec {
        classes: classes.to_vec(),
        side,
        n_per_class: n_test,
        seed: seed ^ TEST_SEED_SALT,
    })?;
    Ok(LabeledDataset { train, test })
}

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

fn read_be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Parse("idx file truncated".into()))
}

/// Reads the big-endian IDX pair (images magic 2051, labels magic 2049);
/// pixel bytes are scaled to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<ImageSample>> {
    let mut img_bytes = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut img_bytes)?;
    let mut lab_bytes = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut lab_bytes)?;

    if read_be_u32(&img_bytes, 0)? != IDX_IMAGES_MAGIC {
        return Err(Error::Parse("bad image file magic (want 2051)".into()));
    }
    if read_be_u32(&lab_bytes, 0)? != IDX_LABELS_MAGIC {
        return Err(Error::Parse("bad label file magic (want 2049)".into()));
    }
    let n = read_be_u32(&img_bytes, 4)? as usize;
    let rows = read_be_u32(&img_bytes, 8)?;
    let cols = read_be_u32(&img_bytes, 12)?;
    let n_labels = read_be_u32(&lab_bytes, 4)? as usize;
    if n != n_labels {
        return Err(Error::Parse(format!("{n} images but {n_labels} labels")));
    }
    let px = (rows * cols) as usize;
    if img_bytes.len() != 16 + n * px {
        return Err(Error::Parse(format!(
            "image payload is {} bytes, want {}",
            img_bytes.len() - 16.min(img_bytes.len()),
            n * px
        )));
    }
    if lab_bytes.len() != 8 + n {
        return Err(Error::Parse("label payload size mismatch".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut img = ImageSample::zeros(1, rows, cols);
        for (j, b) in img_bytes[16 + i * px..16 + (i + 1) * px].iter().enumerate() {
            img.pixels[j] = *b as f32 / 255.0;
        }
        img.label = Some(lab_bytes[8 + i] as u32);
        out.push(img);
    }
    Ok(out)
}

/// Writes the IDX pair; pixels are rounded to bytes, unlabeled samples are
/// stored as class 0, labels above 255 are rejected.
pub fn write_idx(images_path: &Path, labels_path: &Path, samples: &[ImageSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot write an empty idx file".into()));
    }
    let (rows, cols) = (samples[0].height, samples[0].width);
    let mut img_bytes = Vec::with_capacity(16 + samples.len() * (rows * cols) as usize);
    img_bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img_bytes.extend_from_slice(&(samples.len() as u32).to_be_bytes());
    img_bytes.extend_from_slice(&rows.to_be_bytes());
    img_bytes.extend_from_slice(&cols.to_be_bytes());
    let mut lab_bytes = Vec::with_capacity(8 + samples.len());
    lab_bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab_bytes.extend_from_slice(&(samples.len() as u32).to_be_bytes());
    for (i, s) in samples.iter().enumerate() {
        if s.channels != 1 || s.height != rows || s.width != cols {
            return Err(Error::Shape(format!(
                "sample {i} is {}x{}x{}, want 1x{rows}x{cols}",
                s.channels, s.height, s.width
            )));
        }
        for p in &s.pixels {
            img_bytes.push((p * 255.0).round().clamp(0.0, 255.0) as u8);
        }
        let label = s.label.unwrap_or(0);
        if label > 255 {
            return Err(Error::InvalidArgument(format!("label {label} does not fit a byte")));
        }
        lab_bytes.push(label as u8);
    }
    std::fs::File::create(images_path)?.write_all(&img_bytes)?;
    std::fs::File::create(labels_path)?.write_all(&lab_bytes)?;
    Ok(())
}

/// Per-entry AUROC list with its mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: String,
    pub corruption: Option<String>,
    pub rows: Vec<(String, f32)>,
    pub mean: f32,
    pub std: f32,
}

impl EvalReport {
    pub fn new(
        protocol: impl Into<String>,
        corruption: Option<String>,
        rows: Vec<(String, f32)>,
    ) -> Result<EvalReport> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("report needs at least one entry".into()));
        }
        for (tag, v) in &rows {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::Numeric(format!("AUROC {v} for '{tag}' outside [0,1]")));
            }
        }
        let n = rows.len() as f64;
        let mean = rows.iter().map(|(_, v)| *v as f64).sum::<f64>() / n;
        let var = rows.iter().map(|(_, v)| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
        Ok(EvalReport {
            protocol: protocol.into(),
            corruption,
            rows,
            mean: mean as f32,
            std: var.sqrt() as f32,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "entry,auroc")?;
        for (tag, v) in &self.rows {
            writeln!(f, "{tag},{v}")?;
        }
        writeln!(f, "Mean,{}", self.mean)?;
        writeln!(f, "STD,{}", self.std)?;
        Ok(())
    }

    pub fn text_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|(t, _)| t.len())
            .chain([4])
            .max()
            .unwrap();
        let mut s = match &self.corruption {
            Some(tag) => format!("{} ({tag})\n", self.protocol),
            None => format!("{}\n", self.protocol),
        };
        for (tag, v) in &self.rows {
            s.push_str(&format!("{tag:width$}  {v:.4}\n"));
        }
        s.push_str(&format!("{:width$}  {:.4}\n", "Mean", self.mean));
        s.push_str(&format!("{:width$}  {:.4}\n", "STD", self.std));
        s
    }
}

/// Trains on one class and scores its held-out inliers against every other
/// class's test samples.
pub fn oneclass_eval(
    ds: &LabeledDataset,
    class_id: u32,
    cfg: &PipelineConfig,
) -> Result<(f32, TrainArtifacts)> {
    let train = ds.train_of(class_id);
    if train.len() < 2 * cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} has {} training samples, need at least {}",
            train.len(),
            2 * cfg.batch_size
        )));
    }
    let art = train_one_class(&train, cfg)?;
    let (test_in, test_out) = ds.test_split(class_id);
    if test_in.is_empty() || test_out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} needs test inliers and outliers"
        )));
    }
    let s_in = combined_scores(&test_in, &art.model, &art.bank, &art.calibration)?;
    let s_out = combined_scores(&test_out, &art.model, &art.bank, &art.calibration)?;
    Ok((auroc(&s_in, &s_out)?, art))
}

/// One-class protocol over every class, each with its own derived seed.
pub fn oneclass_protocol(ds: &LabeledDataset, cfg: &PipelineConfig) -> Result<EvalReport> {
    let classes = ds.classes();
    if classes.is_empty() {
        return Err(Error::InvalidArgument("dataset has no labeled classes".into()));
    }
    let mut rows = Vec::with_capacity(classes.len());
    for &c in &classes {
        let mut sub = cfg.clone();
        sub.seed = cfg.seed.wrapping_add(c as u64);
        let (v, _) = oneclass_eval(ds, c, &sub)?;
        rows.push((format!("class{c}"), v));
    }
    EvalReport::new("one-class", None, rows)
}

/// Trains once on the class, then evaluates with the whole test set (both
/// inliers and outliers) corrupted per spec. Severity 0 short-circuits to
/// the clean test set.
pub fn corrupted_eval(
    ds: &LabeledDataset,
    class_id: u32,
    corruptions: &[CorruptionSpec],
    cfg: &PipelineConfig,
) -> Result<EvalReport> {
    if corruptions.is_empty() {
        return Err(Error::InvalidArgument("corrupted eval needs at least one spec".into()));
    }
    let train = ds.train_of(class_id);
    if train.len() < 2 * cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} has {} training samples, need at least {}",
            train.len(),
            2 * cfg.batch_size
        )));
    }
    let art = train_one_class(&train, cfg)?;
    let (test_in, test_out) = ds.test_split(class_id);
    if test_in.is_empty() || test_out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} needs test inliers and outliers"
        )));
    }
    let mut rows = Vec::with_capacity(corruptions.len());
    for (idx, spec) in corruptions.iter().enumerate() {
        let tag = format!("{}@{}", spec.kind.name(), spec.severity);
        let (cin, cout) = if spec.severity == 0 {
            (test_in.clone(), test_out.clone())
        } else {
            let mut rng = Rng::with_stream(cfg.seed, STREAM_CORRUPT ^ idx as u64);
            let mut apply = |xs: &[ImageSample]| -> Result<Vec<ImageSample>> {
                xs.iter().map(|x| corrupt(x, *spec, &mut rng)).collect()
            };
            (apply(&test_in)?, apply(&test_out)?)
        };
        let s_in = combined_scores(&cin, &art.model, &art.bank, &art.calibration)?;
        let s_out = combined_scores(&cout, &art.model, &art.bank, &art.calibration)?;
        rows.push((tag, auroc(&s_in, &s_out)?));
    }
    EvalReport::new("corrupted", Some(format!("class{class_id}")), rows)
}

/// The full class-by-corruption grid with both reduction orders.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedGrid {
    pub classes: Vec<u32>,
    pub tags: Vec<String>,
    /// auroc[class index][corruption index]
    pub auroc: Vec<Vec<f32>>,
}

impl CorruptedGrid {
    pub fn mean_by_corruption(&self) -> Vec<f32> {
        (0..self.tags.len())
            .map(|j| {
                (self.auroc.iter().map(|row| row[j] as f64).sum::<f64>()
                    / self.classes.len() as f64) as f32
            })
            .collect()
    }

    pub fn mean_by_class(&self) -> Vec<f32> {
        self.auroc
            .iter()
            .map(|row| (row.iter().map(|v| *v as f64).sum::<f64>() / row.len() as f64) as f32)
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "class,{}", self.tags.join(","))?;
        for (i, c) in self.classes.iter().enumerate() {
            let cells: Vec<String> = self.auroc[i].iter().map(|v| v.to_string()).collect();
            writeln!(f, "class{c},{}", cells.join(","))?;
        }
        let means: Vec<String> =
            self.mean_by_corruption().iter().map(|v| v.to_string()).collect();
        writeln!(f, "Mean,{}", means.join(","))?;
        Ok(())
    }
}

pub fn corrupted_protocol(
    ds: &LabeledDataset,
    corruptions: &[CorruptionSpec],
    cfg: &PipelineConfig,
) -> Result<CorruptedGrid> {
    let classes = ds.classes();
    if classes.is_empty() {
        return Err(Error::InvalidArgument("dataset has no labeled classes".into()));
    }
    let mut grid = Vec::with_capacity(classes.len());
    let mut tags = Vec::new();
    for &c in &classes {
        let mut sub = cfg.clone();
        sub.seed = cfg.seed.wrapping_add(c as u64);
        let report = corrupted_eval(ds, c, corruptions, &sub)?;
        if tags.is_empty() {
            tags = report.rows.iter().map(|(t, _)| t.clone()).collect();
        }
        grid.push(report.rows.iter().map(|(_, v)| *v).collect());
    }
    Ok(CorruptedGrid { classes, tags, auroc: grid })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MulticlassMode {
    /// All inlier classes pooled; labels ignored; binary rejection head.
    Unlabeled,
    /// Rejection head classifies the K inlier classes; MSP replaces the
    /// binary probability in the combined score.
    Labeled,
}

/// Trains on the pooled inlier training split and scores each external
/// outlier set against the inlier test split.
pub fn multiclass_eval(
    ds: &LabeledDataset,
    out_sets: &[(String, Vec<ImageSample>)],
    mode: MulticlassMode,
    cfg: &PipelineConfig,
) -> Result<EvalReport> {
    if out_sets.is_empty() || out_sets.iter().any(|(_, xs)| xs.is_empty()) {
        return Err(Error::InvalidArgument("multiclass eval needs nonempty outlier sets".into()));
    }
    if ds.test.is_empty() {
        return Err(Error::InvalidArgument("multiclass eval needs inlier test samples".into()));
    }
    let art = match mode {
        MulticlassMode::Unlabeled => {
            if cfg.model.head != HeadKind::Binary {
                return Err(Error::Config("unlabeled multiclass needs the binary head".into()));
            }
            train_one_class(&ds.train, cfg)?
        }
        MulticlassMode::Labeled => {
            let k = ds.classes().len() as u32;
            match cfg.model.head {
                HeadKind::NClass(n) if n == k => {}
                other => {
                    return Err(Error::Config(format!(
                        "labeled multiclass on {k} classes cannot use head {other:?}"
                    )))
                }
            }
            train_multiclass_labeled(&ds.train, cfg)?
        }
    };
    let s_in = combined_scores(&ds.test, &art.model, &art.bank, &art.calibration)?;
    let mut rows = Vec::with_capacity(out_sets.len());
    for (name, xs) in out_sets {
        let s_out = combined_scores(xs, &art.model, &art.bank, &art.calibration)?;
        rows.push((name.clone(), auroc(&s_in, &s_out)?));
    }
    let tag = match mode {
        MulticlassMode::Unlabeled => "multiclass-unlabeled",
        MulticlassMode::Labeled => "multiclass-labeled",
    };
    EvalReport::new(tag, None, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{hard_augment, CorruptionKind, HardAugKind};
    use crate::network::ModelConfig;
    use crate::numcore::OptimKind;

    /// O(n^2) pair-count oracle for AUROC.
    fn brute_auroc(inlier: &[f32], outlier: &[f32]) -> f32 {
        let mut wins = 0.0f64;
        for a in inlier {
            for b in outlier {
                if a > b {
                    wins += 1.0;
                } else if a == b {
                    wins += 0.5;
                }
            }
        }
        (wins / (inlier.len() * outlier.len()) as f64) as f32
    }

    #[test]
    fn auroc_pinned_values() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5, 0.5], &[0.5, 0.5, 0.5]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.8, 0.4], &[0.6, 0.2]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1], &[0.9]).unwrap(), 0.0);
        assert!(auroc(&[], &[0.5]).is_err());
        assert!(auroc(&[0.5], &[]).is_err());
        assert!(auroc(&[f32::NAN], &[0.5]).is_err());
    }

    #[test]
    fn auroc_matches_brute_force_with_ties() {
        let mut rng = Rng::new(5);
        for case in 0..60 {
            let n_in = 1 + rng.range(40) as usize;
            let n_out = 1 + rng.range(40) as usize;
            // Quantized scores force plenty of ties.
            let gen = |rng: &mut Rng, n: usize| -> Vec<f32> {
                (0..n).map(|_| (rng.range(12) as f32) / 4.0).collect()
            };
            let inl = gen(&mut rng, n_in);
            let out = gen(&mut rng, n_out);
            let fast = auroc(&inl, &out).unwrap();
            let brute = brute_auroc(&inl, &out);
            assert_eq!(fast, brute, "case {case}: {inl:?} vs {out:?}");
        }
    }

    #[test]
    fn auroc_complement_and_monotone_invariance() {
        let mut rng = Rng::new(9);
        // Tie-free scores via distinct values.
        let inl: Vec<f32> = (0..25).map(|i| i as f32 + rng.uniform(0.0, 0.4)).collect();
        let out: Vec<f32> = (0..30).map(|i| i as f32 + rng.uniform(0.5, 0.9)).collect();
        let a = auroc(&inl, &out).unwrap();
        let b = auroc(&out, &inl).unwrap();
        assert!((a + b - 1.0).abs() < 1e-6);
        // Strictly increasing transform preserves all ranks.
        let t = |v: &f32| 2.0 * v + 1.0;
        let ti: Vec<f32> = inl.iter().map(t).collect();
        let to: Vec<f32> = out.iter().map(t).collect();
        assert_eq!(auroc(&ti, &to).unwrap(), a);
    }

    #[test]
    fn synth_is_deterministic_and_labeled() {
        let spec = SynthSpec {
            classes: vec![SynthClass::OrientedBars, SynthClass::Blobs],
            side: 16,
            n_per_class: 5,
            seed: 3,
        };
        let a = gen_synth(&spec).unwrap();
        let b = gen_synth(&spec).unwrap();
        assert_eq!(a.len(), 10);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pixels, y.pixels);
            assert_eq!(x.label, y.label);
        }
        assert!(a[..5].iter().all(|x| x.label == Some(0)));
        assert!(a[5..].iter().all(|x| x.label == Some(1)));
        for x in &a {
            assert!(x.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        assert!(gen_synth(&SynthSpec { classes: vec![], side: 16, n_per_class: 5, seed: 0 })
            .is_err());
    }

    #[test]
    fn rings_are_rotation_invariant_bars_are_not() {
        let mut rng = Rng::new(11);
        let rings = gen_synth(&SynthSpec {
            classes: vec![SynthClass::Rings],
            side: 16,
            n_per_class: 6,
            seed: 4,
        })
        .unwrap();
        for img in &rings {
            let rot = hard_augment(img, HardAugKind::Rotate90, &mut rng, None).unwrap();
            assert_eq!(img.pixels, rot.pixels, "ring image changed under quarter rotation");
        }
        let bars = gen_synth(&SynthSpec {
            classes: vec![SynthClass::OrientedBars],
            side: 16,
            n_per_class: 6,
            seed: 4,
        })
        .unwrap();
        for img in &bars {
            let rot = hard_augment(img, HardAugKind::Rotate90, &mut rng, None).unwrap();
            let differing = img
                .pixels
                .iter()
                .zip(&rot.pixels)
                .filter(|(a, b)| (**a - **b).abs() > 1e-6)
                .count();
            assert!(
                differing * 10 >= img.pixels.len(),
                "only {differing} of {} pixels changed",
                img.pixels.len()
            );
        }
    }

    #[test]
    fn dataset_split_helpers() {
        let ds = synth_dataset(&[SynthClass::OrientedBars, SynthClass::Rings], 12, 8, 4, 5)
            .unwrap();
        assert_eq!(ds.classes(), vec![0, 1]);
        assert_eq!(ds.train_of(0).len(), 8);
        let (inl, out) = ds.test_split(1);
        assert_eq!(inl.len(), 4);
        assert_eq!(out.len(), 4);
        // Train and test draws differ.
        assert_ne!(ds.train[0].pixels, ds.test[0].pixels);
    }

    #[test]
    fn idx_roundtrip_and_hand_built_file() {
        let dir = std::env::temp_dir().join(format!("idx_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let ip = dir.join("img.idx");
        let lp = dir.join("lab.idx");

        // Hand-built: 2 images of 2x2, pixels 0..=7, labels 3 and 9.
        let mut img = Vec::new();
        img.extend_from_slice(&2051u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[0, 51, 102, 153, 204, 255, 25, 76]);
        let mut lab = Vec::new();
        lab.extend_from_slice(&2049u32.to_be_bytes());
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[3, 9]);
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lab).unwrap();
        let samples = load_idx(&ip, &lp).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].label, Some(3));
        assert_eq!(samples[1].label, Some(9));
        assert_eq!(samples[0].pixels, vec![0.0, 51.0 / 255.0, 102.0 / 255.0, 153.0 / 255.0]);
        assert_eq!(samples[1].pixels[1], 1.0);

        // Round trip through the writer is bit-identical on disk.
        let ip2 = dir.join("img2.idx");
        let lp2 = dir.join("lab2.idx");
        write_idx(&ip2, &lp2, &samples).unwrap();
        assert_eq!(std::fs::read(&ip2).unwrap(), img);
        assert_eq!(std::fs::read(&lp2).unwrap(), lab);

        // Count mismatch errors out.
        lab[7] = 3;
        std::fs::write(&lp, &lab).unwrap();
        assert!(load_idx(&ip, &lp).is_err());
        // Bad magic errors out.
        img[3] = 9;
        std::fs::write(&ip, &img).unwrap();
        assert!(load_idx(&ip, &lp).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn report_statistics_and_exports() {
        let report = EvalReport::new(
            "one-class",
            None,
            vec![("class0".into(), 0.9), ("class1".into(), 0.7)],
        )
        .unwrap();
        assert!((report.mean - 0.8).abs() < 1e-6);
        assert!((report.std - 0.1).abs() < 1e-6);
        let table = report.text_table();
        assert!(table.contains("Mean") && table.contains("STD"));
        assert!(table.contains("class0") && table.contains("0.9000"));

        let dir = std::env::temp_dir().join(format!("report_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("report.csv");
        report.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("entry,auroc\nclass0,0.9\n"));
        let stat = |tag: &str| -> f32 {
            let line = text
                .lines()
                .find(|l| l.starts_with(&format!("{tag},")))
                .unwrap_or_else(|| panic!("missing {tag} row"));
            line.split(',').nth(1).unwrap().parse().unwrap()
        };
        assert!((stat("Mean") - 0.8).abs() < 1e-6);
        assert!((stat("STD") - 0.1).abs() < 1e-6);
        std::fs::remove_dir_all(&dir).unwrap();

        assert!(EvalReport::new("p", None, vec![]).is_err());
        assert!(EvalReport::new("p", None, vec![("x".into(), 1.5)]).is_err());
    }

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
        cfg.seed = 17;
        cfg
    }

    #[test]
    fn oneclass_protocol_runs_and_averages() {
        let ds = synth_dataset(&[SynthClass::OrientedBars, SynthClass::Rings], 12, 16, 6, 23)
            .unwrap();
        let report = oneclass_protocol(&ds, &mini_cfg()).unwrap();
        assert_eq!(report.rows.len(), 2);
        let mean = (report.rows[0].1 + report.rows[1].1) / 2.0;
        assert!((report.mean - mean).abs() < 1e-6);
        for (_, v) in &report.rows {
            assert!((0.0..=1.0).contains(v));
        }
        // Too small a class errors.
        let tiny = synth_dataset(&[SynthClass::OrientedBars], 12, 8, 4, 1).unwrap();
        assert!(oneclass_eval(&tiny, 0, &mini_cfg()).is_err());
    }

    #[test]
    fn corrupted_severity_zero_equals_clean() {
        let ds = synth_dataset(&[SynthClass::OrientedBars, SynthClass::Rings], 12, 16, 6, 29)
            .unwrap();
        let cfg = mini_cfg();
        let (clean, _) = oneclass_eval(&ds, 0, &cfg).unwrap();
        let specs = [
            CorruptionSpec { kind: CorruptionKind::Brightness, severity: 0 },
            CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: 3 },
        ];
        let report = corrupted_eval(&ds, 0, &specs, &cfg).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].1, clean, "severity 0 must reproduce the clean AUROC");
        assert_eq!(report.rows[0].0, "brightness@0");
        assert_eq!(report.rows[1].0, "gaussian_noise@3");
    }

    #[test]
    fn corrupted_grid_shape_and_reductions() {
        let ds = synth_dataset(&[SynthClass::OrientedBars, SynthClass::Rings], 12, 16, 6, 31)
            .unwrap();
        let specs = [
            CorruptionSpec { kind: CorruptionKind::Brightness, severity: 0 },
            CorruptionSpec { kind: CorruptionKind::Brightness, severity: 2 },
        ];
        let grid = corrupted_protocol(&ds, &specs, &mini_cfg()).unwrap();
        assert_eq!(grid.classes, vec![0, 1]);
        assert_eq!(grid.tags.len(), 2);
        assert_eq!(grid.auroc.len(), 2);
        assert!(grid.auroc.iter().all(|row| row.len() == 2));
        let by_corr = grid.mean_by_corruption();
        assert!((by_corr[0] - (grid.auroc[0][0] + grid.auroc[1][0]) / 2.0).abs() < 1e-6);
        let by_class = grid.mean_by_class();
        assert!((by_class[1] - (grid.auroc[1][0] + grid.auroc[1][1]) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn multiclass_unlabeled_ignores_label_permutation() {
        let mut ds =
            synth_dataset(&[SynthClass::OrientedBars, SynthClass::Checker], 12, 12, 6, 37)
                .unwrap();
        let outliers = gen_synth(&SynthSpec {
            classes: vec![SynthClass::Blobs],
            side: 12,
            n_per_class: 8,
            seed: 41,
        })
        .unwrap();
        let sets = vec![("blobs".to_string(), outliers)];
        let a = multiclass_eval(&ds, &sets, MulticlassMode::Unlabeled, &mini_cfg()).unwrap();
        // Scramble the training labels; the unlabeled path must not care.
        for (i, x) in ds.train.iter_mut().enumerate() {
            x.label = Some(((i * 7) % 2) as u32);
        }
        let b = multiclass_eval(&ds, &sets, MulticlassMode::Unlabeled, &mini_cfg()).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.protocol, "multiclass-unlabeled");
    }

    #[test]
    fn multiclass_labeled_needs_matching_head() {
        let ds = synth_dataset(&[SynthClass::OrientedBars, SynthClass::Checker], 12, 12, 6, 43)
            .unwrap();
        let outliers = gen_synth(&SynthSpec {
            classes: vec![SynthClass::Blobs],
            side: 12,
            n_per_class: 8,
            seed: 47,
        })
        .unwrap();
        let sets = vec![("blobs".to_string(), outliers)];
        // Binary head in labeled mode is rejected, as is the wrong K.
        assert!(multiclass_eval(&ds, &sets, MulticlassMode::Labeled, &mini_cfg()).is_err());
        let mut bad = mini_cfg();
        bad.model.head = HeadKind::NClass(5);
        assert!(multiclass_eval(&ds, &sets, MulticlassMode::Labeled, &bad).is_err());
        let mut good = mini_cfg();
        good.model.head = HeadKind::NClass(2);
        let report = multiclass_eval(&ds, &sets, MulticlassMode::Labeled, &good).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert!((0.0..=1.0).contains(&report.rows[0].1));
        // Unlabeled mode with an n-class head is likewise rejected.
        assert!(multiclass_eval(&ds, &sets, MulticlassMode::Unlabeled, &good).is_err());
    }
}
