//! Inference-time anomaly scores: nearest-neighbor cosine similarity
//! against a bank of training embeddings, the binary head's inlier
//! probability, and their calibrated sum. Every score here shares one
//! orientation: higher means more inlier-like.

use crate::augment::ImageSample;
use crate::autoaugood::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::network::{HeadKind, Model};
use std::io::Write;
use std::path::Path;

const EMBED_CHUNK: usize = 128;

/// Unit-norm projection embeddings of the training inliers.
#[derive(Debug, Clone)]
pub struct TrainBank {
    emb: EmbeddingMatrix,
}

impl TrainBank {
    /// Embeds the full training set through the model's projection head.
    pub fn build(model: &Model, trainset: &[ImageSample]) -> Result<TrainBank> {
        if trainset.is_empty() {
            return Err(Error::InvalidArgument("train bank needs at least one sample".into()));
        }
        let rows = project_images(model, trainset)?;
        let d = model.config.proj_dim;
        Ok(TrainBank { emb: EmbeddingMatrix::new(trainset.len() as u32, d, rows)? })
    }

    /// Wraps precomputed embeddings; every row must already be unit norm.
    pub fn from_embeddings(emb: EmbeddingMatrix) -> Result<TrainBank> {
        if emb.n == 0 {
            return Err(Error::InvalidArgument("train bank needs at least one row".into()));
        }
        for i in 0..emb.n as usize {
            let norm: f64 = emb.row(i).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidArgument(format!(
                    "bank row {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(TrainBank { emb })
    }

    pub fn len(&self) -> usize {
        self.emb.n as usize
    }

    pub fn is_empty(&self) -> bool {
        self.emb.n == 0
    }

    pub fn dim(&self) -> usize {
        self.emb.d as usize
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.emb.write(path)
    }

    pub fn load(path: &Path) -> Result<TrainBank> {
        TrainBank::from_embeddings(EmbeddingMatrix::read(path)?)
    }

    /// Highest cosine similarity between a unit query and any bank row.
    pub fn max_cosine(&self, z: &[f32]) -> Result<f32> {
        if z.len() != self.dim() {
            return Err(Error::Shape(format!(
                "query dim {} vs bank dim {}",
                z.len(),
                self.dim()
            )));
        }
        let mut best = f64::NEG_INFINITY;
        for i in 0..self.len() {
            let dot: f64 = self
                .emb
                .row(i)
                .iter()
                .zip(z)
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
            best = best.max(dot);
        }
        Ok(best as f32)
    }
}

/// Training-set statistics that put the two score components on one scale:
/// the binary scores are divided by their training mean and the similarity
/// part effectively multiplied by the mean embedding norm, folded into the
/// single factor lambda_score = mean_norm / mean_bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreCalibration {
    pub mean_bin: f32,
    pub mean_norm: f32,
    pub lambda_score: f32,
}

impl ScoreCalibration {
    pub fn new(mean_bin: f32, mean_norm: f32) -> Result<ScoreCalibration> {
        if !(mean_bin > 0.0) || !mean_bin.is_finite() || !mean_norm.is_finite() || mean_norm < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "calibration needs mean_bin > 0 and mean_norm >= 0, got {mean_bin} and {mean_norm}"
            )));
        }
        Ok(ScoreCalibration { mean_bin, mean_norm, lambda_score: mean_norm / mean_bin })
    }
}

/// Mean inlier probability and mean pre-normalization embedding norm over
/// the training set. Norms are read before the unit normalization, whose
/// output norms are identically 1.
pub fn calibrate(model: &Model, trainset: &[ImageSample]) -> Result<ScoreCalibration> {
    if trainset.is_empty() {
        return Err(Error::InvalidArgument("calibrate needs a nonempty training set".into()));
    }
    if model.config.head != HeadKind::Binary {
        return Err(Error::Config("calibration needs the binary head".into()));
    }
    let mut sum_bin = 0.0f64;
    let mut sum_norm = 0.0f64;
    for chunk in trainset.chunks(EMBED_CHUNK) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let feats = model.forward_features(&model.pack_batch(&refs)?)?;
        let probs = model.head_probs(&feats)?.to_vec();
        sum_bin += chunk.iter().enumerate().map(|(i, _)| probs[2 * i + 1] as f64).sum::<f64>();
        let raw = model.project_raw(&feats)?.to_vec();
        let d = model.config.proj_dim as usize;
        for row in raw.chunks(d) {
            sum_norm += row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        }
    }
    let n = trainset.len() as f64;
    ScoreCalibration::new((sum_bin / n) as f32, (sum_norm / n) as f32)
}

/// Labeled-setting calibration: the maximum softmax probability stands in
/// for the binary inlier probability, so its training mean takes the place
/// of mean_bin in the balancing factor.
pub fn calibrate_labeled(model: &Model, trainset: &[ImageSample]) -> Result<ScoreCalibration> {
    if trainset.is_empty() {
        return Err(Error::InvalidArgument("calibrate needs a nonempty training set".into()));
    }
    if !matches!(model.config.head, HeadKind::NClass(_)) {
        return Err(Error::Config("labeled calibration needs the n-class head".into()));
    }
    let msp = msp_scores(trainset, model)?;
    let mean_msp = (msp.iter().map(|v| *v as f64).sum::<f64>() / msp.len() as f64) as f32;
    let mut sum_norm = 0.0f64;
    for chunk in trainset.chunks(EMBED_CHUNK) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let raw = model.project_raw(&model.forward_features(&model.pack_batch(&refs)?)?)?.to_vec();
        for row in raw.chunks(model.config.proj_dim as usize) {
            sum_norm += row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        }
    }
    ScoreCalibration::new(mean_msp, (sum_norm / trainset.len() as f64) as f32)
}

fn project_images(model: &Model, images: &[ImageSample]) -> Result<Vec<f32>> {
    let mut rows = Vec::with_capacity(images.len() * model.config.proj_dim as usize);
    for chunk in images.chunks(EMBED_CHUNK) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let z = model.project(&model.forward_features(&model.pack_batch(&refs)?)?)?;
        rows.extend_from_slice(&z.to_vec());
    }
    Ok(rows)
}

/// Nearest-neighbor cosine similarity of each sample against the bank.
pub fn sim_scores(xs: &[ImageSample], model: &Model, bank: &TrainBank) -> Result<Vec<f32>> {
    if bank.is_empty() {
        return Err(Error::InvalidArgument("empty train bank".into()));
    }
    let d = model.config.proj_dim as usize;
    if bank.dim() != d {
        return Err(Error::Shape(format!("bank dim {} vs model proj {}", bank.dim(), d)));
    }
    let rows = project_images(model, xs)?;
    rows.chunks(d).map(|z| bank.max_cosine(z)).collect()
}

pub fn sim_score(x: &ImageSample, model: &Model, bank: &TrainBank) -> Result<f32> {
    Ok(sim_scores(std::slice::from_ref(x), model, bank)?[0])
}

/// Binary head's inlier probability P(y = 1 | x) for each sample.
pub fn bin_scores(xs: &[ImageSample], model: &Model) -> Result<Vec<f32>> {
    if model.config.head != HeadKind::Binary {
        return Err(Error::Config("binary score needs the binary head".into()));
    }
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(EMBED_CHUNK) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let probs = model.head_probs(&model.forward_features(&model.pack_batch(&refs)?)?)?.to_vec();
        out.extend((0..chunk.len()).map(|i| probs[2 * i + 1]));
    }
    Ok(out)
}

pub fn bin_score(x: &ImageSample, model: &Model) -> Result<f32> {
    Ok(bin_scores(std::slice::from_ref(x), model)?[0])
}

/// Maximum softmax probability under the n-class head. The common outlier
/// score 1 - MSP is this value negated up to a constant, so rankings agree.
pub fn msp_scores(xs: &[ImageSample], model: &Model) -> Result<Vec<f32>> {
    let n_classes = match model.config.head {
        HeadKind::NClass(n) => n as usize,
        HeadKind::Binary => {
            return Err(Error::Config("msp score needs the n-class head".into()))
        }
    };
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(EMBED_CHUNK) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let probs = model.head_probs(&model.forward_features(&model.pack_batch(&refs)?)?)?.to_vec();
        for row in probs.chunks(n_classes) {
            out.push(row.iter().fold(f32::NEG_INFINITY, |m, p| m.max(*p)));
        }
    }
    Ok(out)
}

pub fn msp_score(x: &ImageSample, model: &Model) -> Result<f32> {
    Ok(msp_scores(std::slice::from_ref(x), model)?[0])
}

/// sim + lambda_score * bin; strictly increasing in both components.
pub fn combine(sim: f32, bin: f32, cal: &ScoreCalibration) -> f32 {
    sim + cal.lambda_score * bin
}

pub fn combined_score(
    x: &ImageSample,
    model: &Model,
    bank: &TrainBank,
    cal: &ScoreCalibration,
) -> Result<f32> {
    Ok(combine(sim_score(x, model, bank)?, bin_score(x, model)?, cal))
}

/// Combined scores for a whole set, dispatching the probability component
/// on the head: binary inlier probability, or MSP for the n-class head.
pub fn combined_scores(
    xs: &[ImageSample],
    model: &Model,
    bank: &TrainBank,
    cal: &ScoreCalibration,
) -> Result<Vec<f32>> {
    let sims = sim_scores(xs, model, bank)?;
    let probs = match model.config.head {
        HeadKind::Binary => bin_scores(xs, model)?,
        HeadKind::NClass(_) => msp_scores(xs, model)?,
    };
    Ok(sims.iter().zip(&probs).map(|(s, p)| combine(*s, *p, cal)).collect())
}

/// One scored sample, as exported to CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub sample_id: usize,
    pub label: Option<u32>,
    pub sim: f32,
    pub bin: f32,
    pub combined: f32,
}

/// Scores a whole set with ids 0..n in input order.
pub fn score_set(
    xs: &[ImageSample],
    model: &Model,
    bank: &TrainBank,
    cal: &ScoreCalibration,
) -> Result<Vec<ScoreRow>> {
    let sims = sim_scores(xs, model, bank)?;
    let bins = bin_scores(xs, model)?;
    Ok(xs
        .iter()
        .enumerate()
        .map(|(i, x)| ScoreRow {
            sample_id: i,
            label: x.label,
            sim: sims[i],
            bin: bins[i],
            combined: combine(sims[i], bins[i], cal),
        })
        .collect())
}

pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "sample_id,label,sim,bin,combined")?;
    for r in rows {
        let label = r.label.map(|l| l.to_string()).unwrap_or_default();
        writeln!(f, "{},{},{},{},{}", r.sample_id, label, r.sim, r.bin, r.combined)?;
    }
    Ok(())
}
