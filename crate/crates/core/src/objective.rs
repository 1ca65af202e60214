//! Training objective: contrastive pairs with hard-augmented negatives,
//! the binary rejection cross-entropy, and their weighted sum.

use crate::augment::{weak_augment, ImageSample};
use crate::autoaugood::{gamma_apply, AugWeightTable};
use crate::error::{Error, Result};
use crate::network::{HeadKind, Model};
use crate::numcore::special::{det_exp, det_ln};
use crate::numcore::tensor::log_softmax_rows;
use crate::numcore::{Rng, Tensor};

/// One training step's views. For batch size B:
/// anchors/positives hold the two weak views of each sample, `hard` holds
/// the composed hard augmentation of each sample, and `negatives` holds the
/// two weak views of each hard sample in order [t(g_0), t'(g_0), t(g_1), ..].
/// Anchor i's negative set is the pool minus entries 2i and 2i+1, giving
/// 2(B-1) negatives per anchor.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub anchors: Vec<ImageSample>,
    pub positives: Vec<ImageSample>,
    pub negatives: Vec<ImageSample>,
    pub hard: Vec<ImageSample>,
}

impl ContrastiveBatch {
    pub fn batch_size(&self) -> usize {
        self.anchors.len()
    }

    /// Indices into `negatives` usable for anchor i.
    pub fn negatives_of(&self, i: usize) -> Vec<usize> {
        (0..self.negatives.len()).filter(|j| j / 2 != i).collect()
    }
}

/// Builds the two weak views per sample, the composed hard negatives, and
/// their weak views.
pub fn build_pairs(
    batch: &[ImageSample],
    table: &AugWeightTable,
    rng: &mut Rng,
    r_max: u32,
) -> Result<ContrastiveBatch> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive batch needs at least 2 samples, got {b}"
        )));
    }
    let mut anchors = Vec::with_capacity(b);
    let mut positives = Vec::with_capacity(b);
    for x in batch {
        anchors.push(weak_augment(x, rng)?);
        positives.push(weak_augment(x, rng)?);
    }
    let hard = gamma_apply(batch, table, rng, r_max)?;
    let mut negatives = Vec::with_capacity(2 * b);
    for g in &hard {
        negatives.push(weak_augment(g, rng)?);
        negatives.push(weak_augment(g, rng)?);
    }
    Ok(ContrastiveBatch { anchors, positives, negatives, hard })
}

/// Standalone contrastive loss for one anchor:
/// -(1/|P|) ln( sum_p exp(s_p/tau) / sum_{j in P u N} exp(s_j/tau) )
/// where the s values are the given similarities.
pub fn contrastive_term(pos_sims: &[f32], neg_sims: &[f32], temperature: f32) -> Result<f32> {
    if pos_sims.is_empty() {
        return Err(Error::InvalidArgument("contrastive term needs at least one positive".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let tau = temperature as f64;
    let num: f64 = pos_sims.iter().map(|s| det_exp(*s as f64 / tau)).sum();
    let den: f64 = num + neg_sims.iter().map(|s| det_exp(*s as f64 / tau)).sum::<f64>();
    Ok((-det_ln(num / den) / pos_sims.len() as f64) as f32)
}

/// Differentiable batch contrastive loss:
/// (1/B) sum_i [ l(t_i, {t'_i}, N_i) + l(t'_i, {t_i}, N_i) ].
pub fn batch_contrastive(cb: &ContrastiveBatch, model: &Model, temperature: f32) -> Result<Tensor> {
    let b = cb.batch_size();
    if b < 2 || cb.positives.len() != b || cb.negatives.len() != 2 * b {
        return Err(Error::Shape("malformed contrastive batch".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    // One forward pass over all 4B views, then split the projection rows.
    let mut all: Vec<&ImageSample> = Vec::with_capacity(4 * b);
    all.extend(cb.anchors.iter());
    all.extend(cb.positives.iter());
    all.extend(cb.negatives.iter());
    let feats = model.forward_features(&model.pack_batch(&all)?)?;
    let z = model.project(&feats)?;
    // Row slicing must stay differentiable; pick gathers scalars, not rows,
    // so slice with constant selector matrices instead.
    let sel = |from: usize, count: usize| {
        let mut m = vec![0.0f32; count * 4 * b];
        for r in 0..count {
            m[r * 4 * b + from + r] = 1.0;
        }
        Tensor::from_vec(vec![count, 4 * b], m)
    };
    let z_a = sel(0, b).matmul(&z);
    let z_p = sel(b, b).matmul(&z);
    let z_n = sel(2 * b, 2 * b).matmul(&z);

    let inv_tau = 1.0 / temperature;
    // Positive-pair similarity per anchor: diag(Z_a Z_p^T).
    let pos_exp = z_a.mul(&z_p).rows_sum().scale(inv_tau).exp();
    // Anchor-negative and positive-negative similarity matrices (B, 2B),
    // masked so anchor i never sees its own sample's hard views.
    let mut mask = vec![1.0f32; b * 2 * b];
    for i in 0..b {
        mask[i * 2 * b + 2 * i] = 0.0;
        mask[i * 2 * b + 2 * i + 1] = 0.0;
    }
    let mask = Tensor::from_vec(vec![b, 2 * b], mask);
    let neg_t = z_n.transpose();
    let neg_a = z_a.matmul(&neg_t).scale(inv_tau).exp().mul(&mask).rows_sum();
    let neg_p = z_p.matmul(&neg_t).scale(inv_tau).exp().mul(&mask).rows_sum();

    // l = ln(pos + neg) - ln(pos), both directions.
    let l_a = pos_exp.add(&neg_a).ln().sub(&pos_exp.ln());
    let l_p = pos_exp.add(&neg_p).ln().sub(&pos_exp.ln());
    Ok(l_a.add(&l_p).sum().scale(1.0 / b as f32))
}

/// Binary rejection loss: mean over pairs of
/// -[ln P(y=1 | inlier_i) + ln P(y=0 | negative_i)].
pub fn ce_loss(model: &Model, inliers: &[ImageSample], negatives: &[ImageSample]) -> Result<Tensor> {
    if model.config.head != HeadKind::Binary {
        return Err(Error::Config("binary rejection loss needs the binary head".into()));
    }
    if inliers.is_empty() || inliers.len() != negatives.len() {
        return Err(Error::Shape(format!(
            "paired batches required: {} inliers vs {} negatives",
            inliers.len(),
            negatives.len()
        )));
    }
    let b = inliers.len();
    let mut all: Vec<&ImageSample> = Vec::with_capacity(2 * b);
    all.extend(inliers.iter());
    all.extend(negatives.iter());
    let logits = model.head_logits(&model.forward_features(&model.pack_batch(&all)?)?)?;
    let logp = log_softmax_rows(&logits);
    // Class 1 for the first half (inliers), class 0 for the second.
    let idx: Vec<usize> = (0..2 * b).map(|i| usize::from(i < b)).collect();
    Ok(logp.pick(&idx).sum().scale(-1.0 / b as f32))
}

/// Labeled variant: n-class cross-entropy on inlier labels; negatives get
/// a uniform target over the n classes.
pub fn ce_loss_labeled(
    model: &Model,
    inliers: &[ImageSample],
    labels: &[u32],
    negatives: &[ImageSample],
) -> Result<Tensor> {
    let n_classes = match model.config.head {
        HeadKind::NClass(n) => n as usize,
        HeadKind::Binary => {
            return Err(Error::Config("labeled rejection loss needs the n-class head".into()))
        }
    };
    if inliers.is_empty() || inliers.len() != negatives.len() || labels.len() != inliers.len() {
        return Err(Error::Shape("paired batches and labels required".into()));
    }
    if let Some(bad) = labels.iter().find(|l| **l as usize >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside 0..{n_classes}"
        )));
    }
    let b = inliers.len();
    let mut all: Vec<&ImageSample> = Vec::with_capacity(2 * b);
    all.extend(inliers.iter());
    all.extend(negatives.iter());
    let logits = model.head_logits(&model.forward_features(&model.pack_batch(&all)?)?)?;
    let logp = log_softmax_rows(&logits);
    // Inlier rows: -log p(label). Negative rows: -(1/n) sum_c log p(c),
    // the maximum-entropy rejection target.
    let sel_in = {
        let mut m = vec![0.0f32; b * 2 * b];
        for r in 0..b {
            m[r * 2 * b + r] = 1.0;
        }
        Tensor::from_vec(vec![b, 2 * b], m)
    };
    let sel_out = {
        let mut m = vec![0.0f32; b * 2 * b];
        for r in 0..b {
            m[r * 2 * b + b + r] = 1.0;
        }
        Tensor::from_vec(vec![b, 2 * b], m)
    };
    let idx: Vec<usize> = labels.iter().map(|l| *l as usize).collect();
    let inlier_term = sel_in.matmul(&logp).pick(&idx).sum();
    let neg_term = sel_out.matmul(&logp).rows_sum().sum().scale(1.0 / n_classes as f32);
    Ok(inlier_term.add(&neg_term).scale(-1.0 / b as f32))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel: f64,
}

/// Compares analytic gradients of the full objective against central finite
/// differences at a spread of coordinates in every parameter tensor.
///
/// The activations are piecewise linear, so a probe interval that straddles
/// a kink makes the central difference meaningless. Two step sizes expose
/// this: for smooth coordinates the h and h/2 estimates agree to O(h^2) and
/// Richardson extrapolation cancels that error, while a kink makes them
/// disagree by the induced bias itself, and the coordinate is skipped.
/// Relative error is measured against the parameter's gradient norm
/// (floored at 1) since individual components can be arbitrarily small.
pub fn grad_check(
    model: &Model,
    cb: &ContrastiveBatch,
    lambda_loss: f32,
    temperature: f32,
    coords_per_param: usize,
    tol: f64,
) -> Result<GradCheckReport> {
    if coords_per_param == 0 || tol <= 0.0 {
        return Err(Error::InvalidArgument("grad_check needs coords and a positive tol".into()));
    }
    let (_, loss) = loss_from_pairs(model, cb, lambda_loss, temperature)?;
    loss.backward()?;
    let eval = |m: &Model| -> Result<f64> {
        Ok(loss_from_pairs(m, cb, lambda_loss, temperature)?.1.value() as f64)
    };
    let h = 5e-3f32;
    let mut report = GradCheckReport { checked: 0, skipped: 0, max_rel: 0.0 };
    for (name, t) in model.named_params() {
        let g = t
            .grad()
            .ok_or_else(|| Error::Numeric(format!("no gradient on {name}")))?;
        let scale = g.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt().max(1.0);
        let n = t.numel();
        for c in 0..coords_per_param.min(n) {
            let k = c * n / coords_per_param.min(n);
            let orig = t.to_vec()[k];
            let probe = |delta: f32| -> Result<f64> {
                t.update_data(|d| d[k] = orig + delta);
                let v = eval(model);
                t.update_data(|d| d[k] = orig);
                v
            };
            let fd_h = (probe(h)? - probe(-h)?) / (2.0 * h as f64);
            let fd_h2 = (probe(h / 2.0)? - probe(-h / 2.0)?) / (h as f64);
            if (fd_h - fd_h2).abs() > 0.25 * tol * scale {
                report.skipped += 1;
                continue;
            }
            let fd = (4.0 * fd_h2 - fd_h) / 3.0;
            let rel = (fd - g[k] as f64).abs() / scale;
            report.max_rel = report.max_rel.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub con: f32,
    pub ce: f32,
    pub total: f32,
    pub lambda_loss: f32,
}

/// Full training objective for one batch: contrastive plus lambda times the
/// rejection loss, with the same hard-augmented samples feeding both.
pub fn unode_loss(
    model: &Model,
    batch: &[ImageSample],
    table: &AugWeightTable,
    rng: &mut Rng,
    lambda_loss: f32,
    temperature: f32,
    r_max: u32,
) -> Result<(LossBreakdown, Tensor)> {
    let cb = build_pairs(batch, table, rng, r_max)?;
    loss_from_pairs(model, &cb, lambda_loss, temperature)
}

/// Objective on an already built batch; deterministic in the parameters.
pub fn loss_from_pairs(
    model: &Model,
    cb: &ContrastiveBatch,
    lambda_loss: f32,
    temperature: f32,
) -> Result<(LossBreakdown, Tensor)> {
    let con = batch_contrastive(cb, model, temperature)?;
    let ce = ce_loss(model, &cb.anchors, &cb.hard)?;
    let total = con.add(&ce.scale(lambda_loss));
    let breakdown = LossBreakdown {
        con: con.value(),
        ce: ce.value(),
        total: total.value(),
        lambda_loss,
    };
    Ok((breakdown, total))
}
