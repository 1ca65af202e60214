//! Automatic hard-augmentation selection. Inlier images and each
//! augmented copy of the set are embedded, projected jointly to one
//! dimension with exact t-SNE, turned into shared-bin histogram densities,
//! and scored by symmetric KL divergence against the inlier density. The
//! softmax of those scores weights how compositions of hard augmentations
//! are sampled during training.
//!
//! Everything here is deterministic: distances and kernels are rational
//! arithmetic, and the only transcendental calls go through the crate's
//! own exp/ln.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::augment::{hard_augment, HardAugKind, ImageSample};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::numcore::special::{det_exp, det_ln};
use crate::numcore::Rng;

pub const DENSITY_BINS: usize = 64;
pub const DENSITY_EPS: f32 = 1e-6;

const EMB_MAGIC: &[u8; 8] = b"UNODEEMB";
const EMB_VERSION: u32 = 1;

/// Row-major (n, d) embedding block; rows must be finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub n: u32,
    pub d: u32,
    pub values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(n: u32, d: u32, values: Vec<f32>) -> Result<Self> {
        if (n * d) as usize != values.len() {
            return Err(Error::Shape(format!(
                "embedding matrix {n}x{d} needs {} values, got {}",
                n * d,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding matrix contains NaN or Inf".into()));
        }
        Ok(EmbeddingMatrix { n, d, values })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.d as usize;
        &self.values[i * d..(i + 1) * d]
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.values.len() * 4);
        buf.extend_from_slice(EMB_MAGIC);
        buf.extend_from_slice(&EMB_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.n.to_le_bytes());
        buf.extend_from_slice(&self.d.to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<EmbeddingMatrix> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 20 || &bytes[..8] != EMB_MAGIC {
            return Err(Error::Parse("not an embedding file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != EMB_VERSION {
            return Err(Error::Parse(format!("unsupported embedding file version {version}")));
        }
        let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let d = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
        let want = 20 + (n as usize) * (d as usize) * 4;
        if bytes.len() != want {
            return Err(Error::Parse(format!(
                "embedding file payload is {} bytes, want {}",
                bytes.len(),
                want
            )));
        }
        let values = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        EmbeddingMatrix::new(n, d, values)
    }
}

/// Feature extractor used to turn images into embedding rows.
pub enum Extractor<'a> {
    /// Raw pixels as the feature vector.
    Flatten,
    /// The model's encoder features.
    Encoder(&'a Model),
    /// Rows loaded from a file; must match the image count.
    Precomputed(&'a EmbeddingMatrix),
}

pub fn embed(images: &[ImageSample], extractor: &Extractor) -> Result<EmbeddingMatrix> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("embed: empty image list".into()));
    }
    match extractor {
        Extractor::Flatten => {
            let d = images[0].pixels.len();
            let mut values = Vec::with_capacity(images.len() * d);
            for img in images {
                if img.pixels.len() != d {
                    return Err(Error::Shape("embed: images have mixed shapes".into()));
                }
                values.extend_from_slice(&img.pixels);
            }
            EmbeddingMatrix::new(images.len() as u32, d as u32, values)
        }
        Extractor::Encoder(model) => {
            let d = model.config.feat_dim as usize;
            let mut values = Vec::with_capacity(images.len() * d);
            for chunk in images.chunks(64) {
                let refs: Vec<&ImageSample> = chunk.iter().collect();
                let batch = model.pack_batch(&refs)?;
                let feats = model.forward_features(&batch)?;
                values.extend_from_slice(&feats.to_vec());
            }
            EmbeddingMatrix::new(images.len() as u32, d as u32, values)
        }
        Extractor::Precomputed(m) => {
            if m.n as usize != images.len() {
                return Err(Error::Shape(format!(
                    "precomputed embeddings have {} rows for {} images",
                    m.n,
                    images.len()
                )));
            }
            Ok((*m).clone())
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TsneParams {
    /// Auto-reduced to (n-1)/3 when larger than that.
    pub perplexity: f32,
    pub iters: u32,
    pub lr: f32,
    /// Multiplies attractive affinities for the first 100 iterations.
    pub early_exaggeration: f32,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams { perplexity: 30.0, iters: 500, lr: 100.0, early_exaggeration: 12.0, seed: 0 }
    }
}

/// Exact O(n^2) 1-D t-SNE. Returns one coordinate per input row.
pub fn tsne1(joint: &EmbeddingMatrix, params: &TsneParams) -> Result<Vec<f32>> {
    Ok(tsne1_traced(joint, params)?.0)
}

/// As `tsne1`, also returning the per-iteration KL objective (always the
/// plain, unexaggerated objective). The final 100 iterations use monotone
/// backtracking descent, so that stretch of the trace never increases.
pub fn tsne1_traced(joint: &EmbeddingMatrix, params: &TsneParams) -> Result<(Vec<f32>, Vec<f64>)> {
    let n = joint.n as usize;
    if n < 8 {
        return Err(Error::InvalidArgument(format!("t-SNE needs at least 8 rows, got {n}")));
    }
    if params.iters == 0 || params.lr <= 0.0 || params.early_exaggeration < 1.0 {
        return Err(Error::InvalidArgument("t-SNE: iters, lr, exaggeration must be positive".into()));
    }
    let perp = (params.perplexity as f64).min((n as f64 - 1.0) / 3.0);
    if !(2.0..n as f64).contains(&perp) {
        return Err(Error::InvalidArgument(format!("infeasible perplexity {perp} for n={n}")));
    }

    let p = joint_affinities(joint, perp);

    // Constant parts of KL(P || Q): sum of P ln P and the total mass.
    let mut c_plnp = 0.0f64;
    let mut s_p = 0.0f64;
    for &v in &p {
        if v > 0.0 {
            c_plnp += v * det_ln(v);
            s_p += v;
        }
    }

    let mut rng = Rng::with_stream(params.seed, 0x74736e65);
    let mut y: Vec<f64> = (0..n).map(|_| rng.normal_f64() * 1e-2).collect();
    let iters = params.iters as usize;
    let exag_end = iters.min(100);
    let mut trace = Vec::with_capacity(iters);

    // Backtracking line search throughout: each iteration accepts a step
    // only if the phase objective (exaggerated first, then the true KL plus
    // a constant) does not increase, halving on rejection and growing the
    // step on success. The recorded trace is always the plain KL; once
    // exaggeration is off the acceptance rule makes it nonincreasing.
    let mut step = params.lr as f64;
    let (mut z, mut pls) = objective_stats(&y, &p);
    for it in 0..iters {
        // The exaggerated objective is minimized by a fully collapsed
        // embedding, and strict descent can actually reach it, stranding
        // the main phase at a zero-gradient point. Redraw on degeneracy.
        if it == exag_end && it > 0 {
            let mean = y.iter().sum::<f64>() / n as f64;
            let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            if sd < 1e-4 {
                y = (0..n).map(|_| rng.normal_f64() * 1e-2).collect();
                step = params.lr as f64;
                let stats = objective_stats(&y, &p);
                z = stats.0;
                pls = stats.1;
            }
        }
        let exag = if it < exag_end { params.early_exaggeration as f64 } else { 1.0 };
        let grad = gradient(&y, &p, exag, z);
        let cur = exag * pls + s_p * det_ln(z);
        let mut recorded = c_plnp + pls + s_p * det_ln(z);
        for _ in 0..40 {
            let cand: Vec<f64> = y.iter().zip(&grad).map(|(v, g)| v - step * g).collect();
            let (cz, cpls) = objective_stats(&cand, &p);
            let cobj = exag * cpls + s_p * det_ln(cz);
            if cobj <= cur {
                y = cand;
                z = cz;
                pls = cpls;
                recorded = c_plnp + cpls + s_p * det_ln(cz);
                step *= 1.1;
                break;
            }
            step *= 0.5;
        }
        trace.push(recorded);
    }

    Ok((y.iter().map(|v| *v as f32).collect(), trace))
}

/// Symmetrized, normalized input affinities with per-row bandwidths chosen
/// by binary search so each conditional row has entropy ln(perplexity).
fn joint_affinities(m: &EmbeddingMatrix, perp: f64) -> Vec<f64> {
    let n = m.n as usize;
    let d = m.d as usize;
    let mut d2 = vec![0.0f64; n * n];
    for i in 0..n {
        let ri = m.row(i);
        for j in i + 1..n {
            let rj = m.row(j);
            let mut acc = 0.0f64;
            for k in 0..d {
                let diff = ri[k] as f64 - rj[k] as f64;
                acc += diff * diff;
            }
            d2[i * n + j] = acc;
            d2[j * n + i] = acc;
        }
    }

    let target = det_ln(perp);
    let mut cond = vec![0.0f64; n * n];
    let mut w = vec![0.0f64; n];
    for i in 0..n {
        let row = &d2[i * n..(i + 1) * n];
        let mut beta = 1.0f64;
        let mut lo = 0.0f64;
        let mut hi = f64::INFINITY;
        for _ in 0..50 {
            let (sum, sum_d) = row_kernel(row, i, beta, &mut w);
            let h = if sum > 0.0 { det_ln(sum) + beta * sum_d / sum } else { 0.0 };
            let diff = h - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (lo + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (lo + hi);
            }
        }
        let (sum, _) = row_kernel(row, i, beta, &mut w);
        if sum > 0.0 {
            for j in 0..n {
                cond[i * n + j] = w[j] / sum;
            }
        } else {
            // All other rows are at effectively infinite distance; fall
            // back to a uniform conditional.
            for j in 0..n {
                cond[i * n + j] = if j == i { 0.0 } else { 1.0 / (n as f64 - 1.0) };
            }
        }
    }

    let mut p = vec![0.0f64; n * n];
    let two_n = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / two_n).max(1e-12);
        }
    }
    p
}

fn row_kernel(row: &[f64], skip: usize, beta: f64, w: &mut [f64]) -> (f64, f64) {
    let mut sum = 0.0f64;
    let mut sum_d = 0.0f64;
    for j in 0..row.len() {
        if j == skip {
            w[j] = 0.0;
            continue;
        }
        let v = det_exp(-beta * row[j]);
        w[j] = v;
        sum += v;
        sum_d += v * row[j];
    }
    (sum, sum_d)
}

/// Total Student-t kernel mass over ordered pairs, and the attraction
/// accumulator sum over ordered pairs of P ln(1 + d^2).
fn objective_stats(y: &[f64], p: &[f64]) -> (f64, f64) {
    let n = y.len();
    let mut z = 0.0f64;
    let mut pls = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            let diff = y[i] - y[j];
            let s = 1.0 + diff * diff;
            z += 1.0 / s;
            pls += 2.0 * p[i * n + j] * det_ln(s);
        }
    }
    (2.0 * z, pls)
}

/// Gradient of the exaggerated objective exag*pls + ln Z.
fn gradient(y: &[f64], p: &[f64], exag: f64, z: f64) -> Vec<f64> {
    let n = y.len();
    let mut grad = vec![0.0f64; n];
    for i in 0..n {
        for j in i + 1..n {
            let diff = y[i] - y[j];
            let q = 1.0 / (1.0 + diff * diff);
            let g = 4.0 * (exag * p[i * n + j] * q - q * q / z) * diff;
            grad[i] += g;
            grad[j] -= g;
        }
    }
    grad
}

/// Histogram density over shared edges, epsilon-smoothed.
#[derive(Debug, Clone, PartialEq)]
pub struct Density {
    pub bin_edges: Vec<f32>,
    pub probs: Vec<f32>,
}

/// Equal-width edges spanning the min and max of `coords` (`bins + 1`
/// entries). A degenerate span is widened by half a unit on each side.
pub fn shared_edges(coords: &[f32], bins: usize) -> Result<Vec<f32>> {
    if coords.is_empty() || bins < 2 {
        return Err(Error::InvalidArgument("shared_edges: need coords and at least 2 bins".into()));
    }
    if coords.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("shared_edges: non-finite coordinate".into()));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &c in coords {
        lo = lo.min(c);
        hi = hi.max(c);
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    Ok((0..=bins)
        .map(|b| lo + (hi - lo) * b as f32 / bins as f32)
        .collect())
}

/// Histogram of `coords` over `edges`, normalized then smoothed as
/// (p + eps) / (1 + B*eps). Out-of-range coordinates land in the end bins.
pub fn density(coords: &[f32], edges: &[f32], eps: f32) -> Result<Density> {
    if coords.is_empty() {
        return Err(Error::InvalidArgument("density: empty coordinate list".into()));
    }
    if edges.len() < 3 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "density: edges must be strictly increasing with at least 2 bins".into(),
        ));
    }
    if eps < 0.0 {
        return Err(Error::InvalidArgument("density: eps must be nonnegative".into()));
    }
    let bins = edges.len() - 1;
    let mut counts = vec![0u64; bins];
    for &c in coords {
        let idx = edges.partition_point(|e| *e <= c);
        let b = idx.saturating_sub(1).min(bins - 1);
        counts[b] += 1;
    }
    let n = coords.len() as f64;
    let denom = 1.0 + bins as f64 * eps as f64;
    let probs = counts
        .iter()
        .map(|c| ((*c as f64 / n + eps as f64) / denom) as f32)
        .collect();
    Ok(Density { bin_edges: edges.to_vec(), probs })
}

/// KL(p || q) in nats over shared bins.
pub fn kl_div(p: &Density, q: &Density) -> Result<f32> {
    if p.bin_edges != q.bin_edges {
        return Err(Error::InvalidArgument("kl_div: densities use different bin edges".into()));
    }
    let mut acc = 0.0f64;
    for (a, b) in p.probs.iter().zip(&q.probs) {
        if *a <= 0.0 {
            continue;
        }
        if *b <= 0.0 {
            return Err(Error::Numeric("kl_div: q has a zero bin where p > 0".into()));
        }
        acc += *a as f64 * det_ln(*a as f64 / *b as f64);
    }
    Ok(acc as f32)
}

/// Symmetrized KL: KL(p||q) + KL(q||p).
pub fn j_div(p: &Density, q: &Density) -> Result<f32> {
    Ok(kl_div(p, q)? + kl_div(q, p)?)
}

/// Per-augmentation divergence scores and their softmax weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AugWeightTable {
    pub kinds: Vec<HardAugKind>,
    pub j_scores: Vec<f32>,
    pub weights: Vec<f32>,
}

impl AugWeightTable {
    pub fn uniform(kinds: &[HardAugKind]) -> Result<AugWeightTable> {
        aug_weights(kinds, &vec![0.0; kinds.len()])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("kind,j_score,weight\n");
        for i in 0..self.kinds.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.kinds[i].name(),
                self.j_scores[i],
                self.weights[i]
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<AugWeightTable> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some("kind,j_score,weight") {
            return Err(Error::Parse("weight table: missing or wrong header".into()));
        }
        let mut kinds = Vec::new();
        let mut j_scores = Vec::new();
        let mut weights = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Parse(format!("weight table line {}: want 3 fields", ln + 2)));
            }
            kinds.push(HardAugKind::parse(parts[0])?);
            j_scores.push(parts[1].parse::<f32>().map_err(|e| Error::Parse(e.to_string()))?);
            weights.push(parts[2].parse::<f32>().map_err(|e| Error::Parse(e.to_string()))?);
        }
        if kinds.is_empty() {
            return Err(Error::Parse("weight table: no rows".into()));
        }
        Ok(AugWeightTable { kinds, j_scores, weights })
    }
}

/// Softmax of the divergence scores (temperature 1).
pub fn aug_weights(kinds: &[HardAugKind], j_scores: &[f32]) -> Result<AugWeightTable> {
    if kinds.is_empty() || kinds.len() != j_scores.len() {
        return Err(Error::InvalidArgument(
            "aug_weights: kinds and scores must be nonempty and equal length".into(),
        ));
    }
    if j_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("aug_weights: non-finite score".into()));
    }
    let max = j_scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = j_scores.iter().map(|s| det_exp(*s as f64 - max)).collect();
    let total: f64 = exps.iter().sum();
    Ok(AugWeightTable {
        kinds: kinds.to_vec(),
        j_scores: j_scores.to_vec(),
        weights: exps.iter().map(|e| (e / total) as f32).collect(),
    })
}

/// An ordered draw of distinct augmentation kinds; composition notation,
/// so the last listed kind is applied first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Composition {
    pub kinds: Vec<HardAugKind>,
}

/// Draws r ~ U{1..r_max} then r kinds sequentially without replacement,
/// each step proportional to the remaining weights.
pub fn sample_composition(table: &AugWeightTable, rng: &mut Rng, r_max: u32) -> Result<Composition> {
    let m = table.kinds.len();
    if r_max == 0 || r_max as usize > m {
        return Err(Error::InvalidArgument(format!(
            "composition length bound {r_max} outside 1..={m}"
        )));
    }
    let r = 1 + rng.range(r_max as u64) as usize;
    let mut remaining: Vec<usize> = (0..m).collect();
    let mut kinds = Vec::with_capacity(r);
    for _ in 0..r {
        let total: f64 = remaining.iter().map(|&k| table.weights[k] as f64).sum();
        let pos = if total <= 0.0 {
            rng.range(remaining.len() as u64) as usize
        } else {
            let u = rng.next_f64() * total;
            let mut acc = 0.0f64;
            let mut pos = remaining.len() - 1;
            for (idx, &k) in remaining.iter().enumerate() {
                acc += table.weights[k] as f64;
                if u < acc {
                    pos = idx;
                    break;
                }
            }
            pos
        };
        kinds.push(table.kinds[remaining.remove(pos)]);
    }
    Ok(Composition { kinds })
}

/// Applies a composition right-to-left to every sample. MixUp partners are
/// drawn from the batch's previous stage; a single-sample batch cannot
/// satisfy MixUp and errors.
pub fn apply_composition(
    batch: &[ImageSample],
    comp: &Composition,
    rng: &mut Rng,
) -> Result<Vec<ImageSample>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("apply_composition: empty batch".into()));
    }
    let mut cur: Vec<ImageSample> = batch.to_vec();
    for kind in comp.kinds.iter().rev() {
        let prev = cur;
        let mut next = Vec::with_capacity(prev.len());
        for i in 0..prev.len() {
            let partner = if *kind == HardAugKind::MixUp && prev.len() >= 2 {
                let mut j = rng.range(prev.len() as u64 - 1) as usize;
                if j >= i {
                    j += 1;
                }
                Some(&prev[j])
            } else {
                None
            };
            next.push(hard_augment(&prev[i], *kind, rng, partner)?);
        }
        cur = next;
    }
    Ok(cur)
}

/// Samples one composition for the whole batch and applies it.
pub fn gamma_apply(
    batch: &[ImageSample],
    table: &AugWeightTable,
    rng: &mut Rng,
    r_max: u32,
) -> Result<Vec<ImageSample>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("gamma_apply: empty batch".into()));
    }
    let comp = sample_composition(table, rng, r_max)?;
    apply_composition(batch, &comp, rng)
}

/// Core of the selector: joint t-SNE over inlier plus per-kind embedding
/// sets, shared-edge densities, J scores, softmax weights.
pub fn weight_table_from_embeddings(
    inlier: &EmbeddingMatrix,
    augmented: &[(HardAugKind, EmbeddingMatrix)],
    params: &TsneParams,
    bins: usize,
) -> Result<AugWeightTable> {
    if augmented.is_empty() {
        return Err(Error::InvalidArgument("selection needs at least one augmentation set".into()));
    }
    let d = inlier.d;
    let mut n_total = inlier.n as usize;
    for (kind, m) in augmented {
        if m.d != d {
            return Err(Error::Shape(format!(
                "augmented set {} has dim {} but inliers have {}",
                kind.name(),
                m.d,
                d
            )));
        }
        n_total += m.n as usize;
    }
    let mut values = Vec::with_capacity(n_total * d as usize);
    values.extend_from_slice(&inlier.values);
    for (_, m) in augmented {
        values.extend_from_slice(&m.values);
    }
    let joint = EmbeddingMatrix::new(n_total as u32, d, values)?;
    let coords = tsne1(&joint, params)?;

    let edges = shared_edges(&coords, bins)?;
    let n0 = inlier.n as usize;
    let p_in = density(&coords[..n0], &edges, DENSITY_EPS)?;
    let mut kinds = Vec::with_capacity(augmented.len());
    let mut scores = Vec::with_capacity(augmented.len());
    let mut offset = n0;
    for (kind, m) in augmented {
        let slice = &coords[offset..offset + m.n as usize];
        offset += m.n as usize;
        let q = density(slice, &edges, DENSITY_EPS)?;
        kinds.push(*kind);
        scores.push(j_div(&p_in, &q)?);
    }
    aug_weights(&kinds, &scores)
}

/// Full selector from images: build each single-augmentation copy of the
/// inlier set, embed everything, and weight the kinds. Runs once before
/// training.
pub fn run_selection(
    inliers: &[ImageSample],
    kinds: &[HardAugKind],
    extractor: &Extractor,
    params: &TsneParams,
    bins: usize,
    seed: u64,
) -> Result<AugWeightTable> {
    if inliers.is_empty() {
        return Err(Error::InvalidArgument("selection: empty inlier set".into()));
    }
    if kinds.is_empty() {
        return Err(Error::InvalidArgument("selection: empty augmentation list".into()));
    }
    if matches!(extractor, Extractor::Precomputed(_)) {
        return Err(Error::InvalidArgument(
            "selection must be able to embed augmented images; use flatten or encoder".into(),
        ));
    }
    let h0 = embed(inliers, extractor)?;
    let n = inliers.len();
    let mut augmented = Vec::with_capacity(kinds.len());
    for (k, kind) in kinds.iter().enumerate() {
        let mut rng = Rng::with_stream(seed, 0x73656c).fork(k as u64);
        let mut set = Vec::with_capacity(n);
        for i in 0..n {
            let partner = if *kind == HardAugKind::MixUp && n >= 2 {
                let mut j = rng.range(n as u64 - 1) as usize;
                if j >= i {
                    j += 1;
                }
                Some(&inliers[j])
            } else {
                None
            };
            set.push(hard_augment(&inliers[i], *kind, &mut rng, partner)?);
        }
        augmented.push((*kind, embed(&set, extractor)?));
    }
    weight_table_from_embeddings(&h0, &augmented, params, bins)
}
