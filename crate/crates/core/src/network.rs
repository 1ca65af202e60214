//! The model: a small encoder (conv or MLP), a 2-layer projection head with
//! unit-normalized output, and a classification head (binary or n-class).
//! Includes deterministic initialization and checkpoint persistence.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::augment::ImageSample;
use crate::error::{Error, Result};
use crate::numcore::tensor::{log_softmax_rows, normalize_rows};
use crate::numcore::{Rng, Tensor};

const CKPT_MAGIC: &[u8; 8] = b"UNODECKP";
const CKPT_VERSION: u32 = 1;
/// Training step travels inside the tensor table under this reserved name.
const STEP_TENSOR: &str = "__step__";
/// Optimizer momentum buffers are stored as `__vel__<parameter name>`.
const VEL_PREFIX: &str = "__vel__";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Three stride-2 conv blocks (16, 32, feat_dim channels, bias-free)
    /// with ReLU, then global average pooling.
    Conv,
    /// Flatten, then two ReLU linear layers (hidden 128).
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Two logits; index 1 is the inlier class.
    Binary,
    NClass(u32),
}

impl HeadKind {
    pub fn out_dim(&self) -> usize {
        match self {
            HeadKind::Binary => 2,
            HeadKind::NClass(n) => *n as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: u32,
    pub height: u32,
    pub width: u32,
    pub encoder: EncoderKind,
    pub feat_dim: u32,
    pub proj_dim: u32,
    pub head: HeadKind,
}

impl ModelConfig {
    pub fn conv(in_channels: u32, height: u32, width: u32) -> Self {
        ModelConfig {
            in_channels,
            height,
            width,
            encoder: EncoderKind::Conv,
            feat_dim: 64,
            proj_dim: 128,
            head: HeadKind::Binary,
        }
    }

    pub fn mlp(in_channels: u32, height: u32, width: u32) -> Self {
        ModelConfig { encoder: EncoderKind::Mlp, ..Self::conv(in_channels, height, width) }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.height,
            self.width,
            self.feat_dim,
            self.proj_dim,
            self.head.out_dim() as u32,
        ];
        if dims.iter().any(|d| *d == 0) {
            return Err(Error::Config("model config has a zero dimension".into()));
        }
        Ok(())
    }

    pub fn input_numel(&self) -> usize {
        (self.in_channels * self.height * self.width) as usize
    }

    /// FNV-1a over a canonical rendering; stored in checkpoints so a file
    /// cannot be loaded into a differently shaped model.
    pub fn digest(&self) -> u64 {
        let enc = match self.encoder {
            EncoderKind::Conv => "conv".to_string(),
            EncoderKind::Mlp => "mlp".to_string(),
        };
        let head = match self.head {
            HeadKind::Binary => "binary".to_string(),
            HeadKind::NClass(n) => format!("nclass{n}"),
        };
        let canon = format!(
            "{};{};{};{};{};{};{}",
            enc, self.in_channels, self.height, self.width, self.feat_dim, self.proj_dim, head
        );
        let mut h: u64 = 0xcbf29ce484222325;
        for b in canon.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

pub struct Model {
    pub config: ModelConfig,
    /// Declaration order is the checkpoint and optimizer order.
    params: Vec<(String, Tensor)>,
    pub step: u64,
}

const MLP_HIDDEN: usize = 128;

/// Fan-in-scaled uniform weights; every tensor draws from its own forked
/// stream so adding a parameter never shifts another one's values.
fn init_weight(shape: Vec<usize>, fan_in: usize, rng: &Rng, stream: u64) -> Tensor {
    let mut r = rng.fork(stream);
    let bound = 1.0 / (fan_in as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.uniform(-bound, bound)).collect();
    Tensor::param(shape, data)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let rng = Rng::with_stream(seed, 0x6d6f64656c);
        let c = config.in_channels as usize;
        let feat = config.feat_dim as usize;
        let proj = config.proj_dim as usize;
        let out = config.head.out_dim();
        let mut params: Vec<(String, Tensor)> = Vec::new();
        let mut stream = 0u64;
        let mut push_w = |name: &str, shape: Vec<usize>, fan_in: usize, params: &mut Vec<(String, Tensor)>| {
            params.push((name.to_string(), init_weight(shape, fan_in, &rng, stream)));
            stream += 1;
        };
        match config.encoder {
            EncoderKind::Conv => {
                push_w("enc.conv1.w", vec![16, c, 3, 3], c * 9, &mut params);
                push_w("enc.conv2.w", vec![32, 16, 3, 3], 16 * 9, &mut params);
                push_w("enc.conv3.w", vec![feat, 32, 3, 3], 32 * 9, &mut params);
            }
            EncoderKind::Mlp => {
                let d = config.input_numel();
                push_w("enc.fc1.w", vec![d, MLP_HIDDEN], d, &mut params);
                params.push(("enc.fc1.b".into(), Tensor::param(vec![MLP_HIDDEN], vec![0.0; MLP_HIDDEN])));
                push_w("enc.fc2.w", vec![MLP_HIDDEN, feat], MLP_HIDDEN, &mut params);
                params.push(("enc.fc2.b".into(), Tensor::param(vec![feat], vec![0.0; feat])));
            }
        }
        push_w("proj.fc1.w", vec![feat, proj], feat, &mut params);
        params.push(("proj.fc1.b".into(), Tensor::param(vec![proj], vec![0.0; proj])));
        push_w("proj.fc2.w", vec![proj, proj], proj, &mut params);
        params.push(("proj.fc2.b".into(), Tensor::param(vec![proj], vec![0.0; proj])));
        push_w("head.w", vec![feat, out], feat, &mut params);
        params.push(("head.b".into(), Tensor::param(vec![out], vec![0.0; out])));
        Ok(Model { config, params, step: 0 })
    }

    pub fn named_params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    fn param(&self, name: &str) -> &Tensor {
        &self.params.iter().find(|(n, _)| n == name).expect("parameter name").1
    }

    /// Stacks images into a (B, C, H, W) input tensor, validating shapes.
    pub fn pack_batch(&self, images: &[&ImageSample]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("pack_batch: empty batch".into()));
        }
        let cfg = &self.config;
        let mut data = Vec::with_capacity(images.len() * cfg.input_numel());
        for img in images {
            if img.channels != cfg.in_channels || img.height != cfg.height || img.width != cfg.width {
                return Err(Error::Shape(format!(
                    "image {}x{}x{} does not match model input {}x{}x{}",
                    img.channels, img.height, img.width, cfg.in_channels, cfg.height, cfg.width
                )));
            }
            data.extend_from_slice(&img.pixels);
        }
        Ok(Tensor::from_vec(
            vec![images.len(), cfg.in_channels as usize, cfg.height as usize, cfg.width as usize],
            data,
        ))
    }

    /// Encoder forward pass: (B, C, H, W) -> (B, feat_dim).
    pub fn forward_features(&self, batch: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let want = [
            cfg.in_channels as usize,
            cfg.height as usize,
            cfg.width as usize,
        ];
        if batch.shape().len() != 4 || batch.shape()[1..] != want {
            return Err(Error::Shape(format!(
                "batch shape {:?} does not match model input {:?}",
                batch.shape(),
                want
            )));
        }
        let b = batch.shape()[0];
        match cfg.encoder {
            EncoderKind::Conv => {
                let h1 = batch.conv2d(self.param("enc.conv1.w"), 2, 1).relu();
                let h2 = h1.conv2d(self.param("enc.conv2.w"), 2, 1).relu();
                let h3 = h2.conv2d(self.param("enc.conv3.w"), 2, 1).relu();
                Ok(h3.gap())
            }
            EncoderKind::Mlp => {
                let flat = batch.reshape(vec![b, cfg.input_numel()]);
                let h1 = flat
                    .matmul(self.param("enc.fc1.w"))
                    .add_bias(self.param("enc.fc1.b"))
                    .relu();
                Ok(h1
                    .matmul(self.param("enc.fc2.w"))
                    .add_bias(self.param("enc.fc2.b"))
                    .relu())
            }
        }
    }

    /// Projection head without the final normalization: (B, feat) ->
    /// (B, proj_dim). Score calibration reads embedding norms from here.
    pub fn project_raw(&self, features: &Tensor) -> Result<Tensor> {
        if features.shape().len() != 2 || features.shape()[1] != self.config.feat_dim as usize {
            return Err(Error::Shape(format!(
                "project: features {:?}, want (B, {})",
                features.shape(),
                self.config.feat_dim
            )));
        }
        let h = features
            .matmul(self.param("proj.fc1.w"))
            .add_bias(self.param("proj.fc1.b"))
            .relu();
        Ok(h.matmul(self.param("proj.fc2.w")).add_bias(self.param("proj.fc2.b")))
    }

    /// Projection head then row normalization: (B, feat) -> unit rows
    /// (B, proj_dim). Zero-norm rows get a 1e-12 denominator floor.
    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        Ok(normalize_rows(&self.project_raw(features)?))
    }

    /// Raw classification logits: (B, feat) -> (B, head_out).
    pub fn head_logits(&self, features: &Tensor) -> Result<Tensor> {
        if features.shape().len() != 2 || features.shape()[1] != self.config.feat_dim as usize {
            return Err(Error::Shape(format!(
                "head_logits: features {:?}, want (B, {})",
                features.shape(),
                self.config.feat_dim
            )));
        }
        Ok(features.matmul(self.param("head.w")).add_bias(self.param("head.b")))
    }

    /// Softmax rows of the head; each row sums to 1.
    pub fn head_probs(&self, features: &Tensor) -> Result<Tensor> {
        Ok(log_softmax_rows(&self.head_logits(features)?).exp())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_train_state(path, &[])
    }

    /// Like [`save`], but also records one optimizer momentum buffer per
    /// parameter (in [`named_params`] order) so a resumed run picks up
    /// exactly where the saved one stopped. Pass an empty slice to store the
    /// model alone.
    ///
    /// [`save`]: Model::save
    /// [`named_params`]: Model::named_params
    pub fn save_train_state(&self, path: &Path, velocities: &[Vec<f32>]) -> Result<()> {
        if !velocities.is_empty() && velocities.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected one momentum buffer per parameter ({}), got {}",
                self.params.len(),
                velocities.len()
            )));
        }
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.config.digest().to_le_bytes());
        let count = (self.params.len() + velocities.len() + 1) as u32;
        buf.extend_from_slice(&count.to_le_bytes());
        let write_tensor = |buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]| {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in &self.params {
            write_tensor(&mut buf, name, t.shape(), &t.data());
        }
        for ((name, t), v) in self.params.iter().zip(velocities) {
            if v.len() != t.numel() {
                return Err(Error::Shape(format!(
                    "momentum buffer for '{name}' has {} values, parameter has {}",
                    v.len(),
                    t.numel()
                )));
            }
            write_tensor(&mut buf, &format!("{VEL_PREFIX}{name}"), t.shape(), v);
        }
        write_tensor(&mut buf, STEP_TENSOR, &[1], &[self.step as f32]);
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Loads a checkpoint written for the same config (digest-checked) and
    /// restores parameters bit-exactly.
    pub fn load(config: ModelConfig, seed: u64, path: &Path) -> Result<Model> {
        Ok(Self::load_train_state(config, seed, path)?.0)
    }

    /// Like [`load`], but also returns the optimizer momentum buffers if the
    /// file carries them (empty when it was written by [`save`]).
    ///
    /// [`load`]: Model::load
    /// [`save`]: Model::save
    pub fn load_train_state(
        config: ModelConfig,
        seed: u64,
        path: &Path,
    ) -> Result<(Model, Vec<Vec<f32>>)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Parse("checkpoint truncated".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        if take(&mut pos, 8)? != CKPT_MAGIC {
            return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut pos)?;
        if version != CKPT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let digest = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        if digest != config.digest() {
            return Err(Error::Config("checkpoint was written for a different model config".into()));
        }
        let count = read_u32(&mut pos)? as usize;
        let mut model = Model::new(config, seed)?;
        let mut seen = vec![false; model.params.len()];
        let mut velocities: Vec<Option<Vec<f32>>> = vec![None; model.params.len()];
        let mut saw_step = false;
        for _ in 0..count {
            let name_len = read_u32(&mut pos)? as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Parse("checkpoint tensor name is not utf-8".into()))?;
            let rank = read_u32(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut pos)? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if name == STEP_TENSOR {
                if shape != [1] {
                    return Err(Error::Parse("malformed step tensor".into()));
                }
                model.step = data[0] as u64;
                saw_step = true;
                continue;
            }
            if let Some(pname) = name.strip_prefix(VEL_PREFIX) {
                let idx = model.params.iter().position(|(n, _)| n == pname).ok_or_else(|| {
                    Error::Parse(format!("momentum buffer for unknown tensor '{pname}'"))
                })?;
                if model.params[idx].1.shape() != shape.as_slice() {
                    return Err(Error::Parse(format!(
                        "momentum buffer for '{pname}' has shape {shape:?}"
                    )));
                }
                velocities[idx] = Some(data);
                continue;
            }
            let idx = model
                .params
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Parse(format!("unknown tensor '{name}' in checkpoint")))?;
            let t = &model.params[idx].1;
            if t.shape() != shape.as_slice() {
                return Err(Error::Parse(format!(
                    "tensor '{name}' shape {:?} does not match model {:?}",
                    shape,
                    t.shape()
                )));
            }
            t.update_data(|d| d.copy_from_slice(&data));
            seen[idx] = true;
        }
        if pos != bytes.len() {
            return Err(Error::Parse("trailing bytes after checkpoint payload".into()));
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Parse(format!("checkpoint missing tensor '{}'", model.params[i].0)));
        }
        if !saw_step {
            return Err(Error::Parse("checkpoint missing step tensor".into()));
        }
        let velocities = if velocities.iter().all(Option::is_none) {
            Vec::new()
        } else if let Some(i) = velocities.iter().position(Option::is_none) {
            return Err(Error::Parse(format!(
                "checkpoint missing momentum buffer for '{}'",
                model.params[i].0
            )));
        } else {
            velocities.into_iter().flatten().collect()
        };
        Ok((model, velocities))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch_for(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let n = b * cfg.input_numel();
        Tensor::from_vec(
            vec![b, cfg.in_channels as usize, cfg.height as usize, cfg.width as usize],
            (0..n).map(|_| rng.next_f32()).collect(),
        )
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::conv(1, 16, 16);
        let a = Model::new(cfg, 7).unwrap();
        let b = Model::new(cfg, 7).unwrap();
        let c = Model::new(cfg, 8).unwrap();
        for ((na, ta), (nb, tb)) in a.named_params().iter().zip(b.named_params()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
        assert_ne!(a.params()[0].to_vec(), c.params()[0].to_vec());
    }

    #[test]
    fn forward_shapes_and_row_duplication() {
        for cfg in [ModelConfig::conv(1, 16, 16), ModelConfig::mlp(1, 16, 16)] {
            let m = Model::new(cfg, 3).unwrap();
            let one = batch_for(&cfg, 1, 5);
            let f = m.forward_features(&one).unwrap();
            assert_eq!(f.shape(), &[1, cfg.feat_dim as usize]);
            // Duplicate the same image twice: output rows must be identical.
            let pix = one.to_vec();
            let two = Tensor::from_vec(
                vec![2, cfg.in_channels as usize, cfg.height as usize, cfg.width as usize],
                [pix.clone(), pix].concat(),
            );
            let f2 = m.forward_features(&two).unwrap();
            let d = cfg.feat_dim as usize;
            let v = f2.to_vec();
            assert_eq!(&v[..d], &v[d..]);
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let m = Model::new(ModelConfig::conv(1, 16, 16), 0).unwrap();
        let bad = Tensor::zeros(vec![2, 1, 8, 8]);
        assert!(m.forward_features(&bad).is_err());
    }

    #[test]
    fn feature_gradients_match_finite_differences() {
        // Mean of all features as a scalar loss; central differences on a
        // few coordinates of every parameter tensor.
        let cfg = ModelConfig { height: 8, width: 8, proj_dim: 16, feat_dim: 8, ..ModelConfig::conv(1, 8, 8) };
        let m = Model::new(cfg, 11).unwrap();
        let x = batch_for(&cfg, 2, 13);
        // Fixed random direction so the projection term has nonzero grads,
        // plus a head term so head parameters participate too.
        let mut rr = Rng::new(41);
        let r = Tensor::from_vec(
            vec![2, cfg.proj_dim as usize],
            (0..2 * cfg.proj_dim as usize).map(|_| rr.uniform(-1.0, 1.0)).collect(),
        );
        let build = |m: &Model| {
            let f = m.forward_features(&x).unwrap();
            let z = m.project(&f).unwrap();
            let l = m.head_logits(&f).unwrap();
            z.mul(&r).sum().add(&l.mul(&l).mean())
        };
        let loss_of = |m: &Model| build(m).value() as f64;
        let loss = build(&m);
        loss.backward().unwrap();
        let h = 1e-3f32;
        let mid = loss_of(&m);
        let mut checked = 0usize;
        for (name, t) in m.named_params() {
            let g = t.grad().expect(name);
            let n = t.numel();
            for k in [0, n / 2, n - 1] {
                let orig = t.to_vec()[k];
                t.update_data(|d| d[k] = orig + h);
                let up = loss_of(&m);
                t.update_data(|d| d[k] = orig - h);
                let dn = loss_of(&m);
                t.update_data(|d| d[k] = orig);
                let fd = (up - dn) / (2.0 * h as f64);
                // A ReLU kink inside the interval shows up as a huge second
                // difference; central differences are meaningless there.
                let curv = (up + dn - 2.0 * mid).abs() / (2.0 * h as f64);
                if curv > 0.25 * fd.abs().max(1.0) {
                    continue;
                }
                let err = (fd - g[k] as f64).abs() / (1.0 + fd.abs());
                assert!(err < 2e-2, "{name}[{k}]: fd {fd} vs grad {}", g[k]);
                checked += 1;
            }
        }
        assert!(checked >= 20, "only {checked} smooth coordinates checked");
    }

    #[test]
    fn projection_rows_are_unit_norm() {
        let cfg = ModelConfig::mlp(1, 8, 8);
        let m = Model::new(cfg, 2).unwrap();
        let f = m.forward_features(&batch_for(&cfg, 5, 9)).unwrap();
        let z = m.project(&f).unwrap();
        let d = cfg.proj_dim as usize;
        let v = z.to_vec();
        for i in 0..5 {
            let norm: f64 = v[i * d..(i + 1) * d].iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "row {i} norm {norm}");
        }
    }

    #[test]
    fn projection_is_scale_invariant_with_zero_biases() {
        // ReLU is positively homogeneous, so with zero biases the whole
        // projection scales linearly and normalization removes the scale.
        let cfg = ModelConfig::mlp(1, 8, 8);
        let m = Model::new(cfg, 4).unwrap();
        m.param("proj.fc1.b").update_data(|d| d.fill(0.0));
        m.param("proj.fc2.b").update_data(|d| d.fill(0.0));
        let f = m.forward_features(&batch_for(&cfg, 3, 17)).unwrap();
        let f2 = Tensor::from_vec(f.shape().to_vec(), f.to_vec().iter().map(|v| 2.0 * v).collect());
        let f1 = Tensor::from_vec(f.shape().to_vec(), f.to_vec());
        let za = m.project(&f1).unwrap().to_vec();
        let zb = m.project(&f2).unwrap().to_vec();
        for (a, b) in za.iter().zip(&zb) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn head_probs_pinned_values() {
        let cfg = ModelConfig::mlp(1, 8, 8);
        let m = Model::new(cfg, 1).unwrap();
        // Zero weights + chosen bias give exact logits for any feature.
        m.param("head.w").update_data(|d| d.fill(0.0));
        let f = m.forward_features(&batch_for(&cfg, 4, 3)).unwrap();

        m.param("head.b").update_data(|d| d.fill(0.0));
        let p = m.head_probs(&f).unwrap().to_vec();
        for v in &p {
            assert!((v - 0.5).abs() < 1e-6, "zero logits give 0.5, got {v}");
        }

        let ln3 = 3.0f32.ln();
        m.param("head.b").update_data(|d| d.copy_from_slice(&[ln3, 0.0]));
        let p = m.head_probs(&f).unwrap().to_vec();
        for row in p.chunks(2) {
            assert!((row[0] - 0.75).abs() < 1e-6 && (row[1] - 0.25).abs() < 1e-6, "{row:?}");
        }
    }

    #[test]
    fn head_prob_rows_sum_to_one() {
        let cfg = ModelConfig { head: HeadKind::NClass(7), ..ModelConfig::mlp(1, 8, 8) };
        let m = Model::new(cfg, 21).unwrap();
        let f = m.forward_features(&batch_for(&cfg, 6, 22)).unwrap();
        let p = m.head_probs(&f).unwrap();
        assert_eq!(p.shape(), &[6, 7]);
        for row in p.to_vec().chunks(7) {
            let s: f64 = row.iter().map(|v| *v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = ModelConfig::conv(1, 16, 16);
        let mut m = Model::new(cfg, 5).unwrap();
        m.step = 1234;
        m.save(&path).unwrap();
        let loaded = Model::load(cfg, 999, &path).unwrap();
        assert_eq!(loaded.step, 1234);
        for ((na, ta), (nb, tb)) in m.named_params().iter().zip(loaded.named_params()) {
            assert_eq!(na, nb);
            let a: Vec<u32> = ta.to_vec().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = tb.to_vec().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{na}");
        }
        let x = batch_for(&cfg, 2, 77);
        assert_eq!(
            m.forward_features(&x).unwrap().to_vec(),
            loaded.forward_features(&x).unwrap().to_vec()
        );
    }

    #[test]
    fn checkpoint_rejects_corruption_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = ModelConfig::conv(1, 16, 16);
        Model::new(cfg, 5).unwrap().save(&path).unwrap();

        let other = ModelConfig { feat_dim: 32, ..cfg };
        assert!(matches!(Model::load(other, 0, &path), Err(Error::Config(_))));

        let bytes = std::fs::read(&path).unwrap();
        let trunc = dir.path().join("trunc.ckpt");
        std::fs::write(&trunc, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Model::load(cfg, 0, &trunc), Err(Error::Parse(_))));

        let mut bad = bytes.clone();
        bad[0] ^= 0xFF;
        let badp = dir.path().join("bad.ckpt");
        std::fs::write(&badp, &bad).unwrap();
        assert!(matches!(Model::load(cfg, 0, &badp), Err(Error::Parse(_))));
    }

    #[test]
    fn pack_batch_validates_shapes() {
        let cfg = ModelConfig::conv(1, 8, 8);
        let m = Model::new(cfg, 0).unwrap();
        let good = ImageSample::zeros(1, 8, 8);
        let bad = ImageSample::zeros(1, 4, 4);
        assert!(m.pack_batch(&[&good, &good]).is_ok());
        assert!(m.pack_batch(&[&good, &bad]).is_err());
        assert!(m.pack_batch(&[]).is_err());
        let t = m.pack_batch(&[&good]).unwrap();
        assert_eq!(t.shape(), &[1, 1, 8, 8]);
    }
}
