//! Image container plus the three augmentation families: weak (training
//! views), hard (semantic shifts used as synthetic outliers), and test-time
//! corruptions at severity 1..5.
//!
//! All pixel math is plain arithmetic or the crate's deterministic
//! elementary functions, so identical (input, kind, seed) gives identical
//! bytes on every platform.

use crate::error::{Error, Result};
use crate::numcore::special::{det_cos, det_sin};
use crate::numcore::Rng;

/// Dense channel-major image with pixels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    /// Row-major per channel: index = (c * height + y) * width + x.
    pub pixels: Vec<f32>,
    pub label: Option<u32>,
}

impl ImageSample {
    pub fn new(channels: u32, height: u32, width: u32, pixels: Vec<f32>, label: Option<u32>) -> Result<Self> {
        if (channels * height * width) as usize != pixels.len() {
            return Err(Error::Shape(format!(
                "image {channels}x{height}x{width} needs {} pixels, got {}",
                channels * height * width,
                pixels.len()
            )));
        }
        Ok(ImageSample { channels, height, width, pixels, label })
    }

    pub fn zeros(channels: u32, height: u32, width: u32) -> Self {
        ImageSample {
            channels,
            height,
            width,
            pixels: vec![0.0; (channels * height * width) as usize],
            label: None,
        }
    }

    #[inline]
    pub fn at(&self, c: u32, y: u32, x: u32) -> f32 {
        self.pixels[((c * self.height + y) * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, c: u32, y: u32, x: u32, v: f32) {
        self.pixels[((c * self.height + y) * self.width + x) as usize] = v;
    }

    /// Bilinear sample of one channel at fractional coordinates, clamped to
    /// the image border.
    fn bilinear(&self, c: u32, fy: f32, fx: f32) -> f32 {
        let h = self.height as i64;
        let w = self.width as i64;
        let clamp = |v: i64, hi: i64| v.clamp(0, hi - 1);
        let y0 = fy.floor() as i64;
        let x0 = fx.floor() as i64;
        let dy = fy - y0 as f32;
        let dx = fx - x0 as f32;
        let p = |y: i64, x: i64| self.at(c, clamp(y, h) as u32, clamp(x, w) as u32);
        let top = p(y0, x0) * (1.0 - dx) + p(y0, x0 + 1) * dx;
        let bot = p(y0 + 1, x0) * (1.0 - dx) + p(y0 + 1, x0 + 1) * dx;
        top * (1.0 - dy) + bot * dy
    }

    fn clamp_unit(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }
}

/// Knobs for the weak view family. Defaults match the training pipeline;
/// the identity configuration (area 1.0, flip 0, brightness 0) reproduces
/// the input exactly.
#[derive(Debug, Clone, Copy)]
pub struct WeakAugConfig {
    /// Crop area range as a fraction of the image, both in (0, 1].
    pub area: (f32, f32),
    pub flip_p: f32,
    /// Brightness jitter half-range.
    pub brightness: f32,
}

impl Default for WeakAugConfig {
    fn default() -> Self {
        WeakAugConfig { area: (0.6, 1.0), flip_p: 0.5, brightness: 0.2 }
    }
}

/// Random crop (resized back), horizontal flip, brightness jitter, clamp.
pub fn weak_augment(img: &ImageSample, rng: &mut Rng) -> Result<ImageSample> {
    weak_augment_with(img, &WeakAugConfig::default(), rng)
}

pub fn weak_augment_with(img: &ImageSample, cfg: &WeakAugConfig, rng: &mut Rng) -> Result<ImageSample> {
    if img.height < 4 || img.width < 4 {
        return Err(Error::InvalidArgument(format!(
            "weak_augment: image {}x{} below 4x4 minimum",
            img.height, img.width
        )));
    }
    let h = img.height;
    let w = img.width;

    // Crop: sample an area fraction, take a centered-scale window at a
    // random offset, resize back with bilinear interpolation.
    let area = rng.uniform(cfg.area.0, cfg.area.1);
    let side = (area as f64).sqrt() as f32;
    let ch = ((side * h as f32).round() as u32).clamp(1, h);
    let cw = ((side * w as f32).round() as u32).clamp(1, w);
    let oy = if ch < h { rng.range((h - ch + 1) as u64) as u32 } else { 0 };
    let ox = if cw < w { rng.range((w - cw + 1) as u64) as u32 } else { 0 };
    let mut out = ImageSample::zeros(img.channels, h, w);
    out.label = img.label;
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let fy = (y as f32 + 0.5) * ch as f32 / h as f32 - 0.5 + oy as f32;
                let fx = (x as f32 + 0.5) * cw as f32 / w as f32 - 0.5 + ox as f32;
                out.set(c, y, x, img.bilinear(c, fy, fx));
            }
        }
    }

    if rng.flip(cfg.flip_p) {
        for c in 0..img.channels {
            for y in 0..h {
                for x in 0..w / 2 {
                    let a = out.at(c, y, x);
                    let b = out.at(c, y, w - 1 - x);
                    out.set(c, y, x, b);
                    out.set(c, y, w - 1 - x, a);
                }
            }
        }
    }

    let delta = rng.uniform(-cfg.brightness, cfg.brightness);
    if delta != 0.0 {
        for p in &mut out.pixels {
            *p += delta;
        }
    }
    out.clamp_unit();
    Ok(out)
}

/// Hard augmentations: shifts strong enough that their output is treated as
/// out-of-distribution during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HardAugKind {
    Rotate90,
    Rotate180,
    Rotate270,
    Permute4,
    GaussianNoise,
    CutOut,
    CutPaste,
    Sobel,
    Blur,
    MixUp,
}

impl HardAugKind {
    pub const ALL: [HardAugKind; 10] = [
        HardAugKind::Rotate90,
        HardAugKind::Rotate180,
        HardAugKind::Rotate270,
        HardAugKind::Permute4,
        HardAugKind::GaussianNoise,
        HardAugKind::CutOut,
        HardAugKind::CutPaste,
        HardAugKind::Sobel,
        HardAugKind::Blur,
        HardAugKind::MixUp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            HardAugKind::Rotate90 => "rotate90",
            HardAugKind::Rotate180 => "rotate180",
            HardAugKind::Rotate270 => "rotate270",
            HardAugKind::Permute4 => "permute4",
            HardAugKind::GaussianNoise => "gaussian_noise",
            HardAugKind::CutOut => "cutout",
            HardAugKind::CutPaste => "cutpaste",
            HardAugKind::Sobel => "sobel",
            HardAugKind::Blur => "blur",
            HardAugKind::MixUp => "mixup",
        }
    }

    pub fn parse(name: &str) -> Result<HardAugKind> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown hard augmentation '{name}'")))
    }
}

/// Clockwise quarter rotation; square images only.
fn rotate90(img: &ImageSample) -> Result<ImageSample> {
    if img.height != img.width {
        return Err(Error::InvalidArgument("rotation requires a square image".into()));
    }
    let n = img.height;
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..n {
            for x in 0..n {
                out.set(c, y, x, img.at(c, n - 1 - x, y));
            }
        }
    }
    Ok(out)
}

/// 3x3 Gaussian blur, sigma = 1, replicated border. Kernel weights are
/// exp(0), exp(-1/2), exp(-1) normalized, written as literals.
fn blur3(img: &ImageSample) -> ImageSample {
    const W0: f32 = 1.0;
    const W1: f32 = 0.606_530_66;
    const W2: f32 = 0.367_879_44;
    const NORM: f32 = W0 + 4.0 * W1 + 4.0 * W2;
    let h = img.height as i64;
    let w = img.width as i64;
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let p = |yy: i64, xx: i64| {
                    img.at(c, yy.clamp(0, h - 1) as u32, xx.clamp(0, w - 1) as u32)
                };
                let acc = W0 * p(y, x)
                    + W1 * (p(y - 1, x) + p(y + 1, x) + p(y, x - 1) + p(y, x + 1))
                    + W2 * (p(y - 1, x - 1) + p(y - 1, x + 1) + p(y + 1, x - 1) + p(y + 1, x + 1));
                out.set(c, y as u32, x as u32, acc / NORM);
            }
        }
    }
    out
}

/// Random rectangle with the given area fraction range; aspect in [0.5, 2].
fn sample_rect(h: u32, w: u32, area: (f32, f32), rng: &mut Rng) -> (u32, u32, u32, u32) {
    let frac = rng.uniform(area.0, area.1);
    let aspect = rng.uniform(0.5, 2.0);
    let target = frac * (h * w) as f32;
    let rh = (((target * aspect) as f64).sqrt().round() as u32).clamp(1, h);
    let rw = (((target / aspect) as f64).sqrt().round() as u32).clamp(1, w);
    let oy = if rh < h { rng.range((h - rh + 1) as u64) as u32 } else { 0 };
    let ox = if rw < w { rng.range((w - rw + 1) as u64) as u32 } else { 0 };
    (oy, ox, rh, rw)
}

/// Applies one hard augmentation. `partner` is required for MixUp and must
/// have the same shape; rotations require square images, Permute4 requires
/// even height and width.
pub fn hard_augment(
    img: &ImageSample,
    kind: HardAugKind,
    rng: &mut Rng,
    partner: Option<&ImageSample>,
) -> Result<ImageSample> {
    match kind {
        HardAugKind::Rotate90 => rotate90(img),
        HardAugKind::Rotate180 => rotate90(&rotate90(img)?),
        HardAugKind::Rotate270 => rotate90(&rotate90(&rotate90(img)?)?),
        HardAugKind::Permute4 => {
            if img.height % 2 != 0 || img.width % 2 != 0 {
                return Err(Error::InvalidArgument(
                    "permute4 requires even height and width".into(),
                ));
            }
            // The 23 non-identity permutations of the 4 quadrants, indexed
            // in lexicographic order.
            let mut perms: Vec<[usize; 4]> = Vec::with_capacity(23);
            let mut items = [0usize, 1, 2, 3];
            permute_all(&mut items, 0, &mut perms);
            perms.retain(|p| *p != [0, 1, 2, 3]);
            let perm = perms[rng.range(23) as usize];
            let hh = img.height / 2;
            let hw = img.width / 2;
            // Quadrant origins: TL, TR, BL, BR.
            let orig = [(0, 0), (0, hw), (hh, 0), (hh, hw)];
            let mut out = img.clone();
            for (q, &(dy, dx)) in orig.iter().enumerate() {
                let (sy, sx) = orig[perm[q]];
                for c in 0..img.channels {
                    for y in 0..hh {
                        for x in 0..hw {
                            out.set(c, dy + y, dx + x, img.at(c, sy + y, sx + x));
                        }
                    }
                }
            }
            Ok(out)
        }
        HardAugKind::GaussianNoise => {
            let mut out = img.clone();
            for p in &mut out.pixels {
                *p += rng.normal_f32(0.0, 0.1);
            }
            out.clamp_unit();
            Ok(out)
        }
        HardAugKind::CutOut => {
            let (oy, ox, rh, rw) = sample_rect(img.height, img.width, (0.15, 0.35), rng);
            let mut out = img.clone();
            for c in 0..img.channels {
                for y in oy..oy + rh {
                    for x in ox..ox + rw {
                        out.set(c, y, x, 0.0);
                    }
                }
            }
            Ok(out)
        }
        HardAugKind::CutPaste => {
            let (sy, sx, rh, rw) = sample_rect(img.height, img.width, (0.10, 0.25), rng);
            // Destination offset distinct from the source, so the paste is
            // visible even for uniform patches.
            let mut dy;
            let mut dx;
            loop {
                dy = if rh < img.height { rng.range((img.height - rh + 1) as u64) as u32 } else { 0 };
                dx = if rw < img.width { rng.range((img.width - rw + 1) as u64) as u32 } else { 0 };
                if dy != sy || dx != sx {
                    break;
                }
            }
            let mut out = img.clone();
            for c in 0..img.channels {
                for y in 0..rh {
                    for x in 0..rw {
                        out.set(c, dy + y, dx + x, img.at(c, sy + y, sx + x));
                    }
                }
            }
            Ok(out)
        }
        HardAugKind::Sobel => {
            let h = img.height as i64;
            let w = img.width as i64;
            let mut out = img.clone();
            let mut maxmag = 0.0f32;
            for c in 0..img.channels {
                for y in 0..h {
                    for x in 0..w {
                        let p = |yy: i64, xx: i64| {
                            img.at(c, yy.clamp(0, h - 1) as u32, xx.clamp(0, w - 1) as u32)
                        };
                        let gx = (p(y - 1, x + 1) + 2.0 * p(y, x + 1) + p(y + 1, x + 1))
                            - (p(y - 1, x - 1) + 2.0 * p(y, x - 1) + p(y + 1, x - 1));
                        let gy = (p(y + 1, x - 1) + 2.0 * p(y + 1, x) + p(y + 1, x + 1))
                            - (p(y - 1, x - 1) + 2.0 * p(y - 1, x) + p(y - 1, x + 1));
                        let mag = (gx * gx + gy * gy).sqrt();
                        maxmag = maxmag.max(mag);
                        out.set(c, y as u32, x as u32, mag);
                    }
                }
            }
            if maxmag > 0.0 {
                for p in &mut out.pixels {
                    *p /= maxmag;
                }
            }
            Ok(out)
        }
        HardAugKind::Blur => Ok(blur3(img)),
        HardAugKind::MixUp => {
            let partner = partner.ok_or_else(|| {
                Error::InvalidArgument("mixup requires a partner image".into())
            })?;
            if partner.pixels.len() != img.pixels.len() {
                return Err(Error::Shape("mixup partner shape mismatch".into()));
            }
            let beta = rng.uniform(0.4, 0.6);
            let mut out = img.clone();
            for (o, p) in out.pixels.iter_mut().zip(&partner.pixels) {
                *o = beta * *o + (1.0 - beta) * *p;
            }
            Ok(out)
        }
    }
}

fn permute_all(items: &mut [usize; 4], k: usize, out: &mut Vec<[usize; 4]>) {
    if k == 3 {
        out.push(*items);
        return;
    }
    for i in k..4 {
        items.swap(k, i);
        permute_all(items, k + 1, out);
        items.swap(k, i);
    }
}

/// Test-time corruption families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    Contrast,
    Brightness,
    Blur,
    SmallRotate,
    Translate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Blur,
        CorruptionKind::SmallRotate,
        CorruptionKind::Translate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Blur => "blur",
            CorruptionKind::SmallRotate => "small_rotate",
            CorruptionKind::Translate => "translate",
        }
    }

    pub fn parse(name: &str) -> Result<CorruptionKind> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown corruption '{name}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1 (mild) through 5 (severe).
    pub severity: u32,
}

/// Shot-noise photon rates per severity; lower is noisier.
const SHOT_RATES: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];

/// Applies one corruption at the given severity. Severity 0 is rejected
/// here; evaluation treats it as the clean shortcut before calling in.
pub fn corrupt(img: &ImageSample, spec: CorruptionSpec, rng: &mut Rng) -> Result<ImageSample> {
    if spec.severity < 1 || spec.severity > 5 {
        return Err(Error::InvalidArgument(format!(
            "corruption severity {} outside 1..=5",
            spec.severity
        )));
    }
    let s = spec.severity;
    let mut out = img.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = 0.04 * s as f32;
            for p in &mut out.pixels {
                *p += rng.normal_f32(0.0, sigma);
            }
        }
        CorruptionKind::ShotNoise => {
            let rate = SHOT_RATES[(s - 1) as usize];
            for p in &mut out.pixels {
                *p = (rng.poisson(*p as f64 * rate) as f64 / rate) as f32;
            }
        }
        CorruptionKind::ImpulseNoise => {
            let prob = 0.03 * s as f32;
            for p in &mut out.pixels {
                let u = rng.next_f32();
                if u < prob * 0.5 {
                    *p = 0.0;
                } else if u < prob {
                    *p = 1.0;
                }
            }
        }
        CorruptionKind::Contrast => {
            let factor = 1.0 - 0.15 * s as f32;
            for c in 0..img.channels {
                let base = (c * img.height * img.width) as usize;
                let n = (img.height * img.width) as usize;
                let mut mean = 0.0f64;
                for i in 0..n {
                    mean += img.pixels[base + i] as f64;
                }
                let mean = (mean / n as f64) as f32;
                for i in 0..n {
                    out.pixels[base + i] = mean + factor * (img.pixels[base + i] - mean);
                }
            }
        }
        CorruptionKind::Brightness => {
            let delta = 0.1 * s as f32;
            for p in &mut out.pixels {
                *p += delta;
            }
        }
        CorruptionKind::Blur => {
            for _ in 0..s {
                out = blur3(&out);
            }
        }
        CorruptionKind::SmallRotate => {
            // 3 degrees per severity step, sign chosen by the rng.
            let sign = if rng.flip(0.5) { 1.0 } else { -1.0 };
            let theta = sign * s as f64 * 3.0 * std::f64::consts::PI / 180.0;
            let (sin_t, cos_t) = (det_sin(theta) as f32, det_cos(theta) as f32);
            let cy = (img.height as f32 - 1.0) * 0.5;
            let cx = (img.width as f32 - 1.0) * 0.5;
            for c in 0..img.channels {
                for y in 0..img.height {
                    for x in 0..img.width {
                        let ry = y as f32 - cy;
                        let rx = x as f32 - cx;
                        let sy = cy + ry * cos_t - rx * sin_t;
                        let sx = cx + ry * sin_t + rx * cos_t;
                        out.set(c, y, x, img.bilinear(c, sy, sx));
                    }
                }
            }
        }
        CorruptionKind::Translate => {
            let dy = if rng.flip(0.5) { s as i64 } else { -(s as i64) };
            let dx = if rng.flip(0.5) { s as i64 } else { -(s as i64) };
            let h = img.height as i64;
            let w = img.width as i64;
            for c in 0..img.channels {
                for y in 0..h {
                    for x in 0..w {
                        let sy = (y - dy).clamp(0, h - 1) as u32;
                        let sx = (x - dx).clamp(0, w - 1) as u32;
                        out.set(c, y as u32, x as u32, img.at(c, sy, sx));
                    }
                }
            }
        }
    }
    out.clamp_unit();
    Ok(out)
}
