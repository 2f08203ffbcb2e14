//! Synthetic processing-workflow corpus.
//!
//! References are procedural clips with a blur/noise/compression
//! impairment mix. Each reference goes through one workflow chain
//! (enhancement, then optional pre-processing, then transcoding) at every
//! QP interval. Ground truth is an analytic pseudo-MOS of the recipe and
//! the reference impairments; its coefficients live in the config.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::io::{load_clip, save_clip};
use crate::metrics::{write_pairs, RankPair};
use crate::video::{VideoShape, VideoTensor};
use crate::{derive_seed, seeded};

/// Inclusive QP ranges of the six transcoding modes.
pub const QP_INTERVALS: [(u32, u32); 6] = [(16, 23), (24, 31), (32, 35), (36, 39), (40, 43), (44, 47)];
pub const QP_MIN: u32 = 16;
pub const QP_MAX: u32 = 47;

pub fn sample_qp<R: Rng + ?Sized>(interval_index: usize, rng: &mut R) -> Result<u32> {
    let &(lo, hi) = QP_INTERVALS
        .get(interval_index)
        .ok_or_else(|| invalid(format!("QP interval index {interval_index} not in 0..6")))?;
    Ok(rng.gen_range(lo..=hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityTier {
    High,
    Low,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Enhancement {
    None,
    DeArtifact,
    Denoise,
    Deblur,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    None,
    Global,
    Roi,
}

impl fmt::Display for Enhancement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::DeArtifact => "de-artifact",
            Self::Denoise => "denoise",
            Self::Deblur => "deblur",
        })
    }
}

impl fmt::Display for Preprocess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Global => "global",
            Self::Roi => "roi",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowRecipe {
    pub quality_tier: QualityTier,
    pub enhancement: Enhancement,
    pub preprocess: Preprocess,
    pub qp_interval_index: usize,
    pub qp: u32,
    pub pattern_label: String,
}

impl WorkflowRecipe {
    pub fn new(
        quality_tier: QualityTier,
        enhancement: Enhancement,
        preprocess: Preprocess,
        qp_interval_index: usize,
        qp: u32,
    ) -> Result<Self> {
        let &(lo, hi) =
            QP_INTERVALS.get(qp_interval_index).ok_or_else(|| invalid(format!("QP interval {qp_interval_index}")))?;
        if !(lo..=hi).contains(&qp) {
            return Err(invalid(format!("qp {qp} outside interval {qp_interval_index} ({lo}-{hi})")));
        }
        let r = Self {
            quality_tier,
            enhancement,
            preprocess,
            qp_interval_index,
            qp,
            pattern_label: pattern_label(enhancement, preprocess, qp_interval_index),
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.quality_tier == QualityTier::High && (self.enhancement != Enhancement::None || self.preprocess != Preprocess::None) {
            return Err(invalid("high-tier recipes are transcode-only"));
        }
        Ok(())
    }

    /// Same chain at another QP.
    pub fn with_qp(&self, interval: usize, qp: u32) -> Result<Self> {
        Self::new(self.quality_tier, self.enhancement, self.preprocess, interval, qp)
    }

    /// 1 = transcode only, 2 = enhance + transcode, 3 = enhance +
    /// pre-process + transcode.
    pub fn workflow_group(&self) -> u8 {
        match (self.enhancement, self.preprocess) {
            (Enhancement::None, Preprocess::None) => 1,
            (_, Preprocess::None) => 2,
            _ => 3,
        }
    }
}

/// Canonical chain string, e.g. `deblur+global+qp3` or `qp0`.
pub fn pattern_label(enhancement: Enhancement, preprocess: Preprocess, interval: usize) -> String {
    let mut parts = Vec::new();
    if enhancement != Enhancement::None {
        parts.push(enhancement.to_string());
    }
    if preprocess != Preprocess::None {
        parts.push(preprocess.to_string());
    }
    parts.push(format!("qp{interval}"));
    parts.join("+")
}

/// High tier: transcode only. Low tier: one enhancement tool, then
/// pre-processing (global or ROI) with probability 0.5, then transcode.
pub fn build_recipe<R: Rng + ?Sized>(tier: QualityTier, rng: &mut R) -> WorkflowRecipe {
    let (enhancement, preprocess) = match tier {
        QualityTier::High => (Enhancement::None, Preprocess::None),
        QualityTier::Low => {
            let e = [Enhancement::DeArtifact, Enhancement::Denoise, Enhancement::Deblur][rng.gen_range(0..3)];
            let p = if rng.gen_bool(0.5) {
                if rng.gen_bool(0.5) {
                    Preprocess::Global
                } else {
                    Preprocess::Roi
                }
            } else {
                Preprocess::None
            };
            (e, p)
        }
    };
    let interval = rng.gen_range(0..QP_INTERVALS.len());
    let qp = sample_qp(interval, rng).expect("interval in range");
    WorkflowRecipe::new(tier, enhancement, preprocess, interval, qp).expect("consistent recipe")
}

/// Impairments baked into a reference before any workflow.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefQuality {
    /// Gaussian blur sigma in pixels.
    pub blur: f64,
    /// Additive Gaussian noise sigma.
    pub noise: f64,
    /// Pre-existing compression level in `[0, 1]`.
    pub artifact: f64,
}

impl RefQuality {
    pub const CLEAN: Self = Self { blur: 0.0, noise: 0.0, artifact: 0.0 };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentRange {
    pub blur: (f64, f64),
    pub noise: (f64, f64),
    pub artifact: (f64, f64),
}

impl ImpairmentRange {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> RefQuality {
        let u = |r: &mut R, (a, b): (f64, f64)| if b > a { r.gen_range(a..b) } else { a };
        RefQuality { blur: u(rng, self.blur), noise: u(rng, self.noise), artifact: u(rng, self.artifact) }
    }
}

/// Pseudo-MOS coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosCoefficients {
    pub base: f64,
    pub blur: f64,
    pub noise: f64,
    pub artifact: f64,
    /// Fraction of the matching impairment an enhancement tool recovers.
    pub recover: f64,
    /// Penalty at the largest QP (linear in normalized QP).
    pub qp: f64,
    /// Pre-processing bonus at the largest QP (quadratic in normalized QP).
    pub preprocess: f64,
    /// ROI pre-processing bonus relative to global.
    pub roi_factor: f64,
    /// Fraction of the reference impairment penalty masked by compression
    /// at the largest QP.
    pub masking: f64,
}

impl Default for MosCoefficients {
    fn default() -> Self {
        Self { base: 4.7, blur: 0.5, noise: 10.0, artifact: 0.6, recover: 0.6, qp: 2.0, preprocess: 0.6, roi_factor: 0.7, masking: 0.5 }
    }
}

/// Normalized QP in `[0, 1]`.
pub fn qp_fraction(qp: u32) -> f64 {
    (qp.saturating_sub(QP_MIN)) as f64 / (QP_MAX - QP_MIN) as f64
}

/// Base quality minus QP penalty, plus enhancement recovery, plus the
/// pre-processing bonus that grows toward low bitrates; clamped to `[1, 5]`.
pub fn pseudo_mos(recipe: &WorkflowRecipe, q: &RefQuality, c: &MosCoefficients) -> f64 {
    let (blur, noise, art) = (c.blur * q.blur, c.noise * q.noise, c.artifact * q.artifact);
    let recovered = match recipe.enhancement {
        Enhancement::None => 0.0,
        Enhancement::Deblur => blur,
        Enhancement::Denoise => noise,
        Enhancement::DeArtifact => art,
    } * c.recover;
    let x = qp_fraction(recipe.qp);
    let visible = 1.0 - c.masking * x;
    let pre = match recipe.preprocess {
        Preprocess::None => 0.0,
        Preprocess::Global => c.preprocess,
        Preprocess::Roi => c.preprocess * c.roi_factor,
    } * x
        * x;
    (c.base - (blur + noise + art - recovered) * visible - c.qp * x + pre).clamp(1.0, 5.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorksimConfig {
    pub frames: usize,
    pub size: usize,
    pub channels: usize,
    pub n_refs: usize,
    pub clips_per_ref: usize,
    pub high_fraction: f64,
    pub test_fraction: f64,
    /// DCT block side of the compression surrogate.
    pub dct_block: usize,
    /// Quantizer step at QP 16; it doubles every 6 QP.
    pub qstep0: f64,
    /// Largest quantizer step of the pre-existing compression impairment.
    pub artifact_step: f64,
    pub high_impairments: ImpairmentRange,
    pub low_impairments: ImpairmentRange,
    pub mos: MosCoefficients,
    /// Confine the workflow to the centre window and fill the border with
    /// distractor content whose degradation is independent of the MOS.
    pub localized: bool,
    /// Centre window side in grid cells, out of `grid_side`.
    pub localized_window: usize,
    pub grid_side: usize,
    pub pairs_per_class: usize,
}

impl Default for WorksimConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            size: 64,
            channels: 3,
            n_refs: 50,
            clips_per_ref: 6,
            high_fraction: 0.5,
            test_fraction: 0.2,
            dct_block: 4,
            qstep0: 0.02,
            artifact_step: 0.25,
            high_impairments: ImpairmentRange { blur: (0.0, 0.3), noise: (0.0, 0.01), artifact: (0.0, 0.1) },
            low_impairments: ImpairmentRange { blur: (0.6, 1.2), noise: (0.02, 0.05), artifact: (0.3, 0.8) },
            mos: MosCoefficients::default(),
            localized: false,
            localized_window: 6,
            grid_side: 8,
            pairs_per_class: 50,
        }
    }
}

impl WorksimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_refs < 2 {
            return Err(invalid(format!("need at least 2 references, got {}", self.n_refs)));
        }
        if self.clips_per_ref == 0 || self.frames == 0 || self.channels == 0 {
            return Err(invalid("clips_per_ref, frames and channels must be positive"));
        }
        if self.dct_block == 0 || !self.size.is_multiple_of(self.dct_block) {
            return Err(invalid(format!("frame size {} not a multiple of DCT block {}", self.size, self.dct_block)));
        }
        if !(0.0..=1.0).contains(&self.high_fraction) || !(0.0..1.0).contains(&self.test_fraction) {
            return Err(invalid("fractions out of range"));
        }
        if self.localized && (self.grid_side == 0 || !self.size.is_multiple_of(self.grid_side) || self.localized_window > self.grid_side) {
            return Err(invalid("localized window does not fit the grid"));
        }
        Ok(())
    }

    /// Quantizer step for a QP.
    pub fn qstep(&self, qp: u32) -> f64 {
        self.qstep0 * 2f64.powf((qp as f64 - QP_MIN as f64) / 6.0)
    }
}

/// Procedural content: oriented sinusoids plus flat shapes, drifting over
/// time. `brightness` shifts the mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentParams {
    pub waves: Vec<(f64, f64, f64, f64)>,
    pub shapes: Vec<(bool, f64, f64, f64, f64)>,
    pub drift: (f64, f64),
    pub tint: [f64; 3],
    pub brightness: f64,
    pub tag: String,
}

impl ContentParams {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, brightness: f64) -> Self {
        let waves = (0..4)
            .map(|_| {
                let cycles = rng.gen_range(1.0..7.0);
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                (cycles * theta.cos(), cycles * theta.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.06..0.09))
            })
            .collect();
        let shapes = (0..rng.gen_range(1..4))
            .map(|_| (rng.gen_bool(0.5), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.08..0.25), rng.gen_range(-0.12..0.12)))
            .collect();
        let tag = ["texture", "shapes", "mixed"][rng.gen_range(0..3)].to_string();
        Self {
            waves,
            shapes,
            drift: (rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01)),
            tint: [rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2)],
            brightness,
            tag,
        }
    }

    pub fn render(&self, frames: usize, size: usize, channels: usize) -> VideoTensor {
        let tau = std::f64::consts::TAU;
        VideoTensor::from_fn(frames, size, size, channels, |t, y, x, c| {
            let u = x as f64 / size as f64 + self.drift.0 * t as f64;
            let v = y as f64 / size as f64 + self.drift.1 * t as f64;
            let mut s = self.brightness;
            for &(fx, fy, ph, amp) in &self.waves {
                s += amp * (tau * (fx * u + fy * v) + ph).sin();
            }
            for &(round, cx, cy, r, level) in &self.shapes {
                let (dx, dy) = (u - cx, v - cy);
                let inside = if round { dx * dx + dy * dy < r * r } else { dx.abs() < r && dy.abs() < r };
                if inside {
                    s += level;
                }
            }
            let tint = self.tint[c % 3];
            ((s - 0.5) * tint + 0.5).clamp(0.0, 1.0) as f32
        })
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamped borders; `sigma ≤ 0` is a no-op.
pub fn gaussian_blur(v: &VideoTensor, sigma: f64) -> VideoTensor {
    if sigma <= 0.0 {
        return v.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = (v.height() as i64, v.width() as i64);
    let pass = |src: &VideoTensor, horizontal: bool| {
        let mut out = src.clone();
        for t in 0..src.frames() {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..src.channels() {
                        let mut s = 0.0;
                        for (i, kv) in k.iter().enumerate() {
                            let o = i as i64 - r;
                            let (yy, xx) = if horizontal { (y, (x + o).clamp(0, w - 1)) } else { ((y + o).clamp(0, h - 1), x) };
                            s += kv * src.at(t, yy as usize, xx as usize, c) as f64;
                        }
                        out.set(t, y as usize, x as usize, c, s as f32);
                    }
                }
            }
        }
        out
    };
    pass(&pass(v, true), false)
}

pub fn add_noise<R: Rng + ?Sized>(v: &VideoTensor, sigma: f64, rng: &mut R) -> VideoTensor {
    let mut out = v.clone();
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("positive sigma");
        for p in out.data_mut() {
            *p = (*p as f64 + n.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[k * n + i] = a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

/// Block-wise orthonormal DCT quantization with a uniform step; step 0 is
/// the identity.
pub fn dct_quantize(v: &VideoTensor, block: usize, step: f64) -> VideoTensor {
    if step <= 0.0 {
        return v.clone();
    }
    let d = dct_matrix(block);
    let mut out = v.clone();
    let mut buf = vec![0.0; block * block];
    let mut tmp = vec![0.0; block * block];
    for t in 0..v.frames() {
        for by in (0..v.height()).step_by(block) {
            for bx in (0..v.width()).step_by(block) {
                if by + block > v.height() || bx + block > v.width() {
                    continue;
                }
                for c in 0..v.channels() {
                    for y in 0..block {
                        for x in 0..block {
                            buf[y * block + x] = v.at(t, by + y, bx + x, c) as f64;
                        }
                    }
                    // coefficients = D · X · Dᵀ
                    for k in 0..block {
                        for x in 0..block {
                            tmp[k * block + x] = (0..block).map(|i| d[k * block + i] * buf[i * block + x]).sum();
                        }
                    }
                    for k in 0..block {
                        for l in 0..block {
                            let c = (0..block).map(|j| tmp[k * block + j] * d[l * block + j]).sum::<f64>();
                            buf[k * block + l] = (c / step).round() * step;
                        }
                    }
                    // X = Dᵀ · C · D
                    for i in 0..block {
                        for l in 0..block {
                            tmp[i * block + l] = (0..block).map(|k| d[k * block + i] * buf[k * block + l]).sum();
                        }
                    }
                    for i in 0..block {
                        for j in 0..block {
                            let px = (0..block).map(|l| tmp[i * block + l] * d[l * block + j]).sum::<f64>();
                            out.set(t, by + i, bx + j, c, px.clamp(0.0, 1.0) as f32);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Mean squared neighbour difference across block boundaries minus the
/// same inside blocks.
pub fn blockiness_energy(v: &VideoTensor, block: usize) -> f64 {
    let (mut edge, mut ne, mut inner, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for t in 0..v.frames() {
        for y in 0..v.height() {
            for x in 0..v.width() {
                for c in 0..v.channels() {
                    let p = v.at(t, y, x, c) as f64;
                    let mut push = |q: f64, boundary: bool| {
                        let d = (q - p).powi(2);
                        if boundary {
                            edge += d;
                            ne += 1;
                        } else {
                            inner += d;
                            ni += 1;
                        }
                    };
                    if x + 1 < v.width() {
                        push(v.at(t, y, x + 1, c) as f64, (x + 1) % block == 0);
                    }
                    if y + 1 < v.height() {
                        push(v.at(t, y + 1, x, c) as f64, (y + 1) % block == 0);
                    }
                }
            }
        }
    }
    edge / ne.max(1) as f64 - inner / ni.max(1) as f64
}

pub fn psnr(a: &VideoTensor, b: &VideoTensor) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.data().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn blend(a: &VideoTensor, b: &VideoTensor, w: f64) -> VideoTensor {
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o = ((1.0 - w) * *o as f64 + w * bv as f64).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Smooths the two pixels on each side of every block boundary toward
/// their mean with weight `w`.
fn deblock(v: &VideoTensor, block: usize, w: f64) -> VideoTensor {
    let mut out = v.clone();
    for t in 0..v.frames() {
        for y in 0..v.height() {
            for x in 0..v.width() {
                for c in 0..v.channels() {
                    let p = v.at(t, y, x, c) as f64;
                    let mut acc = 0.0;
                    let mut n = 0.0;
                    if x % block == 0 && x > 0 {
                        acc += v.at(t, y, x - 1, c) as f64;
                        n += 1.0;
                    }
                    if (x + 1) % block == 0 && x + 1 < v.width() {
                        acc += v.at(t, y, x + 1, c) as f64;
                        n += 1.0;
                    }
                    if y % block == 0 && y > 0 {
                        acc += v.at(t, y - 1, x, c) as f64;
                        n += 1.0;
                    }
                    if (y + 1) % block == 0 && y + 1 < v.height() {
                        acc += v.at(t, y + 1, x, c) as f64;
                        n += 1.0;
                    }
                    if n > 0.0 {
                        let m = (p + acc) / (n + 1.0);
                        out.set(t, y, x, c, ((1.0 - w) * p + w * m) as f32);
                    }
                }
            }
        }
    }
    out
}

/// Impairs a clean rendering with blur, pre-existing compression and noise.
pub fn impair<R: Rng + ?Sized>(clean: &VideoTensor, q: &RefQuality, cfg: &WorksimConfig, rng: &mut R) -> VideoTensor {
    let blurred = gaussian_blur(clean, q.blur);
    let compressed = dct_quantize(&blurred, cfg.dct_block, q.artifact * cfg.artifact_step);
    add_noise(&compressed, q.noise, rng)
}

/// Applies `φ_t(φ_p(φ_e(reference)))`.
pub fn apply(recipe: &WorkflowRecipe, reference: &VideoTensor, q: &RefQuality, cfg: &WorksimConfig) -> Result<VideoTensor> {
    apply_with_step(recipe, reference, q, cfg, cfg.qstep(recipe.qp))
}

/// [`apply`] with an explicit transcoding step (0 disables quantization).
pub fn apply_with_step(
    recipe: &WorkflowRecipe,
    reference: &VideoTensor,
    q: &RefQuality,
    cfg: &WorksimConfig,
    step: f64,
) -> Result<VideoTensor> {
    recipe.validate()?;
    let r = cfg.mos.recover;
    let enhanced = match recipe.enhancement {
        Enhancement::None => reference.clone(),
        Enhancement::Deblur => {
            let soft = gaussian_blur(reference, 1.0);
            blend(reference, &soft, -(r * q.blur).min(1.5))
        }
        Enhancement::Denoise => blend(reference, &gaussian_blur(reference, 0.8), (r * q.noise / 0.05).min(1.0)),
        Enhancement::DeArtifact => deblock(reference, cfg.dct_block, (r * q.artifact * 1.5).min(1.0)),
    };
    let pre = match recipe.preprocess {
        Preprocess::None => enhanced,
        Preprocess::Global => blend(&enhanced, &gaussian_blur(&enhanced, 1.0), 0.6),
        Preprocess::Roi => {
            let mut out = blend(&enhanced, &gaussian_blur(&enhanced, 1.0), 0.6);
            let (h, w) = (enhanced.height(), enhanced.width());
            let roi = enhanced.crop(h / 4, w / 4, h / 2, w / 2);
            out.paste(&roi, h / 4, w / 4);
            out
        }
    };
    Ok(dct_quantize(&pre, cfg.dct_block, step))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub reference_id: String,
    pub tier: QualityTier,
    pub quality: RefQuality,
    pub split: Split,
    pub content_tag: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub reference_id: String,
    pub split: Split,
    pub group: u8,
    pub recipe: WorkflowRecipe,
    pub quality: RefQuality,
    pub pseudo_mos: f64,
    /// Relative to the manifest directory.
    pub path: String,
    pub seed: u64,
    pub shape: VideoShape,
    pub localized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub config: WorksimConfig,
    /// The QP used for every clip of each interval.
    pub qp_per_interval: Vec<u32>,
    pub references: Vec<ReferenceRecord>,
    pub clips: Vec<ClipRecord>,
    pub pairs_file: String,
}

impl CorpusManifest {
    pub fn split(&self, split: Split) -> Vec<&ClipRecord> {
        self.clips.iter().filter(|c| c.split == split).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Structural checks: unique ids, MOS range, split partition, label
    /// consistency.
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        let mut ref_split: BTreeMap<&str, Split> = BTreeMap::new();
        for c in &self.clips {
            if !ids.insert(&c.clip_id) {
                return Err(invalid(format!("duplicate clip id {}", c.clip_id)));
            }
            if !(1.0..=5.0).contains(&c.pseudo_mos) {
                return Err(invalid(format!("clip {} MOS {} out of range", c.clip_id, c.pseudo_mos)));
            }
            if *ref_split.entry(&c.reference_id).or_insert(c.split) != c.split {
                return Err(invalid(format!("reference {} appears in both splits", c.reference_id)));
            }
            c.recipe.validate()?;
            if c.recipe.pattern_label != pattern_label(c.recipe.enhancement, c.recipe.preprocess, c.recipe.qp_interval_index) {
                return Err(invalid(format!("clip {} has an inconsistent pattern label", c.clip_id)));
            }
        }
        Ok(())
    }
}

/// In-memory corpus.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub clips: Vec<VideoTensor>,
    pub pairs: Vec<RankPair>,
}

fn render_clip(
    cfg: &WorksimConfig,
    recipe: &WorkflowRecipe,
    reference: &VideoTensor,
    quality: &RefQuality,
    distractor: Option<&VideoTensor>,
) -> Result<VideoTensor> {
    let degraded = apply(recipe, reference, quality, cfg)?;
    let Some(border) = distractor else { return Ok(degraded) };
    let cell = cfg.size / cfg.grid_side;
    let lo = (cfg.grid_side - cfg.localized_window) / 2 * cell;
    let side = cfg.localized_window * cell;
    let mut out = border.clone();
    out.paste(&degraded.crop(lo, lo, side, side), lo, lo);
    Ok(out)
}

/// Distractor content for the border ring: mean brightness 0.5 with its
/// own random impairment and compression.
fn distractor<R: Rng + ?Sized>(cfg: &WorksimConfig, rng: &mut R) -> VideoTensor {
    let content = ContentParams::random(rng, 0.5);
    let clean = content.render(cfg.frames, cfg.size, cfg.channels);
    let q = if rng.gen_bool(0.5) { cfg.low_impairments.sample(rng) } else { cfg.high_impairments.sample(rng) };
    let impaired = impair(&clean, &q, cfg, rng);
    let qp = rng.gen_range(QP_MIN..=QP_MAX);
    dct_quantize(&impaired, cfg.dct_block, cfg.qstep(qp))
}

pub fn generate_corpus(cfg: &WorksimConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = seeded(seed);
    let qp_per_interval: Vec<u32> = (0..QP_INTERVALS.len()).map(|i| sample_qp(i, &mut rng)).collect::<Result<_>>()?;
    let n_high = (cfg.n_refs as f64 * cfg.high_fraction).round() as usize;
    let mut tiers: Vec<QualityTier> =
        (0..cfg.n_refs).map(|i| if i < n_high { QualityTier::High } else { QualityTier::Low }).collect();
    tiers.shuffle(&mut rng);
    let n_test = ((cfg.n_refs as f64 * cfg.test_fraction).round() as usize).clamp(1, cfg.n_refs - 1);
    let mut order: Vec<usize> = (0..cfg.n_refs).collect();
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Train; cfg.n_refs];
    for &i in &order[..n_test] {
        splits[i] = Split::Test;
    }
    let mut references = Vec::new();
    let mut clips = Vec::new();
    let mut tensors = Vec::new();
    for r in 0..cfg.n_refs {
        let ref_seed = derive_seed(seed, &[1, r as u64]);
        let mut rr = seeded(ref_seed);
        let tier = tiers[r];
        let quality = match tier {
            QualityTier::High => cfg.high_impairments.sample(&mut rr),
            QualityTier::Low => cfg.low_impairments.sample(&mut rr),
        };
        let brightness = if cfg.localized {
            if rr.gen_bool(0.5) {
                rr.gen_range(0.25..0.35)
            } else {
                rr.gen_range(0.65..0.75)
            }
        } else {
            rr.gen_range(0.4..0.6)
        };
        let content = ContentParams::random(&mut rr, brightness);
        let reference = impair(&content.render(cfg.frames, cfg.size, cfg.channels), &quality, cfg, &mut rr);
        let chain = build_recipe(tier, &mut rr);
        let reference_id = format!("r{r:03}");
        references.push(ReferenceRecord {
            reference_id: reference_id.clone(),
            tier,
            quality,
            split: splits[r],
            content_tag: content.tag.clone(),
            seed: ref_seed,
        });
        for k in 0..cfg.clips_per_ref {
            let interval = k % QP_INTERVALS.len();
            let recipe = chain.with_qp(interval, qp_per_interval[interval])?;
            let clip_seed = derive_seed(seed, &[2, r as u64, k as u64]);
            let border = cfg.localized.then(|| distractor(cfg, &mut seeded(clip_seed)));
            let video = render_clip(cfg, &recipe, &reference, &quality, border.as_ref())?;
            let clip_id = if cfg.clips_per_ref == QP_INTERVALS.len() {
                format!("{reference_id}_q{interval}")
            } else {
                format!("{reference_id}_c{k}")
            };
            let video = video.with_source_id(clip_id.clone());
            clips.push(ClipRecord {
                clip_id: clip_id.clone(),
                reference_id: reference_id.clone(),
                split: splits[r],
                group: recipe.workflow_group(),
                pseudo_mos: pseudo_mos(&recipe, &quality, &cfg.mos),
                recipe,
                quality,
                path: format!("clips/{clip_id}.kvt"),
                seed: clip_seed,
                shape: video.shape(),
                localized: cfg.localized,
            });
            tensors.push(video);
        }
    }
    let pairs = rank_pairs(&clips, cfg.pairs_per_class, &mut seeded(derive_seed(seed, &[3])));
    let manifest = CorpusManifest {
        version: 1,
        seed,
        config: cfg.clone(),
        qp_per_interval,
        references,
        clips,
        pairs_file: "pairs.csv".into(),
    };
    manifest.validate()?;
    Ok(Corpus { manifest, clips: tensors, pairs })
}

/// Test-split pairs: homogeneous pairs are adjacent-QP clips of one
/// reference; non-homogeneous pairs join different references whose MOS
/// differ by less than 0.5. Equal-MOS pairs are skipped.
pub fn rank_pairs<R: Rng + ?Sized>(clips: &[ClipRecord], per_class: usize, rng: &mut R) -> Vec<RankPair> {
    let test: Vec<&ClipRecord> = clips.iter().filter(|c| c.split == Split::Test).collect();
    let mut homo = Vec::new();
    let mut hetero = Vec::new();
    for (i, a) in test.iter().enumerate() {
        for b in &test[i + 1..] {
            if a.pseudo_mos == b.pseudo_mos {
                continue;
            }
            let pair = RankPair::new(&a.clip_id, &b.clip_id, a.pseudo_mos > b.pseudo_mos, a.reference_id == b.reference_id);
            if a.reference_id == b.reference_id {
                if a.recipe.qp_interval_index.abs_diff(b.recipe.qp_interval_index) == 1 {
                    homo.push(pair);
                }
            } else if (a.pseudo_mos - b.pseudo_mos).abs() < 0.5 {
                hetero.push(pair);
            }
        }
    }
    for set in [&mut homo, &mut hetero] {
        set.shuffle(rng);
        set.truncate(per_class);
    }
    homo.into_iter().chain(hetero).collect()
}

/// Writes clips, `manifest.json` and the pair file under `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, corpus: &Corpus) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("clips"))?;
    for (rec, clip) in corpus.manifest.clips.iter().zip(&corpus.clips) {
        save_clip(dir.join(&rec.path), clip, rec.seed)?;
    }
    write_pairs(dir.join(&corpus.manifest.pairs_file), &corpus.pairs)?;
    let path = dir.join("manifest.json");
    corpus.manifest.save(&path)?;
    Ok(path)
}

/// Loads the manifest and every clip it lists.
pub fn read_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let manifest = CorpusManifest::load(dir.join("manifest.json"))?;
    manifest.validate()?;
    let clips = manifest.clips.iter().map(|c| load_clip(dir.join(&c.path))).collect::<Result<Vec<_>>>()?;
    let pairs = crate::metrics::read_pairs(dir.join(&manifest.pairs_file))?;
    Ok(Corpus { manifest, clips, pairs })
}

/// Per-interval group statistics behind the three workflow orderings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub group_means: BTreeMap<u8, Vec<Option<f64>>>,
    /// Smallest margin of an enhanced low-tier clip over the same chain
    /// without enhancement, at intervals 0 and 1.
    pub enhancement_margin: Option<f64>,
    /// Group 3 minus group 2 mean per interval.
    pub preprocess_gain: Vec<Option<f64>>,
    pub group1_decreasing: bool,
    pub enhancement_helps: bool,
    pub preprocess_gain_peaks_last: bool,
}

impl TrendReport {
    pub fn holds(&self) -> bool {
        self.group1_decreasing && self.enhancement_helps && self.preprocess_gain_peaks_last
    }
}

pub fn check_trends(manifest: &CorpusManifest) -> TrendReport {
    let n = QP_INTERVALS.len();
    let mut sums: BTreeMap<u8, Vec<(f64, usize)>> = BTreeMap::new();
    let mut margin: Option<f64> = None;
    for c in &manifest.clips {
        let e = &mut sums.entry(c.group).or_insert_with(|| vec![(0.0, 0); n])[c.recipe.qp_interval_index];
        e.0 += c.pseudo_mos;
        e.1 += 1;
        if c.recipe.enhancement != Enhancement::None && c.recipe.qp_interval_index < 2 {
            let mut plain = c.recipe.clone();
            plain.enhancement = Enhancement::None;
            let m = c.pseudo_mos - pseudo_mos(&plain, &c.quality, &manifest.config.mos);
            margin = Some(margin.map_or(m, |v: f64| v.min(m)));
        }
    }
    let group_means: BTreeMap<u8, Vec<Option<f64>>> = sums
        .into_iter()
        .map(|(g, v)| (g, v.into_iter().map(|(s, k)| (k > 0).then(|| s / k as f64)).collect()))
        .collect();
    let means = |g: u8| group_means.get(&g).cloned().unwrap_or_else(|| vec![None; n]);
    let g1 = means(1);
    let group1_decreasing = g1.iter().all(Option::is_some) && g1.windows(2).all(|w| w[0].unwrap() > w[1].unwrap());
    let (g2, g3) = (means(2), means(3));
    let preprocess_gain: Vec<Option<f64>> = g2.iter().zip(&g3).map(|(a, b)| Some((*b)? - (*a)?)).collect();
    let last = preprocess_gain[n - 1];
    let preprocess_gain_peaks_last =
        last.is_some_and(|l| preprocess_gain[..n - 1].iter().all(|g| g.is_some_and(|g| g < l)));
    TrendReport {
        group_means,
        enhancement_margin: margin,
        preprocess_gain,
        group1_decreasing,
        enhancement_helps: margin.is_some_and(|m| m > 0.0),
        preprocess_gain_peaks_last,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorksimConfig {
        WorksimConfig { n_refs: 6, frames: 4, size: 32, grid_side: 8, ..Default::default() }
    }

    #[test]
    fn qp_draws_stay_in_interval() {
        let mut rng = seeded(5);
        for i in 0..6 {
            for _ in 0..50 {
                let q = sample_qp(i, &mut rng).unwrap();
                assert!((QP_INTERVALS[i].0..=QP_INTERVALS[i].1).contains(&q));
            }
        }
        assert!(sample_qp(6, &mut rng).is_err());
    }

    #[test]
    fn recipe_rules() {
        let mut rng = seeded(1);
        let mut pre = 0;
        for _ in 0..10_000 {
            let r = build_recipe(QualityTier::Low, &mut rng);
            assert_ne!(r.enhancement, Enhancement::None);
            pre += usize::from(r.preprocess != Preprocess::None);
        }
        assert!((pre as f64 / 1e4 - 0.5).abs() < 0.02);
        let h = build_recipe(QualityTier::High, &mut rng);
        assert_eq!(h.pattern_label, format!("qp{}", h.qp_interval_index));
        assert!(WorkflowRecipe::new(QualityTier::High, Enhancement::Deblur, Preprocess::None, 0, 16).is_err());
        assert!(WorkflowRecipe::new(QualityTier::Low, Enhancement::Deblur, Preprocess::None, 0, 30).is_err());
    }

    #[test]
    fn mos_is_non_increasing_in_qp() {
        let c = MosCoefficients::default();
        let q = RefQuality { blur: 1.2, noise: 0.05, artifact: 0.8 };
        for e in [Enhancement::None, Enhancement::Deblur, Enhancement::Denoise, Enhancement::DeArtifact] {
            for p in [Preprocess::None, Preprocess::Global, Preprocess::Roi] {
                let tier = if e == Enhancement::None && p == Preprocess::None { QualityTier::High } else { QualityTier::Low };
                let mut prev = f64::INFINITY;
                for qp in QP_MIN..=QP_MAX {
                    let i = QP_INTERVALS.iter().position(|&(lo, hi)| (lo..=hi).contains(&qp)).unwrap();
                    let m = pseudo_mos(&WorkflowRecipe::new(tier, e, p, i, qp).unwrap(), &q, &c);
                    assert!(m <= prev);
                    prev = m;
                }
            }
        }
    }

    #[test]
    fn zero_step_transcode_is_identity() {
        let cfg = small();
        let clip = ContentParams::random(&mut seeded(2), 0.5).render(2, 16, 3);
        let r = WorkflowRecipe::new(QualityTier::High, Enhancement::None, Preprocess::None, 0, 16).unwrap();
        assert_eq!(apply_with_step(&r, &clip, &RefQuality::CLEAN, &cfg, 0.0).unwrap(), clip);
    }

    #[test]
    fn higher_qp_is_blockier() {
        let cfg = WorksimConfig::default();
        let clip = ContentParams::random(&mut seeded(3), 0.5).render(2, 32, 3);
        let lo = WorkflowRecipe::new(QualityTier::High, Enhancement::None, Preprocess::None, 0, 16).unwrap();
        let hi = lo.with_qp(5, 47).unwrap();
        let b0 = blockiness_energy(&apply(&lo, &clip, &RefQuality::CLEAN, &cfg).unwrap(), cfg.dct_block);
        let b5 = blockiness_energy(&apply(&hi, &clip, &RefQuality::CLEAN, &cfg).unwrap(), cfg.dct_block);
        assert!(b5 > b0, "{b5} <= {b0}");
    }

    #[test]
    fn denoise_raises_psnr() {
        let cfg = WorksimConfig::default();
        let clean = ContentParams::random(&mut seeded(4), 0.5).render(2, 32, 3);
        let q = RefQuality { blur: 0.0, noise: 0.05, artifact: 0.0 };
        let noisy = add_noise(&clean, q.noise, &mut seeded(5));
        let plain = WorkflowRecipe::new(QualityTier::Low, Enhancement::None, Preprocess::None, 0, 16).unwrap();
        let den = WorkflowRecipe::new(QualityTier::Low, Enhancement::Denoise, Preprocess::None, 0, 16).unwrap();
        let a = apply_with_step(&plain, &noisy, &q, &cfg, 0.0).unwrap();
        let b = apply_with_step(&den, &noisy, &q, &cfg, 0.0).unwrap();
        assert!(psnr(&b, &clean) > psnr(&a, &clean));
    }

    #[test]
    fn corpus_counts_and_partition() {
        let c = generate_corpus(&small(), 11).unwrap();
        assert_eq!(c.manifest.clips.len(), 36);
        let test_refs: std::collections::HashSet<_> =
            c.manifest.split(Split::Test).iter().map(|r| r.reference_id.clone()).collect();
        let train_refs: std::collections::HashSet<_> =
            c.manifest.split(Split::Train).iter().map(|r| r.reference_id.clone()).collect();
        assert!(test_refs.is_disjoint(&train_refs));
        assert_eq!(test_refs.len(), 1);
        for rec in &c.manifest.clips {
            if rec.recipe.quality_tier == QualityTier::Low {
                let tools = ["de-artifact", "denoise", "deblur"];
                assert_eq!(tools.iter().filter(|t| rec.recipe.pattern_label.split('+').any(|p| p == **t)).count(), 1);
            }
        }
    }
}
