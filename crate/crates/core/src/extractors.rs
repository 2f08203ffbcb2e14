//! Frozen feature extractors and the trainable adapters on top of them.
//!
//! Extractors are traits so a pretrained backbone can be plugged in; the
//! crate ships deterministic toy implementations that need no weights.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{invalid, Error, Result};
use crate::fragments::FragmentGrid;
use crate::io::{ArchiveTensor, TensorArchive};
use crate::nn::Adapter;
use crate::seeded;
use crate::tensor::Matrix;
use crate::video::VideoTensor;

/// Tokens of one extractor layer for one keyframe.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTokens {
    pub cls: Vec<f64>,
    /// `N × C_c`, row-major over the patch grid.
    pub patches: Matrix,
}

/// Class and patch tokens of the last two layers for one keyframe.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticTokens {
    pub layers: Vec<LayerTokens>,
    pub keyframe_index: usize,
}

impl SemanticTokens {
    pub fn num_patches(&self) -> usize {
        self.layers[0].patches.rows()
    }

    pub fn width(&self) -> usize {
        self.layers[0].patches.cols()
    }

    /// Resamples every layer's patch grid to `side × side` by area weighting.
    pub fn pooled_to_grid(&self, side: usize) -> Result<Self> {
        let src = (self.num_patches() as f64).sqrt().round() as usize;
        if src * src != self.num_patches() {
            return Err(invalid("patch tokens do not form a square grid"));
        }
        let pool = area_pooling(src, side);
        Ok(Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerTokens { cls: l.cls.clone(), patches: pool.matmul(&l.patches) })
                .collect(),
            keyframe_index: self.keyframe_index,
        })
    }
}

/// `dst² × src²` matrix averaging a `src × src` grid onto `dst × dst` cells
/// with overlap-area weights.
pub fn area_pooling(src: usize, dst: usize) -> Matrix {
    let axis = |o: usize| -> Vec<(usize, f64)> {
        let (a, b) = (o as f64 * src as f64 / dst as f64, (o + 1) as f64 * src as f64 / dst as f64);
        (a.floor() as usize..(b.ceil() as usize).min(src))
            .map(|i| (i, (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0)))
            .filter(|(_, w)| *w > 0.0)
            .collect()
    };
    let mut m = Matrix::zeros(dst * dst, src * src);
    for oy in 0..dst {
        let wy = axis(oy);
        for ox in 0..dst {
            let wx = axis(ox);
            let total: f64 = wy.iter().map(|a| a.1).sum::<f64>() * wx.iter().map(|a| a.1).sum::<f64>();
            for &(iy, ay) in &wy {
                for &(ix, ax) in &wx {
                    m.set(oy * dst + ox, iy * src + ix, ay * ax / total);
                }
            }
        }
    }
    m
}

pub trait SemanticExtractor {
    /// Input frame size `(H, W)` the extractor expects.
    fn native_size(&self) -> (usize, usize);
    fn patch_size(&self) -> usize;
    fn width(&self) -> usize;
    /// Tokens of the last two layers for a single frame (`T = 1`).
    fn extract_frame(&self, frame: &VideoTensor) -> Result<Vec<LayerTokens>>;

    fn patches_per_side(&self) -> usize {
        self.native_size().0 / self.patch_size()
    }
}

pub trait DistortionExtractor {
    fn fragment_size(&self) -> (usize, usize);
    fn width(&self) -> usize;
    fn extract_fragment(&self, fragment: &VideoTensor) -> Result<Vec<f64>>;
}

/// First frame of each of `n` equal segments: frame `⌊k·T/n⌋` for `k < n`.
pub fn select_keyframes(total_frames: usize, n_keyframes: usize) -> Result<Vec<usize>> {
    if n_keyframes < 1 {
        return Err(invalid("at least one keyframe is required"));
    }
    if n_keyframes > total_frames {
        return Err(invalid(format!("{n_keyframes} keyframes from {total_frames} frames")));
    }
    Ok((0..n_keyframes).map(|k| k * total_frames / n_keyframes).collect())
}

/// For each position (in source-frame units) the index of the nearest
/// keyframe, ties to the earlier one.
pub fn nearest_keyframes(keyframes: &[usize], positions: &[f64]) -> Vec<usize> {
    positions
        .iter()
        .map(|&p| {
            let mut best = 0;
            for (i, &k) in keyframes.iter().enumerate() {
                if (k as f64 - p).abs() < (keyframes[best] as f64 - p).abs() {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Runs the extractor on each keyframe after resizing it to the native size.
pub fn extract_semantic(
    extractor: &dyn SemanticExtractor,
    video: &VideoTensor,
    keyframes: &[usize],
) -> Result<Vec<SemanticTokens>> {
    let (h, w) = extractor.native_size();
    keyframes
        .iter()
        .map(|&k| {
            if k >= video.frames() {
                return Err(invalid(format!("keyframe {k} beyond {} frames", video.frames())));
            }
            let frame = video.select_frames(&[k]).resize(h, w)?;
            Ok(SemanticTokens { layers: extractor.extract_frame(&frame)?, keyframe_index: k })
        })
        .collect()
}

/// Fixed random linear patch embedding with a mean-pooled class token.
///
/// Layer `L−1` embeds centered patch pixels with `W₁`; layer `L` maps those
/// tokens through `W₂`. Weights come from a seeded generator, so two
/// extractors with the same config are identical.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySemanticExtractor {
    pub native: usize,
    pub patch: usize,
    pub channels: usize,
    pub seed: u64,
    pub embed: Matrix,
    pub project: Matrix,
}

impl ToySemanticExtractor {
    pub fn new(native: usize, patch: usize, channels: usize, width: usize, seed: u64) -> Result<Self> {
        if patch == 0 || !native.is_multiple_of(patch) || width == 0 || channels == 0 {
            return Err(invalid(format!("toy extractor {native}/{patch} width {width}")));
        }
        let mut rng = seeded(seed);
        let pd = patch * patch * channels;
        let embed = Matrix::randn(pd, width, 1.0 / (pd as f64).sqrt(), &mut rng);
        let project = Matrix::randn(width, width, 1.0 / (width as f64).sqrt(), &mut rng);
        Ok(Self { native, patch, channels, seed, embed, project })
    }

    /// Flattened `(y, x, c)` pixels of patch `(py, px)`, minus 0.5.
    pub fn patch_vector(&self, frame: &VideoTensor, py: usize, px: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.patch * self.patch * self.channels);
        for y in 0..self.patch {
            for x in 0..self.patch {
                for c in 0..self.channels {
                    v.push(frame.at(0, py * self.patch + y, px * self.patch + x, c) as f64 - 0.5);
                }
            }
        }
        v
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::default();
        a.metadata.insert("kind".into(), "toy-semantic".into());
        a.metadata.insert("native".into(), self.native.to_string());
        a.metadata.insert("patch_size".into(), self.patch.to_string());
        a.metadata.insert("channels".into(), self.channels.to_string());
        a.metadata.insert("width".into(), self.embed.cols().to_string());
        a.metadata.insert("layers".into(), "2".into());
        a.metadata.insert("seed".into(), self.seed.to_string());
        a.insert("embed", ArchiveTensor::from_matrix(&self.embed));
        a.insert("project", ArchiveTensor::from_matrix(&self.project));
        a
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let meta = |k: &str| -> Result<usize> {
            a.metadata
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("extractor archive missing {k}")))
        };
        Ok(Self {
            native: meta("native")?,
            patch: meta("patch_size")?,
            channels: meta("channels")?,
            seed: meta("seed")? as u64,
            embed: a.matrix("embed")?,
            project: a.matrix("project")?,
        })
    }
}

impl SemanticExtractor for ToySemanticExtractor {
    fn native_size(&self) -> (usize, usize) {
        (self.native, self.native)
    }

    fn patch_size(&self) -> usize {
        self.patch
    }

    fn width(&self) -> usize {
        self.embed.cols()
    }

    fn extract_frame(&self, frame: &VideoTensor) -> Result<Vec<LayerTokens>> {
        if frame.frames() != 1
            || frame.height() != self.native
            || frame.width() != self.native
            || frame.channels() != self.channels
        {
            return Err(invalid(format!(
                "toy extractor expects 1x{n}x{n}x{c}, got {}x{}x{}x{}",
                frame.frames(),
                frame.height(),
                frame.width(),
                frame.channels(),
                n = self.native,
                c = self.channels
            )));
        }
        let side = self.native / self.patch;
        let rows: Vec<Vec<f64>> =
            (0..side * side).map(|k| self.patch_vector(frame, k / side, k % side)).collect();
        let pixels = Matrix::from_rows(&rows);
        let l1 = pixels.matmul(&self.embed);
        let l2 = l1.matmul(&self.project);
        Ok([l1, l2]
            .into_iter()
            .map(|patches| LayerTokens { cls: patches.mean_rows().into_vec(), patches })
            .collect())
    }
}

/// Number of hand-crafted statistics at the front of each toy feature vector.
pub const TOY_DISTORTION_STATS: usize = 8;

/// Per-fragment degradation statistics, zero-padded to `width`.
///
/// Slots: RMS luma deviation, RMS horizontal gradient, RMS vertical
/// gradient, RMS Laplacian, blockiness, RMS temporal difference,
/// Laplacian-to-deviation ratio, mean luma. Blockiness is the largest
/// excess of boundary-gradient energy at one phase modulo `block` over the
/// mean across phases, as an RMS value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDistortionExtractor {
    pub fragment: usize,
    pub width: usize,
    pub block: usize,
}

impl ToyDistortionExtractor {
    pub fn new(fragment: usize, width: usize, block: usize) -> Result<Self> {
        if width < TOY_DISTORTION_STATS || block < 2 || fragment < 3 {
            return Err(invalid(format!("toy distortion extractor fragment {fragment} width {width} block {block}")));
        }
        Ok(Self { fragment, width, block })
    }
}

/// Channel-mean luma plane of frame `t`.
fn luma(v: &VideoTensor, t: usize) -> Vec<f64> {
    let c = v.channels();
    v.frame(t).chunks(c).map(|px| px.iter().map(|&p| p as f64).sum::<f64>() / c as f64).collect()
}

impl DistortionExtractor for ToyDistortionExtractor {
    fn fragment_size(&self) -> (usize, usize) {
        (self.fragment, self.fragment)
    }

    fn width(&self) -> usize {
        self.width
    }

    fn extract_fragment(&self, f: &VideoTensor) -> Result<Vec<f64>> {
        if f.height() != self.fragment || f.width() != self.fragment {
            return Err(invalid(format!(
                "distortion extractor expects {s}x{s} fragments, got {}x{}",
                f.height(),
                f.width(),
                s = self.fragment
            )));
        }
        let (h, w, t) = (f.height(), f.width(), f.frames());
        let planes: Vec<Vec<f64>> = (0..t).map(|ti| luma(f, ti)).collect();
        let n = (t * h * w) as f64;
        let mean = planes.iter().flatten().sum::<f64>() / n;
        let var = planes.iter().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let (mut gx, mut gy, mut lap, mut td) = (0.0, 0.0, 0.0, 0.0);
        let mut phase = vec![0.0; self.block];
        let mut phase_n = vec![0usize; self.block];
        for (ti, p) in planes.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let v = p[y * w + x];
                    if x + 1 < w {
                        let d = (p[y * w + x + 1] - v).powi(2);
                        gx += d;
                        phase[x % self.block] += d;
                        phase_n[x % self.block] += 1;
                    }
                    if y + 1 < h {
                        let d = (p[(y + 1) * w + x] - v).powi(2);
                        gy += d;
                        phase[y % self.block] += d;
                        phase_n[y % self.block] += 1;
                    }
                    if y > 0 && x > 0 && y + 1 < h && x + 1 < w {
                        let l = 4.0 * v - p[(y - 1) * w + x] - p[(y + 1) * w + x] - p[y * w + x - 1] - p[y * w + x + 1];
                        lap += l * l;
                    }
                    if ti > 0 {
                        td += (v - planes[ti - 1][y * w + x]).powi(2);
                    }
                }
            }
        }
        let nx = (t * h * (w - 1)) as f64;
        let ny = (t * (h - 1) * w) as f64;
        let nl = (t * (h - 2) * (w - 2)) as f64;
        let nt = ((t.max(2) - 1) * h * w) as f64;
        let phase_means: Vec<f64> =
            phase.iter().zip(&phase_n).filter(|(_, &c)| c > 0).map(|(s, &c)| s / c as f64).collect();
        let avg_phase = phase_means.iter().sum::<f64>() / phase_means.len() as f64;
        let max_phase = phase_means.iter().copied().fold(0.0, f64::max);
        let dev = var.sqrt();
        let lap_rms = (lap / nl).sqrt();
        let mut out = vec![0.0; self.width];
        out[0] = dev;
        out[1] = (gx / nx).sqrt();
        out[2] = (gy / ny).sqrt();
        out[3] = lap_rms;
        out[4] = (max_phase - avg_phase).max(0.0).sqrt();
        out[5] = (td / nt).sqrt();
        out[6] = lap_rms / (dev + 1e-3);
        out[7] = mean;
        Ok(out)
    }
}

/// `Q_c = f(CLS)` for a `1 × C_c` class-token row.
pub fn quality_adapt(g: &Graph, store: &ParamStore, adapter: &Adapter, cls: Var) -> Result<Var> {
    if adapter.spec.input_width() != adapter.spec.output_width() {
        return Err(invalid("quality adapter must preserve the class-token width"));
    }
    adapter.forward(g, store, cls)
}

/// `F_d^a = f_d(F_d)`, one row per fragment.
pub fn distortion_adapt(g: &Graph, store: &ParamStore, adapter: &Adapter, feats: Var) -> Result<Var> {
    adapter.forward(g, store, feats)
}

/// One feature row per fragment.
#[derive(Clone, Debug, PartialEq)]
pub struct DistortionFeatures {
    pub features: Matrix,
    pub pattern_label: Option<String>,
}

pub fn extract_distortion(extractor: &dyn DistortionExtractor, fg: &FragmentGrid) -> Result<DistortionFeatures> {
    let (fh, fw) = extractor.fragment_size();
    if fg.grid.fragment_h != fh || fg.grid.fragment_w != fw {
        return Err(invalid(format!(
            "fragments are {}x{}, extractor expects {fh}x{fw}",
            fg.grid.fragment_h, fg.grid.fragment_w
        )));
    }
    let rows = fg.fragments.iter().map(|f| extractor.extract_fragment(f)).collect::<Result<Vec<_>>>()?;
    Ok(DistortionFeatures { features: Matrix::from_rows(&rows), pattern_label: None })
}

/// Supervised contrastive loss over row features `feats` (`B × C`).
///
/// Rows are L2-normalized; for every anchor with at least one same-label
/// row the loss averages `−log softmax` of its positives over all other
/// rows, and anchors are then averaged.
pub fn distortion_contrastive_loss<L: PartialEq>(g: &Graph, feats: Var, labels: &[L], temperature: f64) -> Result<Var> {
    let (b, _) = g.shape(feats);
    if labels.len() != b {
        return Err(invalid(format!("{} labels for {b} rows", labels.len())));
    }
    if !(temperature > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    if labels.iter().all(|l| *l == labels[0]) {
        return Err(Error::UndefinedLoss("batch holds a single processing pattern".into()));
    }
    let mut pos = Matrix::zeros(b, b);
    let mut anchors = 0usize;
    for i in 0..b {
        let count = (0..b).filter(|&j| j != i && labels[j] == labels[i]).count();
        if count == 0 {
            continue;
        }
        anchors += 1;
        for j in 0..b {
            if j != i && labels[j] == labels[i] {
                pos.set(i, j, 1.0 / count as f64);
            }
        }
    }
    if anchors == 0 {
        return Err(Error::UndefinedLoss("no positive pairs in batch".into()));
    }
    let norm = g.sqrt(g.add_scalar(g.sum_cols(g.square(feats)), 1e-12));
    let inv = g.div(g.constant(Matrix::filled(b, 1, 1.0)), norm);
    let z = g.mul_col(feats, inv);
    let logits = g.scale(g.matmul_t(z, z), 1.0 / temperature);
    let mut diag = Matrix::zeros(b, b);
    for i in 0..b {
        diag.set(i, i, -1e30);
    }
    let logp = g.log_softmax_rows(g.add(logits, g.constant(diag)));
    let picked = g.sum_all(g.mul(logp, g.constant(pos)));
    Ok(g.scale(picked, -1.0 / anchors as f64))
}

/// Tape-free value of [`distortion_contrastive_loss`].
pub fn contrastive_loss_value<L: PartialEq>(feats: &Matrix, labels: &[L], temperature: f64) -> Result<f64> {
    let g = Graph::new();
    let f = g.constant(feats.clone());
    let l = distortion_contrastive_loss(&g, f, labels, temperature)?;
    let v = g.value(l).item();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyframes_equal_segments() {
        assert_eq!(select_keyframes(32, 4).unwrap(), vec![0, 8, 16, 24]);
        assert_eq!(select_keyframes(32, 32).unwrap(), (0..32).collect::<Vec<_>>());
        assert_eq!(select_keyframes(30, 4).unwrap(), vec![0, 7, 15, 22]);
        assert!(select_keyframes(8, 0).is_err());
        assert!(select_keyframes(3, 4).is_err());
    }

    #[test]
    fn nearest_keyframe_ties_go_early() {
        assert_eq!(nearest_keyframes(&[0, 8, 16], &[0.0, 4.0, 5.0, 15.0, 30.0]), vec![0, 0, 1, 2, 2]);
    }

    #[test]
    fn uniform_frame_gives_equal_tokens() {
        let ex = ToySemanticExtractor::new(16, 4, 3, 8, 1).unwrap();
        let v = VideoTensor::from_fn(1, 16, 16, 3, |_, _, _, c| 0.2 + 0.1 * c as f32);
        let layers = ex.extract_frame(&v).unwrap();
        for l in &layers {
            for k in 1..l.patches.rows() {
                assert_eq!(l.patches.row(k), l.patches.row(0));
            }
        }
    }

    #[test]
    fn zero_fragment_has_zero_statistics() {
        let ex = ToyDistortionExtractor::new(6, 128, 4).unwrap();
        let f = VideoTensor::zeros(4, 6, 6, 3);
        assert!(ex.extract_fragment(&f).unwrap().iter().all(|&v| v == 0.0));
        assert!(ex.extract_fragment(&VideoTensor::zeros(4, 5, 5, 3)).is_err());
    }

    #[test]
    fn area_pooling_rows_sum_to_one() {
        let p = area_pooling(14, 9);
        for r in 0..81 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(area_pooling(8, 8), Matrix::identity(64));
    }

    #[test]
    fn contrastive_needs_two_patterns() {
        let f = Matrix::randn(4, 3, 1.0, &mut seeded(0));
        assert!(matches!(contrastive_loss_value(&f, &[1, 1, 1, 1], 0.1), Err(Error::UndefinedLoss(_))));
        assert!(matches!(contrastive_loss_value(&f, &[1, 2, 3, 4], 0.1), Err(Error::UndefinedLoss(_))));
    }
}
