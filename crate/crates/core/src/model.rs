//! The full evaluator: region selection, content and distortion
//! modulation around a fragment backbone.
//!
//! Per clip: frozen semantic tokens of the keyframes give patch importance
//! through the adapted class token; a window of fragments is picked by
//! perturbed Top-1 over pooled window scores; the gathered fragments are
//! tokenized, and after each injection stage the tokens are modulated by
//! the keyframe patch tokens (CaM) and by adapted per-fragment distortion
//! features (DaM).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::backbone::{tokenize, Backbone, BackboneSpec};
use crate::error::{invalid, Result};
use crate::extractors::{
    distortion_adapt, extract_distortion, extract_semantic, nearest_keyframes, quality_adapt, select_keyframes,
    SemanticExtractor, SemanticTokens, ToyDistortionExtractor, ToySemanticExtractor,
};
use crate::fragments::{compose, gather_indices, partition_and_sample, FragmentGrid, GridSpec};
use crate::modulation::{Memory, Modulator, TokenGrid, VariantKind};
use crate::nn::{Adapter, AdapterSpec, AttnSpec};
use crate::qrs::{importance_var, perturbed_topk, straight_through_gate, ImportanceMap, SelectionResult, WindowLayout};
use crate::tensor::Matrix;
use crate::video::VideoTensor;

/// Component switches of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Toggles {
    pub qrs: bool,
    pub cam: bool,
    pub dam: bool,
}

impl Toggles {
    pub const BASELINE: Self = Self { qrs: false, cam: false, dam: false };
    pub const ALL: Self = Self { qrs: true, cam: true, dam: true };

    /// All eight combinations, baseline first.
    pub fn full_grid() -> Vec<Self> {
        (0..8u8).map(|b| Self { qrs: b & 1 != 0, cam: b & 2 != 0, dam: b & 4 != 0 }).collect()
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = [(self.qrs, "QRS"), (self.cam, "CaM"), (self.dam, "DaM")]
            .into_iter()
            .filter_map(|(b, n)| b.then_some(n))
            .collect();
        if on.is_empty() {
            "baseline".into()
        } else {
            on.join("+")
        }
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticConfig {
    pub native: usize,
    pub patch: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionConfig {
    pub width: usize,
    pub block: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub grid_side: usize,
    pub fragment: usize,
    /// Side of the selected window, in fragments.
    pub target_side: usize,
    pub window_stride: usize,
    pub keyframes: usize,
    pub semantic: SemanticConfig,
    pub distortion: DistortionConfig,
    pub quality_adapter: AdapterSpec,
    pub distortion_adapter: AdapterSpec,
    pub backbone: BackboneSpec,
    pub cam_kind: VariantKind,
    pub dam_kind: VariantKind,
    pub sigma: f64,
    pub n_samples: usize,
    pub toggles: Toggles,
}

impl ModelConfig {
    /// Small geometry for 64×64×8 clips: 8×8 grid of 6×6 fragments, 6×6
    /// window, toy extractors.
    pub fn desk() -> Self {
        Self {
            channels: 3,
            grid_side: 8,
            fragment: 6,
            target_side: 6,
            window_stride: 1,
            keyframes: 2,
            semantic: SemanticConfig { native: 32, patch: 4, width: 16, seed: 7 },
            distortion: DistortionConfig { width: 16, block: 4 },
            quality_adapter: AdapterSpec { widths: vec![16, 4, 16], residual: true },
            distortion_adapter: AdapterSpec { widths: vec![16, 8, 32], residual: false },
            backbone: BackboneSpec::desk(6, 3),
            cam_kind: VariantKind::CAM,
            dam_kind: VariantKind::DAM,
            sigma: 0.5,
            n_samples: 100,
            toggles: Toggles::ALL,
        }
    }

    /// Full-size geometry: 9×9 grid of 32×32 fragments, 7×7 window, 224²
    /// semantic input with 16² patches, adapters 768-192-768 and
    /// 128-32-768.
    pub fn paper() -> Self {
        Self {
            channels: 3,
            grid_side: 9,
            fragment: 32,
            target_side: 7,
            window_stride: 1,
            keyframes: 4,
            semantic: SemanticConfig { native: 224, patch: 16, width: 768, seed: 7 },
            distortion: DistortionConfig { width: 128, block: 8 },
            quality_adapter: AdapterSpec { widths: vec![768, 192, 768], residual: true },
            distortion_adapter: AdapterSpec { widths: vec![128, 32, 768], residual: false },
            backbone: BackboneSpec::paper(),
            cam_kind: VariantKind::CAM,
            dam_kind: VariantKind::DAM,
            sigma: 0.5,
            n_samples: 100,
            toggles: Toggles::ALL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.target_side == 0 || self.target_side > self.grid_side {
            return Err(invalid(format!("target side {} vs grid side {}", self.target_side, self.grid_side)));
        }
        if self.quality_adapter.input_width() != self.semantic.width
            || self.quality_adapter.output_width() != self.semantic.width
        {
            return Err(invalid("quality adapter must map the semantic width onto itself"));
        }
        if self.distortion_adapter.input_width() != self.distortion.width {
            return Err(invalid("distortion adapter input must match the distortion width"));
        }
        if !self.fragment.is_multiple_of(self.backbone.patch[1]) || !self.fragment.is_multiple_of(self.backbone.patch[2]) {
            return Err(invalid("backbone patches must tile a fragment"));
        }
        if !(self.sigma >= 0.0) || self.n_samples == 0 {
            return Err(invalid("sigma must be non-negative and n_samples positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::square(self.grid_side, self.fragment)
    }

    pub fn layout(&self) -> Result<WindowLayout> {
        WindowLayout::new(self.grid_side, self.target_side, self.window_stride)
    }
}

/// Frozen per-clip features that do not depend on fragment sampling.
#[derive(Clone, Debug)]
pub struct ClipContext {
    /// Keyframe tokens pooled to the fragment grid.
    pub semantic: Vec<SemanticTokens>,
    pub keyframes: Vec<usize>,
    pub frames: usize,
}

/// Per-sample model inputs.
#[derive(Clone, Debug)]
pub struct ClipInputs {
    pub fragments: FragmentGrid,
    /// `N × C_d` distortion features of every fragment in the full grid.
    pub distortion: Matrix,
}

pub struct ClipOutput {
    /// `1 × 1` predicted score.
    pub score: Var,
    /// Adapted distortion features of the used fragments, when DaM is on.
    pub adapted_distortion: Option<Var>,
    /// Window scores (`M × 1`) feeding the selection gate, when QRS is on.
    pub window_scores: Option<Var>,
    pub importance: Option<ImportanceMap>,
    pub selection: Option<SelectionResult>,
    /// Fragment indices seen by the backbone.
    pub used: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Ksvqe {
    pub config: ModelConfig,
    pub semantic_extractor: ToySemanticExtractor,
    pub distortion_extractor: ToyDistortionExtractor,
    pub quality_adapter: Adapter,
    pub distortion_adapter: Adapter,
    pub backbone: Backbone,
    pub cam: Vec<Modulator>,
    pub dam: Vec<Modulator>,
    extractor_params: Vec<ParamId>,
    /// Frozen `(shift, scale)` rows standardizing distortion features.
    distortion_norm: (ParamId, ParamId),
}

impl Ksvqe {
    /// Registers every parameter in `store`. Extractor weights are stored
    /// frozen.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let sc = &config.semantic;
        let semantic_extractor = ToySemanticExtractor::new(sc.native, sc.patch, config.channels, sc.width, sc.seed)?;
        let distortion_extractor =
            ToyDistortionExtractor::new(config.fragment, config.distortion.width, config.distortion.block)?;
        let extractor_params = vec![
            store.add("extractor.semantic.embed", semantic_extractor.embed.clone()),
            store.add("extractor.semantic.project", semantic_extractor.project.clone()),
        ];
        let dw = config.distortion.width;
        let distortion_norm = (
            store.add("distortion_norm.shift", Matrix::zeros(1, dw)),
            store.add("distortion_norm.scale", Matrix::filled(1, dw, 1.0)),
        );
        for &id in extractor_params.iter().chain([&distortion_norm.0, &distortion_norm.1]) {
            store.set_trainable(id, false);
        }
        let quality_adapter = Adapter::new(store, "quality_adapter", config.quality_adapter.clone(), rng);
        let distortion_adapter = Adapter::new(store, "distortion_adapter", config.distortion_adapter.clone(), rng);
        let backbone = Backbone::new(store, "backbone", config.backbone.clone(), rng)?;
        let mut cam = Vec::new();
        let mut dam = Vec::new();
        for &s in &config.backbone.injection_stages {
            let st = &config.backbone.stages[s];
            let attn = AttnSpec::new(st.width, st.heads)?;
            cam.push(Modulator::new(store, &format!("cam.s{s}"), config.cam_kind, st.width, sc.width, attn, rng));
            dam.push(Modulator::new(
                store,
                &format!("dam.s{s}"),
                config.dam_kind,
                st.width,
                config.distortion_adapter.output_width(),
                attn,
                rng,
            ));
        }
        Ok(Self {
            config,
            semantic_extractor,
            distortion_extractor,
            quality_adapter,
            distortion_adapter,
            backbone,
            cam,
            dam,
            extractor_params,
            distortion_norm,
        })
    }

    /// Sets the distortion standardization from sample feature rows:
    /// per-slot mean and inverse std (1 for constant slots).
    pub fn fit_distortion_norm(&self, store: &mut ParamStore, rows: &Matrix) {
        let n = rows.rows().max(1) as f64;
        let mean = rows.mean_rows();
        let mut scale = Matrix::filled(1, rows.cols(), 1.0);
        for c in 0..rows.cols() {
            let m = mean.get(0, c);
            let var = (0..rows.rows()).map(|r| (rows.get(r, c) - m).powi(2)).sum::<f64>() / n;
            if var > 1e-16 {
                scale.set(0, c, 1.0 / var.sqrt());
            }
        }
        *store.get_mut(self.distortion_norm.0) = mean;
        *store.get_mut(self.distortion_norm.1) = scale;
    }

    /// Standardized copy of distortion feature rows.
    pub fn normalize_distortion(&self, store: &ParamStore, rows: &Matrix) -> Matrix {
        let (shift, scale) = (store.get(self.distortion_norm.0), store.get(self.distortion_norm.1));
        let mut out = rows.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - shift.get(0, c)) * scale.get(0, c);
            }
        }
        out
    }

    /// Frozen extractor parameter ids.
    pub fn extractor_params(&self) -> &[ParamId] {
        &self.extractor_params
    }

    /// Every frozen parameter id: extractor weights and the distortion
    /// standardization.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        let mut p = self.extractor_params.clone();
        p.extend([self.distortion_norm.0, self.distortion_norm.1]);
        p
    }

    /// Parameters a run with these toggles can update.
    pub fn active_params(&self) -> Vec<ParamId> {
        let t = self.config.toggles;
        let mut p = self.backbone.params();
        if t.qrs {
            p.extend(self.quality_adapter.params());
        }
        if t.cam {
            p.extend(self.cam.iter().flat_map(Modulator::params));
        }
        if t.dam {
            p.extend(self.dam.iter().flat_map(Modulator::params));
            p.extend(self.distortion_adapter.params());
        }
        p
    }

    /// Generator parameters of the active modulators.
    pub fn generator_params(&self) -> Vec<ParamId> {
        let t = self.config.toggles;
        let mut p = Vec::new();
        if t.cam {
            p.extend(self.cam.iter().flat_map(Modulator::generator_params));
        }
        if t.dam {
            p.extend(self.dam.iter().flat_map(Modulator::generator_params));
        }
        p
    }

    /// Keyframe tokens of `video`, pooled to the fragment grid.
    pub fn context(&self, video: &VideoTensor) -> Result<ClipContext> {
        let keyframes = select_keyframes(video.frames(), self.config.keyframes)?;
        let side = self.config.grid_side;
        let semantic = extract_semantic(&self.semantic_extractor, video, &keyframes)?
            .into_iter()
            .map(|s| if self.semantic_extractor.patches_per_side() == side { Ok(s) } else { s.pooled_to_grid(side) })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClipContext { semantic, keyframes, frames: video.frames() })
    }

    /// Samples fragments and extracts their distortion features.
    pub fn sample_inputs<R: Rng + ?Sized>(&self, video: &VideoTensor, rng: &mut R) -> Result<ClipInputs> {
        let fragments = partition_and_sample(video, &self.config.grid()?, rng)?;
        let distortion = extract_distortion(&self.distortion_extractor, &fragments)?.features;
        Ok(ClipInputs { fragments, distortion })
    }

    /// Patch importance averaged over keyframes and the two layers, as an
    /// `N × 1` column.
    pub fn importance(&self, g: &Graph, store: &ParamStore, ctx: &ClipContext) -> Result<Var> {
        let mut parts = Vec::new();
        for kf in &ctx.semantic {
            for layer in &kf.layers {
                let cls = g.constant(Matrix::row_vector(layer.cls.clone()));
                let q = quality_adapt(g, store, &self.quality_adapter, cls)?;
                parts.push(importance_var(g, q, &layer.patches));
            }
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = g.add(acc, p);
        }
        Ok(g.scale(acc, 1.0 / parts.len() as f64))
    }

    /// Full forward for one clip. `rng` drives the Monte-Carlo Jacobian of
    /// the selection gate.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &Graph,
        store: &ParamStore,
        ctx: &ClipContext,
        inputs: &ClipInputs,
        rng: &mut R,
    ) -> Result<ClipOutput> {
        let cfg = &self.config;
        let t = cfg.toggles;
        let n = cfg.grid_side * cfg.grid_side;
        if inputs.fragments.len() != n || inputs.distortion.rows() != n {
            return Err(invalid(format!("expected {n} fragments and feature rows")));
        }
        let (used, side, gate, window_scores, importance, selection) = if t.qrs {
            let layout = cfg.layout()?;
            let imp = self.importance(g, store, ctx)?;
            let ws = g.matmul(g.constant(layout.pooling_matrix()), imp);
            let scores: Vec<f64> = g.value(ws).data().to_vec();
            let mut sel = perturbed_topk(&scores, 1, cfg.sigma, cfg.n_samples, rng)?;
            sel.hard_indices = layout.window_indices(sel.chosen[0]);
            let gate = straight_through_gate(g, ws, &sel);
            let map = ImportanceMap { patch_scores: g.value(imp).data().to_vec(), window_scores: scores, layout };
            (sel.hard_indices.clone(), cfg.target_side, Some(gate), Some(ws), Some(map), Some(sel))
        } else {
            ((0..n).collect(), cfg.grid_side, None, None, None, None)
        };
        let gathered = if t.qrs { gather_indices(&inputs.fragments, &used)? } else { inputs.fragments.clone() };
        let (patches, grid) = tokenize(&compose(&gathered), &cfg.backbone)?;
        let mut tokens = self.backbone.embed(g, store, g.constant(patches), grid)?;
        if let Some(gate) = gate {
            tokens = g.mul_scalar_var(tokens, gate);
        }

        let stage_grids = cfg.backbone.stage_grids(grid)?;
        let slice_frames = cfg.backbone.patch[0] as f64;
        let cam_memory: Vec<Memory> = if t.cam {
            cfg.backbone
                .injection_stages
                .iter()
                .enumerate()
                .map(|(j, &s)| self.semantic_memory(g, ctx, &used, side, stage_grids[s], slice_frames, j))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let adapted = if t.dam {
            let rows = g.constant(self.normalize_distortion(store, &inputs.distortion.gather_rows(&used)));
            Some(distortion_adapt(g, store, &self.distortion_adapter, rows)?)
        } else {
            None
        };
        let injection = &cfg.backbone.injection_stages;
        let mut hook = |g: &Graph, stage: usize, x: Var, grid: TokenGrid| -> Result<Var> {
            let j = injection.iter().position(|&s| s == stage).expect("hook only fires at injection stages");
            let mut x = x;
            if t.cam {
                x = self.cam[j].forward(g, store, x, grid, &cam_memory[j])?;
            }
            if let Some(a) = adapted {
                x = self.dam[j].forward(g, store, x, grid, &Memory { tokens: a, groups: 1, side })?;
            }
            Ok(x)
        };
        let score = self.backbone.forward_tokens(g, store, tokens, grid, &mut hook)?;
        Ok(ClipOutput { score, adapted_distortion: adapted, window_scores, importance, selection, used })
    }

    /// Patch tokens of the keyframe nearest to each temporal token slice,
    /// restricted to the used fragments. Injection `j` reads extractor layer
    /// `L − (J − 1 − j)`, so the last injection sees the last layer.
    #[allow(clippy::too_many_arguments)]
    fn semantic_memory(
        &self,
        g: &Graph,
        ctx: &ClipContext,
        used: &[usize],
        side: usize,
        grid: TokenGrid,
        slice_frames: f64,
        j: usize,
    ) -> Result<Memory> {
        let layers = ctx.semantic[0].layers.len();
        let n_inj = self.config.backbone.injection_stages.len();
        let layer = (layers + j).saturating_sub(n_inj).min(layers - 1);
        let centers: Vec<f64> = (0..grid.t).map(|s| s as f64 * slice_frames + (slice_frames - 1.0) / 2.0).collect();
        let nearest = nearest_keyframes(&ctx.keyframes, &centers);
        let blocks: Vec<Matrix> =
            nearest.iter().map(|&k| ctx.semantic[k].layers[layer].patches.gather_rows(used)).collect();
        let groups = if grid.t == 1 { 1 } else { grid.t };
        let rows: Vec<Vec<f64>> =
            blocks.iter().take(groups).flat_map(|b| (0..b.rows()).map(|r| b.row(r).to_vec()).collect::<Vec<_>>()).collect();
        Ok(Memory { tokens: g.constant(Matrix::from_rows(&rows)), groups, side })
    }

    /// Tape-free score with fragments drawn from `rng`.
    pub fn score<R: Rng + ?Sized>(&self, store: &ParamStore, video: &VideoTensor, rng: &mut R) -> Result<f64> {
        let ctx = self.context(video)?;
        let inputs = self.sample_inputs(video, rng)?;
        let g = Graph::new();
        let out = self.forward(&g, store, &ctx, &inputs, rng)?;
        let v = g.value(out.score).item();
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded;

    fn clip(seed: u64) -> VideoTensor {
        let mut rng = seeded(seed);
        let data = (0..8 * 64 * 64 * 3).map(|_| rng.gen::<f32>()).collect();
        VideoTensor::new(8, 64, 64, 3, data).unwrap()
    }

    #[test]
    fn desk_shapes() {
        let mut store = ParamStore::new();
        let m = Ksvqe::new(&mut store, ModelConfig::desk(), &mut seeded(1)).unwrap();
        let v = clip(2);
        let ctx = m.context(&v).unwrap();
        assert_eq!(ctx.keyframes, vec![0, 4]);
        assert_eq!(ctx.semantic[0].num_patches(), 64);
        let inputs = m.sample_inputs(&v, &mut seeded(3)).unwrap();
        let g = Graph::new();
        let out = m.forward(&g, &store, &ctx, &inputs, &mut seeded(4)).unwrap();
        assert_eq!(g.shape(out.score), (1, 1));
        assert_eq!(out.used.len(), 36);
        assert_eq!(g.shape(out.adapted_distortion.unwrap()), (36, 32));
        assert_eq!(out.selection.unwrap().soft_indicator.len(), 9);
    }

    #[test]
    fn identity_init_matches_plain_backbone() {
        let mut store = ParamStore::new();
        let mut cfg = ModelConfig::desk();
        cfg.toggles = Toggles { qrs: false, cam: true, dam: true };
        let m = Ksvqe::new(&mut store, cfg, &mut seeded(1)).unwrap();
        let v = clip(5);
        let ctx = m.context(&v).unwrap();
        let inputs = m.sample_inputs(&v, &mut seeded(6)).unwrap();
        let g = Graph::new();
        let full = m.forward(&g, &store, &ctx, &inputs, &mut seeded(7)).unwrap();
        let (p, grid) = tokenize(&compose(&inputs.fragments), &m.config.backbone).unwrap();
        let plain = m.backbone.forward(&g, &store, g.constant(p), grid).unwrap();
        assert_eq!(g.value(full.score).item().to_bits(), g.value(plain).item().to_bits());
    }

    #[test]
    fn grid_has_eight_rows() {
        let grid = Toggles::full_grid();
        assert_eq!(grid.len(), 8);
        assert_eq!(grid[0], Toggles::BASELINE);
        assert_eq!(grid[7].label(), "QRS+CaM+DaM");
    }
}
