//! Compact 3D shifted-window transformer with a scalar regression head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{invalid, Result};
use crate::modulation::TokenGrid;
use crate::nn::{AttnSpec, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::Matrix;
use crate::video::VideoTensor;

const MASK: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Window extent `(t, h, w)` in tokens; clamped to the full axis when it
    /// does not divide the grid.
    pub window: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub channels: usize,
    /// Patch embedding extent `(frames, height, width)` in pixels.
    pub patch: [usize; 3],
    pub stages: Vec<StageSpec>,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    /// Stages whose output is handed to the modulation hook.
    pub injection_stages: Vec<usize>,
    /// Zero the last head layer so every score starts at 0.
    pub zero_head: bool,
}

impl BackboneSpec {
    /// Two small stages; one token per `fragment × fragment` cell and per
    /// four frames.
    pub fn desk(fragment: usize, channels: usize) -> Self {
        Self {
            channels,
            patch: [4, fragment, fragment],
            stages: vec![
                StageSpec { depth: 1, width: 24, heads: 2, window: [2, 2, 2] },
                StageSpec { depth: 1, width: 32, heads: 2, window: [2, 4, 4] },
            ],
            mlp_ratio: 2,
            head_hidden: 32,
            injection_stages: vec![0, 1],
            zero_head: false,
        }
    }

    /// Swin-tiny shaped approximation ending at width 768.
    pub fn paper() -> Self {
        let stage = |depth, width, heads| StageSpec { depth, width, heads, window: [8, 7, 7] };
        Self {
            channels: 3,
            patch: [2, 4, 4],
            stages: vec![stage(2, 96, 3), stage(2, 192, 6), stage(6, 384, 12), stage(2, 768, 24)],
            mlp_ratio: 4,
            head_hidden: 64,
            injection_stages: vec![2, 3],
            zero_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.patch.contains(&0) || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(invalid("backbone needs at least one stage and nonzero patch/channels"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 || s.window.contains(&0) {
                return Err(invalid(format!("stage {i} has zero depth or window")));
            }
            AttnSpec::new(s.width, s.heads)?;
        }
        if let Some(&bad) = self.injection_stages.iter().find(|&&s| s >= self.stages.len()) {
            return Err(invalid(format!("injection stage {bad} out of range")));
        }
        Ok(())
    }

    pub fn final_width(&self) -> usize {
        self.stages[self.stages.len() - 1].width
    }

    pub fn patch_dim(&self) -> usize {
        self.patch.iter().product::<usize>() * self.channels
    }

    /// Token grid after patch embedding of a `frames × height × width` clip.
    pub fn token_grid(&self, frames: usize, height: usize, width: usize) -> Result<TokenGrid> {
        let [pt, ph, pw] = self.patch;
        if !frames.is_multiple_of(pt) || !height.is_multiple_of(ph) || !width.is_multiple_of(pw) {
            return Err(invalid(format!("clip {frames}x{height}x{width} is not a multiple of patch {:?}", self.patch)));
        }
        Ok(TokenGrid::new(frames / pt, height / ph, width / pw))
    }

    /// Token grid seen by every stage.
    pub fn stage_grids(&self, input: TokenGrid) -> Result<Vec<TokenGrid>> {
        let mut grids = vec![input];
        for i in 1..self.stages.len() {
            grids.push(merged(grids[i - 1])?);
        }
        Ok(grids)
    }
}

fn merged(g: TokenGrid) -> Result<TokenGrid> {
    if !g.h.is_multiple_of(2) || !g.w.is_multiple_of(2) {
        return Err(invalid(format!("patch merging needs even spatial sides, got {}x{}", g.h, g.w)));
    }
    Ok(TokenGrid::new(g.t, g.h / 2, g.w / 2))
}

/// Flattened `(frame, y, x, channel)` pixels of each patch, centered at 0.5.
pub fn tokenize(video: &VideoTensor, spec: &BackboneSpec) -> Result<(Matrix, TokenGrid)> {
    if video.channels() != spec.channels {
        return Err(invalid(format!("clip has {} channels, backbone expects {}", video.channels(), spec.channels)));
    }
    let grid = spec.token_grid(video.frames(), video.height(), video.width())?;
    let [pt, ph, pw] = spec.patch;
    let mut m = Matrix::zeros(grid.len(), spec.patch_dim());
    for t in 0..grid.t {
        for y in 0..grid.h {
            for x in 0..grid.w {
                let row = m.row_mut(grid.index(t, y, x));
                let mut k = 0;
                for dt in 0..pt {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            for c in 0..spec.channels {
                                row[k] = video.at(t * pt + dt, y * ph + dy, x * pw + dx, c) as f64 - 0.5;
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((m, grid))
}

/// Parameter-free sinusoidal encoding; the width is split evenly between
/// the time, row and column axes (leftover channels stay zero).
pub fn positional_encoding(grid: TokenGrid, width: usize) -> Matrix {
    let per_axis = (width / 6) * 2;
    let mut m = Matrix::zeros(grid.len(), width);
    if per_axis == 0 {
        return m;
    }
    for t in 0..grid.t {
        for y in 0..grid.h {
            for x in 0..grid.w {
                let row = m.row_mut(grid.index(t, y, x));
                for (a, p) in [t, y, x].into_iter().enumerate() {
                    for i in 0..per_axis / 2 {
                        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / per_axis as f64);
                        row[a * per_axis + 2 * i] = (p as f64 * freq).sin();
                        row[a * per_axis + 2 * i + 1] = (p as f64 * freq).cos();
                    }
                }
            }
        }
    }
    m
}

/// Window-major row order after a cyclic shift, plus the attention mask
/// that keeps wrapped-around regions apart.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPlan {
    pub window: [usize; 3],
    pub shift: [usize; 3],
    /// `perm[k]` is the grid row placed at window-major position `k`.
    pub perm: Vec<usize>,
    pub inverse: Vec<usize>,
    /// `S × window_len` additive mask, present when any axis is shifted.
    pub mask: Option<Matrix>,
}

impl WindowPlan {
    pub fn new(grid: TokenGrid, window: [usize; 3], shifted: bool) -> Self {
        let dims = [grid.t, grid.h, grid.w];
        let win: [usize; 3] = std::array::from_fn(|a| {
            let w = window[a].min(dims[a]);
            if dims[a].is_multiple_of(w) {
                w
            } else {
                dims[a]
            }
        });
        let shift: [usize; 3] = std::array::from_fn(|a| if shifted && win[a] < dims[a] { win[a] / 2 } else { 0 });
        let counts: [usize; 3] = std::array::from_fn(|a| dims[a] / win[a]);
        let len = win.iter().product::<usize>();
        let region = |a: usize, p: usize| -> usize {
            if shift[a] == 0 || p < dims[a] - win[a] {
                0
            } else if p < dims[a] - shift[a] {
                1
            } else {
                2
            }
        };
        let mut perm = Vec::with_capacity(grid.len());
        let mut regions = Vec::with_capacity(grid.len());
        for bt in 0..counts[0] {
            for by in 0..counts[1] {
                for bx in 0..counts[2] {
                    for dt in 0..win[0] {
                        for dy in 0..win[1] {
                            for dx in 0..win[2] {
                                let p = [bt * win[0] + dt, by * win[1] + dy, bx * win[2] + dx];
                                let src: [usize; 3] = std::array::from_fn(|a| (p[a] + shift[a]) % dims[a]);
                                perm.push(grid.index(src[0], src[1], src[2]));
                                regions.push((region(0, p[0]) * 3 + region(1, p[1])) * 3 + region(2, p[2]));
                            }
                        }
                    }
                }
            }
        }
        let mut inverse = vec![0; perm.len()];
        for (k, &r) in perm.iter().enumerate() {
            inverse[r] = k;
        }
        let mask = shift.iter().any(|&s| s > 0).then(|| {
            let mut m = Matrix::zeros(grid.len(), len);
            for k in 0..grid.len() {
                let start = k / len * len;
                for j in 0..len {
                    if regions[k] != regions[start + j] {
                        m.set(k, j, MASK);
                    }
                }
            }
            m
        });
        Self { window: win, shift, perm, inverse, mask }
    }

    pub fn num_windows(&self) -> usize {
        self.perm.len() / self.window.iter().product::<usize>()
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    shifted: bool,
    window: [usize; 3],
}

impl Block {
    fn forward(&self, g: &Graph, store: &ParamStore, x: Var, grid: TokenGrid) -> Result<Var> {
        let plan = WindowPlan::new(grid, self.window, self.shifted);
        let h = self.norm1.forward(g, store, x);
        let hw = g.gather_rows(h, &plan.perm);
        let a = self.attn.forward(g, store, hw, hw, plan.num_windows(), plan.mask.as_ref())?;
        let x = g.add(x, g.gather_rows(a, &plan.inverse));
        let h = self.norm2.forward(g, store, x);
        let h = self.fc2.forward(g, store, g.gelu(self.fc1.forward(g, store, h)));
        Ok(g.add(x, h))
    }
}

#[derive(Clone, Debug)]
struct Merge {
    norm: LayerNorm,
    reduce: Linear,
}

impl Merge {
    fn forward(&self, g: &Graph, store: &ParamStore, x: Var, grid: TokenGrid) -> Result<(Var, TokenGrid)> {
        let out = merged(grid)?;
        let parts: Vec<Var> = [(0, 0), (1, 0), (0, 1), (1, 1)]
            .iter()
            .map(|&(oy, ox)| {
                let mut idx = Vec::with_capacity(out.len());
                for t in 0..out.t {
                    for y in 0..out.h {
                        for xx in 0..out.w {
                            idx.push(grid.index(t, 2 * y + oy, 2 * xx + ox));
                        }
                    }
                }
                g.gather_rows(x, &idx)
            })
            .collect();
        let cat = g.concat_cols(&parts);
        Ok((self.reduce.forward(g, store, self.norm.forward(g, store, cat)), out))
    }
}

#[derive(Clone, Debug)]
struct Stage {
    merge: Option<Merge>,
    blocks: Vec<Block>,
}

/// Hook invoked with `(stage, tokens, grid)` after each injection stage.
pub type StageHook<'a> = dyn FnMut(&Graph, usize, Var, TokenGrid) -> Result<Var> + 'a;

#[derive(Clone, Debug)]
pub struct Backbone {
    pub spec: BackboneSpec,
    embed: Linear,
    stages: Vec<Stage>,
    final_norm: LayerNorm,
    head1: Linear,
    head2: Linear,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: BackboneSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let w0 = spec.stages[0].width;
        let embed = Linear::new(store, &format!("{name}.embed"), spec.patch_dim(), w0, rng);
        let mut stages = Vec::with_capacity(spec.stages.len());
        for (i, s) in spec.stages.iter().enumerate() {
            let merge = (i > 0).then(|| {
                let prev = spec.stages[i - 1].width;
                Merge {
                    norm: LayerNorm::new(store, &format!("{name}.s{i}.merge.norm"), 4 * prev),
                    reduce: Linear::new(store, &format!("{name}.s{i}.merge.reduce"), 4 * prev, s.width, rng),
                }
            });
            let attn = AttnSpec::new(s.width, s.heads)?;
            let blocks = (0..s.depth)
                .map(|b| {
                    let p = format!("{name}.s{i}.b{b}");
                    Block {
                        norm1: LayerNorm::new(store, &format!("{p}.norm1"), s.width),
                        attn: MultiHeadAttention::new(store, &format!("{p}.attn"), s.width, s.width, attn, rng),
                        norm2: LayerNorm::new(store, &format!("{p}.norm2"), s.width),
                        fc1: Linear::new(store, &format!("{p}.fc1"), s.width, s.width * spec.mlp_ratio, rng),
                        fc2: Linear::new(store, &format!("{p}.fc2"), s.width * spec.mlp_ratio, s.width, rng),
                        shifted: b % 2 == 1,
                        window: s.window,
                    }
                })
                .collect();
            stages.push(Stage { merge, blocks });
        }
        let wf = spec.final_width();
        let final_norm = LayerNorm::new(store, &format!("{name}.norm"), wf);
        let head1 = Linear::new(store, &format!("{name}.head.fc0"), wf, spec.head_hidden, rng);
        let head2 = if spec.zero_head {
            Linear::constant(store, &format!("{name}.head.fc1"), spec.head_hidden, 1, 0.0)
        } else {
            Linear::new(store, &format!("{name}.head.fc1"), spec.head_hidden, 1, rng)
        };
        Ok(Self { spec, embed, stages, final_norm, head1, head2 })
    }

    /// Embedded tokens with positional encoding, before any stage.
    pub fn embed(&self, g: &Graph, store: &ParamStore, patches: Var, grid: TokenGrid) -> Result<Var> {
        let (s, d) = g.shape(patches);
        if s != grid.len() || d != self.spec.patch_dim() {
            return Err(invalid(format!("patch matrix {s}x{d} does not match grid {grid:?}")));
        }
        let e = self.embed.forward(g, store, patches);
        Ok(g.add(e, g.constant(positional_encoding(grid, self.spec.stages[0].width))))
    }

    /// Runs the stages on embedded tokens and regresses a `1 × 1` score.
    pub fn forward_tokens(
        &self,
        g: &Graph,
        store: &ParamStore,
        tokens: Var,
        grid: TokenGrid,
        hook: &mut StageHook<'_>,
    ) -> Result<Var> {
        let (mut x, mut grid) = (tokens, grid);
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(m) = &stage.merge {
                (x, grid) = m.forward(g, store, x, grid)?;
            }
            for b in &stage.blocks {
                x = b.forward(g, store, x, grid)?;
            }
            if self.spec.injection_stages.contains(&i) {
                x = hook(g, i, x, grid)?;
            }
        }
        let pooled = g.mean_rows(self.final_norm.forward(g, store, x));
        let h = g.gelu(self.head1.forward(g, store, pooled));
        Ok(self.head2.forward(g, store, h))
    }

    /// Plain forward without modulation.
    pub fn forward(&self, g: &Graph, store: &ParamStore, patches: Var, grid: TokenGrid) -> Result<Var> {
        let tokens = self.embed(g, store, patches, grid)?;
        self.forward_tokens(g, store, tokens, grid, &mut |_, _, x, _| Ok(x))
    }

    /// Tape-free score of a clip.
    pub fn score(&self, store: &ParamStore, video: &VideoTensor) -> Result<f64> {
        let (m, grid) = tokenize(video, &self.spec)?;
        let g = Graph::new();
        let p = g.constant(m);
        let out = self.forward(&g, store, p, grid)?;
        let v = g.value(out).item();
        Ok(v)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.embed.params().to_vec();
        let ln = |n: &LayerNorm| [n.gamma, n.beta];
        for s in &self.stages {
            if let Some(m) = &s.merge {
                p.extend(ln(&m.norm));
                p.extend(m.reduce.params());
            }
            for b in &s.blocks {
                p.extend(ln(&b.norm1));
                p.extend(ln(&b.norm2));
                for l in [&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.o, &b.fc1, &b.fc2] {
                    p.extend(l.params());
                }
            }
        }
        p.extend(ln(&self.final_norm));
        p.extend(self.head1.params());
        p.extend(self.head2.params());
        p
    }
}
