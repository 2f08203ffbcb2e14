//! Quality-aware region selection.
//!
//! Patch importance is the cosine between the adapted class token and each
//! patch token. Importance is pooled over candidate windows and a window is
//! picked by Top-K over the pooled scores. Training uses the perturbed
//! maximizer: the forward pass keeps the noise-free hard choice, and the
//! backward pass uses the Monte-Carlo Jacobian
//! `d E[Y(θ + σZ)] / dθ = E[Y(θ + σZ) Zᵀ] / σ` of the soft indicator.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::{dot, Matrix};

/// Candidate windows over a square score grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowLayout {
    pub grid_side: usize,
    pub window_side: usize,
    pub stride: usize,
}

impl WindowLayout {
    /// Stride-1 sliding windows (9×9 grid, 7×7 window → 9 candidates).
    pub fn sliding(grid_side: usize, window_side: usize) -> Result<Self> {
        Self::new(grid_side, window_side, 1)
    }

    /// Non-overlapping tiling with stride equal to the window size.
    pub fn tiled(grid_side: usize, window_side: usize) -> Result<Self> {
        Self::new(grid_side, window_side, window_side)
    }

    pub fn new(grid_side: usize, window_side: usize, stride: usize) -> Result<Self> {
        if window_side == 0 || stride == 0 {
            return Err(invalid("window side and stride must be positive"));
        }
        if window_side > grid_side {
            return Err(invalid(format!("window {window_side} exceeds grid {grid_side}")));
        }
        Ok(Self { grid_side, window_side, stride })
    }

    pub fn anchors_per_axis(&self) -> usize {
        (self.grid_side - self.window_side) / self.stride + 1
    }

    pub fn num_windows(&self) -> usize {
        self.anchors_per_axis().pow(2)
    }

    /// Top-left `(row, col)` of window `m`.
    pub fn anchor(&self, m: usize) -> (usize, usize) {
        let a = self.anchors_per_axis();
        ((m / a) * self.stride, (m % a) * self.stride)
    }

    /// Row-major patch indices covered by window `m`.
    pub fn window_indices(&self, m: usize) -> Vec<usize> {
        let (r0, c0) = self.anchor(m);
        let mut out = Vec::with_capacity(self.window_side * self.window_side);
        for r in r0..r0 + self.window_side {
            for c in c0..c0 + self.window_side {
                out.push(r * self.grid_side + c);
            }
        }
        out
    }

    /// `M × N` averaging matrix: window scores = `A · I`.
    pub fn pooling_matrix(&self) -> Matrix {
        let n = self.grid_side * self.grid_side;
        let m = self.num_windows();
        let w = 1.0 / (self.window_side * self.window_side) as f64;
        let mut a = Matrix::zeros(m, n);
        for k in 0..m {
            for i in self.window_indices(k) {
                a.set(k, i, w);
            }
        }
        a
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    /// Per-patch importance, row-major over the grid.
    pub patch_scores: Vec<f64>,
    /// Pooled score of each candidate window.
    pub window_scores: Vec<f64>,
    pub layout: WindowLayout,
}

impl ImportanceMap {
    pub fn new(patch_scores: Vec<f64>, layout: WindowLayout) -> Result<Self> {
        let window_scores = aggregate(&patch_scores, &layout)?;
        Ok(Self { patch_scores, window_scores, layout })
    }

    pub fn grid_side(&self) -> usize {
        self.layout.grid_side
    }

    /// Scores reshaped to the grid.
    pub fn grid(&self) -> Matrix {
        let s = self.layout.grid_side;
        Matrix::from_vec(s, s, self.patch_scores.clone())
    }
}

/// Output of a (perturbed) Top-K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected patch indices. For region selection these are the window's
    /// patches in row-major order; for plain Top-K they are sorted by score.
    pub hard_indices: Vec<usize>,
    /// Monte-Carlo mean of perturbed K-hot indicators over the candidates.
    pub soft_indicator: Vec<f64>,
    pub sigma: f64,
    pub n_samples: usize,
    /// Candidates chosen by the noise-free path.
    pub chosen: Vec<usize>,
    /// `J[i][j] = E[Y_i Z_j] / σ`; absent when σ = 0.
    #[serde(skip)]
    pub jacobian: Option<Matrix>,
}

/// Cosine of `q` with every row of `patches`. Zero-norm rows score 0 with a
/// warning; a zero query is an error.
pub fn importance(q: &[f64], patches: &Matrix) -> Result<Vec<f64>> {
    if q.len() != patches.cols() {
        return Err(invalid(format!("query width {} vs patch width {}", q.len(), patches.cols())));
    }
    let qn = dot(q, q).sqrt();
    if qn == 0.0 {
        return Err(Error::DegenerateFeature("zero quality query".into()));
    }
    Ok((0..patches.rows())
        .map(|k| {
            let p = patches.row(k);
            let pn = dot(p, p).sqrt();
            if pn == 0.0 {
                log::warn!("patch {k} has a zero feature vector; importance set to 0");
                0.0
            } else {
                dot(q, p) / (qn * pn)
            }
        })
        .collect())
}

/// Importance fused over extractor layers by averaging the per-layer cosines.
pub fn importance_layers(queries: &[Vec<f64>], patches: &[Matrix]) -> Result<Vec<f64>> {
    if queries.is_empty() || queries.len() != patches.len() {
        return Err(invalid("one query per patch layer required"));
    }
    let mut acc = vec![0.0; patches[0].rows()];
    for (q, p) in queries.iter().zip(patches) {
        for (a, s) in acc.iter_mut().zip(importance(q, p)?) {
            *a += s;
        }
    }
    let n = queries.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Differentiable importance: `q` is a `1 × C` variable, `patches` is
/// constant (frozen extractor output). Returns an `N × 1` column.
pub fn importance_var(g: &Graph, q: Var, patches: &Matrix) -> Var {
    let inv_norms = Matrix::col_vector(
        (0..patches.rows())
            .map(|k| {
                let n = dot(patches.row(k), patches.row(k)).sqrt();
                if n == 0.0 {
                    0.0
                } else {
                    1.0 / n
                }
            })
            .collect(),
    );
    let p = g.constant(patches.clone());
    let dots = g.matmul_t(p, q);
    let scaled = g.mul_col(dots, g.constant(inv_norms));
    let qn = g.sqrt(g.sum_all(g.square(q)));
    let inv_q = g.div(g.constant(Matrix::scalar(1.0)), qn);
    g.mul_scalar_var(scaled, inv_q)
}

/// Mean of the grid scores over each candidate window.
pub fn aggregate(patch_scores: &[f64], layout: &WindowLayout) -> Result<Vec<f64>> {
    let n = layout.grid_side * layout.grid_side;
    if patch_scores.len() != n {
        return Err(invalid(format!("{} scores for a {}x{} grid", patch_scores.len(), layout.grid_side, layout.grid_side)));
    }
    if layout.window_side > layout.grid_side {
        return Err(invalid("window exceeds grid"));
    }
    let area = (layout.window_side * layout.window_side) as f64;
    Ok((0..layout.num_windows())
        .map(|m| layout.window_indices(m).iter().map(|&i| patch_scores[i]).sum::<f64>() / area)
        .collect())
}

/// Indices of the `k` largest scores, ties to the lower index.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Perturbed Top-K over `scores`.
pub fn perturbed_topk<R: Rng + ?Sized>(
    scores: &[f64],
    k: usize,
    sigma: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<SelectionResult> {
    let m = scores.len();
    if k == 0 || k > m {
        return Err(invalid(format!("k={k} with {m} candidates")));
    }
    if !(sigma >= 0.0) || n_samples == 0 {
        return Err(invalid(format!("sigma={sigma}, n_samples={n_samples}")));
    }
    let chosen = topk_indices(scores, k);
    let mut soft = vec![0.0; m];
    let mut jac = Matrix::zeros(m, m);
    if sigma == 0.0 {
        for &i in &chosen {
            soft[i] = 1.0;
        }
    } else {
        let mut z = vec![0.0; m];
        let mut perturbed = vec![0.0; m];
        for _ in 0..n_samples {
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = StandardNormal.sample(rng);
                perturbed[j] = scores[j] + sigma * *zj;
            }
            for i in topk_indices(&perturbed, k) {
                soft[i] += 1.0;
                for (jv, zj) in jac.row_mut(i).iter_mut().zip(&z) {
                    *jv += zj;
                }
            }
        }
        let inv = 1.0 / n_samples as f64;
        soft.iter_mut().for_each(|s| *s *= inv);
        jac = jac.scale(inv / sigma);
    }
    Ok(SelectionResult {
        hard_indices: chosen.clone(),
        soft_indicator: soft,
        sigma,
        n_samples,
        chosen,
        jacobian: (sigma > 0.0).then_some(jac),
    })
}

/// Picks one `target_side × target_side` window by perturbed Top-1 over the
/// pooled window scores.
pub fn select_region<R: Rng + ?Sized>(
    imp: &ImportanceMap,
    target_side: usize,
    sigma: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<SelectionResult> {
    if target_side > imp.grid_side() || target_side == 0 {
        return Err(invalid(format!("target side {target_side} vs grid side {}", imp.grid_side())));
    }
    let layout = if imp.layout.window_side == target_side {
        imp.layout
    } else {
        WindowLayout::sliding(imp.grid_side(), target_side)?
    };
    let window_scores = aggregate(&imp.patch_scores, &layout)?;
    let mut sel = perturbed_topk(&window_scores, 1, sigma, n_samples, rng)?;
    sel.hard_indices = layout.window_indices(sel.chosen[0]);
    Ok(sel)
}

/// Top-K directly over patches, without window pooling.
pub fn select_patches<R: Rng + ?Sized>(
    imp: &ImportanceMap,
    k: usize,
    sigma: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<SelectionResult> {
    perturbed_topk(&imp.patch_scores, k, sigma, n_samples, rng)
}

/// Scalar gate whose value is exactly 1 and whose gradient with respect to
/// the `M × 1` window-score column is the perturbed-maximizer Jacobian row
/// of the chosen window. Multiplying the gathered fragment tokens by it
/// keeps the forward pass hard and routes gradients into the scores.
pub fn straight_through_gate(g: &Graph, window_scores: Var, sel: &SelectionResult) -> Var {
    let m = g.shape(window_scores).0;
    let row = match &sel.jacobian {
        Some(j) => Matrix::row_vector(j.row(sel.chosen[0]).to_vec()),
        None => Matrix::zeros(1, m),
    };
    let proj = g.matmul(g.constant(row), window_scores);
    let frozen = g.detach(proj);
    g.add_scalar(g.sub(proj, frozen), 1.0)
}

/// JSON-exportable record of one region selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub clip_id: String,
    pub grid_side: usize,
    pub window_side: usize,
    pub patch_scores: Vec<f64>,
    pub window_scores: Vec<f64>,
    pub chosen_window: usize,
    pub window_anchor: (usize, usize),
    pub hard_indices: Vec<usize>,
    pub soft_indicator: Vec<f64>,
}

impl SelectionTrace {
    pub fn new(clip_id: impl Into<String>, imp: &ImportanceMap, sel: &SelectionResult, window_side: usize) -> Result<Self> {
        let layout = WindowLayout::new(imp.grid_side(), window_side, imp.layout.stride)?;
        Ok(Self {
            clip_id: clip_id.into(),
            grid_side: imp.grid_side(),
            window_side,
            patch_scores: imp.patch_scores.clone(),
            window_scores: aggregate(&imp.patch_scores, &layout)?,
            chosen_window: sel.chosen[0],
            window_anchor: layout.anchor(sel.chosen[0]),
            hard_indices: sel.hard_indices.clone(),
            soft_indicator: sel.soft_indicator.clone(),
        })
    }
}
