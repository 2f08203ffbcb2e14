//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any criterion fails.
//!
//! `cargo test -p ksvqe --test acceptance -- 1 4 9` runs a subset.

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use ksvqe::autograd::{Graph, ParamStore};
use ksvqe::fragments::{compose, gather_selected, partition_and_sample, GridSpec};
use ksvqe::metrics::{plcc, plcc_loss_value, rank_accuracy, srocc, RankPair};
use ksvqe::model::{Ksvqe, ModelConfig, Toggles};
use ksvqe::modulation::{ablation_variant, Memory, Modulator, TokenGrid, VariantKind};
use ksvqe::nn::{Adapter, AttnSpec};
use ksvqe::qrs::{importance_layers, importance_var, perturbed_topk, select_region, ImportanceMap, WindowLayout};
use ksvqe::subjective::{clean, CleaningOptions, RatingMatrix};
use ksvqe::trainer::{ablate, train, TrainConfig, Trainer};
use ksvqe::worksim::{check_trends, generate_corpus, pseudo_mos, Corpus, Enhancement, Preprocess, QualityTier, WorksimConfig};
use ksvqe::{seeded, Matrix, VideoTensor};
use rand::Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

const CRITERIA: [(u32, &str, fn() -> Outcome); 9] = [
    (1, "differentiable top-k", criterion_topk),
    (2, "importance / CaM / DaM dense oracles", criterion_dense_oracles),
    (3, "gradient audit", criterion_gradients),
    (4, "metrics oracle", criterion_metrics),
    (5, "BT.500 pipeline", criterion_bt500),
    (6, "workflow simulator trends", criterion_trends),
    (7, "desk training", criterion_desk_training),
    (8, "localized ablation", criterion_ablation),
    (9, "fragment geometry", criterion_geometry),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = if out.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!out.pass);
        println!("[{tag}] {n} {name}: {} ({:.1} s)", out.detail, t0.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn default_corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| generate_corpus(&WorksimConfig::default(), 0).expect("corpus"))
}

fn localized_corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| generate_corpus(&WorksimConfig { localized: true, ..Default::default() }, 0).expect("corpus"))
}

fn randn_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

// ---------------------------------------------------------------- 1

/// Top-k by enumerating every k-subset.
fn exhaustive_topk(s: &[f64], k: usize) -> BTreeSet<usize> {
    let n = s.len();
    let mut best = (f64::NEG_INFINITY, 0u32);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let sum: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| s[i]).sum();
        if sum > best.0 {
            best = (sum, mask);
        }
    }
    (0..n).filter(|&i| best.1 >> i & 1 == 1).collect()
}

/// splitmix64 stream with Box-Muller normals, separate from the crate RNG.
struct Splitmix(u64);

impl Splitmix {
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    fn normal_pair(&mut self) -> (f64, f64) {
        let (u1, u2) = (self.uniform(), self.uniform());
        let r = (-2.0 * u1.ln()).sqrt();
        let a = 2.0 * std::f64::consts::PI * u2;
        (r * a.cos(), r * a.sin())
    }
}

fn sampling_oracle(s: &[f64], k: usize, sigma: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Splitmix(seed);
    let m = s.len();
    let mut counts = vec![0usize; m];
    let mut z = Vec::with_capacity(m + 1);
    for _ in 0..n {
        z.clear();
        while z.len() < m {
            let (a, b) = rng.normal_pair();
            z.push(a);
            z.push(b);
        }
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&a, &b| (s[b] + sigma * z[b]).partial_cmp(&(s[a] + sigma * z[a])).unwrap());
        for &i in &idx[..k] {
            counts[i] += 1;
        }
    }
    counts.into_iter().map(|c| c as f64 / n as f64).collect()
}

fn criterion_topk() -> Outcome {
    let t0 = Instant::now();
    let mut rng = seeded(101);
    let mut exact = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=12);
        let k = rng.gen_range(1..=n);
        let s = randn_vec(n, &mut rng);
        let sel = perturbed_topk(&s, k, 0.0, 1, &mut rng).unwrap();
        let got: BTreeSet<usize> = sel.hard_indices.iter().copied().collect();
        exact += usize::from(got == exhaustive_topk(&s, k) && sel.hard_indices.len() == k);
    }

    let n_mc = 100_000;
    let mut worst_mc: f64 = 0.0;
    for case in 0..10u64 {
        let m = rng.gen_range(4..=9);
        let k = rng.gen_range(1..=3);
        let s = randn_vec(m, &mut rng);
        let sel = perturbed_topk(&s, k, 0.5, n_mc, &mut seeded(200 + case)).unwrap();
        let oracle = sampling_oracle(&s, k, 0.5, n_mc, 900 + case);
        for (a, b) in sel.soft_indicator.iter().zip(&oracle) {
            worst_mc = worst_mc.max((a - b).abs());
        }
    }

    // Jacobian of the soft indicator against common-random-number central
    // differences, relative Frobenius error. Scores are drawn on the scale
    // of σ so the selection is genuinely uncertain.
    let (sigma, h, n_fd) = (0.5, 0.1, 200_000);
    let mut worst_grad: f64 = 0.0;
    for case in 0..20u64 {
        let m = rng.gen_range(3..=8);
        let k = rng.gen_range(1..m.min(4));
        let s: Vec<f64> = randn_vec(m, &mut rng).into_iter().map(|v| sigma * v).collect();
        let seed = 5000 + case;
        let soft = |x: &[f64]| perturbed_topk(x, k, sigma, n_fd, &mut seeded(seed)).unwrap().soft_indicator;
        let jac = perturbed_topk(&s, k, sigma, n_fd, &mut seeded(seed)).unwrap().jacobian.unwrap();
        let (mut err, mut norm) = (0.0, 0.0);
        for j in 0..m {
            let (mut up, mut dn) = (s.clone(), s.clone());
            up[j] += h;
            dn[j] -= h;
            let (a, b) = (soft(&up), soft(&dn));
            for i in 0..m {
                let fd = (a[i] - b[i]) / (2.0 * h);
                err += (jac.get(i, j) - fd).powi(2);
                norm += fd * fd;
            }
        }
        worst_grad = worst_grad.max((err / norm).sqrt());
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        exact == 1000 && worst_mc <= 0.01 && worst_grad <= 0.10 && secs < 120.0,
        format!(
            "exhaustive {exact}/1000; MC max |Δ| {worst_mc:.4} (≤ 0.01); Jacobian max rel err {:.1}% (≤ 10%); {secs:.1} s (< 120 s)",
            worst_grad * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 2

type Rows = Vec<Vec<f64>>;

fn rows_of(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn max_diff(a: &Rows, b: &Matrix) -> f64 {
    assert_eq!((a.len(), a[0].len()), b.shape());
    a.iter().enumerate().flat_map(|(r, row)| row.iter().enumerate().map(move |(c, v)| (v - b.get(r, c)).abs())).fold(0.0, f64::max)
}

fn linear_oracle(store: &ParamStore, prefix: &str, x: &Rows) -> Rows {
    let w = store.get(store.id_of(&format!("{prefix}.weight")).unwrap());
    let b = store.get(store.id_of(&format!("{prefix}.bias")).unwrap());
    x.iter()
        .map(|row| (0..w.cols()).map(|o| b.get(0, o) + (0..w.rows()).map(|i| row[i] * w.get(i, o)).sum::<f64>()).collect())
        .collect()
}

fn gelu_oracle(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn adapter_oracle(store: &ParamStore, adapter: &Adapter, x: &[f64]) -> Vec<f64> {
    let mut h = vec![x.to_vec()];
    let n = adapter.layers.len();
    for (i, l) in adapter.layers.iter().enumerate() {
        let w = store.get(l.weight);
        let b = store.get(l.bias);
        let next: Vec<f64> = (0..w.cols()).map(|o| b.get(0, o) + (0..w.rows()).map(|r| h[0][r] * w.get(r, o)).sum::<f64>()).collect();
        h = vec![if i + 1 < n { next.into_iter().map(gelu_oracle).collect() } else { next }];
    }
    if adapter.spec.residual {
        x.iter().zip(&h[0]).map(|(a, b)| a + b).collect()
    } else {
        h.remove(0)
    }
}

fn cosine_oracle(q: &[f64], p: &[f64]) -> f64 {
    let d: f64 = q.iter().zip(p).map(|(a, b)| a * b).sum();
    let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    d / (nq * np)
}

/// Multi-head attention with block-diagonal groups, written out in loops.
fn attention_oracle(store: &ParamStore, prefix: &str, query: &Rows, memory: &Rows, groups: usize, spec: AttnSpec) -> Rows {
    let q = linear_oracle(store, &format!("{prefix}.q"), query);
    let k = linear_oracle(store, &format!("{prefix}.k"), memory);
    let v = linear_oracle(store, &format!("{prefix}.v"), memory);
    let dh = spec.dim / spec.heads;
    let (qb, mb) = (query.len() / groups, memory.len() / groups);
    let mut cat = vec![vec![0.0; spec.dim]; query.len()];
    for (r, out) in cat.iter_mut().enumerate() {
        let grp = r / qb;
        for h in 0..spec.heads {
            let cols = h * dh..(h + 1) * dh;
            let logits: Vec<f64> = (grp * mb..(grp + 1) * mb)
                .map(|j| cols.clone().map(|c| q[r][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols {
                out[c] = e.iter().enumerate().map(|(jj, p)| p / z * v[grp * mb + jj][c]).sum();
            }
        }
    }
    linear_oracle(store, &format!("{prefix}.o"), &cat)
}

fn cam_oracle(store: &ParamStore, f: &Rows, mem: &Rows, groups: usize, spec: AttnSpec) -> Rows {
    let warped = attention_oracle(store, "m.mhca", f, mem, groups, spec);
    let gamma = linear_oracle(store, "m.l_ss", &warped);
    let beta = linear_oracle(store, "m.l_so", &warped);
    f.iter().enumerate().map(|(r, row)| row.iter().map(|x| gamma[r][0] * x + beta[r][0]).collect()).collect()
}

fn dam_oracle(store: &ParamStore, f: &Rows, mem: &Rows, groups: usize, spec: AttnSpec) -> Rows {
    let cross = attention_oracle(store, "m.mhca", f, mem, groups, spec);
    let warped = attention_oracle(store, "m.mhsa", &cross, &cross, 1, spec);
    let (n, c) = (warped.len() as f64, warped[0].len());
    let mean: Vec<f64> = (0..c).map(|j| warped.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> =
        (0..c).map(|j| (warped.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n + 1e-5).sqrt()).collect();
    let a = linear_oracle(store, "m.l_ds", &vec![std]);
    let b = linear_oracle(store, "m.l_do", &vec![mean]);
    f.iter().map(|row| row.iter().enumerate().map(|(j, x)| x * a[0][j] + b[0][j]).collect()).collect()
}

fn randomize(store: &mut ParamStore, ids: &[ksvqe::autograd::ParamId], scale: f64, seed: u64) {
    let mut rng = seeded(seed);
    for &id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn modulator_output(store: &ParamStore, m: &Modulator, f: &Matrix, mem: &Matrix, grid: TokenGrid, groups: usize, side: usize) -> Matrix {
    let g = Graph::new();
    let (fv, mv) = (g.constant(f.clone()), g.constant(mem.clone()));
    let out = m.forward(&g, store, fv, grid, &Memory { tokens: mv, groups, side }).unwrap();
    let v = g.value(out).clone();
    v
}

fn toy_clip(seed: u64) -> VideoTensor {
    let mut rng = seeded(seed);
    let data = (0..8 * 64 * 64 * 3).map(|_| rng.gen::<f32>()).collect();
    VideoTensor::new(8, 64, 64, 3, data).unwrap()
}

fn criterion_dense_oracles() -> Outcome {
    let mut rng = seeded(202);
    let mut worst_imp: f64 = 0.0;

    // Standalone cosine importance over two layers.
    for _ in 0..20 {
        let (n, c) = (rng.gen_range(4..30), rng.gen_range(2..12));
        let qs: Vec<Vec<f64>> = (0..2).map(|_| randn_vec(c, &mut rng)).collect();
        let ps: Vec<Matrix> = (0..2).map(|_| Matrix::randn(n, c, 1.0, &mut rng)).collect();
        let got = importance_layers(&qs, &ps).unwrap();
        for (k, v) in got.iter().enumerate() {
            let want = (cosine_oracle(&qs[0], ps[0].row(k)) + cosine_oracle(&qs[1], ps[1].row(k))) / 2.0;
            worst_imp = worst_imp.max((v - want).abs());
        }
        let g = Graph::new();
        let qv = g.constant(Matrix::row_vector(qs[0].clone()));
        let col = g.value(importance_var(&g, qv, &ps[0])).clone();
        for k in 0..n {
            worst_imp = worst_imp.max((col.get(k, 0) - cosine_oracle(&qs[0], ps[0].row(k))).abs());
        }
    }

    // Model importance: adapter on each class token, cosine, mean over keyframes and layers.
    let mut store = ParamStore::new();
    let model = Ksvqe::new(&mut store, ModelConfig::desk(), &mut seeded(3)).unwrap();
    randomize(&mut store, &model.quality_adapter.params(), 0.3, 17);
    let ctx = model.context(&toy_clip(4)).unwrap();
    let g = Graph::new();
    let got = g.value(model.importance(&g, &store, &ctx).unwrap()).clone();
    let mut want = vec![0.0; got.rows()];
    let mut parts = 0.0;
    for kf in &ctx.semantic {
        for layer in &kf.layers {
            let q = adapter_oracle(&store, &model.quality_adapter, &layer.cls);
            for (k, w) in want.iter_mut().enumerate() {
                *w += cosine_oracle(&q, layer.patches.row(k));
            }
            parts += 1.0;
        }
    }
    for (k, w) in want.iter().enumerate() {
        worst_imp = worst_imp.max((got.get(k, 0) - w / parts).abs());
    }

    // CaM and DaM with randomized parameters, shared and per-slice memory.
    let spec = AttnSpec::new(4, 2).unwrap();
    let grid = TokenGrid::new(2, 3, 3);
    let (mut worst_cam, mut worst_dam): (f64, f64) = (0.0, 0.0);
    for (case, groups) in [1usize, 2, 1, 2].into_iter().enumerate() {
        let f = Matrix::randn(grid.len(), 8, 1.0, &mut rng);
        let mem = Matrix::randn(groups * 9, 6, 1.0, &mut rng);
        for (kind, worst) in [(VariantKind::CAM, &mut worst_cam), (VariantKind::DAM, &mut worst_dam)] {
            let mut store = ParamStore::new();
            let m = Modulator::new(&mut store, "m", kind, 8, 6, spec, &mut seeded(case as u64));
            randomize(&mut store, &m.params(), 0.4, 40 + case as u64);
            let out = modulator_output(&store, &m, &f, &mem, grid, groups, 3);
            let oracle = if kind == VariantKind::CAM {
                cam_oracle(&store, &rows_of(&f), &rows_of(&mem), groups, spec)
            } else {
                dam_oracle(&store, &rows_of(&f), &rows_of(&mem), groups, spec)
            };
            *worst = worst.max(max_diff(&oracle, &out));
        }
    }

    // Identity configurations: fresh modulators and a model whose
    // modulators are at initialization.
    let mut identity = true;
    for kind in [VariantKind::CAM, VariantKind::DAM] {
        let mut store = ParamStore::new();
        let m = Modulator::new(&mut store, "m", kind, 8, 6, spec, &mut seeded(9));
        let f = Matrix::randn(grid.len(), 8, 1.0, &mut rng);
        let mem = Matrix::randn(9, 6, 1.0, &mut rng);
        identity &= modulator_output(&store, &m, &f, &mem, grid, 1, 3).data() == f.data();
    }
    let video = toy_clip(6);
    let score = |toggles: Toggles| {
        let mut store = ParamStore::new();
        let model = Ksvqe::new(&mut store, ModelConfig { toggles, ..ModelConfig::desk() }, &mut seeded(11)).unwrap();
        model.score(&store, &video, &mut seeded(12)).unwrap()
    };
    let plain = score(Toggles::BASELINE);
    let modulated = score(Toggles { qrs: false, cam: true, dam: true });
    identity &= plain.to_bits() == modulated.to_bits();

    let tol = 1e-10;
    outcome(
        worst_imp <= tol && worst_cam <= tol && worst_dam <= tol && identity,
        format!(
            "max |Δ| importance {worst_imp:.1e}, CaM {worst_cam:.1e}, DaM {worst_dam:.1e} (≤ 1e-10); identity bitwise: {identity}"
        ),
    )
}

// ---------------------------------------------------------------- 3

/// Relative error of analytic vs central-difference gradients on sampled
/// entries of `ids`; the denominator is floored at 1e-6.
fn fd_audit(
    store: &mut ParamStore,
    ids: &[ksvqe::autograd::ParamId],
    per_tensor: usize,
    loss: &dyn Fn(&ParamStore) -> f64,
    grad: &dyn Fn(&ParamStore) -> ksvqe::autograd::Gradients,
    seed: u64,
) -> (f64, usize) {
    let h = 1e-5;
    let grads = grad(store);
    let mut rng = seeded(seed);
    let (mut worst, mut checked): (f64, usize) = (0.0, 0);
    for &id in ids {
        let len = store.get(id).len();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Matrix::zeros(store.get(id).rows(), store.get(id).cols()));
        for _ in 0..per_tensor.min(len) {
            let e = rng.gen_range(0..len);
            let orig = store.get(id).data()[e];
            store.get_mut(id).data_mut()[e] = orig + h;
            let up = loss(store);
            store.get_mut(id).data_mut()[e] = orig - h;
            let dn = loss(store);
            store.get_mut(id).data_mut()[e] = orig;
            let numeric = (up - dn) / (2.0 * h);
            let a = analytic.data()[e];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            checked += 1;
        }
    }
    (worst, checked)
}

fn criterion_gradients() -> Outcome {
    let video = toy_clip(21);
    let mut store = ParamStore::new();
    let config = ModelConfig { toggles: Toggles { qrs: false, cam: true, dam: true }, ..ModelConfig::desk() };
    let model = Ksvqe::new(&mut store, config, &mut seeded(22)).unwrap();
    let mut moved = model.generator_params();
    moved.extend(model.quality_adapter.params());
    moved.extend(model.distortion_adapter.params());
    randomize(&mut store, &moved, 0.2, 23);
    let ctx = model.context(&video).unwrap();
    let inputs = model.sample_inputs(&video, &mut seeded(24)).unwrap();

    let weights = randn_vec(model.config.grid_side * model.config.grid_side, &mut seeded(25));
    let imp_loss = |g: &Graph, s: &ParamStore| {
        let imp = model.importance(g, s, &ctx).unwrap();
        g.sum_all(g.mul(imp, g.constant(Matrix::col_vector(weights.clone()))))
    };
    let q_loss = |s: &ParamStore| {
        let g = Graph::new();
        let l = imp_loss(&g, s);
        let v = g.value(l).item();
        v
    };
    let q_grad = |s: &ParamStore| {
        let g = Graph::new();
        let l = imp_loss(&g, s);
        g.backward(l)
    };
    let score_loss = |s: &ParamStore| {
        let g = Graph::new();
        let out = model.forward(&g, s, &ctx, &inputs, &mut seeded(26)).unwrap();
        let v = g.value(out.score).item();
        v
    };
    let score_grad = |s: &ParamStore| {
        let g = Graph::new();
        let out = model.forward(&g, s, &ctx, &inputs, &mut seeded(26)).unwrap();
        g.backward(out.score)
    };
    let (e_q, n_q) = fd_audit(&mut store, &model.quality_adapter.params(), 6, &q_loss, &q_grad, 27);
    let (e_d, n_d) = fd_audit(&mut store, &model.distortion_adapter.params(), 6, &score_loss, &score_grad, 28);
    let (e_m, n_m) = fd_audit(&mut store, &model.generator_params(), 4, &score_loss, &score_grad, 29);

    // Every variant of the modulation grid, standalone.
    let mut e_v: f64 = 0.0;
    let mut n_v = 0;
    let spec = AttnSpec::new(4, 2).unwrap();
    let grid = TokenGrid::new(2, 3, 3);
    let mut rng = seeded(30);
    for (i, name) in VariantKind::NAMES.iter().enumerate() {
        let mut s = ParamStore::new();
        let m = ablation_variant(&mut s, "m", name, 8, 6, spec, &mut seeded(i as u64)).unwrap();
        randomize(&mut s, &m.params(), 0.3, 31 + i as u64);
        let f = Matrix::randn(grid.len(), 8, 1.0, &mut rng);
        let mem = Matrix::randn(9, 6, 1.0, &mut rng);
        let r = Matrix::randn(grid.len(), 8, 1.0, &mut rng);
        let build = |g: &Graph, s: &ParamStore| {
            let (fv, mv) = (g.constant(f.clone()), g.constant(mem.clone()));
            let out = m.forward(g, s, fv, grid, &Memory { tokens: mv, groups: 1, side: 3 }).unwrap();
            g.sum_all(g.mul(out, g.constant(r.clone())))
        };
        let loss = |s: &ParamStore| {
            let g = Graph::new();
            let l = build(&g, s);
            let v = g.value(l).item();
            v
        };
        let grad = |s: &ParamStore| {
            let g = Graph::new();
            let l = build(&g, s);
            g.backward(l)
        };
        let (e, n) = fd_audit(&mut s, &m.generator_params(), 6, &loss, &grad, 50 + i as u64);
        e_v = e_v.max(e);
        n_v += n;
    }

    // Ten training steps: frozen parameters get no gradient and do not move,
    // while every trainable group receives some.
    let corpus = generate_corpus(&WorksimConfig { n_refs: 10, ..Default::default() }, 3).unwrap();
    let mut trainer = Trainer::new(TrainConfig { batch_size: 8, ..TrainConfig::desk() }, &corpus).unwrap();
    let frozen = trainer.model.frozen_params();
    let before: Vec<Matrix> = frozen.iter().map(|&id| trainer.store.get(id).clone()).collect();
    let groups: Vec<(&str, Vec<ksvqe::autograd::ParamId>)> = vec![
        ("quality adapter", trainer.model.quality_adapter.params()),
        ("distortion adapter", trainer.model.distortion_adapter.params()),
        ("generators", trainer.model.generator_params()),
        ("backbone", trainer.model.backbone.params()),
    ];
    let mut reached = vec![false; groups.len()];
    let mut frozen_clean = true;
    let train_idx = trainer.train_indices().to_vec();
    for step in 0..10 {
        let batch: Vec<usize> = (0..8).map(|j| train_idx[(step * 8 + j) % train_idx.len()]).collect();
        let rep = trainer.step(&batch, 0).unwrap();
        for &id in &frozen {
            if let Some(gm) = rep.grads.param(id) {
                frozen_clean &= gm.data().iter().all(|&v| v == 0.0);
            }
        }
        for (k, (_, ids)) in groups.iter().enumerate() {
            reached[k] |= ids.iter().any(|&id| rep.grads.param(id).is_some_and(|m| m.data().iter().any(|&v| v != 0.0)));
        }
    }
    let unchanged = frozen.iter().zip(&before).all(|(&id, m)| trainer.store.get(id).data() == m.data());
    let missing: Vec<&str> = groups.iter().zip(&reached).filter(|(_, &r)| !r).map(|((n, _), _)| *n).collect();

    let worst = e_q.max(e_d).max(e_m).max(e_v);
    outcome(
        worst <= 1e-4 && frozen_clean && unchanged && missing.is_empty(),
        format!(
            "FD rel err quality adapter {e_q:.1e} ({n_q}), distortion adapter {e_d:.1e} ({n_d}), model generators {e_m:.1e} ({n_m}), \
             9 variants {e_v:.1e} ({n_v}) (≤ 1e-4); {} frozen tensors zero-grad: {frozen_clean}, unchanged: {unchanged}; \
             groups without gradient: {missing:?}",
            frozen.len()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_metrics() -> Outcome {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    // Rank-difference formula without ties: 1 − 6Σd² / (n(n² − 1)).
    let (x, y) = ([1.0, 2.0, 3.0, 4.0, 5.0], [2.0, 1.0, 4.0, 3.0, 5.0]);
    let d2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
    let n = 5.0;
    checks.push(("srocc rank formula", srocc(&x, &y).unwrap() == 1.0 - 6.0 * d2 / (n * (n * n - 1.0))));
    checks.push(("srocc reversed", srocc(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap() == -1.0));
    let mono: Vec<f64> = x.iter().map(|v: &f64| v.powi(3) + 2.0).collect();
    checks.push(("srocc monotone", srocc(&x, &mono).unwrap() == 1.0));
    // Ties: average ranks (1, 2.5, 2.5, 4) against (1, 3, 2, 4) give 4.5 / √22.5 = √0.9.
    let tie = srocc(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    checks.push(("srocc ties", (tie - 0.9f64.sqrt()).abs() <= f64::EPSILON));
    checks.push(("plcc affine", plcc(&[1.0, 2.0, 3.0, 4.0], &[3.0, 5.0, 7.0, 9.0], false).unwrap() == 1.0));
    checks.push(("plcc negated", plcc(&[1.0, 2.0, 3.0, 4.0], &[-1.0, -2.0, -3.0, -4.0], false).unwrap() == -1.0));
    // Covariance form E[xy] − E[x]E[y] on 100 random points.
    let mut rng = seeded(404);
    let a = randn_vec(100, &mut rng);
    let b: Vec<f64> = a.iter().map(|v| 0.5 * v + rng.sample::<f64, _>(StandardNormal)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(&a), mean(&b));
    let cov = mean(&a.iter().zip(&b).map(|(p, q)| p * q).collect::<Vec<_>>()) - ma * mb;
    let va = mean(&a.iter().map(|p| p * p).collect::<Vec<_>>()) - ma * ma;
    let vb = mean(&b.iter().map(|p| p * p).collect::<Vec<_>>()) - mb * mb;
    checks.push(("plcc covariance form", (plcc(&a, &b, false).unwrap() - cov / (va * vb).sqrt()).abs() <= 1e-12));

    // Ten pairs: 7 ordered correctly, one of the wrong ones an exact tie.
    let preds: HashMap<String, f64> = (0..20).map(|i| (format!("c{i}"), i as f64)).chain([("t".to_string(), 3.0)]).collect();
    let mut pairs = Vec::new();
    for i in 0..7 {
        pairs.push(RankPair::new(format!("c{}", 2 * i + 1), format!("c{}", 2 * i), true, i < 3));
    }
    pairs.push(RankPair::new("c0", "c5", true, true));
    pairs.push(RankPair::new("c9", "c2", false, false));
    pairs.push(RankPair::new("c3", "t", true, false));
    let acc = rank_accuracy(&pairs, &preds).unwrap();
    checks.push(("rank accuracy all", acc.all.accuracy == Some(7.0 / 10.0)));
    checks.push(("rank accuracy homogeneous", acc.homogeneous.accuracy == Some(3.0 / 4.0)));
    checks.push(("rank accuracy non-homogeneous", acc.non_homogeneous.accuracy == Some(4.0 / 6.0)));
    let fixtures_ok = checks.iter().all(|c| c.1);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();

    // plcc_loss is zero exactly for positive affine maps.
    let mut rng = seeded(405);
    let (mut pos_worst, mut neg_worst, mut other_min): (f64, f64, f64) = (0.0, 0.0, f64::INFINITY);
    for _ in 0..100 {
        let n = rng.gen_range(4..40);
        let mos: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..5.0)).collect();
        let (scale, shift) = (rng.gen_range(0.01..10.0), rng.gen_range(-5.0..5.0));
        let pos: Vec<f64> = mos.iter().map(|m| scale * m + shift).collect();
        let neg: Vec<f64> = mos.iter().map(|m| -scale * m + shift).collect();
        let mut other = pos.clone();
        let j = rng.gen_range(0..n);
        other[j] += rng.gen_range(0.5..2.0) * scale;
        pos_worst = pos_worst.max(plcc_loss_value(&pos, &mos).unwrap().abs());
        neg_worst = neg_worst.max((plcc_loss_value(&neg, &mos).unwrap() - 1.0).abs());
        other_min = other_min.min(plcc_loss_value(&other, &mos).unwrap());
    }
    let loss_ok = pos_worst <= 1e-9 && neg_worst <= 1e-9 && other_min > 1e-6;
    outcome(
        fixtures_ok && loss_ok,
        format!(
            "{} fixtures, failing: {failed:?}; plcc_loss positive affine max {pos_worst:.1e}, negative |1 − loss| max {neg_worst:.1e}, \
             non-affine min {other_min:.1e}",
            checks.len()
        ),
    )
}

// ---------------------------------------------------------------- 5

/// Literal transcription of the screening procedure: mean, S with N − 1,
/// β2 = m4/m2² choosing α, P when u ≥ ū + αS, Q when u ≤ ū + αS, reject when
/// |P − Q|/(P + Q) < 0.3 and (P + Q)/J > 0.05; then drop every rating
/// outside (ū − δ, ū + δ), δ = 1.96 S/√N, and average.
struct Transcript {
    gate_flags: Vec<bool>,
    rejected: Vec<bool>,
    removals: usize,
    mos: Vec<Option<f64>>,
}

fn transcript_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn transcript_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn transcript(u: &[Vec<f64>], literal: bool) -> Transcript {
    let (ni, nj) = (u.len(), u[0].len());
    let gate_flags = (0..ni)
        .map(|i| {
            let own: Vec<f64> = u[i].clone();
            let others: Vec<f64> =
                (0..nj).map(|j| (0..ni).filter(|&k| k != i).map(|k| u[k][j]).sum::<f64>() / (ni - 1) as f64).collect();
            let s = transcript_pearson(&transcript_ranks(&own), &transcript_ranks(&others));
            let p = transcript_pearson(&own, &others);
            s.is_none_or(|v| v < 0.7) || p.is_none_or(|v| v < 0.7)
        })
        .collect();
    let stats = |col: &[f64]| {
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let s = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        (mean, s)
    };
    let (mut p, mut q) = (vec![0usize; ni], vec![0usize; ni]);
    for j in 0..nj {
        let col: Vec<f64> = (0..ni).map(|i| u[i][j]).collect();
        let (mean, s) = stats(&col);
        let n = ni as f64;
        let m2 = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let m4 = col.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
        let beta2 = m4 / (m2 * m2);
        let alpha = if (2.0..=4.0).contains(&beta2) { 2.0 } else { 20f64.sqrt() };
        for i in 0..ni {
            if u[i][j] >= mean + alpha * s {
                p[i] += 1;
            }
            let low = if literal { mean + alpha * s } else { mean - alpha * s };
            if u[i][j] <= low {
                q[i] += 1;
            }
        }
    }
    let rejected: Vec<bool> = (0..ni)
        .map(|i| {
            let pq = (p[i] + q[i]) as f64;
            pq > 0.0 && (p[i] as f64 - q[i] as f64).abs() / pq < 0.3 && pq / nj as f64 > 0.05
        })
        .collect();
    let mut removals = 0;
    let mos = (0..nj)
        .map(|j| {
            let col: Vec<f64> = (0..ni).filter(|&i| !rejected[i]).map(|i| u[i][j]).collect();
            if col.len() < 2 {
                return col.first().copied();
            }
            let (mean, s) = stats(&col);
            if s == 0.0 {
                return Some(mean);
            }
            let delta = 1.96 * s / (col.len() as f64).sqrt();
            let kept: Vec<f64> = col.iter().copied().filter(|&v| v > mean - delta && v < mean + delta).collect();
            removals += col.len() - kept.len();
            (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64)
        })
        .collect();
    Transcript { gate_flags, rejected, removals, mos }
}

fn random_matrix<R: Rng>(rng: &mut R) -> Vec<Vec<f64>> {
    let (ni, nj) = (rng.gen_range(5..=20), rng.gen_range(5..=40));
    let truth: Vec<f64> = (0..nj).map(|_| rng.gen_range(1.5..4.5)).collect();
    let bias: Vec<f64> = (0..ni).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let spread: Vec<f64> = (0..ni).map(|_| if rng.gen_bool(0.2) { 1.5 } else { 0.4 }).collect();
    let mut u: Vec<Vec<f64>> = (0..ni)
        .map(|i| {
            (0..nj)
                .map(|j| {
                    let v = truth[j] + bias[i] + spread[i] * rng.sample::<f64, _>(StandardNormal);
                    ((v * 2.0).round() / 2.0).clamp(1.0, 5.0)
                })
                .collect()
        })
        .collect();
    // Constant columns are a documented edge case; keep the matrices generic.
    for j in 0..nj {
        if (1..ni).all(|i| u[i][j] == u[0][j]) {
            u[0][j] = if u[0][j] < 5.0 { u[0][j] + 0.5 } else { 4.5 };
        }
    }
    u
}

/// Ten observers; planted observers are active on disjoint alternate
/// videos with ratings at c ± 1.5, alternating sign.
fn planted_fixture<R: Rng>(rng: &mut R) -> (Vec<Vec<f64>>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let (ni, nj) = (10, 40);
    let n_planted = rng.gen_range(1..=3);
    let mut ids: Vec<usize> = (0..ni).collect();
    ids.shuffle(rng);
    let planted: Vec<usize> = ids[..n_planted].to_vec();
    let mut u = vec![vec![0.0; nj]; ni];
    for j in 0..nj {
        let c = [2.5, 3.0, 3.5][rng.gen_range(0..3)];
        let active = (j % 2 == 0).then(|| planted[(j / 2) % n_planted]);
        let mut honest: Vec<f64> = [c - 0.5; 3].into_iter().chain([c; 3]).chain([c + 0.5; 3]).collect();
        if active.is_none() {
            honest.push(c);
        }
        honest.shuffle(rng);
        let mut it = honest.into_iter();
        for (i, row) in u.iter_mut().enumerate() {
            row[j] = if Some(i) == active {
                let turn = (j / 2) / n_planted;
                if turn % 2 == 0 { c + 1.5 } else { c - 1.5 }
            } else {
                it.next().unwrap()
            };
        }
    }
    let mut planted = planted;
    planted.sort_unstable();
    (u, planted)
}

fn criterion_bt500() -> Outcome {
    let t0 = Instant::now();
    let mut rng = seeded(505);
    // Same comparison for both readings of the lower threshold; the literal
    // one is the acceptance target, the corrected one shows the screening
    // actually rejects on these matrices.
    let mut agree = [0usize; 2];
    let mut rejections = [0usize; 2];
    let mut worst_mos: f64 = 0.0;
    for _ in 0..100 {
        let u = random_matrix(&mut rng);
        let rm = RatingMatrix::from_dense(&u).unwrap();
        for (v, strict) in [true, false].into_iter().enumerate() {
            let (_, report) = clean(&rm, CleaningOptions { gate_threshold: 0.7, strict_bt500: strict }).unwrap();
            let t = transcript(&u, strict);
            let flags: Vec<bool> = report.gate.iter().map(|g| g.flagged).collect();
            let rejected: Vec<bool> = report.screening.observers.iter().map(|o| o.rejected).collect();
            rejections[v] += rejected.iter().filter(|&&r| r).count();
            let mut same = flags == t.gate_flags && rejected == t.rejected && report.removals.len() == t.removals;
            for (m, w) in report.mos.iter().zip(&t.mos) {
                match (m.mos, w) {
                    (Some(a), Some(b)) => worst_mos = worst_mos.max((a - b).abs()),
                    (None, None) => {}
                    _ => same = false,
                }
            }
            agree[v] += usize::from(same);
        }
    }

    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for _ in 0..20 {
        let (u, planted) = planted_fixture(&mut rng);
        let rm = RatingMatrix::from_dense(&u).unwrap();
        let (_, report) = clean(&rm, CleaningOptions::default()).unwrap();
        let got: BTreeSet<usize> = report.screening.rejected().into_iter().collect();
        let want: BTreeSet<usize> = planted.into_iter().collect();
        // The corrected transcript must agree with the module here too.
        let t = transcript(&u, false);
        assert_eq!(got, t.rejected.iter().enumerate().filter(|r| *r.1).map(|r| r.0).collect());
        tp += got.intersection(&want).count();
        fp += got.difference(&want).count();
        fn_ += want.difference(&got).count();
    }
    let precision = tp as f64 / (tp + fp).max(1) as f64;
    let recall = tp as f64 / (tp + fn_).max(1) as f64;
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        agree == [100, 100] && worst_mos <= 1e-12 && precision == 1.0 && recall == 1.0 && tp > 0 && secs < 60.0,
        format!(
            "transcript agreement strict {}/100 ({} rejections), corrected {}/100 ({} rejections), MOS max |Δ| {worst_mos:.1e}; \
             planted precision {precision:.2} recall {recall:.2} over {} observers; {secs:.1} s (< 60 s)",
            agree[0],
            rejections[0],
            agree[1],
            rejections[1],
            tp + fn_
        ),
    )
}

// ---------------------------------------------------------------- 6

fn trends_hold(corpus: &Corpus) -> (bool, String) {
    let m = &corpus.manifest;
    let group = |tier: QualityTier, pre: Preprocess| match (tier, pre) {
        (QualityTier::High, _) => 1usize,
        (QualityTier::Low, Preprocess::None) => 2,
        _ => 3,
    };
    let mut sums = [[(0.0f64, 0usize); 6]; 4];
    let mut margin = f64::INFINITY;
    for c in &m.clips {
        let gi = group(c.recipe.quality_tier, c.recipe.preprocess);
        let e = &mut sums[gi][c.recipe.qp_interval_index];
        e.0 += c.pseudo_mos;
        e.1 += 1;
        if gi >= 2 && c.recipe.qp_interval_index < 2 {
            let mut plain = c.recipe.clone();
            plain.enhancement = Enhancement::None;
            margin = margin.min(c.pseudo_mos - pseudo_mos(&plain, &c.quality, &m.config.mos));
        }
    }
    let mean = |g: usize, i: usize| sums[g][i].0 / sums[g][i].1 as f64;
    let populated = (1..4).all(|g| sums[g].iter().all(|e| e.1 > 0));
    if !populated {
        return (false, "a group/interval cell is empty".into());
    }
    let g1 = (0..5).all(|i| mean(1, i) > mean(1, i + 1));
    let gain: Vec<f64> = (0..6).map(|i| mean(3, i) - mean(2, i)).collect();
    let peak = (0..5).all(|i| gain[i] < gain[5]);
    let agrees = check_trends(m).holds() == (g1 && margin > 0.0 && peak);
    (g1 && margin > 0.0 && peak && agrees, format!("g1↓ {g1}, enh margin {margin:.3}, gain@6 {:.3}", gain[5]))
}

fn criterion_trends() -> Outcome {
    let mut all = true;
    let mut notes = Vec::new();
    for seed in 1..4 {
        let c = generate_corpus(&WorksimConfig::default(), seed).unwrap();
        let (ok, note) = trends_hold(&c);
        all &= ok;
        notes.push(format!("seed {seed}: {note}"));
    }
    for (name, c) in [("seed 0", default_corpus()), ("localized seed 0", localized_corpus())] {
        let (ok, note) = trends_hold(c);
        all &= ok;
        notes.push(format!("{name}: {note}"));
    }
    outcome(all, notes.join("; "))
}

// ---------------------------------------------------------------- 7

fn criterion_desk_training() -> Outcome {
    let corpus = default_corpus();
    let t0 = Instant::now();
    let mut scores = Vec::new();
    for seed in 0..3 {
        let cfg = TrainConfig { seed, ..TrainConfig::desk() };
        scores.push(train(&cfg, corpus, None).unwrap().final_eval.srocc);
    }
    let secs = t0.elapsed().as_secs_f64();
    let mean = scores.iter().sum::<f64>() / 3.0;
    let spread = scores.iter().map(|s| (s - mean).abs()).fold(0.0, f64::max);
    let per_run = secs / 3.0;
    outcome(
        scores.iter().all(|&s| s >= 0.80) && spread <= 0.03 && per_run < 900.0,
        format!(
            "test SROCC {:.3}/{:.3}/{:.3} (≥ 0.80), max |s − mean| {spread:.3} (≤ 0.03), {per_run:.0} s per run (< 900 s)",
            scores[0], scores[1], scores[2]
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_ablation() -> Outcome {
    let corpus = localized_corpus();
    let qrs_only = Toggles { qrs: true, cam: false, dam: false };
    let cam_only = Toggles { qrs: false, cam: true, dam: false };
    let dam_only = Toggles { qrs: false, cam: false, dam: true };
    let cam_dam = Toggles { qrs: false, cam: true, dam: true };
    let grid = [Toggles::BASELINE, qrs_only, cam_only, dam_only, Toggles::ALL, cam_dam];
    let (mut qrs_wins, mut best_wins, mut qrs_vs_base) = (0, 0, 0);
    let mut notes = Vec::new();
    for seed in 0..3 {
        let report = ablate(&grid, &TrainConfig { seed, ..TrainConfig::desk() }, corpus).unwrap();
        let s = |t: Toggles| report.row(t).unwrap().srocc;
        qrs_wins += usize::from(s(Toggles::ALL) >= s(cam_dam));
        qrs_vs_base += usize::from(s(qrs_only) >= s(Toggles::BASELINE));
        let best = grid[..5].iter().map(|&t| s(t)).fold(f64::NEG_INFINITY, f64::max);
        best_wins += usize::from(s(Toggles::ALL) >= best - 0.01);
        notes.push(format!(
            "seed {seed}: all {:.3}, CaM+DaM {:.3}, base {:.3}, QRS {:.3}, CaM {:.3}, DaM {:.3}",
            s(Toggles::ALL),
            s(cam_dam),
            s(Toggles::BASELINE),
            s(qrs_only),
            s(cam_only),
            s(dam_only)
        ));
    }
    outcome(
        qrs_wins >= 2 && best_wins >= 2,
        format!(
            "QRS on ≥ off (all vs CaM+DaM) in {qrs_wins}/3, all-on best or within 0.01 in {best_wins}/3 \
             (info: +QRS ≥ baseline in {qrs_vs_base}/3); {}",
            notes.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_geometry() -> Outcome {
    let mut rng = seeded(909);
    let video = VideoTensor::from_fn(32, 320, 320, 3, |_, y, x, c| (y * 512 + x) as f32 + c as f32 * 0.25);
    let grid = GridSpec::square(9, 32).unwrap();
    let fg = partition_and_sample(&video, &grid, &mut rng).unwrap();
    let full = compose(&fg);
    let full_shape = (full.frames(), full.height(), full.width(), full.channels());
    let imp = ImportanceMap::new(randn_vec(81, &mut rng), WindowLayout::sliding(9, 7).unwrap()).unwrap();
    let sel = select_region(&imp, 7, 0.5, 100, &mut rng).unwrap();
    let gathered = gather_selected(&fg, &sel).unwrap();
    let region = compose(&gathered);
    let region_shape = (region.frames(), region.height(), region.width(), region.channels());
    let mut pixels_ok = true;
    for _ in 0..2000 {
        let (cy, cx) = (rng.gen_range(0..224), rng.gen_range(0..224));
        let (sy, sx) = gathered.source_pixel(cy, cx);
        pixels_ok &= region.at(0, cy, cx, 1) == video.at(0, sy, sx, 1);
        let (cy, cx) = (rng.gen_range(0..288), rng.gen_range(0..288));
        let (sy, sx) = fg.source_pixel(cy, cx);
        pixels_ok &= full.at(31, cy, cx, 2) == video.at(31, sy, sx, 2);
    }
    let shapes_ok = full_shape == (32, 288, 288, 3) && region_shape == (32, 224, 224, 3) && pixels_ok;

    // Contiguity and brute-force argmax over 10,000 maps.
    let mut contiguous = 0;
    let mut argmax = 0;
    let layout = WindowLayout::sliding(9, 7).unwrap();
    for _ in 0..10_000 {
        let scores: Vec<f64> = (0..81).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let imp = ImportanceMap::new(scores.clone(), layout).unwrap();
        let sel = select_region(&imp, 7, 0.5, 1, &mut rng).unwrap();
        let idx = &sel.hard_indices;
        let rows: BTreeSet<usize> = idx.iter().map(|i| i / 9).collect();
        let cols: BTreeSet<usize> = idx.iter().map(|i| i % 9).collect();
        let (r0, c0) = (*rows.first().unwrap(), *cols.first().unwrap());
        let block: BTreeSet<usize> = (r0..r0 + 7).flat_map(|r| (c0..c0 + 7).map(move |c| r * 9 + c)).collect();
        let unique: BTreeSet<usize> = idx.iter().copied().collect();
        contiguous += usize::from(idx.len() == 49 && rows.len() == 7 && cols.len() == 7 && unique == block);
        let mut best = (f64::NEG_INFINITY, (0, 0));
        for r in 0..3 {
            for c in 0..3 {
                let s: f64 = (r..r + 7).flat_map(|y| (c..c + 7).map(move |x| (y, x))).map(|(y, x)| scores[y * 9 + x]).sum();
                if s > best.0 {
                    best = (s, (r, c));
                }
            }
        }
        argmax += usize::from(best.1 == (r0, c0));
    }
    outcome(
        shapes_ok && contiguous == 10_000 && argmax == 10_000,
        format!(
            "composite {full_shape:?}, region {region_shape:?}, pixel mapping ok: {pixels_ok}; \
             contiguous {contiguous}/10000, argmax window {argmax}/10000"
        ),
    )
}
