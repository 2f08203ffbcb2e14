//! Layers built on the autodiff tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{invalid, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// LeCun-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let w = Matrix::randn(in_dim, out_dim, 1.0 / (in_dim as f64).sqrt(), rng);
        Self::from_parts(store, name, w, Matrix::zeros(1, out_dim))
    }

    /// Zero weights with a constant bias.
    pub fn constant(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: f64) -> Self {
        Self::from_parts(store, name, Matrix::zeros(in_dim, out_dim), Matrix::filled(1, out_dim, bias))
    }

    pub fn from_parts(store: &mut ParamStore, name: &str, weight: Matrix, bias: Matrix) -> Self {
        assert_eq!(bias.shape(), (1, weight.cols()));
        let (in_dim, out_dim) = weight.shape();
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = store.add(format!("{name}.bias"), bias);
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.add_row(g.matmul(x, w), b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Row-wise layer norm with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0));
        let beta = store.add(format!("{name}.beta"), Matrix::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm_rows(x, Self::EPS);
        g.add_row(g.mul_row(n, g.param(store, self.gamma)), g.param(store, self.beta))
    }
}

/// Bottleneck MLP shape: `widths[0]` in, `widths.last()` out.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub widths: Vec<usize>,
    pub residual: bool,
}

impl AdapterSpec {
    pub fn new(widths: Vec<usize>, residual: bool) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(invalid(format!("adapter widths {widths:?}")));
        }
        if residual && widths[0] != widths[widths.len() - 1] {
            return Err(invalid(format!("residual adapter needs equal in/out widths, got {widths:?}")));
        }
        Ok(Self { widths, residual })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }
}

/// Fully-connected adapter with GELU between layers. Residual adapters start
/// with a zero last layer, so they begin as the identity map.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub spec: AdapterSpec,
    pub layers: Vec<Linear>,
}

impl Adapter {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: AdapterSpec, rng: &mut R) -> Self {
        let n = spec.widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (a, b) = (spec.widths[i], spec.widths[i + 1]);
                let lname = format!("{name}.fc{i}");
                if i + 1 == n && spec.residual {
                    Linear::constant(store, &lname, a, b, 0.0)
                } else {
                    Linear::new(store, &lname, a, b, rng)
                }
            })
            .collect();
        Self { spec, layers }
    }

    /// Maps every row of `x` through the adapter.
    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let width = g.shape(x).1;
        if width != self.spec.input_width() {
            return Err(invalid(format!("adapter expects width {}, got {width}", self.spec.input_width())));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        Ok(if self.spec.residual { g.add(x, h) } else { h })
    }

    /// Tape-free evaluation.
    pub fn apply(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        let g = Graph::new();
        let v = g.constant(x.clone());
        let out = self.forward(&g, store, v)?;
        let m = g.value(out).clone();
        Ok(m)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// Attention width and head count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnSpec {
    pub dim: usize,
    pub heads: usize,
}

impl AttnSpec {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
            return Err(invalid(format!("attention dim {dim} not divisible into {heads} heads")));
        }
        Ok(Self { dim, heads })
    }
}

/// Multi-head attention from `query_dim` queries onto `memory_dim` memory.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub spec: AttnSpec,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        memory_dim: usize,
        spec: AttnSpec,
        rng: &mut R,
    ) -> Self {
        Self {
            spec,
            q: Linear::new(store, &format!("{name}.q"), query_dim, spec.dim, rng),
            k: Linear::new(store, &format!("{name}.k"), memory_dim, spec.dim, rng),
            v: Linear::new(store, &format!("{name}.v"), memory_dim, spec.dim, rng),
            o: Linear::new(store, &format!("{name}.o"), spec.dim, query_dim, rng),
        }
    }

    /// `groups` splits queries and memory into equal row blocks that attend
    /// only within their block. `bias`, when given, is added to the
    /// `(rows of query) × (memory rows per group)` logits.
    pub fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        query: Var,
        memory: Var,
        groups: usize,
        bias: Option<&Matrix>,
    ) -> Result<Var> {
        let (_, qd) = g.shape(query);
        let (_, md) = g.shape(memory);
        if qd != self.q.in_dim || md != self.k.in_dim {
            return Err(invalid(format!(
                "attention expects widths {}/{}, got {qd}/{md}",
                self.q.in_dim, self.k.in_dim
            )));
        }
        let q = self.q.forward(g, store, query);
        let k = self.k.forward(g, store, memory);
        let v = self.v.forward(g, store, memory);
        let dh = self.spec.dim / self.spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let bias = bias.map(|b| g.constant(b.clone()));
        let heads: Vec<Var> = (0..self.spec.heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let mut logits = g.scale(g.grouped_matmul_t(qh, kh, groups), scale);
                if let Some(b) = bias {
                    logits = g.add(logits, b);
                }
                let p = g.softmax_rows(logits);
                g.grouped_matmul(p, vh, groups)
            })
            .collect();
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        Ok(self.o.forward(g, store, cat))
    }
}
