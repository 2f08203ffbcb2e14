//! Feature modulation of backbone tokens by semantic and distortion memory.
//!
//! Every variant is an attention stage (none, cross, cross-then-self)
//! followed by a modulation stage (additive, spatial affine, channel affine,
//! or concatenation). The generators start at the identity configuration,
//! so a freshly built modulator returns its input unchanged.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{invalid, Error, Result};
use crate::extractors::area_pooling;
use crate::nn::{AttnSpec, Linear, MultiHeadAttention};
use crate::tensor::Matrix;

/// Population-std stabilizer for channel statistics.
pub const STD_EPS: f64 = 1e-5;

/// Token layout `t × h × w`, rows ordered `(t, y, x)` row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl TokenGrid {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.h + y) * self.w + x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionStage {
    /// Memory is projected to the backbone width and area-pooled onto the
    /// token grid.
    None,
    Cross,
    CrossSelf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModulationStage {
    /// `F + l(P̃)`.
    Add,
    /// `γ ⊙ F + β` with per-position scalars.
    Spatial,
    /// `scale ⊙ F + offset` from channel std and mean over positions.
    Channel,
    /// `l([F, P̃])`.
    Concat,
}

/// A named attention/modulation pairing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct VariantKind {
    pub attention: AttentionStage,
    pub modulation: ModulationStage,
}

impl VariantKind {
    pub const CAM: Self = Self { attention: AttentionStage::Cross, modulation: ModulationStage::Spatial };
    pub const DAM: Self = Self { attention: AttentionStage::CrossSelf, modulation: ModulationStage::Channel };

    /// The ablation grid names.
    pub const NAMES: [&'static str; 9] = ["CA", "SM", "CM", "CA+SM", "CA+CM", "CASA", "CASA+SM", "CASA+CM", "concat"];
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use AttentionStage as A;
        use ModulationStage as M;
        let (attention, modulation) = match s {
            "CA" => (A::Cross, M::Add),
            "SM" => (A::None, M::Spatial),
            "CM" => (A::None, M::Channel),
            "CA+SM" | "CaM" => (A::Cross, M::Spatial),
            "CA+CM" => (A::Cross, M::Channel),
            "CASA" => (A::CrossSelf, M::Add),
            "CASA+SM" => (A::CrossSelf, M::Spatial),
            "CASA+CM" | "DaM" => (A::CrossSelf, M::Channel),
            "concat" => (A::None, M::Concat),
            other => return Err(invalid(format!("unknown modulation variant {other:?}"))),
        };
        Ok(Self { attention, modulation })
    }
}

impl TryFrom<String> for VariantKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<VariantKind> for String {
    fn from(v: VariantKind) -> String {
        v.to_string()
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use AttentionStage as A;
        use ModulationStage as M;
        let s = match (self.attention, self.modulation) {
            (A::None, M::Concat) => "concat",
            (A::None, M::Add) => "add",
            (A::None, M::Spatial) => "SM",
            (A::None, M::Channel) => "CM",
            (A::Cross, M::Add) => "CA",
            (A::Cross, M::Spatial) => "CA+SM",
            (A::Cross, M::Channel) => "CA+CM",
            (A::Cross, M::Concat) => "CA+concat",
            (A::CrossSelf, M::Add) => "CASA",
            (A::CrossSelf, M::Spatial) => "CASA+SM",
            (A::CrossSelf, M::Channel) => "CASA+CM",
            (A::CrossSelf, M::Concat) => "CASA+concat",
        };
        f.write_str(s)
    }
}

/// Memory tokens: `groups` equal row blocks, each a `side × side` grid.
/// One group is shared by every temporal slice of the query; otherwise
/// group `t` serves slice `t`.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    pub tokens: Var,
    pub groups: usize,
    pub side: usize,
}

#[derive(Clone, Debug)]
enum Generator {
    Add(Linear),
    Spatial { scale: Linear, offset: Linear },
    Channel { scale: Linear, offset: Linear },
    Concat(Linear),
}

#[derive(Clone, Debug)]
pub struct Modulator {
    pub kind: VariantKind,
    pub width: usize,
    pub memory_width: usize,
    align: Option<Linear>,
    cross: Option<MultiHeadAttention>,
    self_attn: Option<MultiHeadAttention>,
    generator: Generator,
}

impl Modulator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kind: VariantKind,
        width: usize,
        memory_width: usize,
        attn: AttnSpec,
        rng: &mut R,
    ) -> Self {
        let (align, cross, self_attn) = match kind.attention {
            AttentionStage::None => (Some(Linear::new(store, &format!("{name}.align"), memory_width, width, rng)), None, None),
            AttentionStage::Cross => {
                (None, Some(MultiHeadAttention::new(store, &format!("{name}.mhca"), width, memory_width, attn, rng)), None)
            }
            AttentionStage::CrossSelf => (
                None,
                Some(MultiHeadAttention::new(store, &format!("{name}.mhca"), width, memory_width, attn, rng)),
                Some(MultiHeadAttention::new(store, &format!("{name}.mhsa"), width, width, attn, rng)),
            ),
        };
        let generator = match kind.modulation {
            ModulationStage::Add => Generator::Add(Linear::constant(store, &format!("{name}.add"), width, width, 0.0)),
            ModulationStage::Spatial => Generator::Spatial {
                scale: Linear::constant(store, &format!("{name}.l_ss"), width, 1, 1.0),
                offset: Linear::constant(store, &format!("{name}.l_so"), width, 1, 0.0),
            },
            ModulationStage::Channel => Generator::Channel {
                scale: Linear::constant(store, &format!("{name}.l_ds"), width, width, 1.0),
                offset: Linear::constant(store, &format!("{name}.l_do"), width, width, 0.0),
            },
            ModulationStage::Concat => {
                let mut w = Matrix::zeros(2 * width, width);
                for i in 0..width {
                    w.set(i, i, 1.0);
                }
                Generator::Concat(Linear::from_parts(store, &format!("{name}.fuse"), w, Matrix::zeros(1, width)))
            }
        };
        Self { kind, width, memory_width, align, cross, self_attn, generator }
    }

    /// Parameters that produce the modulation coefficients.
    pub fn generator_params(&self) -> Vec<ParamId> {
        match &self.generator {
            Generator::Add(l) | Generator::Concat(l) => l.params().to_vec(),
            Generator::Spatial { scale, offset } | Generator::Channel { scale, offset } => {
                scale.params().into_iter().chain(offset.params()).collect()
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.generator_params();
        if let Some(a) = &self.align {
            p.extend(a.params());
        }
        for m in self.cross.iter().chain(self.self_attn.iter()) {
            for l in [&m.q, &m.k, &m.v, &m.o] {
                p.extend(l.params());
            }
        }
        p
    }

    /// Warped memory `P̃`, one row per query token.
    pub fn warp(&self, g: &Graph, store: &ParamStore, f: Var, grid: TokenGrid, mem: &Memory) -> Result<Var> {
        let (s, c) = g.shape(f);
        let (mrows, mc) = g.shape(mem.tokens);
        if s != grid.len() || c != self.width {
            return Err(invalid(format!("features {s}x{c} do not match grid {grid:?} width {}", self.width)));
        }
        if mc != self.memory_width {
            return Err(invalid(format!("memory width {mc}, expected {}", self.memory_width)));
        }
        if mem.groups == 0 || (mem.groups != 1 && mem.groups != grid.t) || mrows != mem.groups * mem.side * mem.side {
            return Err(invalid(format!("memory of {mrows} rows in {} groups of side {}", mem.groups, mem.side)));
        }
        if let Some(align) = &self.align {
            if grid.h != grid.w {
                return Err(invalid("aligned memory needs a square token grid"));
            }
            let projected = align.forward(g, store, mem.tokens);
            let pool = g.constant(area_pooling(mem.side, grid.h));
            let per = mem.side * mem.side;
            let slices: Vec<Var> = (0..grid.t)
                .map(|t| {
                    let gi = if mem.groups == 1 { 0 } else { t };
                    let idx: Vec<usize> = (gi * per..(gi + 1) * per).collect();
                    g.matmul(pool, g.gather_rows(projected, &idx))
                })
                .collect();
            return Ok(if slices.len() == 1 { slices[0] } else { g.concat_rows(&slices) });
        }
        let cross = self.cross.as_ref().expect("attention variant has a cross block");
        let groups = if mem.groups == 1 { 1 } else { grid.t };
        let mut warped = cross.forward(g, store, f, mem.tokens, groups, None)?;
        if let Some(sa) = &self.self_attn {
            warped = sa.forward(g, store, warped, warped, 1, None)?;
        }
        Ok(warped)
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, f: Var, grid: TokenGrid, mem: &Memory) -> Result<Var> {
        let warped = self.warp(g, store, f, grid, mem)?;
        Ok(match &self.generator {
            Generator::Add(l) => g.add(f, l.forward(g, store, warped)),
            Generator::Spatial { scale, offset } => {
                let gamma = scale.forward(g, store, warped);
                let beta = offset.forward(g, store, warped);
                g.add_col(g.mul_col(f, gamma), beta)
            }
            Generator::Channel { scale, offset } => {
                let (mean, std) = channel_stats(g, warped);
                let a = scale.forward(g, store, std);
                let b = offset.forward(g, store, mean);
                g.add_row(g.mul_row(f, a), b)
            }
            Generator::Concat(l) => l.forward(g, store, g.concat_cols(&[f, warped])),
        })
    }
}

/// Per-channel mean and population std (with [`STD_EPS`]) over rows.
pub fn channel_stats(g: &Graph, x: Var) -> (Var, Var) {
    let mean = g.mean_rows(x);
    let centered = g.add_row(x, g.scale(mean, -1.0));
    let var = g.mean_rows(g.square(centered));
    (mean, g.sqrt(g.add_scalar(var, STD_EPS)))
}

/// Builds the modulator for an ablation grid entry.
pub fn ablation_variant<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    kind: &str,
    width: usize,
    memory_width: usize,
    attn: AttnSpec,
    rng: &mut R,
) -> Result<Modulator> {
    let kind: VariantKind = kind.parse()?;
    Ok(Modulator::new(store, name, kind, width, memory_width, attn, rng))
}
