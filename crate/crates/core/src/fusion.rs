//! Combining the numerical and multimodal branches.

use mmists_autodiff::{Axis, Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{AttentionDims, LayerNorm, Linear, MultiHeadAttention, ParamBuilder};

pub const GATE_HIDDEN: usize = 16;

pub struct FusionOutput {
    /// `N x D`.
    pub h_final: Var,
    /// `N x D`, absent when the strategy has no attention step.
    pub h_fused: Option<Var>,
    /// `N x 2` rows of `(alpha_num, alpha_mm)`, absent without gating.
    pub gates: Option<Var>,
    pub attention: Vec<Var>,
}

pub trait FusionStrategy: Send + Sync {
    /// `stats` holds one `[mean, std, missing_rate, density]` row per variable.
    fn fuse(&self, g: &mut Graph<'_>, h_ists: Var, h_mm: Var, stats: &[[f64; 4]]) -> Result<FusionOutput>;
}

/// `H_ISTS` rows query `H_MM` rows; optional residual plus layer norm.
#[derive(Clone, Debug)]
pub struct CrossFusion {
    pub attn: MultiHeadAttention,
    pub norm: Option<LayerNorm>,
}

impl CrossFusion {
    /// Query/key width equals `dim`; the value projection starts at zero.
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize, width: usize, heads: usize, residual: bool) -> Result<Self> {
        let mut s = b.scope("fusion");
        let dims = AttentionDims {
            query_in: dim,
            key_in: width,
            qk: dim,
            value: dim,
            output: None,
            heads,
        };
        let attn = MultiHeadAttention::new(&mut s, "cross", dims, true)?;
        let norm = if residual {
            Some(LayerNorm::new(&mut s, "norm", dim)?)
        } else {
            None
        };
        Ok(Self { attn, norm })
    }

    pub fn forward(&self, g: &mut Graph<'_>, h_ists: Var, h_mm: Var) -> Result<(Var, Vec<Var>)> {
        let a = self.attn.forward(g, h_ists, h_mm, None)?;
        let out = match &self.norm {
            Some(norm) => {
                let r = g.add(h_ists, a.out)?;
                norm.forward(g, r)?
            }
            None => a.out,
        };
        Ok((out, a.probs))
    }
}

/// `softmax(W2 relu(W1 s + b1) + b2)` per variable.
#[derive(Clone, Debug)]
pub struct GatingNet {
    pub hidden: Linear,
    pub out: Linear,
}

impl GatingNet {
    pub fn new(b: &mut ParamBuilder<'_>, hidden: usize) -> Result<Self> {
        let mut s = b.scope("gate");
        Ok(Self {
            hidden: Linear::new(&mut s, "hidden", 4, hidden, true)?,
            out: Linear::new(&mut s, "out", hidden, 2, true)?,
        })
    }

    /// `stats: N x 4` to `N x 2` convex weights.
    pub fn forward(&self, g: &mut Graph<'_>, stats: Var) -> Result<Var> {
        let h = self.hidden.forward(g, stats)?;
        let h = g.relu(h)?;
        let logits = self.out.forward(g, h)?;
        Ok(g.softmax_rows(logits, None)?)
    }
}

pub fn stats_tensor(stats: &[[f64; 4]]) -> Result<Tensor> {
    Ok(Tensor::new(stats.len(), 4, stats.concat())?)
}

/// Row `n` of the result is `alpha[n,0] a[n] + alpha[n,1] b[n]`.
pub fn combine(g: &mut Graph<'_>, a: Var, b: Var, alpha: Var) -> Result<Var> {
    let w_a = g.slice(alpha, Axis::Cols, 0, 1)?;
    let w_b = g.slice(alpha, Axis::Cols, 1, 1)?;
    let a = g.mul_col(a, w_a)?;
    let b = g.mul_col(b, w_b)?;
    Ok(g.add(a, b)?)
}

fn check_rows(g: &Graph<'_>, h_ists: Var, h_mm: Var, stats: &[[f64; 4]]) -> Result<()> {
    let (a, b) = (g.shape(h_ists)[0], g.shape(h_mm)[0]);
    if a != b || a != stats.len() {
        return Err(Error::DimensionMismatch(format!(
            "fusion inputs disagree on N: {a} numerical rows, {b} multimodal rows, {} statistics rows",
            stats.len()
        )));
    }
    Ok(())
}

/// Cross-attention fusion blended with `H_ISTS` by statistics-driven gates.
#[derive(Clone, Debug)]
pub struct GatedAlignment {
    pub cross: CrossFusion,
    pub gate: GatingNet,
}

impl GatedAlignment {
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize, width: usize, heads: usize, residual: bool) -> Result<Self> {
        Ok(Self {
            cross: CrossFusion::new(b, dim, width, heads, residual)?,
            gate: GatingNet::new(b, GATE_HIDDEN)?,
        })
    }
}

impl FusionStrategy for GatedAlignment {
    fn fuse(&self, g: &mut Graph<'_>, h_ists: Var, h_mm: Var, stats: &[[f64; 4]]) -> Result<FusionOutput> {
        check_rows(g, h_ists, h_mm, stats)?;
        let (h_fused, attention) = self.cross.forward(g, h_ists, h_mm)?;
        let s = g.constant(stats_tensor(stats)?)?;
        let gates = self.gate.forward(g, s)?;
        let h_final = combine(g, h_ists, h_fused, gates)?;
        Ok(FusionOutput {
            h_final,
            h_fused: Some(h_fused),
            gates: Some(gates),
            attention,
        })
    }
}

/// `H_ISTS + H_MM W + b`, no attention and no gates.
#[derive(Clone, Debug)]
pub struct AdditiveFusion {
    pub proj: Linear,
}

impl AdditiveFusion {
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize, width: usize) -> Result<Self> {
        let mut s = b.scope("fusion");
        Ok(Self {
            proj: Linear::new(&mut s, "add_proj", width, dim, true)?,
        })
    }
}

impl FusionStrategy for AdditiveFusion {
    fn fuse(&self, g: &mut Graph<'_>, h_ists: Var, h_mm: Var, stats: &[[f64; 4]]) -> Result<FusionOutput> {
        check_rows(g, h_ists, h_mm, stats)?;
        let p = self.proj.forward(g, h_mm)?;
        Ok(FusionOutput {
            h_final: g.add(h_ists, p)?,
            h_fused: None,
            gates: None,
            attention: Vec::new(),
        })
    }
}
