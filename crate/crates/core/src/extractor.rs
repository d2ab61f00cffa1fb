//! Compression of the `S x d_m` token features into `N` variable-aligned rows.

use mmists_autodiff::{Graph, ParamId, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{AttentionDims, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamBuilder};

pub struct ExtractOutput {
    /// `N x d_m`.
    pub h_mm: Var,
    pub attention: Vec<Var>,
}

pub trait MultimodalExtractor: Send + Sync {
    fn extract(&self, g: &mut Graph<'_>, tokens: Var) -> Result<ExtractOutput>;
}

fn check_width(g: &Graph<'_>, tokens: Var, width: usize) -> Result<()> {
    let [_, c] = g.shape(tokens);
    if c != width {
        return Err(Error::DimensionMismatch(format!(
            "extractor expects token width {width}, got {c}"
        )));
    }
    Ok(())
}

/// One refinement step: self-attention among queries, cross-attention into
/// the tokens, then a feed-forward block, each pre-normed with a residual.
#[derive(Clone, Debug)]
pub struct ExtractorLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl ExtractorLayer {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, width: usize, heads: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            norm_self: LayerNorm::new(&mut s, "norm_self", width)?,
            self_attn: MultiHeadAttention::new(&mut s, "self_attn", AttentionDims::square(width, heads), false)?,
            norm_cross: LayerNorm::new(&mut s, "norm_cross", width)?,
            cross_attn: MultiHeadAttention::new(&mut s, "cross_attn", AttentionDims::square(width, heads), false)?,
            norm_ffn: LayerNorm::new(&mut s, "norm_ffn", width)?,
            ffn: FeedForward::new(&mut s, "ffn", width, 4 * width)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, q: Var, tokens: Var, attention: &mut Vec<Var>) -> Result<Var> {
        let n = self.norm_self.forward(g, q)?;
        let a = self.self_attn.forward(g, n, n, None)?;
        attention.extend(a.probs);
        let q = g.add(q, a.out)?;
        let n = self.norm_cross.forward(g, q)?;
        let c = self.cross_attn.forward(g, n, tokens, None)?;
        attention.extend(c.probs);
        let q = g.add(q, c.out)?;
        let n = self.norm_ffn.forward(g, q)?;
        let f = self.ffn.forward(g, n)?;
        Ok(g.add(q, f)?)
    }
}

/// `N` learnable query tokens refined by `K` extractor layers.
#[derive(Clone, Debug)]
pub struct QueryExtractor {
    pub width: usize,
    /// `N x d_m`.
    pub queries: ParamId,
    pub layers: Vec<ExtractorLayer>,
}

impl QueryExtractor {
    pub fn new(b: &mut ParamBuilder<'_>, n_vars: usize, width: usize, heads: usize, depth: usize) -> Result<Self> {
        let mut s = b.scope("extractor");
        let queries = s.normal("queries", n_vars, width, 0.02)?;
        let layers = (0..depth)
            .map(|i| ExtractorLayer::new(&mut s, &format!("layer.{i}"), width, heads))
            .collect::<Result<_>>()?;
        Ok(Self { width, queries, layers })
    }
}

impl MultimodalExtractor for QueryExtractor {
    fn extract(&self, g: &mut Graph<'_>, tokens: Var) -> Result<ExtractOutput> {
        check_width(g, tokens, self.width)?;
        let mut attention = Vec::new();
        let mut q = g.param(self.queries)?;
        for layer in &self.layers {
            q = layer.forward(g, q, tokens, &mut attention)?;
        }
        Ok(ExtractOutput { h_mm: q, attention })
    }
}

/// Average-pools the tokens, applies an affine `d_m -> d_m` map and repeats
/// the result on every variable row.
#[derive(Clone, Debug)]
pub struct MeanPoolExtractor {
    pub n_vars: usize,
    pub width: usize,
    pub proj: Linear,
}

impl MeanPoolExtractor {
    pub fn new(b: &mut ParamBuilder<'_>, n_vars: usize, width: usize) -> Result<Self> {
        let mut s = b.scope("extractor");
        let proj = Linear::new(&mut s, "pool_proj", width, width, true)?;
        Ok(Self { n_vars, width, proj })
    }
}

impl MultimodalExtractor for MeanPoolExtractor {
    fn extract(&self, g: &mut Graph<'_>, tokens: Var) -> Result<ExtractOutput> {
        check_width(g, tokens, self.width)?;
        let [s, _] = g.shape(tokens);
        let pooled = g.masked_mean_rows(tokens, &vec![1.0; s])?;
        let pooled = self.proj.forward(g, pooled)?;
        let ones = g.constant(Tensor::full(self.n_vars, 1, 1.0))?;
        let h_mm = if self.n_vars == 1 { pooled } else { g.matmul(ones, pooled)? };
        Ok(ExtractOutput {
            h_mm,
            attention: Vec::new(),
        })
    }
}
