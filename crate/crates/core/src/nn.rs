//! Layers shared by the encoders, the extractor and the fusion block.

use mmists_autodiff::{Axis, Graph, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Registers parameters under a name prefix, drawing initial values from one RNG.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Builder whose names are prefixed with `scope.`.
    pub fn scope(&mut self, scope: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            scope.to_string()
        } else {
            format!("{}.{scope}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Ok(self.store.register(full, value)?)
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.register(name, value)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.register(name, Tensor::zeros(rows, cols))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.register(name, Tensor::full(rows, cols, 1.0))
    }

    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.register(name, Tensor::new(rows, cols, data)?)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let data = (0..rows * cols).map(|_| dist.sample(self.rng)).collect();
        self.register(name, Tensor::new(rows, cols, data)?)
    }
}

/// `x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let mut s = b.scope(name);
        let weight = s.uniform("weight", input, output, input)?;
        let bias = if bias { Some(s.zeros("bias", 1, output)?) } else { None };
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    /// Same shapes with an all-zero weight.
    pub fn zeroed(b: &mut ParamBuilder<'_>, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let mut s = b.scope(name);
        let weight = s.zeros("weight", input, output)?;
        let bias = if bias { Some(s.zeros("bias", 1, output)?) } else { None };
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b)?;
                Ok(g.add_row(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            gamma: s.ones("gamma", 1, dim)?,
            beta: s.zeros("beta", 1, dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        Ok(g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?)
    }
}

/// Shapes of a multi-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionDims {
    pub query_in: usize,
    pub key_in: usize,
    /// Width of the query/key projections, split across heads.
    pub qk: usize,
    /// Width of the value projection, split across heads.
    pub value: usize,
    /// Output projection width; `None` returns the concatenated heads.
    pub output: Option<usize>,
    pub heads: usize,
}

impl AttentionDims {
    pub fn square(dim: usize, heads: usize) -> Self {
        Self {
            query_in: dim,
            key_in: dim,
            qk: dim,
            value: dim,
            output: Some(dim),
            heads,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Option<Linear>,
    pub heads: usize,
}

/// Attention result plus the per-head probability matrices.
pub struct AttentionOutput {
    pub out: Var,
    pub probs: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, dims: AttentionDims, zero_value: bool) -> Result<Self> {
        if dims.heads == 0 || dims.qk % dims.heads != 0 || dims.value % dims.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "attention widths {}/{} not divisible by {} heads",
                dims.qk, dims.value, dims.heads
            )));
        }
        let mut s = b.scope(name);
        let wq = Linear::new(&mut s, "query", dims.query_in, dims.qk, false)?;
        let wk = Linear::new(&mut s, "key", dims.key_in, dims.qk, false)?;
        let wv = if zero_value {
            Linear::zeroed(&mut s, "value", dims.key_in, dims.value, false)?
        } else {
            Linear::new(&mut s, "value", dims.key_in, dims.value, false)?
        };
        let wo = match dims.output {
            Some(out) => Some(Linear::new(&mut s, "output", dims.value, out, true)?),
            None => None,
        };
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            heads: dims.heads,
        })
    }

    /// `queries` attend over `keys`; key columns flagged `false` in `key_mask`
    /// receive zero weight.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        queries: Var,
        keys: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<AttentionOutput> {
        let [_, qin] = g.shape(queries);
        let [_, kin] = g.shape(keys);
        if qin != self.wq.input || kin != self.wk.input {
            return Err(Error::DimensionMismatch(format!(
                "attention expects query width {} and key width {}, got {qin} and {kin}",
                self.wq.input, self.wk.input
            )));
        }
        let q = self.wq.forward(g, queries)?;
        let k = self.wk.forward(g, keys)?;
        let v = self.wv.forward(g, keys)?;
        let dk = self.wq.output / self.heads;
        let dv = self.wv.output / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice(q, Axis::Cols, h * dk, dk)?,
                    g.slice(k, Axis::Cols, h * dk, dk)?,
                    g.slice(v, Axis::Cols, h * dv, dv)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let p = g.softmax_rows(scores, key_mask)?;
            outs.push(g.matmul(p, vh)?);
            probs.push(p);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, Axis::Cols)? };
        let out = match &self.wo {
            Some(wo) => wo.forward(g, cat)?,
            None => cat,
        };
        Ok(AttentionOutput { out, probs })
    }
}

/// `relu(x W1 + b1) W2 + b2` with hidden width `hidden`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            up: Linear::new(&mut s, "up", dim, hidden, true)?,
            down: Linear::new(&mut s, "down", hidden, dim, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h)?;
        self.down.forward(g, h)
    }
}

/// Pre-norm Transformer layer: `x + Attn(LN(x))`, then `+ FFN(LN(.))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            norm_attn: LayerNorm::new(&mut s, "norm_attn", dim)?,
            attn: MultiHeadAttention::new(&mut s, "attn", AttentionDims::square(dim, heads), false)?,
            norm_ffn: LayerNorm::new(&mut s, "norm_ffn", dim)?,
            ffn: FeedForward::new(&mut s, "ffn", dim, 4 * dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, key_mask: Option<&[bool]>) -> Result<AttentionOutput> {
        let n = self.norm_attn.forward(g, x)?;
        let a = self.attn.forward(g, n, n, key_mask)?;
        let x = g.add(x, a.out)?;
        let n = self.norm_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, n)?;
        Ok(AttentionOutput {
            out: g.add(x, f)?,
            probs: a.probs,
        })
    }
}
