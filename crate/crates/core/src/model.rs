//! The assembled forecaster: numerical encoder, multimodal extractor, fusion
//! and predictor sharing one parameter store.

use std::sync::Arc;

use mmists_autodiff::{Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderDims, IstsEncoder, Padding};
use crate::error::{Error, Result};
use crate::extractor::MultimodalExtractor;
use crate::fusion::FusionStrategy;
use crate::nn::ParamBuilder;
use crate::pipeline::PreparedSample;
use crate::predictor::{squared_error, Predictor};
use crate::seed::rng_for;
use crate::variant::Variant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Taken from the data when left at 0.
    pub n_vars: usize,
    /// `D`.
    pub dim: usize,
    pub heads: usize,
    pub temporal_layers: usize,
    pub variable_layers: usize,
    /// `K`.
    pub extractor_layers: usize,
    pub extractor_heads: usize,
    /// `d_m`, the token feature width.
    pub embed_width: usize,
    pub fusion_residual: bool,
    /// Defaults to `2 D`.
    pub predictor_hidden: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(0, 32)
    }
}

impl ModelConfig {
    pub fn new(n_vars: usize, embed_width: usize) -> Self {
        Self {
            n_vars,
            dim: 64,
            heads: 4,
            temporal_layers: 3,
            variable_layers: 3,
            extractor_layers: 3,
            extractor_heads: 4,
            embed_width,
            fusion_residual: true,
            predictor_hidden: None,
        }
    }

    /// `N=3, D=8, d_m=12, K=2, L_t=L_v=1, h=2`.
    pub fn tiny() -> Self {
        Self {
            n_vars: 3,
            dim: 8,
            heads: 2,
            temporal_layers: 1,
            variable_layers: 1,
            extractor_layers: 2,
            extractor_heads: 2,
            embed_width: 12,
            fusion_residual: true,
            predictor_hidden: None,
        }
    }

    pub fn predictor_width(&self) -> usize {
        self.predictor_hidden.unwrap_or(2 * self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_vars == 0 || self.dim == 0 || self.embed_width == 0 {
            return bad("n_vars, dim and embed_width must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.extractor_heads == 0 || self.embed_width % self.extractor_heads != 0 {
            return bad(format!(
                "embed_width {} is not divisible by {} extractor heads",
                self.embed_width, self.extractor_heads
            ));
        }
        if self.predictor_width() == 0 {
            return bad("predictor_hidden must be positive".into());
        }
        Ok(())
    }
}

/// Graph handles produced by one forward pass.
pub struct ForwardOutput {
    pub h_ists: Var,
    pub h_mm: Var,
    pub h_fused: Option<Var>,
    pub h_final: Var,
    pub gates: Option<Var>,
    /// `Q x 1`.
    pub predictions: Var,
    /// Attention matrices of the encoder and extractor.
    pub attention: Vec<Var>,
    /// Per-head fusion attention, `N x N` each.
    pub fusion_attention: Vec<Var>,
}

pub struct Model {
    pub config: ModelConfig,
    pub variant: Arc<dyn Variant>,
    pub store: ParamStore,
    pub encoder: IstsEncoder,
    pub extractor: Box<dyn MultimodalExtractor>,
    pub fusion: Box<dyn FusionStrategy>,
    pub predictor: Predictor,
}

impl Model {
    /// Parameters are drawn from the `"model"` stream of `seed`.
    pub fn new(config: ModelConfig, variant: Arc<dyn Variant>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "model");
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let encoder = IstsEncoder::new(
            &mut b,
            EncoderDims {
                n_vars: config.n_vars,
                dim: config.dim,
                heads: config.heads,
                temporal_layers: config.temporal_layers,
                variable_layers: config.variable_layers,
            },
        )?;
        let extractor = variant.build_extractor(&mut b, &config)?;
        let fusion = variant.build_fusion(&mut b, &config)?;
        let predictor = Predictor::new(&mut b, config.dim, config.predictor_width())?;
        Ok(Self {
            config,
            variant,
            store,
            encoder,
            extractor,
            fusion,
            predictor,
        })
    }

    pub fn variant_name(&self) -> &'static str {
        self.variant.name()
    }

    pub fn check_sample(&self, sample: &PreparedSample) -> Result<()> {
        if sample.canonical.n_vars != self.config.n_vars || sample.stats.len() != self.config.n_vars {
            return Err(Error::DimensionMismatch(format!(
                "sample `{}` has {} variables, model expects {}",
                sample.id, sample.canonical.n_vars, self.config.n_vars
            )));
        }
        if sample.tokens.cols() != self.config.embed_width {
            return Err(Error::DimensionMismatch(format!(
                "sample `{}` has token width {}, model expects {}",
                sample.id,
                sample.tokens.cols(),
                self.config.embed_width
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph<'_>, sample: &PreparedSample) -> Result<ForwardOutput> {
        self.forward_with(g, sample, Padding::Trimmed)
    }

    pub fn forward_with(&self, g: &mut Graph<'_>, sample: &PreparedSample, padding: Padding) -> Result<ForwardOutput> {
        self.check_sample(sample)?;
        let enc = self.encoder.forward(g, &sample.canonical, padding)?;
        // provider output enters as an untracked constant
        let tokens = g.constant(sample.tokens.clone())?;
        let ext = self.extractor.extract(g, tokens)?;
        let fused = self.fusion.fuse(g, enc.h_ists, ext.h_mm, &sample.stats)?;
        let predictions = self.predictor.forward(g, fused.h_final, &sample.queries)?;
        let mut attention = enc.attention;
        attention.extend(ext.attention);
        Ok(ForwardOutput {
            h_ists: enc.h_ists,
            h_mm: ext.h_mm,
            h_fused: fused.h_fused,
            h_final: fused.h_final,
            gates: fused.gates,
            predictions,
            attention,
            fusion_attention: fused.attention,
        })
    }

    /// Sum of squared errors over the sample's queries divided by `denominator`.
    pub fn loss(&self, g: &mut Graph<'_>, sample: &PreparedSample, denominator: f64) -> Result<(Var, ForwardOutput)> {
        let out = self.forward(g, sample)?;
        let targets: Vec<f64> = sample.queries.iter().map(|q| q.target).collect();
        let l = squared_error(g, out.predictions, &targets, denominator)?;
        Ok((l, out))
    }

    /// Normalized-space predictions, one per query.
    pub fn predict(&self, sample: &PreparedSample) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(&self.store);
        let out = self.forward(&mut g, sample)?;
        Ok(g.value(out.predictions).data().to_vec())
    }
}
