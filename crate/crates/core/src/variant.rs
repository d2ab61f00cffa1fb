//! Model variants behind a common trait, looked up by name at runtime.

use std::sync::Arc;

use crate::encoding::{Prompt, ResizedImage};
use crate::error::{Error, Result};
use crate::extractor::{MeanPoolExtractor, MultimodalExtractor, QueryExtractor};
use crate::fusion::{AdditiveFusion, FusionStrategy, GatedAlignment};
use crate::model::ModelConfig;
use crate::nn::ParamBuilder;

/// A point in the ablation space: which extractor and fusion strategy the
/// model uses, and how the provider inputs are altered.
pub trait Variant: Send + Sync {
    fn name(&self) -> &'static str;

    fn build_extractor(&self, b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Box<dyn MultimodalExtractor>> {
        Ok(Box::new(QueryExtractor::new(
            b,
            cfg.n_vars,
            cfg.embed_width,
            cfg.extractor_heads,
            cfg.extractor_layers,
        )?))
    }

    fn build_fusion(&self, b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Box<dyn FusionStrategy>> {
        Ok(Box::new(GatedAlignment::new(
            b,
            cfg.dim,
            cfg.embed_width,
            cfg.heads,
            cfg.fusion_residual,
        )?))
    }

    /// Hook applied to the image and prompt before they reach the provider.
    fn provider_inputs(&self, image: ResizedImage, prompt: Prompt) -> (ResizedImage, Prompt) {
        (image, prompt)
    }
}

pub struct Full;

impl Variant for Full {
    fn name(&self) -> &'static str {
        "full"
    }
}

pub struct WithoutText;

impl Variant for WithoutText {
    fn name(&self) -> &'static str {
        "without-text"
    }

    fn provider_inputs(&self, image: ResizedImage, _prompt: Prompt) -> (ResizedImage, Prompt) {
        (image, Prompt::empty())
    }
}

pub struct WithoutImage;

impl Variant for WithoutImage {
    fn name(&self) -> &'static str {
        "without-image"
    }

    fn provider_inputs(&self, image: ResizedImage, prompt: Prompt) -> (ResizedImage, Prompt) {
        (ResizedImage::zeros(image.height, image.width), prompt)
    }
}

pub struct WithoutQbe;

impl Variant for WithoutQbe {
    fn name(&self) -> &'static str {
        "without-qbe"
    }

    fn build_extractor(&self, b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Box<dyn MultimodalExtractor>> {
        Ok(Box::new(MeanPoolExtractor::new(b, cfg.n_vars, cfg.embed_width)?))
    }
}

pub struct WithoutAlign;

impl Variant for WithoutAlign {
    fn name(&self) -> &'static str {
        "without-align"
    }

    fn build_fusion(&self, b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Box<dyn FusionStrategy>> {
        Ok(Box::new(AdditiveFusion::new(b, cfg.dim, cfg.embed_width)?))
    }
}

#[derive(Clone, Default)]
pub struct VariantRegistry {
    entries: Vec<Arc<dyn Variant>>,
}

impl VariantRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The full model followed by the four ablations.
    pub fn with_defaults() -> Self {
        let mut r = Self::new();
        r.register(Arc::new(Full));
        r.register(Arc::new(WithoutText));
        r.register(Arc::new(WithoutImage));
        r.register(Arc::new(WithoutQbe));
        r.register(Arc::new(WithoutAlign));
        r
    }

    /// Adds a variant, replacing any previous entry with the same name.
    pub fn register(&mut self, variant: Arc<dyn Variant>) {
        match self.entries.iter().position(|v| v.name() == variant.name()) {
            Some(i) => self.entries[i] = variant,
            None => self.entries.push(variant),
        }
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Variant>> {
        self.entries
            .iter()
            .find(|v| v.name() == name)
            .cloned()
            .ok_or_else(|| Error::UnknownVariant(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|v| v.name()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<dyn Variant>> {
        self.entries.iter()
    }
}
