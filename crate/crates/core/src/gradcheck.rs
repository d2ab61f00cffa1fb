//! Whole-model finite-difference check on a tiny instance.

use std::time::Instant;

use mmists_autodiff::{grad_check_params, ParamCheck};
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::data::{generate_synthetic, Normalizer, SynthConfig};
use crate::encoding::PromptTemplates;
use crate::error::{Error, Result};
use crate::experiment::ProviderConfig;
use crate::model::{Model, ModelConfig};
use crate::pipeline::{PipelineConfig, PreparedSample, Preparer};
use crate::seed::rng_for;
use crate::variant::Variant;

pub const DEFAULT_THRESHOLD: f64 = 1e-3;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Shape of the instance: `N=3, L=6, D=8, d_m=12, S=10, K=2, L_t=L_v=1, h=2`.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyInstance {
    pub model: ModelConfig,
    pub seq_len: usize,
    pub tokens: usize,
    /// Standard deviation of the noise added to every initial parameter so
    /// zero-initialized blocks take part in the check.
    pub jitter: f64,
}

impl Default for TinyInstance {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            seq_len: 6,
            tokens: 10,
            jitter: 0.1,
        }
    }
}

impl TinyInstance {
    /// One synthetic sample, prepared with the synthetic provider.
    pub fn sample(&self, seed: u64, variant: &dyn Variant) -> Result<PreparedSample> {
        let raw = generate_synthetic(
            &SynthConfig {
                n_vars: self.model.n_vars,
                l_max: self.seq_len,
                samples: 1,
                obs_rate: 0.6,
                noise: 0.1,
                horizon: 2,
            },
            seed,
        )?;
        let pipeline = PipelineConfig::default();
        let normalizer = Normalizer::identity(self.model.n_vars);
        let prep = Preparer::new(&pipeline, &PromptTemplates::default(), &normalizer, self.seq_len)?;
        let provider = ProviderConfig {
            tokens: self.tokens,
            ..ProviderConfig::default()
        }
        .synthetic(seed, self.model.embed_width);
        prep.prepare(&raw[0], variant, &provider, self.model.embed_width)
    }

    pub fn model(&self, seed: u64, variant: std::sync::Arc<dyn Variant>) -> Result<Model> {
        let mut model = Model::new(self.model.clone(), variant, seed)?;
        let mut rng = rng_for(seed, "gradcheck/jitter");
        let noise = Normal::new(0.0, self.jitter).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let v = model.store.value_mut(id);
            for x in v.data_mut() {
                *x += noise.sample(&mut rng);
            }
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub scalars: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub variant: String,
    pub eps: f64,
    pub threshold: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub seconds: f64,
    pub groups: Vec<GroupCheck>,
    #[serde(skip)]
    pub params: Vec<ParamCheck>,
}

/// Parameter group: the first two components of the dotted name.
pub fn group_of(name: &str) -> String {
    name.split('.').take(2).collect::<Vec<_>>().join(".")
}

pub fn run_gradcheck(
    instance: &TinyInstance,
    variant: std::sync::Arc<dyn Variant>,
    seed: u64,
    eps: f64,
    threshold: f64,
) -> Result<GradcheckReport> {
    let start = Instant::now();
    let sample = instance.sample(seed, variant.as_ref())?;
    let mut model = instance.model(seed, variant.clone())?;
    let mut store = std::mem::take(&mut model.store);
    let denominator = sample.queries.len() as f64;
    let params = grad_check_params(
        &mut store,
        |g| {
            let (loss, _) = model.loss(g, &sample, denominator)?;
            Ok(loss)
        },
        eps,
    )?;
    model.store = store;

    let mut groups: Vec<GroupCheck> = Vec::new();
    for p in &params {
        let name = group_of(&p.name);
        match groups.iter_mut().find(|g| g.group == name) {
            Some(g) => {
                g.scalars += p.scalars;
                g.max_rel_error = g.max_rel_error.max(p.max_rel_error);
            }
            None => groups.push(GroupCheck {
                group: name,
                scalars: p.scalars,
                max_rel_error: p.max_rel_error,
            }),
        }
    }
    let max_rel_error = params.iter().fold(0.0f64, |m, p| m.max(p.max_rel_error));
    Ok(GradcheckReport {
        variant: variant.name().to_string(),
        eps,
        threshold,
        max_rel_error,
        passed: max_rel_error < threshold,
        seconds: start.elapsed().as_secs_f64(),
        groups,
        params,
    })
}
