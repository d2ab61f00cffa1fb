//! Train every registered variant under one configuration and tabulate.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::encoding::PromptTemplates;
use crate::error::Result;
use crate::experiment::{run_experiment, ExperimentConfig, TrainedRun};
use crate::train::{EpochLog, Metrics};
use crate::variant::VariantRegistry;

pub const CSV_HEADER: &str = "variant,mse,mae,scaled_mse,scaled_mae";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub test: Metrics,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.variant,
                r.test.mse,
                r.test.mae,
                r.test.scaled_mse(),
                r.test.scaled_mae()
            );
        }
        s
    }

    /// Fixed-width text table with scaled metrics.
    pub fn render(&self) -> String {
        let mut s = format!("{:<16} {:>12} {:>12}\n", "variant", "MSE(1e-3)", "MAE(1e-2)");
        for r in &self.rows {
            let _ = writeln!(s, "{:<16} {:>12.4} {:>12.4}", r.variant, r.test.scaled_mse(), r.test.scaled_mae());
        }
        s
    }
}

/// Runs `config` once per variant in registry order; only the variant name
/// changes between runs. `on_run` sees each finished run before it is dropped.
pub fn run_ablation(
    config: &ExperimentConfig,
    samples: &[Sample],
    registry: &VariantRegistry,
    templates: &PromptTemplates,
    mut on_epoch: impl FnMut(&str, &EpochLog),
    mut on_run: impl FnMut(&TrainedRun),
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for variant in registry.iter() {
        let name = variant.name();
        let cfg = ExperimentConfig {
            variant: name.to_string(),
            ..config.clone()
        };
        let run = run_experiment(&cfg, samples.to_vec(), registry, templates, |e| on_epoch(name, e))?;
        on_run(&run);
        table.rows.push(AblationRow {
            variant: name.to_string(),
            test: run.test,
            best_epoch: run.report.best_epoch,
        });
    }
    Ok(table)
}
