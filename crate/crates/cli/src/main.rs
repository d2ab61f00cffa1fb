mod config;
mod error;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ColorChoice, Parser, Subcommand};
use mmists_core::ablation::run_ablation;
use mmists_core::data::{generate_synthetic, read_dataset, split_dataset, write_dataset, Sample};
use mmists_core::diagnostics::{dump_alignment, write_dump};
use mmists_core::embedding::{cache_file_name, cache_path, write_record, CacheRecord, EmbeddingProvider, EmbeddingRequest};
use mmists_core::encoding::{write_image_file, PromptTemplates};
use mmists_core::experiment::{load_run, prepare_split_for_run, run_experiment, save_run, DataContext};
use mmists_core::gradcheck::{run_gradcheck, TinyInstance, DEFAULT_EPS, DEFAULT_THRESHOLD};
use mmists_core::pipeline::Preparer;
use mmists_core::train::{evaluate, mean_baseline, Metrics};
use mmists_core::variant::VariantRegistry;
use serde_json::json;

use crate::config::{Overrides, RunConfig, CACHE_ENV};
use crate::error::CliError;

/// Multimodal forecasting for irregularly sampled multivariate time series.
#[derive(Debug, Parser)]
#[command(name = "mm-ists", version, color = ColorChoice::Never)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
    /// Dataset file (one JSON sample per line).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output file or directory; each command has its own default.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory holding image.txt, data.txt and task.txt prompt templates.
    #[arg(long, global = true)]
    templates: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (default `data.jsonl`).
    Gen,
    /// Write each sample's resized three-channel image as an MMI1 file.
    Images,
    /// Write each sample's prompt as a text file.
    Prompts,
    /// Fill the embedding cache with synthetic provider output.
    Embed,
    /// Train, evaluate on test and save the run (default `run/`).
    Train,
    /// Evaluate a saved run on one split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train every variant and write `ablation.csv` (default `ablation/`).
    Ablate,
    /// Finite-difference check of the whole model on a tiny instance.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Dump fusion attention and gating weights for one sample.
    DumpAlign {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Sample id; defaults to the first sample of the split.
        #[arg(long)]
        sample: Option<String>,
    },
    /// Print the resolved configuration as TOML.
    Config,
}

struct Ctx {
    cfg: RunConfig,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    templates: PromptTemplates,
    registry: VariantRegistry,
    cache_flag: Option<PathBuf>,
}

impl Ctx {
    fn samples(&self) -> Result<Vec<Sample>, CliError> {
        let path = self
            .data
            .as_ref()
            .ok_or_else(|| CliError::MissingInput("--data is required".into()))?;
        if !path.exists() {
            return Err(CliError::MissingInput(format!("dataset {} does not exist", path.display())));
        }
        Ok(read_dataset(path)?)
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn metrics_json(m: &Metrics) -> serde_json::Value {
    json!({
        "mse": m.mse,
        "mae": m.mae,
        "scaled_mse": m.scaled_mse(),
        "scaled_mae": m.scaled_mae(),
        "count": m.count,
    })
}

fn file_stem(id: &str) -> String {
    let name = cache_file_name(id);
    name.rsplit_once('.').map_or(name.clone(), |(s, _)| s.to_string())
}

/// Runs `f` on the prepared views of every sample with the run's context.
fn for_each_view(
    ctx: &Ctx,
    mut f: impl FnMut(&Sample, mmists_core::pipeline::SampleViews) -> Result<(), CliError>,
) -> Result<usize, CliError> {
    let samples = ctx.samples()?;
    let exp = ctx.cfg.experiment();
    let split = split_dataset(samples.clone(), exp.seed)?;
    let dc = DataContext::fit(&samples, &split, exp.pipeline.seq_len_cap)?;
    let prep = Preparer::new(&exp.pipeline, &ctx.templates, &dc.normalizer, dc.seq_len)?;
    for s in &samples {
        f(s, prep.views(s)?)?;
    }
    Ok(samples.len())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let env_cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    let cache_flag = cli.overrides.cache_dir.clone();
    let cfg = cli.overrides.resolve(env_cache)?;
    let templates = match &cli.templates {
        Some(dir) => PromptTemplates::load(dir)?,
        None => PromptTemplates::default(),
    };
    let ctx = Ctx {
        cfg,
        data: cli.data,
        out: cli.out,
        templates,
        registry: VariantRegistry::with_defaults(),
        cache_flag,
    };
    match cli.command {
        Command::Gen => {
            let out = ctx.out_or("data.jsonl");
            let samples = generate_synthetic(&ctx.cfg.synthetic, ctx.cfg.seed)?;
            write_dataset(&out, &samples)?;
            println!("{}", json!({"samples": samples.len(), "out": out}));
        }
        Command::Images => {
            let out = ctx.out_or("images");
            fs::create_dir_all(&out)?;
            let n = for_each_view(&ctx, |s, v| Ok(write_image_file(out.join(file_stem(&s.id) + ".mmi"), &v.resized)?))?;
            println!("{}", json!({"images": n, "out": out}));
        }
        Command::Prompts => {
            let out = ctx.out_or("prompts");
            fs::create_dir_all(&out)?;
            let n = for_each_view(&ctx, |s, v| Ok(fs::write(out.join(file_stem(&s.id) + ".txt"), v.prompt.rendered + "\n")?))?;
            println!("{}", json!({"prompts": n, "out": out}));
        }
        Command::Embed => {
            let dir = ctx
                .cfg
                .embedding
                .cache_dir
                .clone()
                .or_else(|| ctx.out.clone())
                .ok_or_else(|| CliError::MissingInput(format!("set --cache-dir, --out or {CACHE_ENV}")))?;
            fs::create_dir_all(&dir)?;
            let e = &ctx.cfg.embedding;
            let provider = e.synthetic(ctx.cfg.seed, ctx.cfg.model.embed_width);
            let variant = ctx.registry.get(&ctx.cfg.variant)?;
            let n = for_each_view(&ctx, |s, v| {
                let (image, prompt) = variant.provider_inputs(v.resized, v.prompt);
                let matrix = provider.embed(&EmbeddingRequest {
                    sample_id: &s.id,
                    image: &image,
                    prompt: &prompt,
                    stats: &v.stats,
                })?;
                let mut record = CacheRecord::new(s.id.clone(), matrix);
                record.layer_offset = e.layer_offset;
                Ok(write_record(cache_path(&dir, &s.id), &record)?)
            })?;
            println!("{}", json!({"embeddings": n, "cache_dir": dir}));
        }
        Command::Train => {
            let out = ctx.out_or("run");
            let exp = ctx.cfg.experiment();
            let run = run_experiment(&exp, ctx.samples()?, &ctx.registry, &ctx.templates, |e| {
                println!("{}", serde_json::to_string(e).expect("epoch log serializes"));
            })?;
            save_run(&out, &exp, &run)?;
            println!(
                "{}",
                json!({
                    "run": out,
                    "variant": exp.variant,
                    "best_epoch": run.report.best_epoch,
                    "best_score": run.report.best_score,
                    "stopped_early": run.report.stopped_early,
                    "test": metrics_json(&run.test),
                    "baseline": metrics_json(&run.baseline),
                })
            );
        }
        Command::Eval { run, split } => {
            let (record, model, set) = load_split(&ctx, &run, &split)?;
            let split_name = static_split(&split)?;
            let m = evaluate(&model, &set, split_name)?;
            let base = mean_baseline(&set, split_name)?;
            println!(
                "{}",
                json!({
                    "run": run,
                    "variant": record.config.variant,
                    "split": split,
                    "metrics": metrics_json(&m),
                    "baseline": metrics_json(&base),
                })
            );
        }
        Command::Ablate => {
            let out = ctx.out_or("ablation");
            fs::create_dir_all(&out)?;
            let samples = ctx.samples()?;
            let table = run_ablation(
                &ctx.cfg.experiment(),
                &samples,
                &ctx.registry,
                &ctx.templates,
                |v, e| eprintln!("{v} epoch {} train {:.6} val {:?}", e.epoch, e.train_loss, e.val_mse),
                |_| {},
            )?;
            fs::write(out.join("ablation.csv"), table.to_csv())?;
            print!("{}", table.render());
        }
        Command::Gradcheck { eps, threshold } => {
            let variant = ctx.registry.get(&ctx.cfg.variant)?;
            let report = run_gradcheck(&TinyInstance::default(), variant, ctx.cfg.seed, eps, threshold)?;
            println!("{}", serde_json::to_string(&report)?);
            if !report.passed {
                return Err(CliError::CheckFailed(format!(
                    "max relative error {:e} exceeds {threshold:e}",
                    report.max_rel_error
                )));
            }
        }
        Command::DumpAlign { run, split, sample } => {
            let (_, model, set) = load_split(&ctx, &run, &split)?;
            let chosen = match &sample {
                Some(id) => set
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| CliError::MissingInput(format!("sample `{id}` is not in split `{split}`")))?,
                None => set
                    .first()
                    .ok_or_else(|| CliError::MissingInput(format!("split `{split}` is empty")))?,
            };
            let dump = dump_alignment(&model, chosen)?;
            match &ctx.out {
                Some(path) => write_dump(path, &dump)?,
                None => println!("{}", serde_json::to_string_pretty(&dump)?),
            }
        }
        Command::Config => print!("{}", ctx.cfg.to_toml()),
    }
    Ok(())
}

fn static_split(split: &str) -> Result<&'static str, CliError> {
    match split {
        "train" => Ok("train"),
        "val" => Ok("val"),
        "test" => Ok("test"),
        other => Err(CliError::ConfigInvalid(format!("unknown split `{other}`"))),
    }
}

type Loaded = (
    mmists_core::experiment::RunRecord,
    mmists_core::model::Model,
    Vec<mmists_core::pipeline::PreparedSample>,
);

/// Loads a saved run and prepares `split` of `--data` exactly as it was
/// trained. `--cache-dir` may point a file-cache run at a moved cache.
fn load_split(ctx: &Ctx, dir: &Path, split: &str) -> Result<Loaded, CliError> {
    static_split(split)?;
    let (mut record, model) = load_run(dir, &ctx.registry)?;
    if ctx.cache_flag.is_some() {
        record.config.embedding.cache_dir = ctx.cache_flag.clone();
    }
    let set = prepare_split_for_run(&record, ctx.samples()?, split, &ctx.registry, &ctx.templates)?;
    Ok((record, model, set))
}

fn report(kind: &str, message: &str) {
    eprintln!("{}", json!({"error": kind, "message": message}));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            report("Usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
