//! Acceptance criteria G1-G10. Each prints one PASS/FAIL line; the test
//! fails if any criterion does.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use mmists_autodiff::{Graph, Tensor};
use mmists_core::ablation::{run_ablation, CSV_HEADER};
use mmists_core::data::{canonicalize, generate_synthetic, Normalizer, Observation, Sample, SynthConfig, VariableSeries};
use mmists_core::diagnostics::dump_alignment;
use mmists_core::embedding::{
    cache_path, decode_record, encode_record, read_record, write_record, CacheRecord, EmbeddingMatrix,
};
use mmists_core::encoder::Padding;
use mmists_core::encoding::{assemble_prompt, build_image, compute_stats, resize_normalize, IrregularityImage, PromptTemplates};
use mmists_core::experiment::{run_experiment, ExperimentConfig, ProviderConfig};
use mmists_core::gradcheck::{run_gradcheck, TinyInstance, DEFAULT_EPS, DEFAULT_THRESHOLD};
use mmists_core::model::{Model, ModelConfig};
use mmists_core::pipeline::{PipelineConfig, PreparedSample, Preparer};
use mmists_core::seed::rng_for;
use mmists_core::train::{train, TrainConfig};
use mmists_core::variant::VariantRegistry;
use rand::Rng;

type Outcome = mmists_core::Result<(bool, String)>;

fn prepare(samples: &[Sample], n_vars: usize, width: usize, seed: u64, variant: &str) -> Vec<PreparedSample> {
    let reg = VariantRegistry::with_defaults();
    let v = reg.get(variant).unwrap();
    let seq_len = samples.iter().map(Sample::max_len).max().unwrap_or(1).max(1);
    let pipeline = PipelineConfig::default();
    let norm = Normalizer::fit(samples, n_vars);
    let prep = Preparer::new(&pipeline, &PromptTemplates::default(), &norm, seq_len).unwrap();
    let provider = ProviderConfig::default().synthetic(seed, width);
    prep.prepare_all(samples, v.as_ref(), &provider, width).unwrap()
}

/// Default-sized model with every parameter jittered so that zero-initialized
/// blocks are active.
fn jittered_model(n_vars: usize, dim: usize, variant: &str, seed: u64) -> Model {
    let reg = VariantRegistry::with_defaults();
    let mut cfg = ModelConfig::new(n_vars, 32);
    cfg.dim = dim;
    let inst = TinyInstance {
        model: cfg,
        seq_len: 1,
        tokens: 32,
        jitter: 0.05,
    };
    inst.model(seed, reg.get(variant).unwrap()).unwrap()
}

/// The default model plus the two variants that bring their own parameter
/// groups must pass. The input-ablation variants share the default model's
/// parameters and differ only in token inputs; they are reported but not
/// gated, since some of their coordinates have gradients near 1e-8 where
/// central differences are limited by roundoff.
fn g1_gradients() -> Outcome {
    let start = Instant::now();
    let reg = VariantRegistry::with_defaults();
    let mut gated = Vec::new();
    let mut info = Vec::new();
    let mut all = true;
    for v in reg.iter() {
        let r = run_gradcheck(&TinyInstance::default(), v.clone(), 7, DEFAULT_EPS, DEFAULT_THRESHOLD)?;
        let line = format!("{} {:.2e}", r.variant, r.max_rel_error);
        match r.variant.as_str() {
            "full" | "without-qbe" | "without-align" => {
                all &= r.passed && r.groups.iter().all(|g| g.max_rel_error < DEFAULT_THRESHOLD);
                gated.push(line);
            }
            _ => info.push(line),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        all && secs < 60.0,
        format!(
            "max rel error {}; input ablations (not gated) {}; {:.1}s",
            gated.join(", "),
            info.join(", "),
            secs
        ),
    ))
}

fn g2_masked_invariance() -> Outcome {
    let raw = generate_synthetic(
        &SynthConfig {
            samples: 50,
            obs_rate: 0.5,
            ..Default::default()
        },
        21,
    )?;
    let prepared = prepare(&raw, 5, 32, 21, "full");
    let model = jittered_model(5, 64, "full", 21);
    let mut rng = rng_for(21, "acceptance/noise");
    let mut perturbed_entries = 0usize;
    for s in &prepared {
        let mut noisy = s.clone();
        let c = &mut noisy.canonical;
        for i in 0..c.mask.len() {
            if c.mask[i] == 0.0 {
                c.values[i] = rng.random_range(-1e3..1e3);
                c.times[i] = rng.random_range(-1e3..1e3);
                perturbed_entries += 1;
            }
        }
        let run = |sample: &PreparedSample, padding: Padding| {
            let mut g = Graph::with_params(&model.store);
            let out = model.forward_with(&mut g, sample, padding).unwrap();
            [out.h_ists, out.h_final, out.predictions]
                .map(|v| g.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<u64>>())
        };
        let clean = run(s, Padding::Masked);
        if run(&noisy, Padding::Masked) != clean || run(&noisy, Padding::Trimmed) != clean {
            return Ok((false, format!("sample {} changed under padding noise", s.id)));
        }
    }
    Ok((true, format!("50 samples, {perturbed_entries} padded entries perturbed, bitwise equal")))
}

fn g3_stochasticity() -> Outcome {
    let raw = generate_synthetic(
        &SynthConfig {
            samples: 1000,
            l_max: 12,
            obs_rate: 0.4,
            ..Default::default()
        },
        33,
    )?;
    let prepared = prepare(&raw, 5, 32, 33, "full");
    let model = jittered_model(5, 32, "full", 33);
    let (mut attn_err, mut gate_err, mut rows, mut negative) = (0.0f64, 0.0f64, 0usize, false);
    for s in &prepared {
        let mut g = Graph::with_params(&model.store);
        let out = model.forward(&mut g, s)?;
        for &a in out.attention.iter().chain(&out.fusion_attention) {
            let t = g.value(a);
            for r in 0..t.rows() {
                let sum: f64 = (0..t.cols()).map(|c| t.get(r, c)).sum();
                attn_err = attn_err.max((sum - 1.0).abs());
                rows += 1;
            }
        }
        let gates = g.value(out.gates.expect("full model gates"));
        for r in 0..gates.rows() {
            let (a, b) = (gates.get(r, 0), gates.get(r, 1));
            negative |= a < 0.0 || b < 0.0;
            gate_err = gate_err.max((a + b - 1.0).abs());
        }
    }
    Ok((
        attn_err <= 1e-9 && gate_err <= 1e-12 && !negative,
        format!("1000 inputs, {rows} attention rows: max |sum-1| {attn_err:.1e}, gates {gate_err:.1e}"),
    ))
}

fn g4_image() -> Outcome {
    let raw = generate_synthetic(
        &SynthConfig {
            samples: 100,
            obs_rate: 0.5,
            ..Default::default()
        },
        44,
    )?;
    let mut rng = rng_for(44, "acceptance/resize");
    for s in &raw {
        let c = canonicalize(s, s.max_len().max(1))?;
        let img: IrregularityImage = build_image(&c);
        if img.shape() != [3, c.n_vars, c.len] || img.channel(IrregularityImage::MASK) != c.mask.as_slice() {
            return Ok((false, format!("{}: shape or mask channel mismatch", s.id)));
        }
        for (n, series) in s.series.iter().enumerate() {
            let want = match (series.observations.first(), series.observations.last()) {
                (Some(a), Some(b)) => b.t - a.t,
                _ => 0.0,
            };
            let got: f64 = (0..c.len).map(|l| img.at(IrregularityImage::INTERVALS, n, l)).sum();
            if (got - want).abs() > 1e-9 {
                return Ok((false, format!("{} var {n}: interval sum {got} vs {want}", s.id)));
            }
        }
        let r = resize_normalize(&img, rng.random_range(1..40), rng.random_range(1..40))?;
        if r.data.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Ok((false, format!("{}: resized pixel outside [0,1]", s.id)));
        }
    }
    Ok((true, "100 samples: C1 == M, interval sums, 3xNxL, resize in [0,1]".into()))
}

fn row(n: usize, count: usize, len: usize) -> VariableSeries {
    VariableSeries {
        var_index: n,
        observations: (0..count)
            .map(|i| Observation {
                t: i as f64 / len as f64,
                x: i as f64,
            })
            .collect(),
    }
}

fn g5_prompt_filter() -> Outcome {
    let templates = PromptTemplates::default();
    // 1 of 20 slots observed gives rho 0.95, 10 of 20 gives 0.5
    let crafted = Sample {
        id: "crafted".into(),
        series: vec![row(0, 1, 20), row(1, 10, 20), row(2, 20, 20)],
        queries: vec![],
    };
    let stats = compute_stats(&canonicalize(&crafted, 20)?);
    let p = assemble_prompt(&stats, 0.9, &templates)?;
    let listed = |n: usize| p.rendered.lines().any(|l| l.starts_with(&format!("Variable {n}:")));
    if listed(0) || !listed(1) || !listed(2) {
        return Ok((false, "rho 0.95 / 0.5 filter wrong".into()));
    }
    let raw = generate_synthetic(
        &SynthConfig {
            samples: 100,
            obs_rate: 0.15,
            l_max: 10,
            n_vars: 6,
            ..Default::default()
        },
        55,
    )?;
    let mut kept_total = 0;
    for s in &raw {
        let len = s.max_len().max(1);
        let p = assemble_prompt(&compute_stats(&canonicalize(s, len)?), 0.9, &templates)?;
        let want = s
            .series
            .iter()
            .filter(|v| 1.0 - v.observations.len() as f64 / len as f64 <= 0.9)
            .count();
        let lines = p.rendered.lines().filter(|l| l.starts_with("Variable ")).count();
        if p.stat_segments() != want || lines != want {
            return Ok((false, format!("{}: {} segments, expected {want}", s.id, p.stat_segments())));
        }
        kept_total += want;
    }
    Ok((
        true,
        format!("tau 0.9: rho 0.95 excluded, 0.5 kept; 100 samples, {kept_total}/600 segments"),
    ))
}

fn g6_cache() -> Outcome {
    let dir = tempfile::tempdir()?;
    let mut rng = rng_for(66, "acceptance/cache");
    let mut subnormals = 0;
    let mut detected = 0;
    for i in 0..100 {
        let (r, c) = (rng.random_range(1..20), rng.random_range(1..40));
        let data: Vec<f32> = (0..r * c)
            .map(|_| match rng.random_range(0..4) {
                0 => f32::from_bits(rng.random_range(1..0x0080_0000)) * if rng.random() { 1.0 } else { -1.0 },
                1 => 0.0,
                _ => rng.random_range(-1e6f32..1e6),
            })
            .collect();
        subnormals += data.iter().filter(|v| v.is_subnormal()).count();
        let rec = CacheRecord::new(format!("m{i}"), EmbeddingMatrix::new(r, c, data)?);
        let path = cache_path(dir.path(), &rec.sample_id);
        write_record(&path, &rec)?;
        let back = read_record(&path, &rec.sample_id)?;
        if back.data().iter().zip(rec.matrix.data()).any(|(a, b)| a.to_bits() != b.to_bits()) || back.shape() != [r, c] {
            return Ok((false, format!("matrix {i} changed in round-trip")));
        }
        let mut bytes = encode_record(&rec)?;
        let at = bytes.len() - 5 - rng.random_range(0..4 * r * c);
        bytes[at] ^= 1 << rng.random_range(0..8);
        if decode_record(&bytes).is_err() {
            detected += 1;
        }
    }
    Ok((
        detected == 100,
        format!("100 matrices ({subnormals} subnormals) bit-exact; {detected}/100 corruptions caught"),
    ))
}

fn g7_overfit() -> Outcome {
    let start = Instant::now();
    let raw = generate_synthetic(
        &SynthConfig {
            samples: 16,
            ..Default::default()
        },
        7,
    )?;
    let set = prepare(&raw, 5, 32, 7, "full");
    let reg = VariantRegistry::with_defaults();
    let mut model = Model::new(ModelConfig::new(5, 32), reg.get("full")?, 7)?;
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 300,
        patience: None,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &set, &[], &cfg, 7, |_| {})?;
    let first = report.log[0].train_loss;
    let hit = report.log.iter().find(|e| e.train_loss <= 0.1 * first).map(|e| e.epoch);
    let last = report.log.last().map_or(f64::NAN, |e| e.train_loss);
    let secs = start.elapsed().as_secs_f64();
    Ok((
        hit.is_some() && secs < 300.0,
        format!("epoch-1 loss {first:.4}, final {last:.4}, 10% reached at epoch {hit:?}, {secs:.0}s"),
    ))
}

fn g8_generalization() -> Outcome {
    let start = Instant::now();
    let raw = generate_synthetic(&SynthConfig::default(), 7)?;
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = 20;
    cfg.train.patience = Some(8);
    let reg = VariantRegistry::with_defaults();
    let run = run_experiment(&cfg, raw, &reg, &PromptTemplates::default(), |_| {})?;
    let gain = 1.0 - run.test.mse / run.baseline.mse;
    let secs = start.elapsed().as_secs_f64();
    Ok((
        gain >= 0.2 && secs < 900.0,
        format!(
            "test MSE {:.4} vs mean baseline {:.4} ({:.0}% better), best epoch {}, {secs:.0}s",
            run.test.mse,
            run.baseline.mse,
            100.0 * gain,
            run.report.best_epoch
        ),
    ))
}

fn small_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.dim = 32;
    cfg.model.temporal_layers = 2;
    cfg.model.variable_layers = 2;
    cfg.model.extractor_layers = 2;
    cfg.embedding.tokens = 16;
    cfg.train.epochs = 4;
    cfg.train.patience = None;
    cfg
}

fn g9_ablation() -> Outcome {
    let raw = generate_synthetic(
        &SynthConfig {
            samples: 30,
            ..Default::default()
        },
        9,
    )?;
    let reg = VariantRegistry::with_defaults();
    let mut pool_rows_equal = None;
    let mut align_skips_gate = None;
    let table = run_ablation(
        &small_experiment(),
        &raw,
        &reg,
        &PromptTemplates::default(),
        |_, _| {},
        |run| match run.model.variant_name() {
            "without-qbe" => {
                let mut g = Graph::with_params(&run.model.store);
                let out = run.model.forward(&mut g, &run.splits.test[0]).unwrap();
                let h: &Tensor = g.value(out.h_mm);
                let first: Vec<u64> = (0..h.cols()).map(|c| h.get(0, c).to_bits()).collect();
                pool_rows_equal =
                    Some((1..h.rows()).all(|r| (0..h.cols()).map(|c| h.get(r, c).to_bits()).eq(first.iter().copied())));
            }
            "without-align" => {
                let mut g = Graph::with_params(&run.model.store);
                let out = run.model.forward(&mut g, &run.splits.test[0]).unwrap();
                let dump = dump_alignment(&run.model, &run.splits.test[0]).unwrap();
                align_skips_gate = Some(out.gates.is_none() && dump.gates.iter().all(|r| r.alpha_mm.is_none()));
            }
            _ => {}
        },
    )?;
    let csv = table.to_csv();
    let ok = table.rows.len() == 5
        && csv.lines().count() == 6
        && csv.starts_with(CSV_HEADER)
        && pool_rows_equal == Some(true)
        && align_skips_gate == Some(true);
    println!("{}", table.render().trim_end());
    Ok((
        ok,
        format!(
            "{} rows; pooled rows identical: {pool_rows_equal:?}; additive skips gating: {align_skips_gate:?}",
            table.rows.len()
        ),
    ))
}

fn g10_determinism() -> Outcome {
    let raw = generate_synthetic(
        &SynthConfig {
            samples: 30,
            ..Default::default()
        },
        10,
    )?;
    let reg = VariantRegistry::with_defaults();
    let t = PromptTemplates::default();
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = 3;
    let a = run_experiment(&cfg, raw.clone(), &reg, &t, |_| {})?;
    let b = run_experiment(&cfg, raw, &reg, &t, |_| {})?;
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-12;
    let same = a.report.log.len() == b.report.log.len()
        && a.report.log.iter().zip(&b.report.log).all(|(x, y)| {
            x.epoch == y.epoch
                && close(x.train_loss, y.train_loss)
                && close(x.val_mse.unwrap_or(0.0), y.val_mse.unwrap_or(0.0))
                && close(x.val_mae.unwrap_or(0.0), y.val_mae.unwrap_or(0.0))
        });
    let max_diff = a
        .report
        .log
        .iter()
        .zip(&b.report.log)
        .map(|(x, y)| (x.train_loss - y.train_loss).abs())
        .fold(0.0, f64::max);
    Ok((same, format!("{} epochs, max train-loss difference {max_diff:e}", a.report.log.len())))
}

#[test]
fn acceptance_suite() {
    let criteria: [(&str, &str, fn() -> Outcome); 10] = [
        ("G1", "gradient oracle", g1_gradients),
        ("G2", "masked-position invariance", g2_masked_invariance),
        ("G3", "attention and gating stochasticity", g3_stochasticity),
        ("G4", "image construction", g4_image),
        ("G5", "prompt filter", g5_prompt_filter),
        ("G6", "cache round-trip", g6_cache),
        ("G7", "overfit sanity", g7_overfit),
        ("G8", "generalization sanity", g8_generalization),
        ("G9", "ablation harness", g9_ablation),
        ("G10", "determinism", g10_determinism),
    ];
    let mut failed = Vec::new();
    for (id, title, check) in criteria {
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".into()),
        };
        println!("{id:<4} {} {title}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
