use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use log::{info, warn};
use optmsm::data::{generate, load_csv, write_csv, Dataset, FeatureSchema, SplitDataset};
use optmsm::gradcheck::{grad_check, GradCheckConfig, GradCheckError};
use optmsm::model::{load_model, save_model, Ablations, ModelError};
use optmsm::tensor::cosine;
use optmsm::train::{self, write_metrics_jsonl, write_timing_jsonl, Experiment, ScenarioMetrics, TrainError};
use optmsm::{ConfigError, RunConfig};

use crate::{invalid, Failure, Overrides};

const SPLITS: [&str; 3] = ["train", "valid", "test"];
const SCHEMA_FILE: &str = "schema.txt";
const CONFIG_FILE: &str = "config.toml";

type Outcome = Result<ExitCode, Failure>;

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            ConfigError::Io { .. } => Failure::Runtime(e.into()),
            other => invalid(other),
        }),
    }
}

fn apply(cfg: &mut RunConfig, o: &Overrides) -> Result<(), Failure> {
    if let Some(v) = o.variant {
        cfg.model.variant = v;
    }
    for flag in &o.ablate {
        cfg.train.ablations.parse_flag(flag).map_err(invalid)?;
    }
    if let Some(l) = o.lambda {
        cfg.train.lambda = l;
    }
    Ok(())
}

fn checked(cfg: RunConfig) -> Result<RunConfig, Failure> {
    cfg.validate().map_err(invalid)?;
    Ok(cfg.resolved())
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml_string()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn read_schema(data: &Path) -> Result<FeatureSchema, Failure> {
    let path = data.join(SCHEMA_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    FeatureSchema::parse(&text).map_err(|e| invalid(anyhow!("{}: {e}", path.display())))
}

/// Loads all three splits, refusing data whose schema differs from `expected`.
fn load_splits(data: &Path, expected: &FeatureSchema) -> Result<SplitDataset, Failure> {
    let found = read_schema(data)?;
    let diff = expected.diff(&found);
    if !diff.is_empty() {
        return Err(invalid(anyhow!(
            "schema of {} differs from the config:\n  {}",
            data.display(),
            diff.join("\n  ")
        )));
    }
    let load = |split: &str| -> Result<Dataset, Failure> {
        let path = data.join(format!("{split}.csv"));
        load_csv(&path, expected).map_err(|e| invalid(anyhow!("{}: {e}", path.display())))
    };
    Ok(SplitDataset {
        train: load("train")?,
        valid: load("valid")?,
        test: load("test")?,
    })
}

fn metrics_table(metrics: &[ScenarioMetrics]) -> String {
    let mut out = format!("{:<9} {:>8} {:>8} {:>8}\n", "scenario", "count", "auc", "logloss");
    for m in metrics {
        let auc = m.auc.map_or("N/A".to_string(), |a| format!("{a:.4}"));
        out.push_str(&format!("{:<9} {:>8} {:>8} {:>8.4}\n", m.scenario, m.count, auc, m.logloss));
    }
    out
}

// ---- gen ------------------------------------------------------------------

pub fn gen(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Outcome {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.generator.seed = s;
    }
    let cfg = checked(cfg)?;
    let data = generate(&cfg.generator, &cfg.schema).map_err(invalid)?;
    create_dir(out)?;
    for (name, ds) in SPLITS.iter().zip([&data.splits.train, &data.splits.valid, &data.splits.test]) {
        let path = out.join(format!("{name}.csv"));
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_csv(BufWriter::new(file), ds, &cfg.schema)?;
        let counts = ds.scenario_counts(cfg.schema.scenarios);
        info!("{name}: {} rows, per scenario {counts:?}, click rate {:.3}", ds.len(), ds.positive_rate());
    }
    fs::write(out.join(SCHEMA_FILE), cfg.schema.to_text())?;
    let teacher = File::create(out.join("teacher.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(teacher), &data.teacher)?;
    write_config(out, &cfg)?;
    println!("wrote dataset to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

// ---- train ----------------------------------------------------------------

pub fn train(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>, o: &Overrides) -> Outcome {
    let mut cfg = load_config(config)?;
    apply(&mut cfg, o)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let cfg = checked(cfg)?;
    let splits = load_splits(data, &cfg.schema)?;
    create_dir(out)?;
    write_config(out, &cfg)?;
    info!(
        "training {} ({}) on {} rows, λ_effective = {}",
        cfg.model.variant,
        cfg.train.ablations.label(),
        splits.train.len(),
        cfg.train.effective_lambda()
    );
    let outcome = match train::train(&splits, &cfg.schema, &cfg.model, &cfg.train) {
        Ok(o) => o,
        Err(TrainError::Diverged {
            epoch,
            batch,
            reason,
            model,
            checkpoint,
        }) => {
            // Keep the best parameters seen so far next to the config.
            let path = out.join("checkpoint.bin");
            save_model(&path, &model, &checkpoint)?;
            return Err(Failure::Runtime(anyhow!(
                "training diverged at epoch {epoch}, batch {batch}: {reason}; best parameters saved to {}",
                path.display()
            )));
        }
        Err(e @ (TrainError::Config(_) | TrainError::EmptySplit(_))) => return Err(invalid(e)),
        Err(e) => return Err(e.into()),
    };
    save_model(out.join("model.bin"), &outcome.model, &outcome.params)?;
    write_metrics_jsonl(BufWriter::new(File::create(out.join("metrics.jsonl"))?), &outcome.report)?;
    write_timing_jsonl(BufWriter::new(File::create(out.join("timing.jsonl"))?), &outcome.report)?;
    println!(
        "best epoch {} (λ_effective = {}), test metrics:",
        outcome.report.best_epoch, outcome.report.lambda_effective
    );
    print!("{}", metrics_table(&outcome.report.final_metrics.test));
    Ok(ExitCode::SUCCESS)
}

// ---- eval -----------------------------------------------------------------

fn split_of<'a>(splits: &'a SplitDataset, name: &str) -> Result<&'a Dataset, Failure> {
    splits
        .split(name)
        .ok_or_else(|| invalid(anyhow!("unknown split `{name}` (expected train, valid or test)")))
}

fn open_model(path: &Path) -> Result<(optmsm::model::Model, optmsm::ParamStore, optmsm::model::ModelManifest), Failure> {
    load_model(path).map_err(|e| match e {
        ModelError::Io(io) => Failure::Runtime(anyhow!("{}: {io}", path.display())),
        other => invalid(anyhow!("{}: {other}", path.display())),
    })
}

/// Loads a model and the data it is to be applied to, refusing on a schema
/// hash mismatch.
fn model_and_data(
    model: &Path,
    data: &Path,
) -> Result<(optmsm::model::Model, optmsm::ParamStore, SplitDataset), Failure> {
    let (model, store, manifest) = open_model(model)?;
    let data_hash = read_schema(data)?.hash();
    if data_hash != manifest.schema_hash {
        return Err(invalid(anyhow!(
            "schema hash mismatch: model {} vs data {}",
            manifest.schema_hash,
            data_hash
        )));
    }
    let splits = load_splits(data, model.schema())?;
    Ok((model, store, splits))
}

pub fn eval(model_path: &Path, data: &Path, split: &str, out: Option<&Path>) -> Outcome {
    let (model, store, splits) = model_and_data(model_path, data)?;
    let ds = split_of(&splits, split)?;
    let metrics = train::evaluate(&model, &store, ds)?;
    print!("{}", metrics_table(&metrics));
    let out: PathBuf = match out {
        Some(p) => p.to_path_buf(),
        None => model_path
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{split}.csv")),
    };
    let mut w = csv::Writer::from_path(&out).with_context(|| format!("creating {}", out.display()))?;
    w.write_record(["scenario", "count", "auc", "logloss"])?;
    for m in &metrics {
        w.write_record([
            m.scenario.to_string(),
            m.count.to_string(),
            m.auc.map_or("N/A".into(), |a| format!("{a:.6}")),
            format!("{:.6}", m.logloss),
        ])?;
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

// ---- gradcheck ------------------------------------------------------------

pub fn gradcheck(config: Option<&Path>, seed: Option<u64>, o: &Overrides, fault: Option<String>) -> Outcome {
    let mut cfg = match config {
        None => GradCheckConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| invalid(anyhow!("{}: {e}", p.display())))?
        }
    };
    if let Some(v) = o.variant {
        cfg.model.variant = v;
    }
    for flag in &o.ablate {
        cfg.ablations.parse_flag(flag).map_err(invalid)?;
    }
    if let Some(l) = o.lambda {
        cfg.lambda = l;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.fault = fault;
    let report = grad_check(&cfg).map_err(|e| match e {
        GradCheckError::Model(m) => Failure::Runtime(m.into()),
        other => invalid(other),
    })?;
    print!("{}", report.table());
    if report.passed() {
        println!("PASS: every group within {:e}", report.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        let names: Vec<&str> = report.failures().map(|g| g.group.as_str()).collect();
        println!("FAIL: {}", names.join(", "));
        Ok(ExitCode::from(1))
    }
}

// ---- export-reprs ---------------------------------------------------------

pub fn export_reprs(model_path: &Path, data: &Path, out: &Path, split: &str) -> Outcome {
    let (model, store, splits) = model_and_data(model_path, data)?;
    let ds = split_of(&splits, split)?;
    let reps = model.representations(&store, ds.instances()).map_err(invalid)?;
    let width = model.repr_width();
    let m_count = model.scenarios();

    let mut w = csv::Writer::from_path(out).with_context(|| format!("creating {}", out.display()))?;
    let mut header = vec!["sample".to_string(), "scenario".into(), "active".into()];
    header.extend((0..width).map(|k| format!("r{k}")));
    w.write_record(&header)?;
    for (s, &active) in reps.active.iter().enumerate() {
        for m in 0..m_count {
            let mut row = vec![s.to_string(), (m + 1).to_string(), u8::from(m == active).to_string()];
            row.extend(reps.reps[m][s].iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;

    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("reprs");
    let summary_path = out.with_file_name(format!("{stem}_summary.csv"));
    let mut summary = csv::Writer::from_path(&summary_path)?;
    summary.write_record(["scenario_a", "scenario_b", "mean_abs_cosine"])?;
    let n = reps.active.len();
    let (mut total, mut pairs) = (0.0, 0usize);
    println!("mean |cosine| between contrastive representations ({n} samples):");
    for i in 0..m_count {
        for j in i + 1..m_count {
            let sum: f64 = (0..n).map(|s| cosine(&reps.reps[i][s], &reps.reps[j][s]).abs()).sum();
            let mean = sum / n as f64;
            total += sum;
            pairs += n;
            println!("  S{} / S{}: {mean:.4}", i + 1, j + 1);
            summary.write_record([(i + 1).to_string(), (j + 1).to_string(), format!("{mean:.6}")])?;
        }
    }
    if pairs > 0 {
        let all = total / pairs as f64;
        println!("  all pairs: {all:.4}");
        summary.write_record(["all".to_string(), "all".into(), format!("{all:.6}")])?;
    }
    summary.flush()?;
    Ok(ExitCode::SUCCESS)
}

// ---- compare --------------------------------------------------------------

pub fn parse_seeds(text: &str) -> Result<Vec<u64>, Failure> {
    let bad = || invalid(anyhow!("bad seed list `{text}` (use `0,1,2` or `0-4`)"));
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| bad())?),
        }
    }
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn experiment_names(paths: &[PathBuf]) -> Vec<String> {
    let mut seen = HashSet::new();
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("config").to_string();
            if seen.insert(stem.clone()) {
                stem
            } else {
                format!("{stem}#{}", i + 1)
            }
        })
        .collect()
}

pub fn compare(configs: &[PathBuf], data: &Path, out: &Path, seeds: Option<&str>) -> Outcome {
    if configs.len() < 2 {
        return Err(invalid(anyhow!("compare needs at least two configs")));
    }
    let seeds = match seeds {
        Some(s) => parse_seeds(s)?,
        None => {
            info!("no --seeds given; using seeds 0-4");
            (0..5).collect()
        }
    };
    let names = experiment_names(configs);
    let mut resolved = Vec::new();
    for path in configs {
        resolved.push(checked(load_config(Some(path))?)?);
    }
    let schema = resolved[0].schema.clone();
    for (cfg, path) in resolved.iter().zip(configs).skip(1) {
        let diff = schema.diff(&cfg.schema);
        if !diff.is_empty() {
            return Err(invalid(anyhow!(
                "{} has a different schema from {}:\n  {}",
                path.display(),
                configs[0].display(),
                diff.join("\n  ")
            )));
        }
    }
    let splits = load_splits(data, &schema)?;
    let out_dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(out_dir)?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("compare");
    for (name, cfg) in names.iter().zip(&resolved) {
        let path = out_dir.join(format!("{stem}.{name}.config.toml"));
        fs::write(&path, cfg.to_toml_string())?;
    }
    let experiments: Vec<Experiment> = names
        .iter()
        .zip(&resolved)
        .map(|(name, cfg)| Experiment {
            name: name.clone(),
            model: cfg.model.clone(),
            train: cfg.train.clone(),
        })
        .collect();
    info!("comparing {} configs over seeds {seeds:?}", experiments.len());
    let table = train::compare(&splits, &schema, &experiments, &seeds)?;
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    table.write_csv(BufWriter::new(file))?;

    println!("test AUC, mean over seeds {seeds:?} (relative change vs {}):", names[0]);
    let header: Vec<String> = (1..=table.scenarios).map(|m| format!("S{m}")).collect();
    println!("{:<24} {}", "config", header.iter().map(|h| format!("{h:>20}")).collect::<String>());
    for (e, name) in names.iter().enumerate() {
        let cells: String = (0..table.scenarios)
            .map(|m| {
                let r = table.row(e, m);
                let cell = match (r.auc_mean, r.auc_change_pct) {
                    (Some(a), _) if e == 0 => format!("{a:.4}"),
                    (Some(a), Some(c)) => format!("{a:.4} ({c:+.2}%)"),
                    _ => "N/A".into(),
                };
                format!("{cell:>20}")
            })
            .collect();
        println!("{name:<24} {cells}");
    }
    Ok(ExitCode::SUCCESS)
}

// ---- overhead -------------------------------------------------------------

pub fn overhead(config: Option<&Path>, data: &Path, epochs: usize, runs: usize, out: Option<&Path>) -> Outcome {
    let cfg = checked(load_config(config)?)?;
    let splits = load_splits(data, &cfg.schema)?;
    let mut base = cfg.train.clone();
    base.ablations = Ablations {
        no_priors: true,
        no_constraint: true,
        no_hypernetwork: true,
    };
    if cfg.train.ablations != Ablations::default() {
        warn!("config already ablates {}; timing it against the fully stripped base", cfg.train.ablations.label());
    }
    let report = train::measure_overhead(&splits, &cfg.schema, (&cfg.model, &base), (&cfg.model, &cfg.train), epochs, runs)
        .map_err(|e| match e {
            TrainError::Config(_) => invalid(e),
            other => other.into(),
        })?;
    let per_epoch = |s: f64| s / epochs as f64;
    println!(
        "per epoch: base {:.3}s, full {:.3}s, overhead {:+.2}% (median of {runs})",
        per_epoch(report.base_median),
        per_epoch(report.optmsm_median),
        report.ratio * 100.0
    );
    if let Some(path) = out {
        let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        serde_json::to_writer_pretty(&mut f, &report)?;
        writeln!(f)?;
    }
    Ok(ExitCode::SUCCESS)
}
