use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use pyramid_mixer::config::{parse_override, RunConfig};
use pyramid_mixer::data::{ingest, prepare_with_core, to_canonical_tsv, Dataset};
use pyramid_mixer::eval::{compare_variants, count_cost, evaluate_ranking, evaluate_sampled, standard_variants};
use pyramid_mixer::model::{gradcheck, ModelConfig};
use pyramid_mixer::train::{check_config, Checkpoint, Trainer};
use serde_json::json;

use crate::{Cli, Command};

pub fn run(cli: Cli) -> Result<ExitCode> {
    let config = resolve(&cli)?;
    match cli.command {
        Command::Prep => prep(&config),
        Command::Train { resume } => train(&config, resume.as_deref()),
        Command::Eval { checkpoint } => eval(&config, &checkpoint),
        Command::Gradcheck { seeds } => return gradcheck_cmd(seeds),
        Command::Ablate => ablate(&config),
        Command::Cost => cost(&config),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<pyramid_mixer::Result<Vec<_>>>()?;
    let seed = cli.seed.map(|s| s.to_string());
    if let Some(s) = &seed {
        overrides.push(("seed", s));
    }
    let mut config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(o) = &cli.out {
        config.out = o.clone();
    }
    Ok(config)
}

/// Creates `<out>/<YYYYmmdd-HHMMSS>-<tag>`, adding `-2`, `-3`, ... on collision,
/// and writes the fully materialized config into it.
fn run_dir(config: &RunConfig) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-{}", config.tag);
    fs::create_dir_all(&config.out).map_err(|e| io_err(&config.out, e))?;
    let mut n = 1;
    let dir = loop {
        let name = if n == 1 { base.clone() } else { format!("{base}-{n}") };
        let dir = config.out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => break dir,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(io_err(&dir, e).into()),
        }
    };
    write(&dir.join("config.json"), &config.to_json())?;
    log::info!("writing to {}", dir.display());
    Ok(dir)
}

fn io_err(path: &Path, source: std::io::Error) -> pyramid_mixer::Error {
    pyramid_mixer::Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let ingested = ingest(&config.data.path, config.data.format)?;
    let ds = prepare_with_core(&ingested.records, config.data.core)?;
    let s = &ds.stats;
    log::info!(
        "{}: {} users, {} items, {} of {} interactions kept",
        config.data.path.display(),
        s.users,
        s.items,
        s.retained_interactions,
        s.raw_interactions
    );
    Ok(ds)
}

fn model_config(config: &RunConfig, ds: &Dataset) -> Result<ModelConfig> {
    let model = config.model.clone().with_fields(ds.vocab.field_specs());
    model.validate()?;
    Ok(model)
}

fn prep(config: &RunConfig) -> Result<()> {
    let ds = load_dataset(config)?;
    let dir = run_dir(config)?;
    write(&dir.join("interactions.tsv"), &to_canonical_tsv(&ds.records))?;
    ds.vocab.save(&dir.join("vocab.tsv"))?;
    write_json(&dir.join("prep.json"), &ds.stats)?;
    println!("{}", dir.display());
    Ok(())
}

fn train(config: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let ds = load_dataset(config)?;
    let model = model_config(config, &ds)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load_matching(path, &model)?;
            anyhow::ensure!(
                ckpt.state.is_some(),
                pyramid_mixer::Error::Format(format!("{} has no training state", path.display()))
            );
            Trainer::resume(ckpt, config.train.clone())?
        }
        None => Trainer::new(model.clone(), config.train.clone(), config.seed)?,
    };
    let dir = run_dir(config)?;
    let cost = count_cost(&model)?;
    write_json(&dir.join("cost.json"), &cost)?;

    let ckpt_path = dir.join("checkpoint.pymx");
    let log_path = dir.join("train.log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let summary = trainer.fit(&ds, |t, entry| {
        t.checkpoint().save(&ckpt_path)?;
        let line = serde_json::to_string(entry).expect("log entry serializes");
        writeln!(log, "{line}").map_err(|e| io_err(&log_path, e))
    })?;

    let best = trainer.best_model();
    let k = config.eval.k;
    let mut metrics = json!({
        "best_epoch": summary.best_epoch,
        "epochs": summary.epochs,
        "valid": evaluate_ranking(&best, &ds, &ds.split.valid, k)?,
        "test": evaluate_ranking(&best, &ds, &ds.split.test, k)?,
    });
    if let Some(n) = config.eval.sampled_negatives {
        metrics["test_sampled"] = json!(evaluate_sampled(&best, &ds, &ds.split.test, k, n, config.seed)?);
    }
    write_json(&dir.join("metrics.json"), &metrics)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    println!("{}", dir.display());
    Ok(())
}

fn eval(config: &RunConfig, checkpoint: &Path) -> Result<()> {
    let ds = load_dataset(config)?;
    let model = model_config(config, &ds)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    check_config(&model, &ckpt.config)?;
    let best = ckpt.model()?;
    let k = config.eval.k;
    let test = evaluate_ranking(&best, &ds, &ds.split.test, k)?;
    let mut metrics = json!({
        "checkpoint": checkpoint.display().to_string(),
        "test": test,
    });
    println!("{}", test.to_table());
    if let Some(n) = config.eval.sampled_negatives {
        let sampled = evaluate_sampled(&best, &ds, &ds.split.test, k, n, config.seed)?;
        println!("sampled ({n} negatives)\n{}", sampled.to_table());
        metrics["test_sampled"] = json!(sampled);
    }
    let dir = run_dir(config)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    println!("{}", dir.display());
    Ok(())
}

fn gradcheck_cmd(seeds: u64) -> Result<ExitCode> {
    let seeds: Vec<u64> = (0..seeds).collect();
    let report = gradcheck(&ModelConfig::tiny(), &seeds)?;
    for g in &report.groups {
        println!("{:<24} {:>6} {:.3e}", g.group, g.checked, g.max_rel_err);
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!("{verdict} max_rel_err={:.3e} tolerance={:.0e}", report.max_rel_err, report.tolerance);
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn ablate(config: &RunConfig) -> Result<()> {
    let ds = load_dataset(config)?;
    let model = model_config(config, &ds)?;
    let table = compare_variants(
        &ds,
        &standard_variants(&model),
        &config.train,
        &config.ablation.seeds,
        config.eval.k,
    )?;
    let dir = run_dir(config)?;
    write_json(&dir.join("ablation.json"), &table)?;
    println!("{}", table.to_table());
    println!("{}", dir.display());
    Ok(())
}

fn cost(config: &RunConfig) -> Result<()> {
    // Counting only needs vocabulary sizes, which may be given in the config.
    let model = if config.model.fields.is_empty() {
        let ds = load_dataset(config).context("cost needs the dataset vocabulary or model.fields")?;
        model_config(config, &ds)?
    } else {
        config.model.clone()
    };
    let report = count_cost(&model)?;
    let dir = run_dir(config)?;
    write_json(&dir.join("cost.json"), &report)?;
    println!("{}", report.to_table());
    println!("{}", dir.display());
    Ok(())
}
