mod config;
mod context;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use formatprobe::synth::{generate, SynthConfig};
use formatprobe::{Error, Result};
use serde_json::{json, Value};

use config::RunConfig;
use context::{to_value, write_file, write_report, Context};
use pipeline::{run_stage, stage_inputs_present, STAGES};

/// Format-invariance analysis of SAE features over activation dumps.
#[derive(Debug, Parser)]
#[command(name = "formatprobe", version)]
struct Cli {
    /// Run configuration (JSON). Relative paths in it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: `out` next to the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Sets every seed in the config to this value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bootstrap resamples.
    #[arg(long, global = true)]
    bootstrap: Option<usize>,
    /// Probe label permutations (0 skips the test).
    #[arg(long, global = true)]
    permutations: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a deterministic synthetic corpus and a config that points at it.
    Synth {
        #[arg(long, default_value_t = SynthConfig::default().n_cases)]
        cases: usize,
        #[arg(long, default_value_t = SynthConfig::default().seed)]
        corpus_seed: u64,
    },
    /// Contrastive medical features and random control pools per layer.
    IdentifyFeatures,
    /// Medical-vs-random sMAPE and cosine invariance per layer.
    Invariance,
    /// Format directions, alignment, ablation and steering magnitudes per layer.
    Direction,
    /// Decision-token logit attribution by feature category per layer.
    Attribute,
    /// Accuracy, McNemar, gap decomposition, five-way rescoring and judge agreement.
    Behavior,
    /// Option-shuffle consistency of forced-letter answers.
    Shuffle,
    /// Leave-one-out flip-prediction probes with permutation tests.
    Probe,
    /// Every stage whose inputs are configured, plus bundle.json and bundle.txt.
    ReportBundle,
}

impl Command {
    fn stage(&self) -> Option<&'static str> {
        Some(match self {
            Command::IdentifyFeatures => "identify-features",
            Command::Invariance => "invariance",
            Command::Direction => "direction",
            Command::Attribute => "attribute",
            Command::Behavior => "behavior",
            Command::Shuffle => "shuffle",
            Command::Probe => "probe",
            Command::Synth { .. } | Command::ReportBundle => return None,
        })
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.out {
        // flags resolve against the working directory, not the config's
        cfg.output_dir = Some(std::path::absolute(o).map_err(|e| Error::Io {
            path: o.clone(),
            source: e,
        })?);
    }
    if let Some(s) = cli.seed {
        cfg.seeds.set_all(s);
    }
    if let Some(b) = cli.bootstrap {
        cfg.bootstrap = b;
    }
    if let Some(p) = cli.permutations {
        cfg.permutations = p;
    }
    cfg.workers = cli.workers;
    cfg.validate()?;
    Ok(cfg)
}

fn synth(cli: &Cli, cases: usize, corpus_seed: u64) -> Result<()> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("synth"));
    let sc = SynthConfig {
        n_cases: cases,
        seed: corpus_seed,
        ..SynthConfig::default()
    };
    let corpus = generate(&sc)?;
    let layout = corpus.write(&dir)?;
    let cfg = RunConfig {
        manifest: Some(layout.manifest),
        sae: layout.sae_dirs,
        contrast_medical: Some(layout.contrast_medical),
        contrast_non: Some(layout.contrast_non),
        cases: Some(layout.cases),
        predictions: Some(layout.predictions),
        judge_labels: Some(layout.judge_labels),
        unembedding: Some(layout.unembedding),
        ..RunConfig::default()
    };
    let text = serde_json::to_string_pretty(&cfg).map_err(|e| Error::Internal(e.to_string()))?;
    write_file(&dir.join("config.json"), &(text + "\n"))?;
    println!(
        "wrote {} cases x {} layers to {} (config.json)",
        sc.n_cases,
        sc.layers.len(),
        dir.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Synth { cases, corpus_seed } = cli.command {
        return synth(cli, cases, corpus_seed);
    }
    let cfg = load_config(cli)?;
    let out = cfg.output_dir();
    let ctx = Context::new(cfg);
    if let Some(stage) = cli.command.stage() {
        for r in run_stage(&ctx, stage)? {
            write_report(&out, &r)?;
            println!("{}", out.join(format!("{}.json", r.name)).display());
        }
        return Ok(());
    }

    let mut stages = serde_json::Map::new();
    let mut skipped = Vec::new();
    let mut text = String::new();
    for stage in STAGES {
        if !stage_inputs_present(&ctx, stage) {
            skipped.push(stage);
            continue;
        }
        let mut reports = serde_json::Map::new();
        for mut r in run_stage(&ctx, stage)? {
            write_report(&out, &r)?;
            text.push_str(&format!("== {} ==\n{}\n", r.name, r.text));
            if let Value::Object(m) = &mut r.json {
                m.remove("provenance");
            }
            reports.insert(r.name, r.json);
        }
        stages.insert(stage.into(), Value::Object(reports));
    }
    if stages.is_empty() {
        return Err(Error::Invariant("no stage has its inputs configured".into()));
    }
    let bundle = json!({
        "provenance": to_value(&ctx.provenance("report-bundle")),
        "skipped": skipped,
        "stages": stages,
    });
    let json = serde_json::to_string_pretty(&bundle).map_err(|e| Error::Internal(e.to_string()))?;
    write_file(&out.join("bundle.json"), &(json + "\n"))?;
    if !skipped.is_empty() {
        text.push_str(&format!("skipped (inputs not configured): {}\n", skipped.join(", ")));
    }
    write_file(&out.join("bundle.txt"), &text)?;
    println!("{}", out.join("bundle.json").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers == Some(0) {
        report_error(&Error::Invariant("workers must be positive".into()));
        return ExitCode::from(2);
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        pool = pool.num_threads(n);
    }
    if let Err(e) = pool.build_global() {
        report_error(&Error::Internal(format!("thread pool: {e}")));
        return ExitCode::from(1);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}

fn report_error(e: &Error) {
    let case_id = match e {
        Error::Missing { case_id, .. } => Some(case_id.as_str()),
        _ => None,
    };
    eprintln!(
        "{}",
        json!({ "kind": e.kind(), "message": e.to_string(), "case_id": case_id })
    );
}
