use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;

use dcc_core::checkpoint::load_checkpoint;
use dcc_core::data::{load_features, save_features, FeatureFormat, Split};
use dcc_core::eval::EvalOptions;
use dcc_core::experiment::{
    run_cells, study_cells, summarize, summary_table, write_csv, write_summary_csv, Study,
};
use dcc_core::losses::Variant;
use dcc_core::run::{load_run_config, run_training, RunConfig, RunManifest};
use dcc_core::trainer::evaluate_encoder;
use dcc_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dcc", version, about = "Dual cluster contrastive training, evaluation and ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config sources shared by commands that build a run.
#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML config with [train], [train.dbscan], [data] and [data.synthetic] sections.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.tau=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Supervised,
    Unsupervised,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse()
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(v) = self.variant {
            overrides.push(format!("train.variant={v}"));
        }
        if let Some(m) = self.mode {
            let name = match m {
                ModeArg::Supervised => "supervised",
                ModeArg::Unsupervised => "unsupervised",
            };
            overrides.push(format!("train.mode={name}"));
        }
        if let Some(e) = self.epochs {
            overrides.push(format!("train.epochs={e}"));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("train.seed={s}"));
        }
        load_run_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder and write manifest, metrics, checkpoint and report.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Re-run exactly the configuration recorded in a manifest.
        #[arg(long, conflicts_with = "config")]
        from_manifest: Option<PathBuf>,
        /// Output directory (default: a fresh directory under the output root).
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, env = "DCC_OUTPUT_ROOT", default_value = "runs")]
        output_root: PathBuf,
    },
    /// Evaluate a checkpoint on query and gallery feature files.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Take query and gallery from a run manifest's data section.
        #[arg(long, conflicts_with_all = ["query", "gallery"])]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "gallery")]
        query: Option<PathBuf>,
        #[arg(long, requires = "query")]
        gallery: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run an ablation sweep and write per-run and summary CSVs.
    Ablate {
        #[arg(value_parser = parse_study)]
        study: Study,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, env = "DCC_OUTPUT_ROOT", default_value = "runs")]
        output_root: PathBuf,
    },
    /// Write the configured synthetic dataset as feature files.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: FormatArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Binary,
}

fn parse_study(s: &str) -> std::result::Result<Study, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn fresh_dir(root: &Path, prefix: &str) -> PathBuf {
    root.join(format!("{prefix}-{}", chrono::Local::now().format("%Y%m%d-%H%M%S%.3f")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_train(
    config: &ConfigArgs,
    from_manifest: Option<&Path>,
    output: Option<PathBuf>,
    output_root: &Path,
) -> Result<()> {
    let manifest = match from_manifest {
        Some(path) => {
            let mut m = RunManifest::load(path)?;
            if let Some(dir) = output {
                m.output_dir = dir;
            }
            m.timestamp = chrono::Local::now().to_rfc3339();
            m
        }
        None => {
            let resolved = config.resolve()?;
            let dir = output.unwrap_or_else(|| fresh_dir(output_root, "train"));
            RunManifest::new(resolved, &dir)?
        }
    };
    let run = run_training(&manifest)?;
    println!("{}", run.report.table());
    println!("artifacts in {}", run.output_dir.display());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    manifest: Option<&Path>,
    files: Option<(&Path, &Path)>,
    output: Option<&Path>,
) -> Result<()> {
    let trainer = load_checkpoint(checkpoint)?;
    let (query, gallery) = match (manifest, files) {
        (Some(m), _) => {
            let dataset = RunManifest::load(m)?.config.data.load()?;
            (dataset.query(), dataset.gallery())
        }
        (None, Some((q, g))) => (
            load_features(q, FeatureFormat::from_path(q), Split::Query)?,
            load_features(g, FeatureFormat::from_path(g), Split::Gallery)?,
        ),
        (None, None) => {
            return Err(Error::Config {
                key: "eval".into(),
                message: "pass --manifest or both --query and --gallery".into(),
            })
        }
    };
    if query.is_empty() {
        return Err(Error::EmptySplit("query"));
    }
    if gallery.is_empty() {
        return Err(Error::EmptySplit("gallery"));
    }
    let opts = EvalOptions {
        exclude_same_camera: trainer.config().exclude_same_camera,
        ..EvalOptions::default()
    };
    let report = evaluate_encoder(trainer.encoder(), &query, &gallery, &opts)?;
    println!("{}", report.table());
    if let Some(out) = output {
        write_file(out, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    }
    Ok(())
}

fn cmd_ablate(study: Study, config: &ConfigArgs, seeds: u64, output: Option<PathBuf>, output_root: &Path) -> Result<()> {
    let base = config.resolve()?;
    let dir = output.unwrap_or_else(|| fresh_dir(output_root, study.name()));
    create_dir(&dir)?;
    write_file(
        &dir.join("base_config.toml"),
        &toml::to_string(&base).expect("config serializes"),
    )?;
    let cells = study_cells(study, &base, seeds);
    eprintln!("{study}: {} runs", cells.len());
    let outcome = run_cells(&cells);
    write_csv(&outcome.rows, &dir.join(format!("{study}.csv")))?;
    let summary = summarize(&outcome.rows);
    write_summary_csv(&summary, &dir.join(format!("{study}_summary.csv")))?;
    print!("{}", summary_table(&summary));
    println!("results in {}", dir.display());
    if let Some((id, err)) = outcome.failures.first() {
        for (id, e) in &outcome.failures {
            error!("{id}: {e}");
        }
        return Err(Error::Config {
            key: id.clone(),
            message: format!("{} of {} runs failed, first: {err}", outcome.failures.len(), cells.len()),
        });
    }
    Ok(())
}

fn cmd_gen_data(config: &ConfigArgs, output: &Path, format: FormatArg) -> Result<()> {
    let resolved = config.resolve()?;
    if resolved.data.uses_files() {
        return Err(Error::Config {
            key: "data.train".into(),
            message: "gen-data materializes the synthetic section; remove data file paths".into(),
        });
    }
    let dataset = resolved.data.load()?;
    create_dir(output)?;
    let (format, ext) = match format {
        FormatArg::Text => (FeatureFormat::Text, "txt"),
        FormatArg::Binary => (FeatureFormat::Binary, "bin"),
    };
    for split in [Split::Train, Split::Query, Split::Gallery] {
        let part = dataset.split(split);
        if part.is_empty() {
            continue;
        }
        let path = output.join(format!("{}.{ext}", split.name()));
        save_features(&part, &path, format)?;
        println!("{} {} samples -> {}", split.name(), part.len(), path.display());
    }
    write_file(
        &output.join("synthetic.toml"),
        &toml::to_string(&resolved.data.synthetic).expect("spec serializes"),
    )?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train {
            config,
            from_manifest,
            output,
            output_root,
        } => cmd_train(config, from_manifest.as_deref(), output.clone(), output_root),
        Command::Eval {
            checkpoint,
            manifest,
            query,
            gallery,
            output,
        } => {
            let files = query.as_deref().zip(gallery.as_deref());
            cmd_eval(checkpoint, manifest.as_deref(), files, output.as_deref())
        }
        Command::Ablate {
            study,
            config,
            seeds,
            output,
            output_root,
        } => cmd_ablate(*study, config, *seeds, output.clone(), output_root),
        Command::GenData { config, output, format } => cmd_gen_data(config, output, *format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
