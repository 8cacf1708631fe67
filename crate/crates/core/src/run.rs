//! Run configuration files, overrides, manifests and the `train` pipeline.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CHECKPOINT_VERSION};
use crate::config::TrainConfig;
use crate::data::{generate_synthetic, load_features, FeatureFormat, LabeledDataset, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::trainer::{EpochRecord, SplitData, Trainer};

/// Everything a run needs: hyperparameters and where the data comes from.
///
/// In TOML form the sections are `[train]`, `[train.dbscan]`, `[data]` and
/// `[data.synthetic]`; any field can be overridden as `section.key=value`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Feature files when `train` is set, otherwise the synthetic generator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SynthSpec,
    pub train: Option<PathBuf>,
    pub query: Option<PathBuf>,
    pub gallery: Option<PathBuf>,
}

impl DataConfig {
    pub fn uses_files(&self) -> bool {
        self.train.is_some()
    }

    /// Materializes the dataset with every sample tagged by split.
    pub fn load(&self) -> Result<LabeledDataset> {
        let Some(train) = &self.train else {
            return generate_synthetic(&self.synthetic);
        };
        if self.query.is_some() != self.gallery.is_some() {
            return Err(Error::Config {
                key: "data.query/data.gallery".into(),
                message: "query and gallery files must be given together".into(),
            });
        }
        let mut parts = vec![load_features(train, FeatureFormat::from_path(train), Split::Train)?];
        if let (Some(q), Some(g)) = (&self.query, &self.gallery) {
            parts.push(load_features(q, FeatureFormat::from_path(q), Split::Query)?);
            parts.push(load_features(g, FeatureFormat::from_path(g), Split::Gallery)?);
        }
        LabeledDataset::concat(&parts)
    }

    /// Makes file paths absolute so a manifest works from any directory.
    pub fn absolutize(&mut self) -> Result<()> {
        for path in [&mut self.train, &mut self.query, &mut self.gallery].into_iter().flatten() {
            *path = fs::canonicalize(&*path).map_err(|e| Error::io(path.clone(), e))?;
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| match e {
            Error::Config { key, message } => Error::Config {
                key: format!("train.{key}"),
                message,
            },
            other => other,
        })?;
        if !self.data.uses_files() {
            self.data.synthetic.validate()?;
        }
        Ok(())
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses TOML text into a table, reporting syntax errors by line.
pub fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    toml::from_str::<toml::Table>(text).map_err(|e| {
        let location = match e.span() {
            Some(span) => format!("{origin}:{}", line_of(text, span.start)),
            None => origin.to_string(),
        };
        Error::parse(location, e.message().trim())
    })
}

/// Applies one `dotted.key=value` override. The value is read as a TOML
/// literal when possible (`0.1`, `true`, `[64, 32]`) and as a bare string
/// otherwise (`dcc`, `runs/a`).
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        return Err(Error::Config {
            key: assignment.into(),
            message: "override must look like section.key=value".into(),
        });
    };
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed table has the key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config {
            key: key.into(),
            message: "empty key segment".into(),
        });
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = table;
    for (depth, part) in parents.iter().enumerate() {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(Error::Config {
                    key: parts[..=depth].join("."),
                    message: "not a section".into(),
                })
            }
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Deserializes a merged table, naming the offending key on failure.
pub fn config_from_table(table: toml::Table) -> Result<RunConfig> {
    let config: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config {
        key: e.path().to_string(),
        message: e.inner().message().trim().to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

/// Defaults, then the file, then overrides in order.
pub fn load_run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_table(&text, &p.display().to_string())?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    config_from_table(table)
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EVAL_FILE: &str = "eval.json";

/// Resolved description of a `train` run, written before training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub output_dir: PathBuf,
    /// RFC 3339 creation time; informational only.
    pub timestamp: String,
    pub artifact_version: String,
    pub checkpoint_format: u32,
}

impl RunManifest {
    pub fn new(mut config: RunConfig, output_dir: &Path) -> Result<Self> {
        config.data.absolutize()?;
        Ok(Self {
            config,
            output_dir: output_dir.to_path_buf(),
            timestamp: chrono::Local::now().to_rfc3339(),
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: CHECKPOINT_VERSION,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| Error::parse(format!("{}:{}", path.display(), e.line()), e.to_string()))?;
        if manifest.checkpoint_format != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch(format!(
                "manifest written for checkpoint format {}, this build uses {CHECKPOINT_VERSION}",
                manifest.checkpoint_format
            )));
        }
        manifest.config.validate()?;
        Ok(manifest)
    }
}

#[derive(Serialize)]
struct Timing {
    epoch: usize,
    wall_time_secs: f64,
}

/// Artifacts of a finished `train` run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub output_dir: PathBuf,
    pub records: Vec<EpochRecord>,
    pub report: EvalReport,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_line(out: &mut impl Write, path: &Path, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io(path, e))
}

/// Writes the manifest, trains, and writes metrics, checkpoint and report.
pub fn run_training(manifest: &RunManifest) -> Result<TrainRun> {
    let dir = &manifest.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    manifest.save(&dir.join(MANIFEST_FILE))?;

    let dataset = manifest.config.data.load()?;
    let data = SplitData::from_dataset(&dataset)?;
    let mut trainer = Trainer::new(manifest.config.train.clone(), &data.train)?;

    let metrics_path = dir.join(METRICS_FILE);
    let timing_path = dir.join(TIMING_FILE);
    let mut metrics = create(&metrics_path)?;
    let mut timing = create(&timing_path)?;
    while !trainer.is_finished() {
        let record = trainer.run_epoch(&data)?;
        let line = serde_json::to_string(&record).expect("record serializes");
        write_line(&mut metrics, &metrics_path, &line)?;
        let t = Timing {
            epoch: record.epoch,
            wall_time_secs: record.wall_time_secs,
        };
        write_line(&mut timing, &timing_path, &serde_json::to_string(&t).expect("timing serializes"))?;
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    }
    timing.flush().map_err(|e| Error::io(&timing_path, e))?;

    save_checkpoint(&trainer, &dir.join(CHECKPOINT_FILE))?;
    let report = match trainer.records().last().and_then(|r| r.eval.clone()) {
        Some(r) => r,
        // Zero-epoch runs still report the initial encoder.
        None => trainer.evaluate(&data)?,
    };
    let eval_path = dir.join(EVAL_FILE);
    fs::write(&eval_path, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")
        .map_err(|e| Error::io(&eval_path, e))?;
    info!("wrote run artifacts to {}", dir.display());
    Ok(TrainRun {
        output_dir: dir.clone(),
        records: trainer.records().to_vec(),
        report,
    })
}
