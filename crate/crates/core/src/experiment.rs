//! Hyperparameter sweeps: one training run per (setting, variant, seed).

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Variant;
use crate::memory::UpdatePolicy;
use crate::run::RunConfig;
use crate::trainer::{train, EpochRecord, SplitData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    BatchSize,
    Lambda,
    Omega,
    Policy,
    Convergence,
    Noise,
}

impl Study {
    pub const ALL: [Study; 6] = [
        Study::BatchSize,
        Study::Lambda,
        Study::Omega,
        Study::Policy,
        Study::Convergence,
        Study::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Study::BatchSize => "batch-size",
            Study::Lambda => "lambda",
            Study::Omega => "omega",
            Study::Policy => "policy",
            Study::Convergence => "convergence",
            Study::Noise => "noise",
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Study::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config {
                key: "study".into(),
                message: format!(
                    "unknown study `{s}`, expected one of {}",
                    Study::ALL.map(Study::name).join(", ")
                ),
            })
    }
}

pub const BATCH_SIZES: [usize; 4] = [32, 64, 128, 256];
pub const LAMBDAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const OMEGAS: [f64; 5] = [0.0, 0.1, 0.2, 0.5, 0.9];
pub const NOISE_RATES: [f64; 4] = [0.0, 0.1, 0.2, 0.3];

/// One training run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub study: Study,
    pub setting: String,
    pub seed: u64,
    pub config: RunConfig,
}

fn with_seed(base: &RunConfig, offset: u64) -> RunConfig {
    let mut c = base.clone();
    c.train.seed = base.train.seed + offset;
    c.data.synthetic.seed = base.data.synthetic.seed + offset;
    c
}

/// The default grid of a study, crossed with `num_seeds` seed offsets.
///
/// Seed offset `s` shifts both the training seed and the synthetic data
/// seed, so every seed sees a fresh dataset.
pub fn study_cells(study: Study, base: &RunConfig, num_seeds: u64) -> Vec<Cell> {
    let mut settings: Vec<(String, RunConfig)> = Vec::new();
    let per_variant = |label: String, c: RunConfig, settings: &mut Vec<(String, RunConfig)>| {
        for v in Variant::ALL {
            let mut c = c.clone();
            c.train.variant = v;
            settings.push((label.clone(), c));
        }
    };
    match study {
        Study::BatchSize => {
            for bs in BATCH_SIZES {
                let mut c = base.clone();
                c.train.p = (bs / c.train.k).max(1);
                per_variant(format!("batch_size={}", c.train.batch_size()), c, &mut settings);
            }
        }
        Study::Lambda => {
            for l in LAMBDAS {
                let mut c = base.clone();
                c.train.variant = Variant::Dcc;
                c.train.lambda = l;
                settings.push((format!("lambda={l}"), c));
            }
        }
        Study::Omega => {
            for w in OMEGAS {
                let mut c = base.clone();
                c.train.variant = Variant::Dcc;
                c.train.omega = w;
                settings.push((format!("omega={w}"), c));
            }
        }
        Study::Policy => {
            for p in [UpdatePolicy::All, UpdatePolicy::Random, UpdatePolicy::Hard] {
                let mut c = base.clone();
                c.train.variant = Variant::Dcc;
                c.train.policy = p;
                settings.push((format!("policy={p}"), c));
            }
        }
        Study::Convergence => {
            let mut c = base.clone();
            c.train.eval_every = 1;
            per_variant("curve".into(), c, &mut settings);
        }
        Study::Noise => {
            for n in NOISE_RATES {
                let mut c = base.clone();
                c.data.synthetic.noise_rate = n;
                per_variant(format!("noise={n}"), c, &mut settings);
            }
        }
    }
    let mut cells = Vec::new();
    for (setting, config) in settings {
        for s in 0..num_seeds {
            cells.push(Cell {
                study,
                setting: setting.clone(),
                seed: s,
                config: with_seed(&config, s),
            });
        }
    }
    cells
}

/// Column order of every study CSV.
pub const CSV_HEADER: [&str; 15] = [
    "study",
    "setting",
    "variant",
    "seed",
    "epoch",
    "batch_size",
    "lambda",
    "omega",
    "policy",
    "noise",
    "map",
    "cmc1",
    "cmc5",
    "cmc10",
    "l_total",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub study: Study,
    pub setting: String,
    pub variant: Variant,
    pub seed: u64,
    pub epoch: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub omega: f64,
    pub policy: UpdatePolicy,
    pub noise: f64,
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
    pub l_total: f64,
}

impl StudyRow {
    fn new(cell: &Cell, record: &EpochRecord) -> Self {
        let t = &cell.config.train;
        let eval = record.eval.as_ref();
        let cmc = |k| eval.map_or(f64::NAN, |e| e.cmc_at(k));
        Self {
            study: cell.study,
            setting: cell.setting.clone(),
            variant: t.variant,
            seed: cell.seed,
            epoch: record.epoch,
            batch_size: t.batch_size(),
            lambda: t.lambda,
            omega: t.omega,
            policy: t.policy,
            noise: if cell.config.data.uses_files() { f64::NAN } else { cell.config.data.synthetic.noise_rate },
            map: eval.map_or(f64::NAN, |e| e.map),
            cmc1: cmc(1),
            cmc5: cmc(5),
            cmc10: cmc(10),
            l_total: record.loss.l_total,
        }
    }
}

/// Trains one cell and turns its records into rows: every evaluated epoch
/// for the convergence study, the final epoch otherwise.
pub fn run_cell(cell: &Cell) -> Result<Vec<StudyRow>> {
    let dataset = cell.config.data.load()?;
    let data = SplitData::from_dataset(&dataset)?;
    let outcome = train(cell.config.train.clone(), &data)?;
    let rows = match cell.study {
        Study::Convergence => outcome
            .records
            .iter()
            .filter(|r| r.eval.is_some())
            .map(|r| StudyRow::new(cell, r))
            .collect(),
        _ => outcome.records.last().map(|r| StudyRow::new(cell, r)).into_iter().collect(),
    };
    Ok(rows)
}

#[derive(Debug, Default)]
pub struct StudyOutcome {
    pub rows: Vec<StudyRow>,
    /// Cells that failed, as `(setting/variant/seed, error)`.
    pub failures: Vec<(String, Error)>,
}

/// Runs cells in parallel. Rows keep the cell order regardless of
/// scheduling; failed cells are collected rather than aborting the sweep.
pub fn run_cells(cells: &[Cell]) -> StudyOutcome {
    let results: Vec<Result<Vec<StudyRow>>> = cells.par_iter().map(run_cell).collect();
    let mut out = StudyOutcome::default();
    for (cell, res) in cells.iter().zip(results) {
        let id = format!("{}/{}/seed{}", cell.setting, cell.config.train.variant, cell.seed);
        match res {
            Ok(rows) => {
                info!("{} {id} done", cell.study);
                out.rows.extend(rows);
            }
            Err(e) => {
                warn!("{} {id} failed: {e}", cell.study);
                out.failures.push((id, e));
            }
        }
    }
    out
}

pub fn write_csv(rows: &[StudyRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.study.name().to_string(),
            r.setting.clone(),
            r.variant.to_string(),
            r.seed.to_string(),
            r.epoch.to_string(),
            r.batch_size.to_string(),
            r.lambda.to_string(),
            r.omega.to_string(),
            r.policy.to_string(),
            r.noise.to_string(),
            r.map.to_string(),
            r.cmc1.to_string(),
            r.cmc5.to_string(),
            r.cmc10.to_string(),
            r.l_total.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path.display().to_string(), format!("{other:?}")),
    }
}

/// Seed-averaged final metrics for one (setting, variant).
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub setting: String,
    pub variant: Variant,
    pub seeds: usize,
    pub map: f64,
    pub cmc1: f64,
}

/// Means over seeds of each cell's last row, in first-seen order.
pub fn summarize(rows: &[StudyRow]) -> Vec<SummaryRow> {
    let mut last: BTreeMap<(String, Variant, u64), &StudyRow> = BTreeMap::new();
    let mut order: Vec<(String, Variant)> = Vec::new();
    for r in rows {
        let key = (r.setting.clone(), r.variant);
        if !order.contains(&key) {
            order.push(key);
        }
        last.insert((r.setting.clone(), r.variant, r.seed), r);
    }
    order
        .into_iter()
        .map(|(setting, variant)| {
            let finals: Vec<&StudyRow> = last
                .iter()
                .filter(|((s, v, _), _)| *s == setting && *v == variant)
                .map(|(_, r)| *r)
                .collect();
            let n = finals.len() as f64;
            SummaryRow {
                map: finals.iter().map(|r| r.map).sum::<f64>() / n,
                cmc1: finals.iter().map(|r| r.cmc1).sum::<f64>() / n,
                seeds: finals.len(),
                setting,
                variant,
            }
        })
        .collect()
}

pub fn summary_table(summary: &[SummaryRow]) -> String {
    let width = summary.iter().map(|s| s.setting.len()).max().unwrap_or(7).max(7);
    let mut out = format!("{:<width$} {:>7} {:>5} {:>8} {:>8}\n", "setting", "variant", "seeds", "mAP", "R1");
    for s in summary {
        let _ = writeln!(
            out,
            "{:<width$} {:>7} {:>5} {:>8.4} {:>8.4}",
            s.setting,
            s.variant.to_string(),
            s.seeds,
            s.map,
            s.cmc1
        );
    }
    out
}

pub fn write_summary_csv(summary: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["setting", "variant", "seeds", "map", "cmc1"]).map_err(|e| csv_error(path, e))?;
    for s in summary {
        w.write_record([
            s.setting.clone(),
            s.variant.to_string(),
            s.seeds.to_string(),
            s.map.to_string(),
            s.cmc1.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
