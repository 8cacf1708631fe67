//! Epoch loop: sampling, loss, backprop, optimizer and memory refresh.

use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::clustering::{adjusted_rand_index, recluster_epoch};
use crate::config::{Mode, TrainConfig};
use crate::data::{pk_sample, LabeledDataset};
use crate::encoder::{apply_gradients, Adam, Encoder};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport, RetrievalSet};
use crate::losses::{variant_loss, LossBreakdown};
use crate::memory::DualMemory;
use crate::numerics::{Matrix, Rng};

/// Largest tolerated gap between `l_total` and its recomposition.
pub const COMPOSITION_TOLERANCE: f64 = 1e-12;

/// Train, query and gallery splits used by one run.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: LabeledDataset,
    pub query: Option<LabeledDataset>,
    pub gallery: Option<LabeledDataset>,
}

impl SplitData {
    /// Splits a tagged dataset. Query and gallery are optional.
    pub fn from_dataset(dataset: &LabeledDataset) -> Result<Self> {
        let train = dataset.train();
        if train.is_empty() {
            return Err(Error::EmptySplit("train"));
        }
        let query = Some(dataset.query()).filter(|d| !d.is_empty());
        let gallery = Some(dataset.gallery()).filter(|d| !d.is_empty());
        Ok(Self { train, query, gallery })
    }

    /// Query and gallery sets, falling back to leave-one-out retrieval
    /// within the training split. The flag says whether self-matches must
    /// be skipped.
    pub fn retrieval_sets(&self) -> (&LabeledDataset, &LabeledDataset, bool) {
        match (&self.query, &self.gallery) {
            (Some(q), Some(g)) => (q, g, false),
            _ => (&self.train, &self.train, true),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub num_clusters: usize,
    pub num_outliers: usize,
    /// Agreement between cluster assignment and true identities.
    pub ari: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub num_batches: usize,
    /// Loss terms averaged over the epoch's batches.
    pub loss: LossBreakdown,
    pub clusters: Option<ClusterStats>,
    pub eval: Option<EvalReport>,
    /// Not serialized so metric logs stay bitwise reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// What one optimizer step saw and produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    /// L2-normalized batch features before the parameter update.
    pub features: Matrix,
    pub labels: Vec<usize>,
}

/// Samples the trainer currently learns from, with their (pseudo-)labels.
#[derive(Debug, Clone, PartialEq)]
struct ActiveSet {
    indices: Vec<usize>,
    labels: Vec<usize>,
    stats: Option<ClusterStats>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub(crate) config: TrainConfig,
    pub(crate) encoder: Encoder,
    pub(crate) optimizer: Adam,
    pub(crate) memory: DualMemory,
    pub(crate) rng: Rng,
    pub(crate) epoch: usize,
    pub(crate) records: Vec<EpochRecord>,
    // Recomputed from the encoder whenever missing, so it is not checkpointed.
    active: Option<ActiveSet>,
}

impl Trainer {
    /// Initializes the encoder from `config.seed` and fills both banks from
    /// the embedded training set.
    pub fn new(config: TrainConfig, train: &LabeledDataset) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::EmptySplit("train"));
        }
        let mut rng = Rng::new(config.seed);
        let encoder = Encoder::new(&config.layer_dims(train.dim()), &mut rng)?;
        let optimizer = Adam::new(config.base_lr);
        let (memory, active) = build_memory(&config, &encoder, train)?;
        Ok(Self {
            config,
            encoder,
            optimizer,
            memory,
            rng,
            epoch: 0,
            records: Vec::new(),
            active: Some(active),
        })
    }

    pub(crate) fn from_parts(
        config: TrainConfig,
        encoder: Encoder,
        optimizer: Adam,
        memory: DualMemory,
        rng: Rng,
        epoch: usize,
        records: Vec<EpochRecord>,
    ) -> Self {
        Self {
            config,
            encoder,
            optimizer,
            memory,
            rng,
            epoch,
            records,
            active: None,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    pub fn memory(&self) -> &DualMemory {
        &self.memory
    }

    pub fn rng(&self) -> &Rng {
        &self.rng
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Labels of the samples the next epoch trains on, with their indices
    /// into the training split.
    pub fn active_labels(&mut self, train: &LabeledDataset) -> Result<(&[usize], &[usize])> {
        self.ensure_active(train)?;
        let active = self.active.as_ref().expect("active set was just built");
        Ok((&active.indices, &active.labels))
    }

    fn ensure_active(&mut self, train: &LabeledDataset) -> Result<()> {
        if self.active.is_some() {
            return Ok(());
        }
        match self.config.mode {
            Mode::Supervised => {
                self.active = Some(supervised_set(train));
            }
            Mode::Unsupervised => {
                let (memory, active) = build_memory(&self.config, &self.encoder, train)?;
                self.memory = memory;
                self.active = Some(active);
            }
        }
        Ok(())
    }

    /// One optimizer step on the given training-split indices.
    ///
    /// The loss is computed against the memory as it was before this step;
    /// the banks are then refreshed with the same (pre-update) features.
    pub fn train_step(&mut self, train: &LabeledDataset, indices: &[usize], labels: &[usize]) -> Result<StepOutcome> {
        let batch = train.features().select_rows(indices);
        let (features, cache) = self.encoder.forward(&batch)?;
        let cfg = &self.config;
        let (loss, grad) = variant_loss(&features, &self.memory, labels, cfg.tau, cfg.lambda, cfg.variant)?;
        let grads = self.encoder.backward(&cache, &grad)?;
        apply_gradients(&mut self.encoder, &mut self.optimizer, &grads, cfg.weight_decay);
        if cfg.variant.uses_individual() {
            self.memory.update_individual(&features, labels, &mut self.rng)?;
        }
        if cfg.variant.uses_centroid() {
            self.memory.update_centroid(&features, labels)?;
        }
        Ok(StepOutcome {
            loss,
            features,
            labels: labels.to_vec(),
        })
    }

    /// Runs the next epoch and appends its record.
    pub fn run_epoch(&mut self, data: &SplitData) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = self.epoch;
        self.ensure_active(&data.train)?;
        let active = self.active.take().expect("active set was just built");

        let lr = self.config.schedule().lr(epoch);
        self.optimizer.learning_rate = lr;
        let mut p = self.config.p;
        if self.config.mode == Mode::Unsupervised && active.stats.map_or(0, |s| s.num_clusters) < p {
            p = active.stats.map_or(p, |s| s.num_clusters);
            warn!("epoch {epoch}: only {p} clusters, sampling {p} per batch");
        }
        let batches = pk_sample(&active.labels, p, self.config.k, &mut self.rng)?;

        let mut sum = LossBreakdown::default();
        let mut idx = Vec::new();
        let mut lab = Vec::new();
        for batch in &batches {
            idx.clear();
            lab.clear();
            idx.extend(batch.iter().map(|&b| active.indices[b]));
            lab.extend(batch.iter().map(|&b| active.labels[b]));
            let step = self.train_step(&data.train, &idx, &lab)?;
            sum.l_icc += step.loss.l_icc;
            sum.l_ccc += step.loss.l_ccc;
            sum.l_con += step.loss.l_con;
            sum.l_total += step.loss.l_total;
        }
        let n = batches.len() as f64;
        let loss = LossBreakdown {
            l_icc: sum.l_icc / n,
            l_ccc: sum.l_ccc / n,
            l_con: sum.l_con / n,
            l_total: sum.l_total / n,
        };
        let gap = loss.composition_error(self.config.lambda);
        if gap > COMPOSITION_TOLERANCE {
            return Err(Error::LossComposition {
                epoch,
                total: loss.l_total,
                components: loss.l_total - gap,
            });
        }

        let stats = active.stats;
        if self.config.mode == Mode::Supervised {
            self.active = Some(active);
        }
        self.epoch += 1;

        let eval_now =
            self.is_finished() || (self.config.eval_every > 0 && self.epoch.is_multiple_of(self.config.eval_every));
        let eval = if eval_now {
            Some(self.evaluate(data)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            lr,
            num_batches: batches.len(),
            loss,
            clusters: stats,
            eval,
            wall_time_secs: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: loss {:.5} (icc {:.5} ccc {:.5} con {:.5}){}",
            loss.l_total,
            loss.l_icc,
            loss.l_ccc,
            loss.l_con,
            record.eval.as_ref().map_or(String::new(), |e| format!(" mAP {:.4}", e.map))
        );
        self.records.push(record.clone());
        Ok(record)
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn run(&mut self, data: &SplitData) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch(data)?;
        }
        Ok(())
    }

    /// Retrieval with the current encoder; see [`SplitData::retrieval_sets`].
    pub fn evaluate(&self, data: &SplitData) -> Result<EvalReport> {
        let (query, gallery, exclude_self) = data.retrieval_sets();
        let opts = EvalOptions {
            exclude_same_camera: self.config.exclude_same_camera,
            exclude_self,
            ..EvalOptions::default()
        };
        evaluate_encoder(&self.encoder, query, gallery, &opts)
    }
}

/// Embeds query and gallery and scores retrieval against true identities.
pub fn evaluate_encoder(
    encoder: &Encoder,
    query: &LabeledDataset,
    gallery: &LabeledDataset,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let qf = encoder.embed(query.features())?;
    let gf = encoder.embed(gallery.features())?;
    evaluate(
        &RetrievalSet {
            features: &qf,
            labels: query.true_labels(),
            cameras: query.cameras(),
        },
        &RetrievalSet {
            features: &gf,
            labels: gallery.true_labels(),
            cameras: gallery.cameras(),
        },
        opts,
    )
}

fn supervised_set(train: &LabeledDataset) -> ActiveSet {
    ActiveSet {
        indices: (0..train.len()).collect(),
        labels: train.labels().to_vec(),
        stats: None,
    }
}

fn build_memory(config: &TrainConfig, encoder: &Encoder, train: &LabeledDataset) -> Result<(DualMemory, ActiveSet)> {
    match config.mode {
        Mode::Supervised => {
            let features = encoder.embed(train.features())?;
            let memory = DualMemory::init(&features, train.labels(), train.num_classes())?
                .with_omega(config.omega)?
                .with_policy(config.policy);
            Ok((memory, supervised_set(train)))
        }
        Mode::Unsupervised => {
            let r = recluster_epoch(encoder, train, &config.dbscan, config.omega, config.policy)?;
            if r.pseudo.num_clusters < 2 {
                return Err(Error::ClusterCollapse(r.pseudo.num_clusters));
            }
            let truth: Vec<i64> = train.true_labels().iter().map(|&l| l as i64).collect();
            let stats = ClusterStats {
                num_clusters: r.pseudo.num_clusters,
                num_outliers: r.pseudo.num_discarded,
                ari: adjusted_rand_index(&r.assignment.labels, &truth),
            };
            let active = ActiveSet {
                indices: r.pseudo.indices,
                labels: r.pseudo.labels,
                stats: Some(stats),
            };
            Ok((r.memory, active))
        }
    }
}

/// Final state of a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: Encoder,
    pub memory: DualMemory,
    pub records: Vec<EpochRecord>,
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(config: TrainConfig, data: &SplitData) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, &data.train)?;
    trainer.run(data)?;
    Ok(TrainOutcome {
        encoder: trainer.encoder,
        memory: trainer.memory,
        records: trainer.records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::losses::Variant;

    fn small() -> SplitData {
        let spec = SynthSpec {
            num_ids: 6,
            samples_per_id: 8,
            input_dim: 8,
            query_per_id: 2,
            gallery_per_id: 3,
            seed: 4,
            ..SynthSpec::default()
        };
        SplitData::from_dataset(&generate_synthetic(&spec).unwrap()).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            p: 3,
            k: 4,
            epochs: 3,
            hidden_dims: vec![16],
            feature_dim: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let data = small();
        let config = TrainConfig { epochs: 0, ..cfg() };
        let fresh = Trainer::new(config.clone(), &data.train).unwrap();
        let out = train(config, &data).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(&out.encoder, fresh.encoder());
        assert_eq!(&out.memory, fresh.memory());
    }

    #[test]
    fn records_carry_composed_losses() {
        let data = small();
        for variant in Variant::ALL {
            let out = train(TrainConfig { variant, ..cfg() }, &data).unwrap();
            assert_eq!(out.records.len(), 3);
            for r in &out.records {
                assert!(r.loss.composition_error(0.5) <= COMPOSITION_TOLERANCE);
                assert!(r.loss.l_total.is_finite());
            }
            assert!(out.records.last().unwrap().eval.is_some());
        }
    }

    #[test]
    fn disabled_bank_is_left_untouched() {
        let data = small();
        let mut trainer = Trainer::new(TrainConfig { variant: Variant::Ccc, ..cfg() }, &data.train).unwrap();
        let before = trainer.memory().individual().clone();
        trainer.run_epoch(&data).unwrap();
        assert_eq!(trainer.memory().individual(), &before);
        assert_ne!(trainer.memory().centroid(), &before);
    }

    #[test]
    fn runs_are_deterministic() {
        let data = small();
        let a = train(cfg(), &data).unwrap();
        let b = train(cfg(), &data).unwrap();
        assert_eq!(a.encoder, b.encoder);
        let strip = |r: &[EpochRecord]| serde_json::to_string(r).unwrap();
        assert_eq!(strip(&a.records), strip(&b.records));
    }

    #[test]
    fn learning_rate_follows_schedule() {
        let data = small();
        let config = TrainConfig {
            epochs: 6,
            ..cfg()
        };
        let out = train(config.clone(), &data).unwrap();
        let lrs: Vec<f64> = out.records.iter().map(|r| r.lr).collect();
        assert_eq!(lrs[0], config.base_lr);
        assert_eq!(lrs[1], config.base_lr);
        assert!((lrs[2] - config.base_lr * 0.1).abs() < 1e-18);
        assert!((lrs[5] - config.base_lr * 0.01).abs() < 1e-18);
    }
}
