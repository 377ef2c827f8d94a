//! Mini-batch training with Adam, stratified batches, checkpoints and a
//! per-epoch CSV log.
//!
//! Every random draw of epoch `e` (batch order and reparameterization
//! noise) comes from a ChaCha8 stream keyed by `(seed, e)`, so a run that
//! is stopped and resumed from a checkpoint follows the same trajectory as
//! an uninterrupted one.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::DatasetRecord;
use crate::error::{Error, Result};
use crate::model::{standard_normal, ModelConfig, ModelParams, NamedArray, ParamsFile};
use crate::objective::{total_loss, BatchItem, LossBreakdown, Noise, ObjectiveConfig};
use crate::pgraph::UnitKind;
use crate::tensor::{Matrix, Tape};

pub const FINAL_CHECKPOINT: &str = "final.json";
pub const EPOCH_LOG: &str = "epochs.csv";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint-epoch-{epoch:04}.json")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables all but the
    /// final one.
    pub checkpoint_every: usize,
    pub stratify: bool,
    pub objective: ObjectiveConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 10,
            stratify: true,
            objective: ObjectiveConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.stratify && self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "stratified batches need batch_size ≥ 2".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be finite and ≥ 0, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "adam_eps must be positive, got {}",
                self.adam_eps
            )));
        }
        Ok(())
    }

    /// Fields that change the trajectory and differ from `other`. The epoch
    /// budget and checkpoint cadence may change between runs.
    pub fn trajectory_diff(&self, other: &Self) -> Vec<String> {
        let mut out: Vec<String> = self
            .model
            .diff(&other.model)
            .into_iter()
            .map(|f| format!("model.{f}"))
            .collect();
        let o = (&self.objective, &other.objective);
        let scalars = [
            ("learning_rate", self.learning_rate, other.learning_rate),
            ("beta1", self.beta1, other.beta1),
            ("beta2", self.beta2, other.beta2),
            ("adam_eps", self.adam_eps, other.adam_eps),
            ("objective.beta_local", o.0.beta_local, o.1.beta_local),
            ("objective.beta_global", o.0.beta_global, o.1.beta_global),
            ("objective.beta_contra", o.0.beta_contra, o.1.beta_contra),
            ("objective.temperature", o.0.temperature, o.1.temperature),
        ];
        out.extend(
            scalars
                .iter()
                .filter(|(_, a, b)| a.to_bits() != b.to_bits())
                .map(|(n, _, _)| n.to_string()),
        );
        if o.0.include_self_pairs != o.1.include_self_pairs {
            out.push("objective.include_self_pairs".into());
        }
        if self.batch_size != other.batch_size {
            out.push("batch_size".into());
        }
        if self.seed != other.seed {
            out.push("seed".into());
        }
        if self.stratify != other.stratify {
            out.push("stratify".into());
        }
        out
    }
}

/// Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params.values().iter().map(|p| Matrix::zeros(p.dim())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update of `params` from `grads`.
    pub fn update(&mut self, params: &mut [Matrix], grads: &[Matrix], cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerFile {
    pub step: u64,
    pub m: Vec<NamedArray>,
    pub v: Vec<NamedArray>,
}

/// Batch-averaged losses of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_contra: f64,
    pub total: f64,
    pub wall_seconds: f64,
    /// Batches in which fewer than two labels were present.
    #[serde(default)]
    pub inactive_contrastive_batches: usize,
}

impl EpochRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_losses(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.l_rec.to_bits() == other.l_rec.to_bits()
            && self.l_kl.to_bits() == other.l_kl.to_bits()
            && self.l_contra.to_bits() == other.l_contra.to_bits()
            && self.total.to_bits() == other.total.to_bits()
            && self.inactive_contrastive_batches == other.inactive_contrastive_batches
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub model: ParamsFile,
    pub train: TrainConfig,
    pub optimizer: OptimizerFile,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochRecord>,
}

impl CheckpointFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(fs::File::open(path)?))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, |out| Ok(serde_json::to_writer(out, self)?))
    }
}

/// Writes through a sibling temporary file and renames it into place, so
/// `path` is either absent, its previous content, or complete.
pub fn write_atomic<F>(path: impl AsRef<Path>, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> Result<()>,
{
    let path = path.as_ref();
    let mut tmp_name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut out = BufWriter::new(fs::File::create(&tmp)?);
    let written = write(&mut out).and_then(|_| Ok(out.flush()?));
    drop(out);
    match written {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

pub fn write_epoch_log(path: impl AsRef<Path>, log: &[EpochRecord]) -> Result<()> {
    write_atomic(path, |out| {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "l_rec", "l_kl", "l_contra", "total", "wall_seconds"])?;
        for r in log {
            w.write_record([
                r.epoch.to_string(),
                r.l_rec.to_string(),
                r.l_kl.to_string(),
                r.l_contra.to_string(),
                r.total.to_string(),
                format!("{:.6}", r.wall_seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    })
}

/// Index batches for one epoch. Without stratification: a shuffled
/// partition into full batches. With it: each batch is seeded with one
/// graph from each of the two labels that have the most graphs left, then
/// filled in shuffled order; batches that can no longer hold two labels
/// are dropped. Partial trailing batches are always dropped.
pub fn make_batches(
    labels: &[Option<UnitKind>],
    batch_size: usize,
    stratify: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    let distinct = labels.iter().flatten().collect::<std::collections::BTreeSet<_>>().len();
    if !stratify || distinct < 2 {
        return order
            .chunks_exact(batch_size)
            .map(|c| c.to_vec())
            .collect();
    }
    let mut batches = Vec::new();
    let mut remaining = order;
    while remaining.len() >= batch_size {
        let mut counts: BTreeMap<UnitKind, usize> = BTreeMap::new();
        for &i in &remaining {
            if let Some(k) = labels[i] {
                *counts.entry(k).or_default() += 1;
            }
        }
        if counts.len() < 2 {
            break;
        }
        let mut ranked: Vec<(UnitKind, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut batch = Vec::with_capacity(batch_size);
        for (kind, _) in &ranked[..2] {
            let pos = remaining
                .iter()
                .position(|&i| labels[i] == Some(*kind))
                .expect("counted label is present");
            batch.push(remaining.remove(pos));
        }
        let fill = batch_size - batch.len();
        batch.extend(remaining.drain(..fill));
        batches.push(batch);
    }
    batches
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Training state: parameters, optimizer moments and the epoch log.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    params: ModelParams,
    optimizer: AdamState,
    epoch: usize,
    log: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config.model, config.seed)?;
        let optimizer = AdamState::new(&params);
        Ok(Self {
            config,
            params,
            optimizer,
            epoch: 0,
            log: Vec::new(),
        })
    }

    /// Restores a checkpoint. `config` may change only the epoch budget and
    /// checkpoint cadence.
    pub fn from_checkpoint(ckpt: &CheckpointFile, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut diff = ckpt.train.trajectory_diff(&config);
        for f in ckpt.model.config.diff(&config.model) {
            let f = format!("model.{f}");
            if !diff.contains(&f) {
                diff.push(f);
            }
        }
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff));
        }
        let params = ModelParams::from_file(&ckpt.model)?;
        let optimizer = AdamState {
            step: ckpt.optimizer.step,
            m: params.matrices_from_arrays(&ckpt.optimizer.m)?,
            v: params.matrices_from_arrays(&ckpt.optimizer.v)?,
        };
        Ok(Self {
            config,
            params,
            optimizer,
            epoch: ckpt.epoch,
            log: ckpt.log.clone(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[EpochRecord] {
        &self.log
    }

    pub fn checkpoint(&self) -> CheckpointFile {
        CheckpointFile {
            model: self.params.to_file(),
            train: self.config.clone(),
            optimizer: OptimizerFile {
                step: self.optimizer.step,
                m: self.params.arrays_from_matrices(&self.optimizer.m),
                v: self.params.arrays_from_matrices(&self.optimizer.v),
            },
            epoch: self.epoch,
            log: self.log.clone(),
        }
    }

    fn check_dataset(&self, data: &[DatasetRecord]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let cfg = &self.config.model;
        for (i, r) in data.iter().enumerate() {
            if r.n() > cfg.n_max || r.m() > cfg.m_max {
                return Err(Error::InvalidArgument(format!(
                    "record {} has n={}, m={} beyond model bounds n_max={}, m_max={}",
                    i + 1,
                    r.n(),
                    r.m(),
                    cfg.n_max,
                    cfg.m_max
                )));
            }
        }
        if data.len() < self.config.batch_size {
            return Err(Error::InvalidArgument(format!(
                "training set of {} graphs cannot fill one batch of {}",
                data.len(),
                self.config.batch_size
            )));
        }
        Ok(())
    }

    /// Runs one epoch and appends its record to the log.
    pub fn run_epoch(&mut self, data: &[DatasetRecord]) -> Result<EpochRecord> {
        self.check_dataset(data)?;
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let mut rng = epoch_rng(self.config.seed, epoch);
        let labels: Vec<Option<UnitKind>> = data.iter().map(|r| r.unit_kind).collect();
        let batches = make_batches(&labels, self.config.batch_size, self.config.stratify, &mut rng);
        if batches.is_empty() {
            return Err(Error::InvalidArgument("no full batch could be formed".into()));
        }

        let (d_l, d_g) = (self.config.model.d_l, self.config.model.d_g);
        let mut tape = Tape::new();
        let mut sums = [0.0f64; 4];
        let mut inactive = 0;
        for (b, batch) in batches.iter().enumerate() {
            let items: Vec<BatchItem> = batch
                .iter()
                .map(|&i| BatchItem {
                    graph: &data[i].graph,
                    target: &data[i].decomposition,
                    label: data[i].unit_kind,
                })
                .collect();
            let noise: Vec<Noise> = batch
                .iter()
                .map(|_| Noise {
                    local: Matrix::from_shape_vec((1, d_l), standard_normal(&mut rng, d_l))
                        .expect("1 × d_l"),
                    global: Matrix::from_shape_vec((1, d_g), standard_normal(&mut rng, d_g))
                        .expect("1 × d_g"),
                })
                .collect();

            tape.clear();
            let bound = self.params.bind(&mut tape, true);
            let terms = total_loss(&mut tape, &bound, &items, &noise, &self.config.objective)?;
            let br = terms.breakdown(&tape, &self.config.objective)?;
            guard_finite(&br, epoch, b + 1)?;
            let grads = tape.backward(terms.total)?;
            let grads: Vec<Matrix> = bound.vars().iter().map(|&v| grads.get_or_zeros(v, tape.shape(v))).collect();
            if let Some(name) = self
                .params
                .names()
                .zip(&grads)
                .find(|(_, g)| g.iter().any(|x| !x.is_finite()))
                .map(|(n, _)| n.to_string())
            {
                return Err(Error::NonFinite(format!(
                    "gradient of `{name}` at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            drop(bound);
            self.optimizer.update(self.params.values_mut(), &grads, &self.config);

            if !br.contrastive_active {
                inactive += 1;
            }
            for (s, v) in sums.iter_mut().zip([br.l_rec, br.l_kl, br.l_contra, br.total]) {
                *s += v;
            }
        }
        let count = batches.len() as f64;
        let record = EpochRecord {
            epoch,
            l_rec: sums[0] / count,
            l_kl: sums[1] / count,
            l_contra: sums[2] / count,
            total: sums[3] / count,
            wall_seconds: start.elapsed().as_secs_f64(),
            inactive_contrastive_batches: inactive,
        };
        self.epoch = epoch;
        self.log.push(record.clone());
        Ok(record)
    }

    /// Trains until `config.epochs` epochs are complete. With `out_dir`,
    /// writes checkpoints at the configured cadence, `final.json`, and the
    /// epoch log after every epoch.
    pub fn run(&mut self, data: &[DatasetRecord], out_dir: Option<&Path>) -> Result<()> {
        self.check_dataset(data)?;
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }
        while self.epoch < self.config.epochs {
            self.run_epoch(data)?;
            if let Some(dir) = out_dir {
                write_epoch_log(dir.join(EPOCH_LOG), &self.log)?;
                let every = self.config.checkpoint_every;
                if every > 0 && self.epoch % every == 0 {
                    self.checkpoint().save(dir.join(checkpoint_name(self.epoch)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            write_epoch_log(dir.join(EPOCH_LOG), &self.log)?;
            self.checkpoint().save(dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(())
    }
}

fn guard_finite(br: &LossBreakdown, epoch: usize, batch: usize) -> Result<()> {
    for (name, v) in [
        ("l_rec", br.l_rec),
        ("l_kl", br.l_kl),
        ("l_contra", br.l_contra),
        ("total", br.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "{name} = {v} at epoch {epoch}, batch {batch}"
            )));
        }
    }
    Ok(())
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    pub optimizer: AdamState,
}

impl From<Trainer> for TrainOutcome {
    fn from(t: Trainer) -> Self {
        Self {
            params: t.params,
            log: t.log,
            optimizer: t.optimizer,
        }
    }
}

pub fn train(config: &TrainConfig, data: &[DatasetRecord], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    trainer.run(data, out_dir)?;
    Ok(trainer.into())
}

/// Continues a run from `checkpoint` up to `config.epochs` epochs.
pub fn resume(
    checkpoint: &CheckpointFile,
    config: &TrainConfig,
    data: &[DatasetRecord],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::from_checkpoint(checkpoint, config.clone())?;
    trainer.run(data, out_dir)?;
    Ok(trainer.into())
}

/// Paths of every cadence checkpoint in `dir`, by epoch.
pub fn list_checkpoints(dir: impl AsRef<Path>) -> Result<BTreeMap<usize, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("checkpoint-epoch-"))
            .and_then(|n| n.strip_suffix(".json"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(e) = epoch {
            out.insert(e, path);
        }
    }
    Ok(out)
}
