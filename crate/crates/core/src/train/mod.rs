//! Two-phase training: the segmentation network under the scheduled
//! composite loss, then the denoising front-end with everything but the
//! projection head frozen. Also checkpointing, evaluation and sweeps.

pub mod checkpoint;
pub mod sweep;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use msunet_autograd::{Scalar, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use checkpoint::{BestRecord, Checkpoint, CheckpointManifest, Phase, Progress, RngState, FORMAT_VERSION};
pub use sweep::{sweep, SweepKind, SweepRow};

use crate::data::{flip_horizontal, rotate90, subset_fraction, Case, Dataset, Split};
use crate::denoise::{DenoiseConfig, DenoiseModule, PREFIX as DENOISE_PREFIX};
use crate::edgelabel::generate_edge_labels;
use crate::error::{Error, IoContext, Result};
use crate::losses::{total_loss, LossBreakdown, LossWeights};
use crate::metrics::{evaluate, EvalReport, Segmenter};
use crate::network::{ModelConfig, MsUnet, Structure, HEAD_PREFIX};
use crate::optim::{poly_lr, Sgd, SgdConfig};
use crate::params::ParamStore;

/// Setting this variable to `1` forces 64-bit arithmetic everywhere.
pub const DETERMINISTIC_ENV: &str = "MSUNET_DETERMINISTIC";
pub const LOG_FILE: &str = "train.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
const NAN_PATIENCE: usize = 3;

pub fn deterministic_env() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v.trim() == "1")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// The environment override applied to a configured precision.
    pub fn effective(self) -> Self {
        if deterministic_env() {
            Precision::F64
        } else {
            self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: SgdConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossWeights,
    pub seed: u64,
    /// Validate every this many epochs (and always after the last one).
    pub eval_every: usize,
    pub precision: Precision,
    /// Share of the training split to use, see [`subset_fraction`].
    pub data_fraction: f64,
    pub poly_decay: bool,
    /// Random flips and quarter turns of training cases.
    pub augment: bool,
    pub edge_threshold: f64,
    pub hd_percentile: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// 64x64 inputs, three classes; the epoch budget and edge start are the
    /// full recipe scaled down by the same factor.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(Structure::Standard),
            optimizer: SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 1e-4 },
            batch_size: 8,
            epochs: 60,
            loss: LossWeights { edge_start_epoch: 12, ..Default::default() },
            seed: 0,
            eval_every: 1,
            precision: Precision::F32,
            data_fraction: 1.0,
            poly_decay: false,
            augment: false,
            edge_threshold: crate::edgelabel::DEFAULT_THRESHOLD,
            hd_percentile: None,
        }
    }

    pub fn full() -> Self {
        Self {
            model: ModelConfig::full(Structure::Standard),
            optimizer: SgdConfig { lr: 0.05, momentum: 0.9, weight_decay: 1e-4 },
            batch_size: 24,
            epochs: 250,
            loss: LossWeights::default(),
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch_size and eval_every must be at least 1".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!("data_fraction {} outside (0, 1]", self.data_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub optimizer: SgdConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub denoise: DenoiseConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 10, optimizer: SgdConfig::default(), batch_size: 8, seed: 0, eval_every: 1, denoise: DenoiseConfig::default() }
    }
}

/// Early stop for tests and interrupted runs.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunControl {
    /// Save `last.ckpt` and return once the global step count reaches this.
    pub stop_after_step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub phase: Phase,
    pub precision: Precision,
    pub finished: bool,
    pub epochs_completed: usize,
    pub steps: usize,
    pub best: Option<BestRecord>,
    /// Losses of the steps run by this call.
    pub step_losses: Vec<LossBreakdown>,
    /// Per-epoch means of epochs completed by this call.
    pub epoch_losses: Vec<LossBreakdown>,
    pub parameters: usize,
    pub trainable: usize,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

/// In-memory split with per-case arrays.
struct SplitData {
    ids: Vec<String>,
    images: Vec<Vec<f32>>,
    labels: Vec<Vec<u8>>,
    edges: Option<Vec<Vec<u8>>>,
}

fn check_dataset(ds: &Dataset, model: &ModelConfig) -> Result<()> {
    if ds.manifest.num_classes != model.num_classes {
        return Err(Error::ClassCount(format!("dataset has {} classes, model {}", ds.manifest.num_classes, model.num_classes)));
    }
    if ds.manifest.image_size != model.input_size {
        return Err(Error::Config(format!("dataset images are {}px, model expects {}px", ds.manifest.image_size, model.input_size)));
    }
    Ok(())
}

fn load_train(ds: &Dataset, ids: &[String], cfg: &TrainConfig) -> Result<SplitData> {
    let n = ds.manifest.image_size;
    let mut data = SplitData { ids: ids.to_vec(), images: vec![], labels: vec![], edges: None };
    let mut edges = Vec::new();
    for id in ids {
        let c = ds.load_case(Split::Train, id)?;
        if cfg.loss.w_edge > 0.0 {
            edges.push(match c.edges {
                Some(e) => e,
                None => generate_edge_labels(&c.label, n, n, ds.manifest.num_classes - 1, cfg.edge_threshold)?,
            });
        }
        data.images.push(c.image);
        data.labels.push(c.label);
    }
    if cfg.loss.w_edge > 0.0 {
        data.edges = Some(edges);
    }
    Ok(data)
}

fn eval_cases(cases: Vec<Case>) -> Vec<(String, Vec<f32>, Vec<u8>)> {
    cases.into_iter().map(|c| (c.id, c.image, c.label)).collect()
}

/// Forward-only view of a model for evaluation.
pub struct Predictor<'a, T: Scalar> {
    pub model: &'a MsUnet,
    pub denoise: Option<&'a DenoiseModule>,
    pub store: &'a ParamStore<T>,
}

impl<T: Scalar> Predictor<'_, T> {
    /// Logits for a batch of `[H, W]` images.
    pub fn logits(&self, images: &[&[f32]]) -> Result<Tensor<T>> {
        let n = self.model.config.input_size;
        let mut buf = Vec::with_capacity(images.len() * n * n);
        for img in images {
            if img.len() != n * n {
                return Err(Error::Dimension(format!("image has {} pixels, expected {}", img.len(), n * n)));
            }
            buf.extend(img.iter().map(|&v| T::lit(v as f64)));
        }
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let mut x = tape.constant(Tensor::new(vec![images.len(), 1, n, n], buf));
        if let Some(d) = self.denoise {
            x = d.forward(&p, x, false)?.image;
        }
        let logits = self.model.forward(&p, x)?;
        Ok(logits.value().as_ref().clone())
    }
}

pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<u8>> {
    let s = logits.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    (0..b)
        .map(|i| {
            (0..hw)
                .map(|k| {
                    let mut best = 0;
                    for j in 1..c {
                        if d[(i * c + j) * hw + k] > d[(i * c + best) * hw + k] {
                            best = j;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

impl<T: Scalar> Segmenter for Predictor<'_, T> {
    fn image_size(&self) -> usize {
        self.model.config.input_size
    }

    fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    fn predict(&self, images: &[&[f32]]) -> Result<Vec<Vec<u8>>> {
        Ok(argmax_classes(&self.logits(images)?))
    }
}

struct Log {
    file: BufWriter<File>,
}

impl Log {
    fn open(out: &Path) -> Result<Self> {
        let path = out.join(LOG_FILE);
        let file = OpenOptions::new().create(true).append(true).open(&path).at(&path)?;
        Ok(Self { file: BufWriter::new(file) })
    }

    fn write(&mut self, record: serde_json::Value) -> Result<()> {
        let line = serde_json::to_string(&record)?;
        writeln!(self.file, "{line}").map_err(|e| Error::Other(format!("{LOG_FILE}: {e}")))?;
        self.file.flush().map_err(|e| Error::Other(format!("{LOG_FILE}: {e}")))
    }
}

/// Parses every record of a training log.
pub fn read_log(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = fs::read_to_string(path).at(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(Error::from)).collect()
}

/// Model, optional front-end and parameters; entry order matches what a
/// checkpoint of the same configuration stores.
fn build<T: Scalar>(cfg: &ModelConfig, seed: u64, denoise: Option<&DenoiseConfig>) -> Result<(MsUnet, Option<DenoiseModule>, ParamStore<T>)> {
    let (model, mut store) = MsUnet::init::<T>(cfg.clone(), seed)?;
    let dn = match denoise {
        Some(d) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2);
            Some(DenoiseModule::new(d.clone(), &mut store, &mut rng)?)
        }
        None => None,
    };
    Ok((model, dn, store))
}

struct Session<T: Scalar> {
    config: TrainConfig,
    phase: Phase,
    precision: Precision,
    model: MsUnet,
    denoise: Option<DenoiseModule>,
    store: ParamStore<T>,
    optim: Sgd<T>,
    rng: ChaCha8Rng,
    progress: Progress,
    best: Option<BestRecord>,
    train_ids: Vec<String>,
}

impl<T: Scalar> Session<T> {
    fn fresh(config: TrainConfig, precision: Precision, train_ids: Vec<String>) -> Result<Self> {
        let (model, _, store) = build::<T>(&config.model, config.seed, None)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let optim = Sgd::new(config.optimizer, &store);
        Ok(Self {
            config,
            phase: Phase::Base,
            precision,
            model,
            denoise: None,
            store,
            optim,
            rng,
            progress: Progress::default(),
            best: None,
            train_ids,
        })
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.manifest;
        let (model, denoise, mut store) = build::<T>(&m.config.model, m.config.seed, m.denoise.as_ref())?;
        ck.restore_params(&mut store)?;
        let mut optim = Sgd::new(m.config.optimizer, &store);
        ck.restore_optim(&store, &mut optim)?;
        Ok(Self {
            config: m.config.clone(),
            phase: m.phase,
            precision: m.precision,
            model,
            denoise,
            store,
            optim,
            rng: m.rng.restore()?,
            progress: m.progress.clone(),
            best: m.best,
            train_ids: m.train_ids.clone(),
        })
    }

    fn checkpoint(&self, with_optim: bool) -> Checkpoint {
        let manifest = CheckpointManifest {
            version: FORMAT_VERSION,
            phase: self.phase,
            precision: self.precision,
            config: self.config.clone(),
            denoise: self.denoise.as_ref().map(|d| d.config.clone()),
            progress: self.progress.clone(),
            rng: RngState::capture(&self.rng),
            best: self.best,
            train_ids: self.train_ids.clone(),
            freeze_mask: Default::default(),
            buffers: vec![],
            digests: Default::default(),
        };
        Checkpoint::capture(manifest, &self.store, with_optim.then_some(&self.optim))
    }

    fn predictor(&self) -> Predictor<'_, T> {
        Predictor { model: &self.model, denoise: self.denoise.as_ref(), store: &self.store }
    }

    fn batch(&mut self, data: &SplitData, idx: &[usize], with_edges: bool) -> (Tensor<T>, Vec<u8>, Option<Vec<u8>>) {
        let n = self.config.model.input_size;
        let mut img = Vec::with_capacity(idx.len() * n * n);
        let mut lab = Vec::with_capacity(idx.len() * n * n);
        let mut edg = Vec::new();
        for &i in idx {
            let mut planes = (data.images[i].clone(), data.labels[i].clone(), data.edges.as_ref().map(|e| e[i].clone()));
            if self.config.augment {
                let flip: bool = self.rng.random();
                let turns: usize = self.rng.random_range(0..4);
                if flip {
                    flip_horizontal(&mut planes.0, n);
                    flip_horizontal(&mut planes.1, n);
                    planes.2.iter_mut().for_each(|e| flip_horizontal(e, n));
                }
                for _ in 0..turns {
                    planes.0 = rotate90(&planes.0, n);
                    planes.1 = rotate90(&planes.1, n);
                    planes.2 = planes.2.map(|e| rotate90(&e, n));
                }
            }
            img.extend(planes.0.iter().map(|&v| T::lit(v as f64)));
            lab.extend(planes.1);
            if let Some(e) = planes.2 {
                edg.extend(e);
            }
        }
        let edges = (with_edges && data.edges.is_some()).then_some(edg);
        (Tensor::new(vec![idx.len(), 1, n, n], img), lab, edges)
    }

    /// One optimizer step. `None` when the loss was not finite and the
    /// update was skipped.
    fn step(&mut self, data: &SplitData, idx: &[usize], lr: f64) -> Result<Option<LossBreakdown>> {
        let epoch = self.progress.epoch;
        let with_edges = self.config.loss.edge_active(epoch);
        let (images, labels, edges) = self.batch(data, idx, with_edges);
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let mut x = tape.constant(images);
        let mut stats = None;
        if let Some(d) = &self.denoise {
            let out = d.forward(&p, x, true)?;
            x = out.image;
            stats = out.stats;
        }
        let logits = self.model.forward(&p, x)?;
        let (loss, br) = total_loss(logits, &labels, edges.as_deref(), &self.config.loss, epoch)?;
        if !br.total.is_finite() {
            self.progress.nan_streak += 1;
            if self.progress.nan_streak >= NAN_PATIENCE {
                return Err(Error::Diverged { epoch, steps: self.progress.nan_streak });
            }
            return Ok(None);
        }
        self.progress.nan_streak = 0;
        let mut grads = tape.backward(loss);
        let g = p.collect(&mut grads);
        drop(p);
        self.optim.step(&mut self.store, g, lr)?;
        if let (Some(d), Some(s)) = (&self.denoise, stats) {
            d.update_running(&mut self.store, s);
        }
        Ok(Some(br))
    }

    fn header(&self, log: &mut Log, resumed: bool) -> Result<()> {
        log.write(json!({
            "kind": "header",
            "phase": self.phase,
            "resumed_at_step": resumed.then_some(self.progress.step),
            "lr": self.config.optimizer.lr,
            "momentum": self.config.optimizer.momentum,
            "weight_decay": self.config.optimizer.weight_decay,
            "batch_size": self.config.batch_size,
            "epochs": self.config.epochs,
            "seed": self.config.seed,
            "precision": self.precision,
            "train_cases": self.train_ids.len(),
            "parameters": self.store.count(),
            "trainable": self.store.count_trainable(),
            "config": self.config,
            "denoise": self.denoise.as_ref().map(|d| &d.config),
        }))
    }

    fn run(&mut self, data: &SplitData, val: &[(String, Vec<f32>, Vec<u8>)], out: &Path, ctl: RunControl, log: &mut Log) -> Result<TrainSummary> {
        let n = data.ids.len();
        let bs = self.config.batch_size;
        let per_epoch = n.div_ceil(bs);
        let total_steps = per_epoch * self.config.epochs;
        let mut summary = TrainSummary {
            phase: self.phase,
            precision: self.precision,
            finished: false,
            epochs_completed: self.progress.epoch,
            steps: self.progress.step,
            best: self.best,
            step_losses: vec![],
            epoch_losses: vec![],
            parameters: self.store.count(),
            trainable: self.store.count_trainable(),
            best_checkpoint: out.join(BEST_CHECKPOINT),
            last_checkpoint: out.join(LAST_CHECKPOINT),
        };
        while self.progress.epoch < self.config.epochs {
            let started = Instant::now();
            if self.progress.order.is_empty() {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut self.rng);
                self.progress.order = order;
            }
            while self.progress.cursor < per_epoch {
                let lo = self.progress.cursor * bs;
                let idx = self.progress.order[lo..(lo + bs).min(n)].to_vec();
                let lr = if self.config.poly_decay {
                    poly_lr(self.config.optimizer.lr, self.progress.step, total_steps)
                } else {
                    self.config.optimizer.lr
                };
                let br = self.step(data, &idx, lr)?;
                self.progress.cursor += 1;
                self.progress.step += 1;
                if let Some(br) = br {
                    let s = &mut self.progress.sums;
                    s.ce += br.ce;
                    s.dice += br.dice;
                    s.edge += br.edge;
                    s.total += br.total;
                    self.progress.finite_steps += 1;
                    summary.step_losses.push(br);
                }
                log.write(json!({
                    "kind": "step",
                    "epoch": self.progress.epoch,
                    "step": self.progress.step,
                    "lr": lr,
                    "loss": br,
                }))?;
                if ctl.stop_after_step == Some(self.progress.step) {
                    self.checkpoint(true).save(&summary.last_checkpoint)?;
                    summary.steps = self.progress.step;
                    return Ok(summary);
                }
            }
            let k = self.progress.finite_steps.max(1) as f64;
            let s = self.progress.sums;
            let mean = LossBreakdown { ce: s.ce / k, dice: s.dice / k, edge: s.edge / k, total: s.total / k };
            let epoch = self.progress.epoch;
            let last = epoch + 1 == self.config.epochs;
            let mut val_record = serde_json::Value::Null;
            if last || (epoch + 1) % self.config.eval_every == 0 {
                let rep = evaluate(&self.predictor(), val, bs, self.config.hd_percentile)?;
                let hd = rep.mean_hd.is_finite().then_some(rep.mean_hd);
                let improved = self.best.is_none_or(|b| rep.mean_dsc > b.val_mean_dsc);
                if improved && rep.mean_dsc.is_finite() {
                    self.best = Some(BestRecord { epoch, val_mean_dsc: rep.mean_dsc, val_mean_hd: hd });
                }
                val_record = json!({
                    "mean_dsc": rep.mean_dsc,
                    "mean_hd": hd,
                    "per_class_dsc": rep.per_class_dsc,
                    "improved": improved,
                });
            }
            self.progress.epoch += 1;
            self.progress.cursor = 0;
            self.progress.order.clear();
            self.progress.sums = LossBreakdown::default();
            self.progress.finite_steps = 0;
            if self.best.is_some_and(|b| b.epoch == epoch) {
                self.checkpoint(false).save(&summary.best_checkpoint)?;
            }
            self.checkpoint(true).save(&summary.last_checkpoint)?;
            log.write(json!({
                "kind": "epoch",
                "epoch": epoch,
                "loss": mean,
                "edge_active": self.config.loss.edge_active(epoch),
                "val": val_record,
                "seconds": started.elapsed().as_secs_f64(),
            }))?;
            summary.epoch_losses.push(mean);
        }
        summary.finished = true;
        summary.epochs_completed = self.progress.epoch;
        summary.steps = self.progress.step;
        summary.best = self.best;
        Ok(summary)
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).at(out)
}

fn run_fresh<T: Scalar>(cfg: &TrainConfig, precision: Precision, ds: &Dataset, out: &Path, ctl: RunControl) -> Result<TrainSummary> {
    let all = ds.case_ids(Split::Train)?;
    let ids = if cfg.data_fraction < 1.0 { subset_fraction(&all, cfg.data_fraction, cfg.seed)? } else { all };
    if ids.is_empty() {
        return Err(Error::EmptySubset { total: 0, fraction: cfg.data_fraction });
    }
    let data = load_train(ds, &ids, cfg)?;
    let val = eval_cases(ds.load_split(Split::Val)?);
    let mut session = Session::<T>::fresh(cfg.clone(), precision, ids)?;
    let mut log = Log::open(out)?;
    session.header(&mut log, false)?;
    session.run(&data, &val, out, ctl, &mut log)
}

/// Trains the segmentation network from scratch. Writes `train.jsonl`,
/// `best.ckpt` (best validation DSC) and `last.ckpt` under `out`.
pub fn train_base(cfg: &TrainConfig, data_root: &Path, out: &Path, ctl: RunControl) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = Dataset::open(data_root)?;
    check_dataset(&ds, &cfg.model)?;
    prepare_out(out)?;
    match cfg.precision.effective() {
        Precision::F32 => run_fresh::<f32>(cfg, Precision::F32, &ds, out, ctl),
        Precision::F64 => run_fresh::<f64>(cfg, Precision::F64, &ds, out, ctl),
    }
}

fn run_resume<T: Scalar>(ck: &Checkpoint, ds: &Dataset, out: &Path, ctl: RunControl) -> Result<TrainSummary> {
    let mut session = Session::<T>::from_checkpoint(ck)?;
    let data = load_train(ds, &session.train_ids, &session.config)?;
    let val = eval_cases(ds.load_split(Split::Val)?);
    let mut log = Log::open(out)?;
    session.header(&mut log, true)?;
    session.run(&data, &val, out, ctl, &mut log)
}

/// Continues a run from a `last.ckpt` of either phase.
pub fn resume(checkpoint: &Path, data_root: &Path, out: &Path, ctl: RunControl) -> Result<TrainSummary> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = Dataset::open(data_root)?;
    check_dataset(&ds, &ck.manifest.config.model)?;
    prepare_out(out)?;
    match ck.manifest.precision {
        Precision::F32 => run_resume::<f32>(&ck, &ds, out, ctl),
        Precision::F64 => run_resume::<f64>(&ck, &ds, out, ctl),
    }
}

/// Whether a parameter stays trainable while the front-end is tuned.
pub fn finetune_trainable(name: &str) -> bool {
    name.starts_with(HEAD_PREFIX) || name.starts_with(&format!("{DENOISE_PREFIX}."))
}

fn run_finetune<T: Scalar>(ft: &FinetuneConfig, base: &Checkpoint, precision: Precision, ds: &Dataset, out: &Path, ctl: RunControl) -> Result<TrainSummary> {
    let bc = &base.manifest.config;
    let mut config = bc.clone();
    config.epochs = ft.epochs;
    config.optimizer = ft.optimizer;
    config.batch_size = ft.batch_size;
    config.eval_every = ft.eval_every;
    config.data_fraction = 1.0;
    // the edge term keeps the state it had when the base run ended
    config.loss.edge_start_epoch = if bc.loss.edge_active(bc.epochs.saturating_sub(1)) { 0 } else { usize::MAX };
    config.validate()?;

    let (model, mut store) = MsUnet::init::<T>(config.model.clone(), config.seed)?;
    base.restore_params(&mut store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let denoise = DenoiseModule::new(ft.denoise.clone(), &mut store, &mut rng)?;
    for id in store.ids().collect::<Vec<_>>() {
        let keep = finetune_trainable(&store.entry(id).name);
        store.set_trainable(id, keep);
    }
    let ids = ds.case_ids(Split::Train)?;
    let data = load_train(ds, &ids, &config)?;
    let val = eval_cases(ds.load_split(Split::Val)?);
    let mut data_rng = ChaCha8Rng::seed_from_u64(ft.seed);
    data_rng.set_stream(3);
    let optim = Sgd::new(config.optimizer, &store);
    let mut session = Session {
        config,
        phase: Phase::DenoiseFt,
        precision,
        model,
        denoise: Some(denoise),
        store,
        optim,
        rng: data_rng,
        progress: Progress::default(),
        best: None,
        train_ids: ids,
    };
    let mut log = Log::open(out)?;
    session.header(&mut log, false)?;
    session.run(&data, &val, out, ctl, &mut log)
}

/// Attaches a fresh denoising front-end to a base checkpoint and trains it
/// together with the projection head; all other parameters stay frozen.
pub fn finetune_denoise(ft: &FinetuneConfig, base_checkpoint: &Path, data_root: &Path, out: &Path, ctl: RunControl) -> Result<TrainSummary> {
    ft.denoise.validate()?;
    let base = Checkpoint::load_phase(base_checkpoint, Phase::Base)?;
    let ds = Dataset::open(data_root)?;
    check_dataset(&ds, &base.manifest.config.model)?;
    prepare_out(out)?;
    let precision = if deterministic_env() { Precision::F64 } else { base.manifest.precision };
    match precision {
        Precision::F32 => run_finetune::<f32>(ft, &base, precision, &ds, out, ctl),
        Precision::F64 => run_finetune::<f64>(ft, &base, precision, &ds, out, ctl),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub split: Split,
    pub percentile: Option<f64>,
    /// Run through the denoising front-end when the checkpoint has one.
    pub use_denoise: bool,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { split: Split::Test, percentile: None, use_denoise: true, batch_size: 8 }
    }
}

fn eval_with<T: Scalar>(ck: &Checkpoint, cases: &[(String, Vec<f32>, Vec<u8>)], opts: &EvalOptions) -> Result<(EvalReport, Vec<Vec<u8>>)> {
    let m = &ck.manifest;
    let (model, denoise, mut store) = build::<T>(&m.config.model, m.config.seed, m.denoise.as_ref())?;
    ck.restore_params(&mut store)?;
    let pred = Predictor { model: &model, denoise: if opts.use_denoise { denoise.as_ref() } else { None }, store: &store };
    let report = evaluate(&pred, cases, opts.batch_size, opts.percentile)?;
    let mut maps = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(opts.batch_size.max(1)) {
        let imgs: Vec<&[f32]> = chunk.iter().map(|c| c.1.as_slice()).collect();
        maps.extend(pred.predict(&imgs)?);
    }
    Ok((report, maps))
}

/// Scores a checkpoint on one split, returning the report and the predicted
/// label map of every case in canonical order.
pub fn evaluate_checkpoint(checkpoint: &Path, data_root: &Path, opts: &EvalOptions) -> Result<(EvalReport, Vec<Case>, Vec<Vec<u8>>)> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = Dataset::open(data_root)?;
    check_dataset(&ds, &ck.manifest.config.model)?;
    let cases = ds.load_split(opts.split)?;
    let triples = eval_cases(cases.clone());
    let precision = if deterministic_env() { Precision::F64 } else { ck.manifest.precision };
    let (report, maps) = match precision {
        Precision::F32 => eval_with::<f32>(&ck, &triples, opts)?,
        Precision::F64 => eval_with::<f64>(&ck, &triples, opts)?,
    };
    Ok((report, cases, maps))
}
