//! Momentum SGD over bags.
//!
//! Four objectives share the loop:
//! - `weighted_mil`: the weighted bag likelihood over generated bags
//! - `unweighted_mil`: the same bags with uniform positive weights
//! - `region_supervised`: per-region cross-entropy, a region being positive
//!   when its degree of interest exceeds one half
//! - `whole_image`: a single full-frame region per image
//!
//! Every random choice is seeded from the config seed, the epoch and the image
//! id, and per-bag gradients are reduced in batch order, so a run is
//! reproducible regardless of thread count.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::baggen::{
    generate_negative_bag, generate_positive_bag, subsample_bag, whole_image_bag, with_uniform_weights, Bag, BagSpec,
    Label,
};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::imaging::{crop_resize, Image};
use crate::infer::{region_scores, DEFAULT_THRESHOLD};
use crate::milloss::{bag_loss, log_sigmoid};
use crate::model::{
    self, encode_params, read_params, Architecture, ByteReader, ModelParams, ParamGradients, DEFAULT_CHANNELS,
    DEFAULT_INPUT_SIZE,
};
use crate::seeds;
use crate::synthdata::{Corpus, ManifestEntry};

pub const STATE_MAGIC: &[u8; 8] = b"WMILSTAT";
pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    WeightedMil,
    UnweightedMil,
    RegionSupervised,
    WholeImage,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::WeightedMil,
        Mode::UnweightedMil,
        Mode::RegionSupervised,
        Mode::WholeImage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::WeightedMil => "weighted_mil",
            Mode::UnweightedMil => "unweighted_mil",
            Mode::RegionSupervised => "region_supervised",
            Mode::WholeImage => "whole_image",
        }
    }

    fn needs_annotations(self) -> bool {
        self != Mode::WholeImage
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_bags: usize,
    /// Regions kept per bag per step; `None` uses whole bags.
    pub subsample_k: Option<usize>,
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub seed: u64,
    /// Epochs between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Fraction of each class held out for validation.
    pub val_fraction: f64,
    /// Decision threshold for the validation detection rate.
    pub threshold: f64,
    pub bag: BagSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::WeightedMil,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_bags: 8,
            subsample_k: None,
            input_size: DEFAULT_INPUT_SIZE,
            channels: DEFAULT_CHANNELS.to_vec(),
            seed: 0,
            checkpoint_every: 0,
            val_fraction: 0.1,
            threshold: DEFAULT_THRESHOLD,
            bag: BagSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_bags == 0 {
            return bad("batch_bags must be at least 1".into());
        }
        if matches!(self.subsample_k, Some(k) if k < 2) {
            return bad("subsample_k must be at least 2".into());
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 0.5)", self.val_fraction));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        self.architecture()?;
        self.bag.validate()
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::with_channels(self.input_size, self.channels.clone())
    }

    /// Reads every trainer and bag key from `config`; unknown keys are errors.
    pub fn from_config(mut config: Config) -> Result<Self> {
        let mut c = TrainConfig::default();
        if let Some(v) = config.take::<String>("mode")? {
            c.mode = v.parse()?;
        }
        if let Some(v) = config.take("learning_rate")? {
            c.learning_rate = v;
        }
        if let Some(v) = config.take("momentum")? {
            c.momentum = v;
        }
        if let Some(v) = config.take("epochs")? {
            c.epochs = v;
        }
        if let Some(v) = config.take("batch_bags")? {
            c.batch_bags = v;
        }
        if let Some(v) = config.take::<String>("subsample_k")? {
            c.subsample_k = match v.as_str() {
                "none" | "" => None,
                n => Some(
                    n.parse()
                        .map_err(|e| Error::InvalidArgument(format!("subsample_k: {e}")))?,
                ),
            };
        }
        if let Some(v) = config.take("input_size")? {
            c.input_size = v;
        }
        if let Some(v) = config.take_list("channels")? {
            c.channels = v;
        }
        if let Some(v) = config.take("seed")? {
            c.seed = v;
        }
        if let Some(v) = config.take("checkpoint_every")? {
            c.checkpoint_every = v;
        }
        if let Some(v) = config.take("val_fraction")? {
            c.val_fraction = v;
        }
        if let Some(v) = config.take("threshold")? {
            c.threshold = v;
        }
        if let Some(v) = config.take_list("scale_factors")? {
            c.bag.scale_factors = v;
        }
        if let Some(v) = config.take("regions_per_positive")? {
            c.bag.regions_per_positive = v;
        }
        if let Some(v) = config.take("displacement")? {
            c.bag.displacement = v;
        }
        if let Some(v) = config.take("bag_seed")? {
            c.bag.rng_seed = v;
        }
        config.finish()?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_detection_rate: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,val_detection_rate,wall_seconds\n");
        for r in &self.records {
            let val = r.val_detection_rate.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{:.3}\n", r.epoch, r.mean_loss, val, r.wall_seconds));
        }
        out
    }

    /// Equality ignoring wall-clock time.
    pub fn same_run(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.mean_loss.to_bits() == b.mean_loss.to_bits()
                    && a.val_detection_rate.map(f64::to_bits) == b.val_detection_rate.map(f64::to_bits)
            })
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub params: ModelParams,
    pub velocity: Vec<f64>,
    pub log: TrainLog,
}

impl TrainState {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.epochs_done as u64).to_le_bytes());
        out.extend_from_slice(&encode_params(&self.params));
        out.extend_from_slice(&(self.velocity.len() as u64).to_le_bytes());
        for v in &self.velocity {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.log.records.len() as u64).to_le_bytes());
        for r in &self.log.records {
            out.extend_from_slice(&(r.epoch as u64).to_le_bytes());
            out.extend_from_slice(&r.mean_loss.to_le_bytes());
            out.push(u8::from(r.val_detection_rate.is_some()));
            out.extend_from_slice(&r.val_detection_rate.unwrap_or(0.0).to_le_bytes());
            out.extend_from_slice(&r.wall_seconds.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "training state");
        if r.take(8)? != STATE_MAGIC {
            return Err(Error::Checkpoint("bad training-state magic".into()));
        }
        let version = r.u32()?;
        if version != STATE_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported training-state version {version}"
            )));
        }
        let epochs_done = r.u64()? as usize;
        let params = read_params(&mut r)?;
        let n = r.u64()?;
        if n != params.len() as u64 {
            return Err(Error::Checkpoint(format!(
                "velocity has {n} entries for {} parameters",
                params.len()
            )));
        }
        let velocity = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if velocity.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite velocity".into()));
        }
        let n_records = r.u64()?;
        // each record is 33 bytes
        if n_records > (r.remaining() / 33) as u64 {
            return Err(Error::Checkpoint("truncated training log".into()));
        }
        let mut records = Vec::with_capacity(n_records as usize);
        for _ in 0..n_records {
            let epoch = r.u64()? as usize;
            let mean_loss = r.f64()?;
            let has_val = r.take(1)?[0];
            let val = r.f64()?;
            let wall_seconds = r.f64()?;
            let val_detection_rate = match has_val {
                0 if val.to_bits() == 0 => None,
                1 => Some(val),
                b => return Err(Error::Checkpoint(format!("bad validation entry {b}/{val}"))),
            };
            if ![mean_loss, val, wall_seconds].iter().all(|v| v.is_finite()) {
                return Err(Error::Checkpoint("non-finite log entry".into()));
            }
            records.push(EpochRecord {
                epoch,
                mean_loss,
                val_detection_rate,
                wall_seconds,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        if records.len() != epochs_done {
            return Err(Error::Checkpoint(format!(
                "{} log records for {epochs_done} epochs",
                records.len()
            )));
        }
        Ok(TrainState {
            epochs_done,
            params,
            velocity,
            log: TrainLog { records },
        })
    }
}

/// Seeded per-class holdout: the images with the smallest id hashes.
///
/// Returns `(train, validation)` index lists in corpus order. A class never
/// loses its last training image.
pub fn validation_split(entries: &[ManifestEntry], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut held = vec![false; entries.len()];
    for class in [Label::Positive, Label::Negative] {
        let mut members: Vec<(u64, usize)> = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == class)
            .map(|(i, e)| (seeds::derive(seed, &[seeds::hash_id(&e.id)]), i))
            .collect();
        members.sort_unstable();
        let take = ((fraction * members.len() as f64).round() as usize).min(members.len().saturating_sub(1));
        for &(_, i) in &members[..take] {
            held[i] = true;
        }
    }
    let train = (0..entries.len()).filter(|&i| !held[i]).collect();
    let val = (0..entries.len()).filter(|&i| held[i]).collect();
    (train, val)
}

/// Regions of one image with their per-region training targets.
struct Example {
    bag: Bag,
    /// Region labels for the region-supervised objective.
    targets: Vec<f64>,
}

fn build_example(entry: &ManifestEntry, img: &Image, config: &TrainConfig, epoch: usize) -> Result<Example> {
    let frame = (img.width(), img.height());
    let id_hash = seeds::hash_id(&entry.id);
    let bag = match (config.mode, entry.label) {
        (Mode::WholeImage, label) => whole_image_bag(&entry.id, frame, label),
        (_, Label::Negative) => generate_negative_bag(&entry.id, frame),
        (mode, Label::Positive) => {
            if entry.boxes.is_empty() {
                return Err(Error::Dataset(format!(
                    "positive image {} has no annotations; {mode} needs them",
                    entry.id
                )));
            }
            let spec = BagSpec {
                rng_seed: seeds::derive(config.bag.rng_seed, &[config.seed, epoch as u64]),
                ..config.bag.clone()
            };
            let bag = generate_positive_bag(&entry.id, frame, &entry.boxes, &spec)?;
            if mode == Mode::UnweightedMil {
                with_uniform_weights(&bag)
            } else {
                bag
            }
        }
    };
    let bag = match config.subsample_k {
        Some(k) => subsample_bag(&bag, k, seeds::derive(config.seed, &[epoch as u64, id_hash, 1]))?,
        None => bag,
    };
    let targets = bag.degrees().iter().map(|&d| if d > 0.5 { 1.0 } else { 0.0 }).collect();
    Ok(Example { bag, targets })
}

/// Loss of one image and its parameter gradient.
fn example_gradient(
    params: &ModelParams,
    entry: &ManifestEntry,
    img: &Image,
    config: &TrainConfig,
    epoch: usize,
) -> Result<(f64, ParamGradients)> {
    let ex = build_example(entry, img, config, epoch)?;
    let size = params.architecture().input_size;
    let mut outputs = Vec::with_capacity(ex.bag.len());
    let mut caches = Vec::with_capacity(ex.bag.len());
    for region in ex.bag.regions() {
        let (out, cache) = model::forward(params, &crop_resize(img, region, size, size)?)?;
        outputs.push(out);
        caches.push(cache);
    }
    let (loss, grad_h) = match config.mode {
        Mode::RegionSupervised => {
            let n = outputs.len() as f64;
            let loss = outputs
                .iter()
                .zip(&ex.targets)
                .map(|(o, &y)| -(y * log_sigmoid(o.h) + (1.0 - y) * log_sigmoid(-o.h)))
                .sum::<f64>()
                / n;
            let grad = outputs
                .iter()
                .zip(&ex.targets)
                .map(|(o, &y)| (o.p_pos - y) / n)
                .collect();
            (loss, grad)
        }
        _ => {
            let r = bag_loss(&outputs, ex.bag.weights())?;
            (r.loss, r.grad_h)
        }
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss on image {} at epoch {epoch}", entry.id)));
    }
    let mut grads = ParamGradients::zeros_like(params);
    for (cache, g) in caches.iter().zip(grad_h) {
        model::backward_into(params, cache, g, &mut grads)?;
    }
    Ok((loss, grads))
}

fn check_corpus(corpus: &Corpus, train: &[usize], mode: Mode) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Dataset("training corpus is empty".into()));
    }
    if mode.needs_annotations()
        && mode != Mode::RegionSupervised
        && !train.iter().any(|&i| corpus.entries()[i].label.is_positive())
    {
        return Err(Error::Dataset(format!("{mode} needs at least one positive image")));
    }
    Ok(())
}

fn validation_rate(params: &ModelParams, corpus: &Corpus, val: &[usize], threshold: f64) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let correct = val
        .par_iter()
        .map(|&i| {
            let (entry, img) = corpus.get(i);
            let best = region_scores(params, img)?.into_iter().fold(0.0, f64::max);
            Ok(usize::from((best >= threshold) == entry.label.is_positive()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(correct.iter().sum::<usize>() as f64 / val.len() as f64))
}

/// Trains from scratch.
pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    let state = train_resumable(corpus, config, None, |_| Ok(()))?;
    Ok((state.params, state.log))
}

/// Trains from `resume` (or from a fresh initialisation) up to
/// `config.epochs`, calling `on_checkpoint` every `config.checkpoint_every`
/// epochs.
pub fn train_resumable(
    corpus: &Corpus,
    config: &TrainConfig,
    resume: Option<TrainState>,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    config.validate()?;
    let arch = config.architecture()?;
    let (train_idx, val_idx) = validation_split(corpus.entries(), config.val_fraction, config.seed);
    check_corpus(corpus, &train_idx, config.mode)?;

    let mut state = match resume {
        Some(s) => {
            if s.params.architecture() != &arch {
                return Err(Error::Checkpoint("resumed state has a different architecture".into()));
            }
            if s.epochs_done > config.epochs {
                return Err(Error::InvalidArgument(format!(
                    "state already has {} epochs, config asks for {}",
                    s.epochs_done, config.epochs
                )));
            }
            s
        }
        None => {
            let params = ModelParams::init(arch, seeds::derive(config.seed, &[0x1417]));
            let n = params.len();
            TrainState {
                epochs_done: 0,
                params,
                velocity: vec![0.0; n],
                log: TrainLog::default(),
            }
        }
    };

    while state.epochs_done < config.epochs {
        let epoch = state.epochs_done;
        let started = Instant::now();
        let mut order = train_idx.clone();
        order.shuffle(&mut seeds::rng(seeds::derive(config.seed, &[epoch as u64, 0x5eed])));

        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_bags) {
            let params = &state.params;
            let results = batch
                .par_iter()
                .map(|&i| {
                    let (entry, img) = corpus.get(i);
                    example_gradient(params, entry, img, config, epoch)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grad = ParamGradients::zeros_like(params);
            for (loss, g) in &results {
                loss_sum += loss;
                grad.add_assign(g);
            }
            grad.scale(1.0 / batch.len() as f64);
            if !grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient at epoch {epoch}")));
            }
            for (v, g) in state.velocity.iter_mut().zip(grad.as_slice()) {
                *v = config.momentum * *v - config.learning_rate * g;
            }
            let velocity = &state.velocity;
            state.params.update(|w| {
                for (w, v) in w.iter_mut().zip(velocity) {
                    *w += v;
                }
            })?;
        }

        let val_detection_rate = validation_rate(&state.params, corpus, &val_idx, config.threshold)?;
        state.epochs_done += 1;
        state.log.records.push(EpochRecord {
            epoch: state.epochs_done,
            mean_loss: loss_sum / order.len() as f64,
            val_detection_rate,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if config.checkpoint_every > 0 && state.epochs_done % config.checkpoint_every == 0 {
            on_checkpoint(&state)?;
        }
    }
    Ok(state)
}
