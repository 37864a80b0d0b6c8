//! Minibatch training with Adam, per-epoch loss logging and checkpoints.
//!
//! `fit` writes into its output directory:
//!
//! ```text
//! config.toml   network config
//! loss.csv      epoch,train_loss,val_loss
//! steps.csv     per-step loss breakdown
//! last.ckpt     weights + optimizer state after the last finished epoch
//! best.ckpt     weights with the lowest validation loss so far
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, NamedArray};
use crate::dataset::{batch_inputs, Sample};
use crate::error::{Error, Result};
use crate::grid::{encode_targets, TargetGrid};
use crate::loss::{detection_loss, loss_and_grad, LossBreakdown, LossConfig};
use crate::net::{NetConfig, Network, Preset};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor4;
use crate::autodiff::Tape;

pub const LOSS_CSV: &str = "loss.csv";
pub const STEPS_CSV: &str = "steps.csv";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
const EPOCH_KEY: &str = "train.epoch";

pub fn default_batch_size(preset: Preset) -> usize {
    match preset {
        Preset::Full => 8,
        Preset::Tiny | Preset::Custom => 4,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Drives minibatch shuffling.
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            epochs: 100,
            batch_size: default_batch_size(preset),
            seed: 0,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.adam.validate()?;
        self.loss.validate()
    }
}

/// Grid targets for each sample under `net`'s grid.
pub fn encode_samples(net: &Network, samples: &[&Sample]) -> Result<Vec<TargetGrid>> {
    let spec = net.grid_spec();
    samples.iter().map(|s| encode_targets(&s.boxes, &spec)).collect()
}

/// Owns the network and optimizer state between steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    net: Network,
    adam: Adam,
    loss: LossConfig,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(net: Network, adam: AdamConfig, loss: LossConfig) -> Result<Self> {
        loss.validate()?;
        Ok(Self {
            net,
            adam: Adam::new(adam)?,
            loss,
            epochs_done: 0,
        })
    }

    /// Restores weights, optimizer moments and the epoch counter.
    pub fn resume(config: NetConfig, ckpt: &Checkpoint, adam: AdamConfig, loss: LossConfig) -> Result<Self> {
        let mut net = Network::build(config, 0)?;
        ckpt.restore_network(&mut net)?;
        let names = param_names(&net);
        Ok(Self {
            adam: Adam::read_state(adam, &names, ckpt)?,
            net,
            loss: loss.validated()?,
            epochs_done: ckpt.get(EPOCH_KEY).map_or(0, |a| a.data[0] as usize),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Weights, optimizer state and epoch counter.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_network(&self.net);
        self.adam.write_state(&param_names(&self.net), &mut c);
        c.arrays.push(NamedArray::scalar(EPOCH_KEY, self.epochs_done as f64));
        c
    }

    /// Forward, loss, backward and one Adam update on a batch.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<LossBreakdown> {
        let input = batch_inputs(batch)?;
        let targets = encode_samples(&self.net, batch)?;
        let (breakdown, grads) = {
            let mut tape = Tape::new();
            let x = tape.leaf(input, false)?;
            let (raw, params) = self.net.forward_tape(&mut tape, x)?;
            let (loss, breakdown) = detection_loss(&mut tape, raw, &targets, &self.loss)?;
            tape.backward(loss)?;
            let mut grads = Vec::with_capacity(2 * params.len());
            for (w, b) in params {
                for v in [w, b] {
                    let shape = tape.value(v).shape();
                    grads.push(tape.take_grad(v).unwrap_or_else(|| Tensor4::zeros(shape)));
                }
            }
            (breakdown, grads)
        };
        self.adam.step(self.net.named_tensors_mut(), &grads)?;
        Ok(breakdown)
    }

    /// Mean per-sample loss without updating anything.
    pub fn mean_loss(&self, samples: &[Sample], batch_size: usize) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Usage("cannot compute loss of an empty set".into()));
        }
        let mut total = 0.0;
        for chunk in samples.chunks(batch_size.max(1)) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let raw = self.net.forward(&batch_inputs(&refs)?)?;
            let (b, _) = loss_and_grad(&raw, &encode_samples(&self.net, &refs)?, &self.loss)?;
            total += b.total * chunk.len() as f64;
        }
        Ok(total / samples.len() as f64)
    }
}

fn param_names(net: &Network) -> Vec<String> {
    net.named_tensors().into_iter().map(|(n, _)| n).collect()
}

impl LossConfig {
    fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    pub out_dir: PathBuf,
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Training(_))
}

fn create(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = if append {
        std::fs::OpenOptions::new().append(true).create(true).open(path)
    } else {
        File::create(path)
    };
    f.map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Trains for `cfg.epochs` more epochs. Validation loss falls back to the
/// training loss when `val` is empty. A resumed trainer appends to the
/// existing CSVs.
pub fn fit(
    trainer: &mut Trainer,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    out_dir: &Path,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join(CONFIG_FILE);
    trainer.net.config().save(&config_path)?;

    let resumed = trainer.epochs_done > 0;
    let loss_path = out_dir.join(LOSS_CSV);
    let steps_path = out_dir.join(STEPS_CSV);
    let mut loss_csv = create(&loss_path, resumed)?;
    let mut steps_csv = create(&steps_path, resumed)?;
    if !resumed {
        writeln!(loss_csv, "epoch,train_loss,val_loss").map_err(|e| Error::io(&loss_path, e))?;
        writeln!(steps_csv, "epoch,{}", LossBreakdown::CSV_HEADER).map_err(|e| Error::io(&steps_path, e))?;
    }

    let last = out_dir.join(LAST_CKPT);
    let best = out_dir.join(BEST_CKPT);
    trainer.checkpoint().save(&last)?;

    let mut report = FitReport {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: None,
        best_val_loss: f64::INFINITY,
        out_dir: out_dir.to_path_buf(),
    };
    let mut step = trainer.adam.step_count() as usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        let epoch = trainer.epochs_done + 1;
        let diverged = || Error::Diverged {
            epoch,
            checkpoint: last.clone(),
        };
        // Seeded per epoch so a resumed run sees the same batches.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let b = match trainer.train_step(&batch) {
                Ok(b) => b,
                Err(e) if is_divergence(&e) => return Err(diverged()),
                Err(e) => return Err(e),
            };
            step += 1;
            writeln!(steps_csv, "{epoch},{}", b.csv_row(step)).map_err(|e| Error::io(&steps_path, e))?;
            sum += b.total * batch.len() as f64;
        }
        let train_loss = sum / train.len() as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            match trainer.mean_loss(val, cfg.batch_size) {
                Ok(v) => v,
                Err(e) if is_divergence(&e) => return Err(diverged()),
                Err(e) => return Err(e),
            }
        };
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(diverged());
        }

        trainer.epochs_done = epoch;
        let stats = EpochStats {
            epoch,
            train_loss,
            val_loss,
        };
        writeln!(loss_csv, "{epoch},{train_loss},{val_loss}").map_err(|e| Error::io(&loss_path, e))?;
        loss_csv.flush().map_err(|e| Error::io(&loss_path, e))?;
        let ckpt = trainer.checkpoint();
        ckpt.save(&last)?;
        if val_loss < report.best_val_loss {
            report.best_val_loss = val_loss;
            report.best_epoch = Some(epoch);
            ckpt.save(&best)?;
        }
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    steps_csv.flush().map_err(|e| Error::io(&steps_path, e))?;
    Ok(report)
}

/// Parses `loss.csv` back into epoch stats.
pub fn read_loss_csv(path: &Path) -> Result<Vec<EpochStats>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: msg.into(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(err("expected epoch,train_loss,val_loss"));
        }
        out.push(EpochStats {
            epoch: f[0].parse().map_err(|_| err("bad epoch"))?,
            train_loss: f[1].parse().map_err(|_| err("bad train_loss"))?,
            val_loss: f[2].parse().map_err(|_| err("bad val_loss"))?,
        });
    }
    Ok(out)
}
