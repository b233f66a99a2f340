//! Epoch loop: AdamW updates, plateau learning-rate decay, early stopping,
//! best-model tracking and loss logs.

mod infer;

pub use infer::{infer_scene, DEFAULT_MARGIN};

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::{AdamWConfig, AdamWState, Scalar, Tape};
use crate::error::{io_at, Error, Result};
use crate::nets::{save_checkpoint, Checkpoint, Network, NetworkSpec, PrngState, TrainProgress};
use crate::patchset::{assemble, batches, Patch, SplitPlan, Which};

/// Relative improvement a validation loss needs over the best so far.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub max_epochs: u64,
    pub plateau_factor: f64,
    pub plateau_patience: u64,
    pub stop_patience: u64,
    pub split_seed: u64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 16,
            patch_size: 512,
            max_epochs: 500,
            plateau_factor: 0.5,
            plateau_patience: 20,
            stop_patience: 50,
            split_seed: 0,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        if self.plateau_patience < 1 || self.stop_patience < 1 {
            return bad("patiences must be >= 1".into());
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size < 1 {
            return bad("batch size must be >= 1".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Strict improvement with relative tolerance.
pub fn improves(value: f64, best: f64, threshold: f64) -> bool {
    value < best * (1.0 - threshold)
}

/// Multiplies the learning rate by `factor` once more than `patience`
/// consecutive epochs pass without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: u64,
    pub threshold: f64,
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: u64,
    pub events: u64,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: u64) -> Self {
        PlateauScheduler {
            factor,
            patience,
            threshold: IMPROVEMENT_THRESHOLD,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
            events: 0,
        }
    }

    /// Returns true when this observation cut the learning rate.
    pub fn observe(&mut self, val: f64) -> bool {
        if improves(val, self.best, self.threshold) {
            self.best = val;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.lr *= self.factor;
            self.events += 1;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

/// Signals a stop after `patience` epochs without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: u64,
    pub threshold: f64,
    pub best: f64,
    pub best_epoch: u64,
    pub bad_epochs: u64,
}

impl EarlyStopper {
    pub fn new(patience: u64) -> Self {
        EarlyStopper {
            patience,
            threshold: IMPROVEMENT_THRESHOLD,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Returns `(is_new_best, should_stop)`.
    pub fn observe(&mut self, epoch: u64, val: f64) -> (bool, bool) {
        if improves(val, self.best, self.threshold) {
            self.best = val;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            return (true, false);
        }
        self.bad_epochs += 1;
        (false, self.bad_epochs >= self.patience)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    /// Pixel-pooled masked MSE over the epoch's training batches (m²).
    pub train_loss: f64,
    /// Pixel-pooled masked MSE over the validation split (m²).
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub is_best: bool,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_loss,lr,is_best";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{}",
            self.epoch, self.train_loss, self.val_loss, self.lr, self.is_best as u8
        )
    }

    pub fn parse_row(line: &str) -> Result<EpochLog> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Parse(format!("epoch log row {line:?}"));
        if f.len() != 5 {
            return Err(bad());
        }
        Ok(EpochLog {
            epoch: f[0].parse().map_err(|_| bad())?,
            train_loss: f[1].parse().map_err(|_| bad())?,
            val_loss: f[2].parse().map_err(|_| bad())?,
            lr: f[3].parse().map_err(|_| bad())?,
            is_best: match f[4] {
                "1" => true,
                "0" => false,
                _ => return Err(bad()),
            },
        })
    }
}

pub fn logs_to_csv(logs: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for l in logs {
        writeln!(s, "{}", l.csv_row()).unwrap();
    }
    s
}

pub fn logs_from_csv(text: &str) -> Result<Vec<EpochLog>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(LOG_HEADER) {
        return Err(Error::Parse("epoch log header missing".into()));
    }
    lines.filter(|l| !l.trim().is_empty()).map(EpochLog::parse_row).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    /// Caller-imposed epoch budget for this session; training may be resumed.
    Paused,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub best: Checkpoint<T>,
    pub last: Checkpoint<T>,
    pub logs: Vec<EpochLog>,
    pub stop: StopReason,
}

/// Where a run streams its artifacts: `epochs.csv`, `best.ckpt`, `last.ckpt`.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    pub fn best_path(dir: &Path) -> PathBuf {
        dir.join("best.ckpt")
    }
    pub fn last_path(dir: &Path) -> PathBuf {
        dir.join("last.ckpt")
    }
    pub fn log_path(dir: &Path) -> PathBuf {
        dir.join("epochs.csv")
    }
}

/// Seed for the training shuffle of a 1-based epoch.
pub fn epoch_seed(base: u64, epoch: u64) -> u64 {
    base ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Mean and population standard deviation of masked-in training targets.
pub fn target_moments(patches: &[Patch], indices: &[usize]) -> Result<(f64, f64)> {
    let (mut n, mut mean, mut m2) = (0u64, 0.0f64, 0.0f64);
    for &i in indices {
        let p = &patches[i];
        for (&t, &m) in p.target.iter().zip(&p.mask) {
            if m {
                n += 1;
                let d = t as f64 - mean;
                mean += d / n as f64;
                m2 += d * (t as f64 - mean);
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let sd = (m2 / n as f64).sqrt();
    Ok((mean, if sd > 0.0 { sd } else { 1.0 }))
}

/// Pooled mean and standard deviation of all input samples of the given patches.
pub fn input_moments(patches: &[Patch], indices: &[usize]) -> (f64, f64) {
    let (mut n, mut sum, mut sq) = (0u64, 0.0f64, 0.0f64);
    for &i in indices {
        for &v in &patches[i].input {
            n += 1;
            sum += v as f64;
            sq += (v as f64) * (v as f64);
        }
    }
    let mean = sum / n.max(1) as f64;
    let sd = (sq / n.max(1) as f64 - mean * mean).max(0.0).sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

pub struct Trainer<'a, T: Scalar> {
    cfg: TrainConfig,
    patches: &'a [Patch],
    plan: &'a SplitPlan,
    network: Network<T>,
    optimizer: AdamWState<T>,
    scheduler: PlateauScheduler,
    stopper: EarlyStopper,
    epoch: u64,
    best: Checkpoint<T>,
    logs: Vec<EpochLog>,
}

fn check_split(plan: &SplitPlan, patches: &[Patch]) -> Result<()> {
    if plan.train.is_empty() || plan.val.is_empty() {
        return Err(Error::InsufficientData("training needs non-empty train and validation splits".into()));
    }
    if let Some(&i) = plan.train.iter().chain(&plan.val).find(|&&i| i >= patches.len()) {
        return Err(Error::InvalidArgument(format!("split references patch {i} of {}", patches.len())));
    }
    Ok(())
}

impl<'a, T: Scalar> Trainer<'a, T> {
    /// Fresh run. The output affine is set from training-target moments, so
    /// the network regresses standardized heights.
    pub fn new(cfg: TrainConfig, spec: &NetworkSpec, patches: &'a [Patch], plan: &'a SplitPlan) -> Result<Self> {
        cfg.validate()?;
        check_split(plan, patches)?;
        let mut network = Network::<T>::build(spec)?;
        let (mean, sd) = target_moments(patches, &plan.train)?;
        network.output_shift = mean;
        network.output_scale = sd;
        let (imean, isd) = input_moments(patches, &plan.train);
        network.input_scale = 1.0 / isd;
        network.input_shift = -imean / isd;
        let optimizer = AdamWState::new(network.params());
        let best = Checkpoint {
            network: network.clone(),
            optimizer: optimizer.clone(),
            prng: PrngState {
                seed: cfg.shuffle_seed,
                epochs_drawn: 0,
            },
            progress: TrainProgress {
                lr: cfg.lr,
                ..TrainProgress::default()
            },
        };
        Ok(Trainer {
            scheduler: PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience),
            stopper: EarlyStopper::new(cfg.stop_patience),
            cfg,
            patches,
            plan,
            network,
            optimizer,
            epoch: 0,
            best,
            logs: Vec::new(),
        })
    }

    /// Continue from the last checkpoint of an interrupted run.
    pub fn resume(
        cfg: TrainConfig,
        last: Checkpoint<T>,
        best: Checkpoint<T>,
        logs: Vec<EpochLog>,
        patches: &'a [Patch],
        plan: &'a SplitPlan,
    ) -> Result<Self> {
        cfg.validate()?;
        check_split(plan, patches)?;
        let p = last.progress;
        if logs.len() as u64 != p.epoch {
            return Err(Error::InvalidArgument(format!(
                "checkpoint is at epoch {} but {} log rows were supplied",
                p.epoch,
                logs.len()
            )));
        }
        let mut scheduler = PlateauScheduler::new(p.lr, cfg.plateau_factor, cfg.plateau_patience);
        scheduler.best = p.best_val_loss;
        scheduler.bad_epochs = p.plateau_bad_epochs;
        scheduler.events = p.plateau_events;
        let mut stopper = EarlyStopper::new(cfg.stop_patience);
        stopper.best = p.best_val_loss;
        stopper.best_epoch = p.best_epoch;
        stopper.bad_epochs = p.stop_bad_epochs;
        Ok(Trainer {
            cfg,
            patches,
            plan,
            network: last.network,
            optimizer: last.optimizer,
            scheduler,
            stopper,
            epoch: p.epoch,
            best,
            logs,
        })
    }

    fn progress(&self) -> TrainProgress {
        TrainProgress {
            epoch: self.epoch,
            best_epoch: self.stopper.best_epoch,
            best_val_loss: self.stopper.best,
            lr: self.scheduler.lr,
            plateau_bad_epochs: self.scheduler.bad_epochs,
            plateau_events: self.scheduler.events,
            stop_bad_epochs: self.stopper.bad_epochs,
        }
    }

    fn snapshot(&self) -> Checkpoint<T> {
        Checkpoint {
            network: self.network.clone(),
            optimizer: self.optimizer.clone(),
            prng: PrngState {
                seed: self.cfg.shuffle_seed,
                epochs_drawn: self.epoch,
            },
            progress: self.progress(),
        }
    }

    pub fn network(&self) -> &Network<T> {
        &self.network
    }

    pub fn logs(&self) -> &[EpochLog] {
        &self.logs
    }

    fn is_finished(&self) -> Option<StopReason> {
        if self.epoch >= self.cfg.max_epochs {
            return Some(StopReason::MaxEpochs);
        }
        if self.epoch > 0 && self.stopper.bad_epochs >= self.stopper.patience {
            return Some(StopReason::EarlyStop);
        }
        None
    }

    /// Pixel-pooled masked MSE of the current network over a split, without gradients.
    pub fn evaluate(&self, which: Which) -> Result<f64> {
        let (mut sse, mut count) = (0.0f64, 0usize);
        for idx in batches(self.plan, which, self.cfg.batch_size, 0)? {
            let batch = assemble::<T>(self.patches, &idx, f64::from)?;
            if !batch.mask.iter().any(|&m| m) {
                continue;
            }
            let mut tape = Tape::no_grad();
            let x = tape.constant(batch.input);
            let (y, _) = self.network.forward(&mut tape, x)?;
            let loss = tape.mse_loss(y, &batch.target, &batch.mask)?;
            let (s, n) = tape.mse_parts(loss).expect("mse node records its parts");
            sse += s;
            count += n;
        }
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(sse / count as f64)
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.epoch + 1;
        let lr = self.scheduler.lr;
        let adamw = self.cfg.adamw();
        let (mut sse, mut count) = (0.0f64, 0usize);
        let order = batches(self.plan, Which::Train, self.cfg.batch_size, epoch_seed(self.cfg.shuffle_seed, epoch))?;
        for (b, idx) in order.iter().enumerate() {
            let batch = assemble::<T>(self.patches, idx, f64::from)?;
            if !batch.mask.iter().any(|&m| m) {
                continue;
            }
            let mut tape = Tape::new();
            let x = tape.constant(batch.input);
            let (y, params) = self.network.forward(&mut tape, x)?;
            let loss = tape.mse_loss(y, &batch.target, &batch.mask)?;
            let (s, n) = tape.mse_parts(loss).expect("mse node records its parts");
            if !s.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch as usize,
                    detail: format!("non-finite training loss in batch {b}"),
                });
            }
            sse += s;
            count += n;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Vec<T>> = params
                .iter()
                .zip(self.network.params())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![T::zero(); p.numel()]))
                .collect();
            self.optimizer
                .step(&adamw, lr, self.network.params_mut(), &g)
                .map_err(|e| Error::Diverged {
                    epoch: epoch as usize,
                    detail: format!("batch {b}: {e}"),
                })?;
        }
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let val = self.evaluate(Which::Val)?;
        if !val.is_finite() {
            return Err(Error::Diverged {
                epoch: epoch as usize,
                detail: "non-finite validation loss".into(),
            });
        }
        self.epoch = epoch;
        let (is_best, _) = self.stopper.observe(epoch, val);
        self.scheduler.observe(val);
        let log = EpochLog {
            epoch,
            train_loss: sse / count as f64,
            val_loss: val,
            lr,
            is_best,
        };
        self.logs.push(log);
        if is_best {
            self.best = self.snapshot();
        }
        log::info!(
            "epoch {epoch} train {:.4} val {:.4} lr {lr:e}{}",
            log.train_loss,
            val,
            if is_best { " *" } else { "" }
        );
        Ok(log)
    }

    /// Trains until early stop, `max_epochs`, or `budget` more epochs in this session.
    pub fn run(mut self, budget: Option<u64>, out: &RunOutput) -> Result<TrainOutcome<T>> {
        let mut log_file = match &out.dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(io_at(dir))?;
                let path = RunOutput::log_path(dir);
                let mut f = fs::File::create(&path).map_err(io_at(&path))?;
                f.write_all(logs_to_csv(&self.logs).as_bytes()).map_err(io_at(&path))?;
                Some((f, path))
            }
            None => None,
        };
        let start = self.epoch;
        let stop = loop {
            if let Some(reason) = self.is_finished() {
                break reason;
            }
            if budget.is_some_and(|b| self.epoch - start >= b) {
                break StopReason::Paused;
            }
            let log = self.run_epoch()?;
            if let (Some((f, path)), Some(dir)) = (log_file.as_mut(), out.dir.as_ref()) {
                writeln!(f, "{}", log.csv_row()).map_err(io_at(&*path))?;
                if log.is_best {
                    save_checkpoint(&self.best, RunOutput::best_path(dir))?;
                }
                save_checkpoint(&self.snapshot(), RunOutput::last_path(dir))?;
            }
        };
        let last = self.snapshot();
        Ok(TrainOutcome {
            best: self.best,
            last,
            logs: self.logs,
            stop,
        })
    }
}
