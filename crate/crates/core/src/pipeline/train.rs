use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conditions::{check_probs, sample_training_conditions};
use super::dataset::Dataset;
use crate::acnet::{ArchVariant, Checkpoint, ModelConfig};
use crate::anchor::anchored_loss_on_tape;
use crate::error::{Error, Result};
use crate::ndgrad::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::schedule::{q_sample, DenoiseMask, NoiseSchedule, ScheduleConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine decay of the learning rate from `lr` to zero over `max_steps`.
    pub lr_decay: bool,
    pub max_steps: u64,
    /// Probabilities of 0, 1 and 2 conditions per movable object.
    pub cond_probs: [f64; 3],
    /// Shift each training sample by a fresh offset from `[-b, b]^2`.
    pub augment: bool,
    pub augment_bound: f64,
    pub seed: u64,
    pub hard_conditioning: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Steps between checkpoint writes; 0 writes only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            batch_size: 16,
            lr: 1e-4,
            lr_decay: false,
            max_steps: 50_000,
            cond_probs: [0.3, 0.4, 0.3],
            augment: false,
            augment_bound: 1.0,
            seed: 0,
            hard_conditioning: true,
            grad_clip: Some(1.0),
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_probs(self.cond_probs)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        self.model.validate()?;
        NoiseSchedule::from_config(&self.schedule)?;
        Ok(())
    }
}

/// Loss of one optimisation step averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    /// Shift penalty `MSE(x_hat, x_hat_shifted)`; zero without hard conditioning.
    pub term1: f64,
    /// Reconstruction `MSE(x_hat_shifted, x0)`.
    pub term2: f64,
}

/// Loss and gradients of a single training sample.
pub struct SampleGrad {
    pub log: StepLog,
    pub grads: Vec<Tensor<f32>>,
}

fn item_rng(seed: u64, step: u64, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(1 << 20).wrapping_add(item as u64));
    rng
}

struct LossGraph {
    tape: Tape<f32>,
    params: Vec<Var>,
    total: Var,
    log: StepLog,
}

/// Draws `t`, noise and conditions for `x0` and records the anchored loss.
fn loss_graph<R: Rng>(
    ckpt: &Checkpoint,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    x0: &Tensor<f32>,
    rng: &mut R,
    requires_grad: bool,
) -> Result<LossGraph> {
    let mut x0 = x0.clone();
    if cfg.augment {
        let off = super::dataset::draw_offset(rng, cfg.augment_bound);
        for row in x0.data_mut().chunks_exact_mut(crate::FEATURE_DIM) {
            row[0] += off[0] as f32;
            row[1] += off[1] as f32;
        }
    }
    let mask = DenoiseMask::from_trajectory(&x0)?;
    if mask.count() == 0 {
        return Err(Error::Usage("training trajectory has no movable object".into()));
    }
    let t = rng.random_range(1..=sched.steps());
    let eps = Tensor::randn(x0.dims().to_vec(), rng);
    let (cond, cond_input) = sample_training_conditions(&x0, cfg.cond_probs, rng)?;
    let x_t = q_sample(&x0, t, &eps, sched, &mask)?;

    let mut tape = Tape::new();
    let params = ckpt.params.bind(&mut tape, requires_grad);
    let xv = tape.constant(x_t.clone());
    let cv = tape.constant(cond_input);
    let v = ckpt.net.forward(&mut tape, &params, xv, t, Some(cv))?;
    // x0_hat = sqrt(ab) x_t - sqrt(1 - ab) v on masked entries, x_t elsewhere
    let ab = sched.alpha_bar(t);
    let m = tape.constant(mask.tensor().clone());
    let vm = tape.mul(v, m)?;
    let scaled = tape.scale(vm, -(1.0 - ab).sqrt() as f32);
    let mut base = x_t;
    let a = ab.sqrt() as f32;
    for (i, b) in base.data_mut().iter_mut().enumerate() {
        if mask.is_set(i) {
            *b *= a;
        }
    }
    let bv = tape.constant(base);
    let x_hat = tape.add(scaled, bv)?;
    let (total, pen, rec) = anchored_loss_on_tape(&mut tape, x_hat, &x0, &cond, &mask, cfg.hard_conditioning)?;
    let log = StepLog {
        step: 0,
        loss: tape.value(total).item() as f64,
        term1: pen.map_or(0.0, |v| tape.value(v).item() as f64),
        term2: tape.value(rec).item() as f64,
    };
    if !log.loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at diffusion step {t}")));
    }
    Ok(LossGraph {
        tape,
        params,
        total,
        log,
    })
}

/// Draws `t`, noise and conditions for `x0`, runs the model and
/// differentiates the anchored loss.
pub fn sample_gradient<R: Rng>(
    ckpt: &Checkpoint,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    x0: &Tensor<f32>,
    rng: &mut R,
) -> Result<SampleGrad> {
    let LossGraph {
        mut tape,
        params,
        total,
        log,
    } = loss_graph(ckpt, sched, cfg, x0, rng, true)?;
    tape.backward(total)?;
    let grads = params
        .iter()
        .zip(ckpt.params.tensors())
        .map(|(&v, w)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(w.dims().to_vec())))
        .collect();
    Ok(SampleGrad { log, grads })
}

/// The training loss terms for one random draw, without gradients.
pub fn sample_loss<R: Rng>(
    ckpt: &Checkpoint,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    x0: &Tensor<f32>,
    rng: &mut R,
) -> Result<StepLog> {
    Ok(loss_graph(ckpt, sched, cfg, x0, rng, false)?.log)
}

/// Optimiser state and data sampling for one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub ckpt: Checkpoint,
    sched: NoiseSchedule,
    adam: Vec<AdamState>,
    buckets: Vec<((usize, usize), Vec<usize>)>,
    step: u64,
}

impl Trainer {
    /// Fresh model for `data`. A `cnn_only` model is fixed to the dataset's
    /// single object count.
    pub fn new(mut cfg: TrainConfig, data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Usage("training dataset is empty".into()));
        }
        if cfg.model.arch == ArchVariant::CnnOnly {
            match data.meta.objects.as_slice() {
                [o] => {
                    if cfg.model.cnn_objects.is_some_and(|n| n != *o) {
                        return Err(Error::Config(format!("cnn_only model set for {:?} objects, data has {o}", cfg.model.cnn_objects)));
                    }
                    cfg.model.cnn_objects = Some(*o);
                }
                many => {
                    return Err(Error::Config(format!("cnn_only needs a single object count, data has {many:?}")))
                }
            }
        }
        cfg.validate()?;
        let ckpt = Checkpoint::init(cfg.model.clone(), cfg.schedule.clone(), cfg.seed)?;
        Self::with_checkpoint(cfg, ckpt, data)
    }

    /// Continues training from `ckpt` with fresh optimiser moments.
    pub fn with_checkpoint(cfg: TrainConfig, ckpt: Checkpoint, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let stride = ckpt.header.model.stride();
        let buckets = data.buckets();
        if let Some(((_, l), _)) = buckets.iter().find(|((_, l), _)| l % stride != 0) {
            return Err(Error::Shape(format!("trajectory length {l} must be a multiple of {stride}")));
        }
        let adam_cfg = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        let adam = ckpt
            .params
            .tensors()
            .iter()
            .map(|t| AdamState::new(t.dims(), adam_cfg.clone()))
            .collect();
        Ok(Self {
            sched: NoiseSchedule::from_config(&ckpt.header.schedule)?,
            step: ckpt.header.train_steps,
            cfg,
            ckpt,
            adam,
            buckets,
        })
    }

    /// Learning rate applied at (zero-based) step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if !self.cfg.lr_decay || self.cfg.max_steps == 0 {
            return self.cfg.lr;
        }
        let frac = (step as f64 / self.cfg.max_steps as f64).min(1.0);
        0.5 * self.cfg.lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Record indices of the next batch: one `(O, L)` bucket, chosen with
    /// probability proportional to its size, sampled with replacement.
    pub fn next_batch(&self) -> Vec<usize> {
        let mut rng = item_rng(self.cfg.seed ^ 0x5eed, self.step, usize::MAX);
        let total: usize = self.buckets.iter().map(|(_, v)| v.len()).sum();
        let mut pick = rng.random_range(0..total);
        let bucket = self
            .buckets
            .iter()
            .find(|(_, v)| {
                if pick < v.len() {
                    true
                } else {
                    pick -= v.len();
                    false
                }
            })
            .map(|(_, v)| v)
            .expect("non-empty buckets");
        (0..self.cfg.batch_size)
            .map(|_| bucket[rng.random_range(0..bucket.len())])
            .collect()
    }

    /// One optimisation step over a batch drawn from `data`.
    pub fn step(&mut self, data: &Dataset) -> Result<StepLog> {
        let batch = self.next_batch();
        let step = self.step;
        let results: Vec<SampleGrad> = batch
            .par_iter()
            .enumerate()
            .map(|(i, &r)| {
                let mut rng = item_rng(self.cfg.seed, step, i);
                sample_gradient(&self.ckpt, &self.sched, &self.cfg, &data.records[r].x, &mut rng)
            })
            .collect::<Result<_>>()?;
        let n = results.len() as f32;
        let mut grads: Vec<Tensor<f32>> = results[0].grads.clone();
        for r in &results[1..] {
            for (g, h) in grads.iter_mut().zip(&r.grads) {
                for (a, b) in g.data_mut().iter_mut().zip(h.data()) {
                    *a += b;
                }
            }
        }
        let mut norm2 = 0.0f64;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v /= n;
                norm2 += (*v as f64) * (*v as f64);
            }
        }
        let norm = norm2.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at step {step}")));
        }
        if let Some(clip) = self.cfg.grad_clip {
            if norm > clip {
                let s = (clip / norm) as f32;
                grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
            }
        }
        let lr = self.lr_at(step);
        for ((w, g), st) in self.ckpt.params.tensors_mut().iter_mut().zip(&grads).zip(&mut self.adam) {
            st.config.lr = lr;
            adam_step(w, g, st)?;
        }
        self.step += 1;
        self.ckpt.header.train_steps = self.step;
        let mean = |f: fn(&StepLog) -> f64| results.iter().map(|r| f(&r.log)).sum::<f64>() / results.len() as f64;
        let log = StepLog {
            step: self.step,
            loss: mean(|l| l.loss),
            term1: mean(|l| l.term1),
            term2: mean(|l| l.term2),
        };
        if !log.loss.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at step {}", self.step)));
        }
        Ok(log)
    }
}

/// Path of the loss log written next to a checkpoint.
pub fn loss_log_path(ckpt: &Path) -> std::path::PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".loss.csv");
    s.into()
}

/// Trains for `cfg.max_steps` steps. With `out`, writes the checkpoint
/// periodically and at the end, plus a `step,loss,term1,term2` CSV.
pub fn train(cfg: TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<(Checkpoint, Vec<StepLog>)> {
    let mut trainer = Trainer::new(cfg, data)?;
    let logs = run(&mut trainer, data, out)?;
    Ok((trainer.ckpt, logs))
}

/// Runs `trainer` up to its configured step count.
pub fn run(trainer: &mut Trainer, data: &Dataset, out: Option<&Path>) -> Result<Vec<StepLog>> {
    let mut logs = Vec::new();
    let mut csv = match out {
        Some(p) => {
            let path = loss_log_path(p);
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = std::io::BufWriter::new(f);
            writeln!(w, "step,loss,term1,term2").map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };
    let every = trainer.cfg.checkpoint_every;
    let started = std::time::Instant::now();
    while trainer.steps_done() < trainer.cfg.max_steps {
        let log = trainer.step(data)?;
        if let Some((w, path)) = csv.as_mut() {
            writeln!(w, "{},{},{},{}", log.step, log.loss, log.term1, log.term2).map_err(|e| Error::io(path.clone(), e))?;
        }
        if log.step % 100 == 0 || log.step == 1 {
            log::info!(
                "step {} loss {:.5} (shift {:.5}, rec {:.5}) {:.1}s",
                log.step,
                log.loss,
                log.term1,
                log.term2,
                started.elapsed().as_secs_f64()
            );
        }
        logs.push(log);
        if let Some(p) = out {
            if every > 0 && log.step % every == 0 {
                trainer.ckpt.save(p)?;
                if let Some((w, path)) = csv.as_mut() {
                    w.flush().map_err(|e| Error::io(path.clone(), e))?;
                }
            }
        }
    }
    if let Some(p) = out {
        trainer.ckpt.save(p)?;
    }
    if let Some((w, path)) = csv.as_mut() {
        w.flush().map_err(|e| Error::io(path.clone(), e))?;
    }
    Ok(logs)
}
