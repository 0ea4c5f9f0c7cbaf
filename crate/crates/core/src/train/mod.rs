//! Training: objective, optimizer, schedules, synthetic data, metrics and
//! the ablation harness.

pub mod ablation;
pub mod font;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod schedule;
pub mod synth;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::decoder::{LabelSequence, Recognition};
use crate::error::{Error, Result};
use crate::model::OtsNet;
use crate::param::mix;
use crate::thinking::{GumbelNoise, QuantizeStage, TemperatureSchedule};

pub use loss::{loss_total, LossParts, LossValues};
pub use metrics::{char_similarity, edit_distance, Metrics};
pub use optim::{clip_grad_norm, grad_norm, AdamW, AdamWConfig};
pub use schedule::LrSchedule;
pub use synth::{render_plain, stack_images, synth_generate, SynthSpec, SyntheticSample};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the quantizer loss.
    pub alpha: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
    pub seed: u64,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.3,
            batch_size: 32,
            lr: 5e-4,
            weight_decay: 0.05,
            warmup_frac: 0.075,
            epochs: 30,
            seed: 0,
            tau_start: 1.0,
            tau_end: 0.5,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let key = |key: &str, reason: &str| Err(Error::ConfigKey { key: key.into(), reason: reason.into() });
        if !(self.alpha >= 0.0) {
            return key("alpha", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return key("warmup_frac", "must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return key("batch_size", "must be at least 1");
        }
        if !(self.lr > 0.0) {
            return key("lr", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return key("weight_decay", "must be non-negative");
        }
        if !(self.clip_norm >= 0.0) {
            return key("clip_norm", "must be non-negative");
        }
        if !(self.tau_start >= self.tau_end && self.tau_end > 0.0) {
            return key("tau_end", "need tau_start >= tau_end > 0");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossValues,
    pub tau: f64,
}

impl StepLog {
    pub const HEADER: &'static str = "step,epoch,lr,l_vq,l_sq,total,tau";
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // round-trip formatting keeps logs comparable bit for bit
        write!(
            f,
            "{},{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.epoch, self.lr, self.loss.vq, self.loss.sq, self.loss.total, self.tau
        )
    }
}

/// Batch images and labels for a set of samples.
pub fn batch_of(samples: &[&SyntheticSample]) -> Result<(crate::tensor::Tensor, Vec<LabelSequence>)> {
    let images = stack_images(samples.iter().map(|s| &s.image))?;
    Ok((images, samples.iter().map(|s| s.label()).collect()))
}

/// Minibatch AdamW training over `data`.
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub lr: LrSchedule,
    pub tau: TemperatureSchedule,
    pub step: usize,
    steps_per_epoch: usize,
}

impl Trainer {
    pub fn new(net: &OtsNet, config: TrainConfig, samples: usize) -> Result<Self> {
        config.validate()?;
        if samples == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        let steps_per_epoch = config.steps_per_epoch(samples);
        let total = steps_per_epoch * config.epochs;
        let warmup = (config.warmup_frac * total as f64).round() as usize;
        let optimizer = AdamW::new(&net.store, AdamWConfig { weight_decay: config.weight_decay, ..Default::default() });
        Ok(Trainer {
            lr: LrSchedule { base_lr: config.lr, warmup_steps: warmup, total_steps: total },
            tau: TemperatureSchedule::over_run(config.tau_start, config.tau_end, total)?,
            config,
            optimizer,
            step: 0,
            steps_per_epoch,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.lr.total_steps
    }

    /// Visiting order for `epoch`.
    pub fn epoch_order(&self, epoch: usize, samples: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..samples).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed ^ 0x5eed_0f0e, epoch as u64));
        order.shuffle(&mut rng);
        order
    }

    /// One optimizer step on a batch.
    pub fn train_step(&mut self, net: &mut OtsNet, batch: &[&SyntheticSample], epoch: usize) -> Result<StepLog> {
        let step = self.step;
        let tau = self.tau.at(step);
        let lr = self.lr.at(step);
        let (images, labels) = batch_of(batch)?;
        let stage = QuantizeStage::Train { tau, noise: GumbelNoise::Sampled { seed: self.config.seed, step: step as u64 } };
        let diverged = |e: Error| match e {
            Error::NonFinite { op } => Error::Diverged { step, detail: format!("non-finite value in {op}") },
            other => other,
        };

        net.store.zero_grad();
        let mut tape = Tape::new();
        let fwd = net.forward_train(&mut tape, &images, &labels, &stage, None).map_err(diverged)?;
        let parts = loss_total(&mut tape, &fwd, self.config.alpha).map_err(diverged)?;
        let loss = parts.values(&tape);
        tape.backward(parts.total).map_err(diverged)?;
        tape.accumulate_param_grads(&mut net.store);
        drop(tape);

        let norm = if self.config.clip_norm > 0.0 {
            clip_grad_norm(&mut net.store, self.config.clip_norm)
        } else {
            grad_norm(&net.store)
        };
        if !norm.is_finite() {
            return Err(Error::Diverged { step, detail: "non-finite gradient norm".into() });
        }
        self.optimizer.step(&mut net.store, lr);
        self.step += 1;
        Ok(StepLog { step, epoch, lr, loss, tau })
    }

    /// Runs every remaining epoch, calling `on_step` after each step.
    pub fn fit(
        &mut self,
        net: &mut OtsNet,
        data: &[SyntheticSample],
        mut on_step: impl FnMut(&StepLog, &OtsNet) -> Result<()>,
    ) -> Result<()> {
        let first = self.step / self.steps_per_epoch;
        for epoch in first..self.config.epochs {
            let order = self.epoch_order(epoch, data.len());
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&SyntheticSample> = chunk.iter().map(|&i| &data[i]).collect();
                let log = self.train_step(net, &batch, epoch)?;
                on_step(&log, net)?;
            }
        }
        Ok(())
    }
}

/// Worker count from `OTSNET_THREADS`, defaulting to the available
/// parallelism.
pub fn worker_count() -> usize {
    std::env::var("OTSNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Greedy recognition of `[1, H, W]` images in batches, fanned out over
/// `workers` threads. Output order follows input order.
pub fn recognize_all(net: &OtsNet, images: &[&crate::tensor::Tensor], workers: usize) -> Result<Vec<Recognition>> {
    const BATCH: usize = 32;
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let workers = workers.max(1).min(images.len().div_ceil(BATCH));
    let per = images.len().div_ceil(workers);
    let run = |part: &[&crate::tensor::Tensor]| -> Result<Vec<Recognition>> {
        let mut out = Vec::with_capacity(part.len());
        for b in part.chunks(BATCH) {
            out.extend(net.recognize(&stack_images(b.iter().copied())?)?);
        }
        Ok(out)
    };
    if workers == 1 {
        return run(images);
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = images.chunks(per).map(|part| s.spawn(move || run(part))).collect();
        let mut out = Vec::with_capacity(images.len());
        for h in handles {
            out.extend(h.join().expect("recognition worker panicked")?);
        }
        Ok(out)
    })
}

/// Sequence and character accuracy of greedy decoding over `data`.
pub fn evaluate(net: &OtsNet, data: &[SyntheticSample], workers: usize) -> Result<(Metrics, Vec<Recognition>)> {
    let images: Vec<_> = data.iter().map(|s| &s.image).collect();
    let recs = recognize_all(net, &images, workers)?;
    let texts: Vec<String> = recs.iter().map(|r| r.text()).collect();
    let metrics = Metrics::score(texts.iter().map(String::as_str).zip(data.iter().map(|s| s.text.as_str())));
    Ok((metrics, recs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model() -> ModelConfig {
        ModelConfig { model_dim: 16, head_dim: 4, encoder_depth: 3, decoder_depth: 1, slots: 6, ..ModelConfig::default() }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { warmup_frac: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { alpha: -0.1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = synth_generate(6, 3, &SynthSpec::default()).unwrap();
        let cfg = TrainConfig { batch_size: 3, epochs: 2, seed: 11, ..Default::default() };
        let run = || {
            let mut net = OtsNet::new(tiny_model(), 2).unwrap();
            let mut t = Trainer::new(&net, cfg.clone(), data.len()).unwrap();
            let mut logs = Vec::new();
            t.fit(&mut net, &data, |l, _| {
                logs.push(l.to_string());
                Ok(())
            })
            .unwrap();
            (logs, net.store.iter().map(|p| p.value.data().to_vec()).collect::<Vec<_>>())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.len(), 4);
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_recognition_preserves_order() {
        let net = OtsNet::new(tiny_model(), 5).unwrap();
        let data = synth_generate(70, 9, &SynthSpec::default()).unwrap();
        let (m1, r1) = evaluate(&net, &data, 1).unwrap();
        let (m3, r3) = evaluate(&net, &data, 3).unwrap();
        assert_eq!(r1, r3);
        assert_eq!(m1, m3);
    }
}
