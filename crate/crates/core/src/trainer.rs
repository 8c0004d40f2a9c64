//! SGD training loop with deep supervision, the SSIE freeze schedule,
//! checkpointing and evaluation.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_checkpoint;
use crate::data::{augment_with, resize_bilinear, stack, AugmentParams, Sample};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossScales};
use crate::metrics::{confusion, ConfusionCounts, MetricsReport, DEFAULT_THRESHOLD};
use crate::model::Agsenet;
use crate::params::{Ctx, Mode, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Learning rate of the loss scales γ and δ.
    pub scale_lr: f32,
    pub weight_decay: f32,
    /// Plain SGD when 0.
    pub momentum: f32,
    /// SSIE parameters receive no updates while `epoch < ssie_freeze_epochs`.
    pub ssie_freeze_epochs: usize,
    pub seed: u64,
    /// `(height, width)` every training sample is resized to.
    pub train_size: (usize, usize),
    /// Random flip / brightness / saturation jitter.
    pub augment: bool,
    pub checkpoint_dir: Option<PathBuf>,
    /// Evaluate and checkpoint every this many epochs (0 disables).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 4,
            lr: 0.001,
            scale_lr: 0.001,
            weight_decay: 5e-4,
            momentum: 0.0,
            ssie_freeze_epochs: 50,
            seed: 0,
            train_size: (320, 320),
            augment: true,
            checkpoint_dir: None,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    /// Small synthetic setting: 64×64 inputs, 300 epochs, SSIE frozen for
    /// the first 10% of epochs.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 4,
            lr: 0.01,
            scale_lr: 1e-5,
            weight_decay: 5e-4,
            momentum: 0.9,
            ssie_freeze_epochs: 30,
            seed,
            train_size: (64, 64),
            augment: false,
            checkpoint_dir: None,
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.scale_lr >= 0.0 && self.scale_lr.is_finite()) {
            return bad(format!("loss-scale learning rate must be >= 0, got {}", self.scale_lr));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.ssie_freeze_epochs >= self.epochs {
            return bad(format!(
                "SSIE freeze ({} epochs) must end before training does ({} epochs)",
                self.ssie_freeze_epochs, self.epochs
            ));
        }
        Agsenet::check_input(self.train_size.0, self.train_size.1)
    }
}

/// One training-log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f32,
    pub gamma: f32,
    pub delta: f32,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {:.6} {:.6} {:.6}",
            self.epoch, self.step, self.loss, self.gamma, self.delta
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub mean_loss: f32,
    pub ssie_frozen: bool,
    pub validation: Option<MetricsReport>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainReport {
    pub fn log_text(&self) -> String {
        self.steps.iter().map(|s| format!("{s}\n")).collect()
    }
}

struct Sgd {
    lr: f32,
    weight_decay: f32,
    momentum: f32,
    velocity: Vec<Tensor>,
}

impl Sgd {
    fn new(config: &TrainConfig, lr: f32) -> Self {
        Sgd {
            lr,
            weight_decay: config.weight_decay,
            momentum: config.momentum,
            velocity: Vec::new(),
        }
    }

    /// `p ← p − lr·(g + wd·p)`, through a velocity buffer when momentum is set.
    /// Frozen parameters are left untouched.
    fn update(&mut self, store: &mut ParamStore) {
        if self.momentum > 0.0 && self.velocity.is_empty() {
            self.velocity = store.params().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        let (lr, wd, mu) = (self.lr, self.weight_decay, self.momentum);
        for (i, p) in store.params_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let grad = p.grad.data();
            let value = p.value.data_mut();
            if mu > 0.0 {
                let vel = self.velocity[i].data_mut();
                for ((w, &g), v) in value.iter_mut().zip(grad).zip(vel.iter_mut()) {
                    *v = mu * *v + g + wd * *w;
                    *w -= lr * *v;
                }
            } else {
                for (w, &g) in value.iter_mut().zip(grad) {
                    *w -= lr * (g + wd * *w);
                }
            }
        }
    }
}

pub struct Trainer {
    config: TrainConfig,
    model: Agsenet,
    scales: LossScales,
    model_opt: Sgd,
    scale_opt: Sgd,
    step: usize,
    warned_negative: bool,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: Agsenet) -> Result<Self> {
        Self::with_scales(config, model, LossScales::default())
    }

    pub fn with_scales(config: TrainConfig, model: Agsenet, scales: LossScales) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model_opt: Sgd::new(&config, config.lr),
            scale_opt: Sgd::new(&config, config.scale_lr),
            config,
            model,
            scales,
            step: 0,
            warned_negative: false,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Agsenet {
        &self.model
    }

    pub fn scales(&self) -> &LossScales {
        &self.scales
    }

    pub fn into_parts(self) -> (Agsenet, LossScales) {
        (self.model, self.scales)
    }

    /// One forward/backward/update on a stacked batch. Returns the total loss.
    pub fn train_step(&mut self, images: &Tensor, masks: &Tensor, epoch: usize) -> Result<f32> {
        let mut tape = Tape::new();
        let vars = self.model.store().bind(&mut tape);
        let (gamma, delta, scale_vars) = self.scales.bind(&mut tape);
        let x = tape.constant(images.clone());
        let target = tape.constant(masks.clone());
        let outputs = {
            let mut ctx = Ctx::new(&mut tape, self.model.store(), &vars, Mode::Train);
            self.model.forward(&mut ctx, x)?
        };
        let loss = total_loss(&mut tape, &outputs, target, gamma, delta)?;
        let value = tape.value(loss.total).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: self.step,
                value,
            });
        }
        tape.backward(loss.total)?;

        let store = self.model.store_mut();
        store.zero_grads();
        store.accumulate_grads(&tape, &vars);
        store.apply_bn_updates(tape.bn_updates());
        self.model_opt.update(store);

        let scale_store = self.scales.store_mut();
        scale_store.zero_grads();
        scale_store.accumulate_grads(&tape, &scale_vars);
        self.scale_opt.update(scale_store);

        self.step += 1;
        Ok(value)
    }

    fn prepare(&self, sample: &Sample, epoch: usize, index: usize) -> Result<Sample> {
        let params = if self.config.augment {
            let seed = mix(self.config.seed, epoch as u64, index as u64);
            AugmentParams::sample(seed, self.config.train_size)
        } else {
            AugmentParams::identity(self.config.train_size)
        };
        augment_with(sample, &params)
    }

    pub fn fit(&mut self, train: &[Sample], val: &[Sample]) -> Result<TrainReport> {
        self.fit_with(train, val, |_, _| {})
    }

    /// Trains for the configured epochs, calling `on_epoch` after each one.
    pub fn fit_with(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        mut on_epoch: impl FnMut(&EpochSummary, &Agsenet),
    ) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let mut log_file = match &self.config.checkpoint_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train.log");
                Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
            }
            None => None,
        };
        let mut report = TrainReport::default();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);

        for epoch in 0..self.config.epochs {
            let frozen = epoch < self.config.ssie_freeze_epochs;
            self.model.set_ssie_frozen(frozen);
            order.shuffle(&mut rng);
            let mut losses = Vec::new();
            for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
                let prepared = chunk
                    .iter()
                    .map(|&i| self.prepare(&train[i], epoch, i))
                    .collect::<Result<Vec<_>>>()?;
                let images = stack(&prepared.iter().map(|s| &s.image).collect::<Vec<_>>())?;
                let masks = stack(&prepared.iter().map(|s| &s.mask).collect::<Vec<_>>())?;
                let loss = self.train_step(&images, &masks, epoch)?;
                let record = StepRecord {
                    epoch,
                    step: b,
                    loss,
                    gamma: self.scales.gamma(),
                    delta: self.scales.delta(),
                };
                if (record.gamma < 0.0 || record.delta < 0.0) && !self.warned_negative {
                    log::warn!(
                        "loss scale went negative at epoch {epoch} step {b}: gamma={} delta={}",
                        record.gamma,
                        record.delta
                    );
                    self.warned_negative = true;
                }
                log::debug!("{record}");
                if let Some((f, path)) = log_file.as_mut() {
                    writeln!(f, "{record}").map_err(|e| Error::io(&*path, e))?;
                }
                report.steps.push(record);
                losses.push(loss);
            }
            let mean_loss = losses.iter().sum::<f32>() / losses.len() as f32;

            let due = self.config.eval_every > 0 && (epoch + 1) % self.config.eval_every == 0;
            let validation = if due && !val.is_empty() {
                Some(evaluate(&self.model, val, DEFAULT_THRESHOLD, Some(self.config.train_size))?)
            } else {
                None
            };
            if due {
                if let Some(dir) = &self.config.checkpoint_dir {
                    let ck = dir.join(format!("epoch_{:04}", epoch + 1));
                    save_checkpoint(&ck, &self.model, &self.scales, epoch + 1)?;
                    if let Some(v) = &validation {
                        let path = ck.join("metrics.txt");
                        fs::write(&path, v.to_kv()).map_err(|e| Error::io(&path, e))?;
                    }
                }
            }
            log::info!(
                "epoch {} mean loss {mean_loss:.5} gamma {:.4} delta {:.4}{}",
                epoch + 1,
                self.scales.gamma(),
                self.scales.delta(),
                if frozen { " (ssie frozen)" } else { "" }
            );
            let summary = EpochSummary {
                epoch,
                mean_loss,
                ssie_frozen: frozen,
                validation,
            };
            on_epoch(&summary, &self.model);
            report.epochs.push(summary);
        }
        self.model.set_ssie_frozen(false);
        if let Some(dir) = &self.config.checkpoint_dir {
            save_checkpoint(&dir.join("final"), &self.model, &self.scales, self.config.epochs)?;
        }
        Ok(report)
    }
}

fn mix(seed: u64, epoch: u64, index: u64) -> u64 {
    let mut z = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fused-map probabilities at the sample's own resolution. When `size` is
/// given the image is resized for the network and the map resized back.
pub fn predict_fused(model: &Agsenet, sample: &Sample, size: Option<(usize, usize)>) -> Result<Tensor> {
    let (h, w) = (sample.height(), sample.width());
    let input = match size {
        Some((th, tw)) => resize_bilinear(&sample.image, th, tw)?,
        None => sample.image.clone(),
    };
    let fused = model.predict(&input)?.fused;
    resize_bilinear(&fused, h, w)
}

/// Metrics from globally accumulated confusion counts of `predictor`'s maps.
pub fn evaluate_with(
    samples: &[Sample],
    threshold: f32,
    mut predictor: impl FnMut(&Sample) -> Result<Tensor>,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let counts = samples
        .iter()
        .map(|s| confusion(&predictor(s)?, &s.mask, threshold))
        .collect::<Result<Vec<ConfusionCounts>>>()?;
    Ok(MetricsReport::from_counts(&counts))
}

pub fn evaluate(
    model: &Agsenet,
    samples: &[Sample],
    threshold: f32,
    size: Option<(usize, usize)>,
) -> Result<MetricsReport> {
    evaluate_with(samples, threshold, |s| predict_fused(model, s, size))
}
