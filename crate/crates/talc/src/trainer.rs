//! Denoising-objective training over multi-scene manifests.
//!
//! Each step: per item, sample a timestep uniformly, sample Gaussian noise,
//! form the diffused video, build the configured conditioning plan (dropped
//! to the null plan with a small probability so classifier-free guidance has
//! a trained unconditional branch), and minimize the mean squared error
//! between the injected noise and the denoiser's prediction. Gradients are
//! globally norm-clipped; the optimizer is AdamW with warmup-scaled constant
//! learning rate. Everything is deterministic given the seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::DenoiserModel;
use crate::conditioning::{build_plan, null_plan, ConditioningMode, MultiSceneScript};
use crate::datapipe::DatasetManifest;
use crate::denoiser::{forward_graph, patchify, DenoiserConfig};
use crate::error::{Result, TalcError};
use crate::rng::Rng;
use crate::schedule::{add_noise, NoiseSchedule, ScheduleConfig};
use crate::tensor::Tensor;
use crate::textenc::Vocabulary;
use crate::video::VideoTensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub max_grad_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub total_steps: usize,
    pub mode: ConditioningMode,
    /// Probability of replacing a plan with the null plan (trains the
    /// unconditional branch used by guidance).
    pub null_drop_prob: f64,
    pub seed: u64,
    /// Periodic checkpoint interval in steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 20,
            learning_rate: 1e-5,
            warmup_steps: 1000,
            max_grad_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            adam_eps: 1e-8,
            total_steps: 1000,
            mode: ConditioningMode::Talc,
            null_drop_prob: 0.1,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(TalcError::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.null_drop_prob) {
            return Err(TalcError::Config(
                "null-caption dropout must be in [0, 1)".into(),
            ));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(TalcError::Config(
                "batch size and total steps must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    /// Global gradient norm after clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean loss over the last tenth of the run; per-step losses are noisy
    /// because every step draws a fresh (timestep, noise) pair.
    pub tail_mean_loss: f64,
    pub skipped_records: usize,
}

pub struct Trainer {
    pub model: DenoiserModel,
    pub vocab: Vocabulary,
    pub config: TrainConfig,
    schedule: NoiseSchedule,
    rng: Rng,
    step: usize,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Trainer {
    pub fn new(
        denoiser_config: DenoiserConfig,
        schedule_config: ScheduleConfig,
        vocab: Vocabulary,
        config: TrainConfig,
    ) -> Result<Trainer> {
        config.validate()?;
        let root = Rng::new(config.seed);
        let mut init_rng = root.derive("init");
        let mut model = DenoiserModel::new(
            denoiser_config,
            schedule_config,
            &vocab,
            &mut init_rng,
            true,
        )?;
        model.train_mode = Some(config.mode);
        let schedule = model.schedule()?;
        Ok(Trainer {
            model,
            vocab,
            config,
            schedule,
            rng: root.derive("train"),
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    fn lr_at(&self, step: usize) -> f64 {
        let warm = if self.config.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.config.warmup_steps as f64).min(1.0)
        };
        self.config.learning_rate * warm
    }

    /// One optimization step over a batch of (video, script) items.
    pub fn training_step(
        &mut self,
        batch: &[(VideoTensor, MultiSceneScript)],
    ) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(TalcError::Usage("training_step: empty batch".into()));
        }
        self.step += 1;
        let named = self.model.params.named_params();
        for (_, t) in &named {
            t.zero_grad();
        }
        let te = self.model.textenc_params();

        let step = self.step;
        let diagnose = |e: TalcError| match e {
            TalcError::Numeric(m) => TalcError::Numeric(format!("{m} (at step {step})")),
            other => other,
        };
        let mut total: Option<Tensor> = None;
        for (video, script) in batch {
            let tau = self.rng.uniform_usize(1, self.schedule.num_steps);
            let eps = VideoTensor::from_data(
                video.frames,
                video.channels,
                video.height,
                video.width,
                self.rng.fill_normal(video.numel()),
            )?;
            let z_tau = add_noise(video, tau, &eps, &self.schedule)?;
            let drop = self.rng.next_f64() < self.config.null_drop_prob;
            let mut plan = build_plan(
                script,
                video.frames,
                self.config.mode,
                &self.vocab,
                &te,
            )?;
            if drop {
                plan = null_plan(&plan, &self.vocab, &te)?;
            }
            let out = forward_graph(
                tau,
                &z_tau,
                &plan.frame_conditioning,
                &self.model.params,
                &self.model.config,
            )
            .map_err(diagnose)?;
            let target = Tensor::from_vec(
                out.shape().to_vec(),
                patchify(&eps, &self.model.config)?,
            )?;
            let diff = out.sub(&target)?;
            let item_loss = diff.mul(&diff)?.mean();
            total = Some(match total {
                Some(acc) => acc.add(&item_loss)?,
                None => item_loss,
            });
        }
        let loss = total.expect("non-empty batch").scale(1.0 / batch.len() as f64);
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(TalcError::Numeric(format!(
                "non-finite loss {loss_val} at step {} (lr {}, batch {})",
                self.step,
                self.lr_at(self.step),
                batch.len()
            )));
        }
        loss.backward()?;

        let mut sq_norm = 0.0;
        for (_, t) in &named {
            if let Some(g) = t.grad() {
                sq_norm += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norm = sq_norm.sqrt();
        let clip_scale = if norm > self.config.max_grad_norm {
            self.config.max_grad_norm / (norm + 1e-12)
        } else {
            1.0
        };
        let lr = self.lr_at(self.step);
        let t = self.step as i32;
        let bc1 = 1.0 - self.config.beta1.powi(t);
        let bc2 = 1.0 - self.config.beta2.powi(t);
        for (name, p) in &named {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let mut data = p.to_vec();
            for i in 0..data.len() {
                let g = grad[i] * clip_scale;
                m[i] = self.config.beta1 * m[i] + (1.0 - self.config.beta1) * g;
                v[i] = self.config.beta2 * v[i] + (1.0 - self.config.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr
                    * (mhat / (vhat.sqrt() + self.config.adam_eps)
                        + self.config.weight_decay * data[i]);
            }
            p.set_data(&data);
        }
        if !self.model.params.all_finite() {
            return Err(TalcError::Numeric(format!(
                "non-finite parameters after step {}",
                self.step
            )));
        }
        Ok(StepStats {
            step: self.step,
            loss: loss_val,
            grad_norm: norm * clip_scale,
            lr,
        })
    }
}

/// Train over a dataset manifest. Videos are loaded relative to `base_dir`;
/// unreadable entries are skipped and counted. The vocabulary defaults to
/// one built from the manifest's captions. Writes `metrics.csv`,
/// `vocab.txt`, periodic checkpoints and `checkpoint_final.talc` under
/// `out_dir` when given, and returns the final model.
pub fn fit(
    manifest: &DatasetManifest,
    base_dir: &Path,
    denoiser_config: DenoiserConfig,
    schedule_config: ScheduleConfig,
    config: TrainConfig,
    vocab: Option<Vocabulary>,
    out_dir: Option<&Path>,
) -> Result<(DenoiserModel, Vocabulary, FitReport)> {
    let (items, skipped) = manifest.load_items(base_dir);
    if items.is_empty() {
        return Err(TalcError::Usage(
            "fit: manifest has no readable records".into(),
        ));
    }
    let vocab = vocab.unwrap_or_else(|| {
        let captions: Vec<&str> = manifest
            .records
            .iter()
            .flat_map(|r| r.scenes.iter().map(|s| s.caption.as_str()))
            .collect();
        Vocabulary::build(captions)
    });
    let mut trainer = Trainer::new(denoiser_config, schedule_config, vocab, config.clone())?;

    let mut metrics: Option<std::fs::File> = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "step,loss,grad_norm,lr")?;
            Some(f)
        }
        None => None,
    };

    let mut batch_rng = Rng::new(config.seed).derive("batches");
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let tail_from = config.total_steps - (config.total_steps / 10).max(1) + 1;
    let mut tail_sum = 0.0;
    let mut tail_count = 0usize;
    for _ in 0..config.total_steps {
        let batch: Vec<(VideoTensor, MultiSceneScript)> = (0..config.batch_size)
            .map(|_| items[batch_rng.uniform_usize(0, items.len() - 1)].clone())
            .collect();
        let stats = trainer.training_step(&batch)?;
        if stats.step == 1 {
            initial_loss = stats.loss;
        }
        final_loss = stats.loss;
        if stats.step >= tail_from {
            tail_sum += stats.loss;
            tail_count += 1;
        }
        if let Some(f) = metrics.as_mut() {
            writeln!(
                f,
                "{},{:.12},{:.12},{:.12}",
                stats.step, stats.loss, stats.grad_norm, stats.lr
            )?;
        }
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0
                && stats.step % config.checkpoint_every == 0
                && stats.step < config.total_steps
            {
                trainer
                    .model
                    .save(&dir.join(format!("checkpoint_{:06}.talc", stats.step)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        trainer.model.save(&dir.join("checkpoint_final.talc"))?;
        trainer.vocab.save(&dir.join("vocab.txt"))?;
    }
    let report = FitReport {
        steps: config.total_steps,
        initial_loss,
        final_loss,
        tail_mean_loss: tail_sum / tail_count.max(1) as f64,
        skipped_records: skipped,
    };
    Ok((trainer.model, trainer.vocab, report))
}
