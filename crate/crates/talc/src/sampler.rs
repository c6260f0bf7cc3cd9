//! Multi-scene video generation with classifier-free guidance.
//!
//! Three modes:
//!
//! * `talc`: one joint reverse chain over all frames with segment-aligned
//!   caption conditioning;
//! * `merge_captions`: one joint chain, every frame conditioned on the
//!   concatenated script;
//! * `merge_videos`: one independent chain per scene (scene j, 0-based, uses
//!   seed XOR j), concatenated along time afterwards.
//!
//! Inference runs on an evenly strided subset of the training timesteps,
//! always including t=1 and t=T. Output pixels are clamped to [-1, 1] at the
//! final step only.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::DenoiserModel;
use crate::conditioning::{build_plan, null_plan, ConditioningMode, ConditioningPlan, MultiSceneScript};
use crate::denoiser::forward;
use crate::error::{Result, TalcError};
use crate::rng::Rng;
use crate::schedule::{ancestral_step, NoiseSchedule};
use crate::textenc::Vocabulary;
use crate::video::VideoTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Talc,
    MergeCaptions,
    MergeVideos,
}

impl SampleMode {
    pub const ALL: [SampleMode; 3] = [
        SampleMode::Talc,
        SampleMode::MergeCaptions,
        SampleMode::MergeVideos,
    ];
}

impl fmt::Display for SampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleMode::Talc => write!(f, "talc"),
            SampleMode::MergeCaptions => write!(f, "merge_captions"),
            SampleMode::MergeVideos => write!(f, "merge_videos"),
        }
    }
}

impl FromStr for SampleMode {
    type Err = TalcError;

    fn from_str(s: &str) -> Result<SampleMode> {
        match s {
            "talc" => Ok(SampleMode::Talc),
            "merge_captions" => Ok(SampleMode::MergeCaptions),
            "merge_videos" => Ok(SampleMode::MergeVideos),
            other => Err(TalcError::Usage(format!(
                "unknown mode {other:?}; expected talc | merge_captions | merge_videos"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub mode: SampleMode,
    pub frames_per_scene: usize,
    /// Reverse-process steps (strided subset of the training schedule).
    pub steps: usize,
    /// Guidance scale w: 0 = unconditional, 1 = conditional.
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            mode: SampleMode::Talc,
            frames_per_scene: 16,
            steps: 100,
            guidance: 12.0,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_scene == 0 || self.steps == 0 {
            return Err(TalcError::Config(
                "frames_per_scene and steps must be positive".into(),
            ));
        }
        if self.guidance < 0.0 {
            return Err(TalcError::Config("guidance scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// Classifier-free guided noise prediction:
/// `eps_null + w * (eps_cond - eps_null)`. `tau` is the index into
/// `schedule`; the denoiser is conditioned on the mapped training timestep.
pub fn guided_eps(
    tau: usize,
    z_tau: &VideoTensor,
    plan: &ConditioningPlan,
    unconditional: &ConditioningPlan,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    guidance: f64,
) -> Result<VideoTensor> {
    let train_tau = schedule.train_timestep_at(tau)?;
    let cond = forward(
        train_tau,
        z_tau,
        &plan.frame_conditioning,
        &model.params,
        &model.config,
    )?;
    if guidance == 1.0 {
        return Ok(cond);
    }
    let null = forward(
        train_tau,
        z_tau,
        &unconditional.frame_conditioning,
        &model.params,
        &model.config,
    )?;
    let data: Vec<f64> = null
        .data
        .iter()
        .zip(&cond.data)
        .map(|(n, c)| n + guidance * (c - n))
        .collect();
    VideoTensor::from_data(z_tau.frames, z_tau.channels, z_tau.height, z_tau.width, data)
}

/// One full reverse chain with the given plan over `frames` frames.
fn reverse_chain(
    plan: &ConditioningPlan,
    unconditional: &ConditioningPlan,
    frames: usize,
    model: &DenoiserModel,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<VideoTensor> {
    let schedule = model.schedule()?.strided(cfg.steps)?;
    let mut rng = Rng::new(seed);
    let c = &model.config;
    let mut z = VideoTensor::from_data(
        frames,
        c.channels,
        c.height,
        c.width,
        rng.fill_normal(frames * c.channels * c.height * c.width),
    )?;
    for tau in (1..=schedule.num_steps).rev() {
        let eps_hat = guided_eps(tau, &z, plan, unconditional, model, &schedule, cfg.guidance)?;
        z = ancestral_step(&z, &eps_hat, tau, &schedule, &mut rng)?;
    }
    z.clamp_unit();
    Ok(z)
}

/// Generate a video for a script. Deterministic given (script, model
/// parameters, config, seed).
pub fn generate(
    script: &MultiSceneScript,
    model: &DenoiserModel,
    vocab: &Vocabulary,
    cfg: &SampleConfig,
) -> Result<VideoTensor> {
    cfg.validate()?;
    script.validate()?;
    model.check_vocab(vocab)?;
    let te = model.textenc_params();
    let n = script.num_scenes();
    match cfg.mode {
        SampleMode::Talc | SampleMode::MergeCaptions => {
            let frames = n * cfg.frames_per_scene;
            if frames > model.config.max_frames {
                return Err(TalcError::Config(format!(
                    "{frames} frames exceed the checkpoint's max of {}",
                    model.config.max_frames
                )));
            }
            let mode = if cfg.mode == SampleMode::Talc {
                ConditioningMode::Talc
            } else {
                ConditioningMode::MergeCaptions
            };
            let plan = build_plan(script, frames, mode, vocab, &te)?;
            let uncond = null_plan(&plan, vocab, &te)?;
            reverse_chain(&plan, &uncond, frames, model, cfg, cfg.seed)
        }
        SampleMode::MergeVideos => {
            if cfg.frames_per_scene > model.config.max_frames {
                return Err(TalcError::Config(format!(
                    "{} frames exceed the checkpoint's max of {}",
                    cfg.frames_per_scene, model.config.max_frames
                )));
            }
            let mut parts = Vec::with_capacity(n);
            for j in 0..n {
                let single = script.single_scene(j)?;
                let plan = build_plan(
                    &single,
                    cfg.frames_per_scene,
                    ConditioningMode::Talc,
                    vocab,
                    &te,
                )?;
                let uncond = null_plan(&plan, vocab, &te)?;
                // Documented sub-seed rule: scene j (0-based) uses seed ^ j,
                // so a single-scene script reproduces the plain chain.
                parts.push(reverse_chain(
                    &plan,
                    &uncond,
                    cfg.frames_per_scene,
                    model,
                    cfg,
                    cfg.seed ^ j as u64,
                )?);
            }
            VideoTensor::concat_time(&parts)
        }
    }
}
