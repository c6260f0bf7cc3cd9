//! `talc`: multi-scene text-to-video toolkit.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use talc_cli::commands;
use talc_cli::config::RunConfig;
use talc_cli::desk::{reproduce_desk, DeskConfig};

#[derive(Parser)]
#[command(
    name = "talc",
    about = "Multi-scene text-to-video diffusion: data pipeline, training, generation, evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Root random seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (every file this run writes lands under it).
    #[arg(long)]
    out: PathBuf,

    /// Extra key=value overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self, defaults: &[(&str, String)]) -> Result<RunConfig> {
        let mut cfg = RunConfig::new();
        for (k, v) in defaults {
            cfg.set(k, v.clone());
        }
        if let Some(path) = &self.config {
            let file = RunConfig::load_file(path)?;
            cfg.extend(&file);
        }
        if let Some(seed) = self.seed {
            cfg.set("seed", seed.to_string());
        }
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic moving-shape corpus with manifest and scripts.
    MakeSynthetic {
        #[command(flatten)]
        common: Common,
        /// Number of videos to render.
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Frames per scene.
        #[arg(long)]
        frames_per_scene: Option<usize>,
    },
    /// Detect scene boundaries in a video; writes scene_cuts.json.
    SceneCut {
        #[command(flatten)]
        common: Common,
        /// Input video (.tvid file or PPM frame directory).
        #[arg(long)]
        video: PathBuf,
        /// Content-difference threshold.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Scene-cut a directory of videos and caption them via an external
    /// multimodal model (auth via TALC_API_TOKEN).
    MakeDataset {
        #[command(flatten)]
        common: Common,
        /// Directory of input videos.
        #[arg(long = "in")]
        input: PathBuf,
        /// Chat-completions endpoint URL of the captioner.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train a denoiser on a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Conditioning mode: talc | merge_captions.
        #[arg(long)]
        mode: Option<String>,
        /// Total optimization steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Vocabulary file (defaults to one built from the manifest).
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Generate videos for scripts from a checkpoint.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Scripts JSON-lines path, or "builtin" for the benchmark set.
        #[arg(long)]
        scripts: String,
        /// Generation mode: talc | merge_captions | merge_videos.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        frames_per_scene: Option<usize>,
        /// Sampling steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale.
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Score generated videos (oracle or external judge).
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory of <id>__<mode>.tvid videos.
        #[arg(long)]
        videos: PathBuf,
        #[arg(long)]
        scripts: String,
        /// Judge: oracle | external.
        #[arg(long)]
        judge: Option<String>,
        /// Ground-truth specs JSON-lines (oracle judge).
        #[arg(long)]
        specs: Option<PathBuf>,
        /// Judge endpoint URL (external judge).
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Aggregate scores into report tables.
    Report {
        #[command(flatten)]
        common: Common,
        /// scores.jsonl from evaluate.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Human three-level judgments CSV to merge.
        #[arg(long)]
        human_csv: Option<PathBuf>,
    },
    /// Full desk-scale pipeline: corpus, two finetuning arms, three-mode
    /// generation, oracle scoring, comparison report.
    ReproduceDesk {
        #[command(flatten)]
        common: Common,
        /// Training steps per arm.
        #[arg(long)]
        train_steps: Option<usize>,
        /// Guidance scale at generation.
        #[arg(long)]
        guidance: Option<f64>,
        /// Training corpus size.
        #[arg(long)]
        corpus_items: Option<usize>,
        /// Test scripts per scene count (2, 3 and 4 scenes each).
        #[arg(long)]
        scripts_per_scene_count: Option<usize>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::MakeSynthetic {
            common,
            count,
            frames_per_scene,
        } => {
            let mut cfg = common.resolve(&[("synthetic.count", count.to_string())])?;
            if let Some(f) = frames_per_scene {
                cfg.set("frames_per_scene", f.to_string());
            }
            commands::make_synthetic(&cfg, &common.out)
        }
        Command::SceneCut {
            common,
            video,
            threshold,
        } => {
            let mut cfg = common.resolve(&[])?;
            if let Some(t) = threshold {
                cfg.set("datapipe.threshold", t.to_string());
            }
            commands::scene_cut(&cfg, &video, &common.out)
        }
        Command::MakeDataset {
            common,
            input,
            endpoint,
            threshold,
        } => {
            let mut cfg = common.resolve(&[])?;
            if let Some(e) = endpoint {
                cfg.set("endpoint", e);
            }
            if let Some(t) = threshold {
                cfg.set("datapipe.threshold", t.to_string());
            }
            commands::make_dataset(&cfg, &input, &common.out)
        }
        Command::Train {
            common,
            manifest,
            mode,
            steps,
            vocab,
        } => {
            let mut cfg = common.resolve(&[])?;
            if let Some(m) = mode {
                cfg.set("mode", m);
            }
            if let Some(s) = steps {
                cfg.set("steps", s.to_string());
            }
            if let Some(v) = vocab {
                cfg.set("vocab", v.to_string_lossy().into_owned());
            }
            commands::train(&cfg, &manifest, &common.out)
        }
        Command::Generate {
            common,
            ckpt,
            vocab,
            scripts,
            mode,
            frames_per_scene,
            steps,
            guidance,
        } => {
            let mut cfg = common.resolve(&[])?;
            if let Some(m) = mode {
                cfg.set("mode", m);
            }
            if let Some(f) = frames_per_scene {
                cfg.set("frames_per_scene", f.to_string());
            }
            if let Some(s) = steps {
                cfg.set("steps", s.to_string());
            }
            if let Some(g) = guidance {
                cfg.set("guidance", g.to_string());
            }
            commands::generate_videos(&cfg, &ckpt, &vocab, &scripts, &common.out)
        }
        Command::Evaluate {
            common,
            videos,
            scripts,
            judge,
            specs,
            endpoint,
        } => {
            let mut cfg = common.resolve(&[])?;
            if let Some(j) = judge {
                cfg.set("judge", j);
            }
            if let Some(s) = specs {
                cfg.set("specs", s.to_string_lossy().into_owned());
            }
            if let Some(e) = endpoint {
                cfg.set("endpoint", e);
            }
            commands::evaluate(&cfg, &videos, &scripts, &common.out)
        }
        Command::Report {
            common,
            scores,
            human_csv,
        } => {
            let mut cfg = common.resolve(&[])?;
            if let Some(h) = human_csv {
                cfg.set("human_csv", h.to_string_lossy().into_owned());
            }
            commands::report(&cfg, scores.as_deref(), &common.out)
        }
        Command::ReproduceDesk {
            common,
            train_steps,
            guidance,
            corpus_items,
            scripts_per_scene_count,
        } => {
            let cfg = common.resolve(&[])?;
            let d = DeskConfig::default();
            let desk = DeskConfig {
                seed: cfg.get_u64("seed", d.seed)?,
                corpus_items: corpus_items
                    .unwrap_or(cfg.get_usize("desk.corpus_items", d.corpus_items)?),
                scripts_per_scene_count: scripts_per_scene_count.unwrap_or(
                    cfg.get_usize("desk.scripts_per_scene_count", d.scripts_per_scene_count)?,
                ),
                train_steps: train_steps.unwrap_or(cfg.get_usize("desk.train_steps", d.train_steps)?),
                batch_size: cfg.get_usize("desk.batch_size", d.batch_size)?,
                learning_rate: cfg.get_f64("desk.lr", d.learning_rate)?,
                warmup_steps: cfg.get_usize("desk.warmup_steps", d.warmup_steps)?,
                null_drop_prob: cfg.get_f64("desk.null_drop_prob", d.null_drop_prob)?,
                frames_per_scene: cfg.get_usize("frames_per_scene", d.frames_per_scene)?,
                sample_steps: cfg.get_usize("desk.sample_steps", d.sample_steps)?,
                guidance: guidance.unwrap_or(cfg.get_f64("guidance", d.guidance)?),
                size: cfg.get_usize("desk.size", d.size)?,
                model_dim: cfg.get_usize("model.dim", d.model_dim)?,
                blocks: cfg.get_usize("model.blocks", d.blocks)?,
                heads: cfg.get_usize("model.heads", d.heads)?,
                patch: cfg.get_usize("model.patch", d.patch)?,
                text_tokens: cfg.get_usize("model.text_tokens", d.text_tokens)?,
            };
            let summary = reproduce_desk(&desk, &common.out)?;
            print!("{}", summary.report.render_text());
            Ok(())
        }
    }
}
