//! Subcommand implementations. Each takes a resolved [`RunConfig`], works
//! entirely under its output directory, and writes a `config.resolved.txt`
//! snapshot beside its outputs.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use talc::client::ClientConfig;
use talc::checkpoint::DenoiserModel;
use talc::conditioning::{read_scripts_jsonl, write_scripts_jsonl, ConditioningMode, MultiSceneScript};
use talc::datapipe::{
    build_caption_prompt, caption_scenes, detect_scenes, generate_synthetic, grammar_phrases,
    middle_frames, sample_corpus, CorpusConfig, DatasetManifest, ManifestRecord, Provenance,
    SceneRange, DEFAULT_CUT_THRESHOLD, DEFAULT_MIN_SCENE_LEN,
};
use talc::denoiser::DenoiserConfig;
use talc::evaluator::{
    aggregate, external_judge, import_human_csv, oracle_score, read_scores_jsonl,
    write_scores_jsonl, ScoredItem,
};
use talc::rng::Rng;
use talc::sampler::{generate, SampleConfig, SampleMode};
use talc::schedule::ScheduleConfig;
use talc::textenc::Vocabulary;
use talc::trainer::{fit, TrainConfig};
use talc::video::VideoTensor;

use crate::config::RunConfig;

pub fn parse_mode(s: &str) -> Result<SampleMode> {
    s.parse().map_err(|e| anyhow!("{e}"))
}

fn conditioning_mode(s: &str) -> Result<ConditioningMode> {
    match s {
        "talc" => Ok(ConditioningMode::Talc),
        "merge_captions" => Ok(ConditioningMode::MergeCaptions),
        other => bail!("unknown training mode {other:?}; expected talc | merge_captions"),
    }
}

// ── make-synthetic ──────────────────────────────────────────────────────

/// Render a synthetic corpus: videos, a training manifest, the matching
/// scripts, the ground-truth specs, and a grammar-covering vocabulary.
pub fn make_synthetic(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let count = cfg.get_usize("synthetic.count", 64)?;
    let seed = cfg.get_u64("seed", 0)?;
    let corpus_cfg = corpus_config(cfg)?;
    std::fs::create_dir_all(out_dir.join("videos"))?;
    cfg.write_snapshot(out_dir)?;

    let root = Rng::new(seed);
    let mut spec_rng = root.derive("specs");
    let mut render_rng = root.derive("render");
    let specs = sample_corpus(count, &corpus_cfg, &mut spec_rng);
    let mut records = Vec::with_capacity(count);
    let mut scripts = Vec::with_capacity(count);
    for spec in &specs {
        let (video, script) = generate_synthetic(spec, &mut render_rng)
            .map_err(|e| anyhow!("rendering {}: {e}", spec.id))?;
        let rel = format!("videos/{}.tvid", spec.id);
        video.write_tvid(&out_dir.join(&rel))?;
        records.push(ManifestRecord {
            video: rel,
            source_caption: None,
            scenes: script
                .scenes
                .iter()
                .enumerate()
                .map(|(j, caption)| SceneRange {
                    start_frame: j * spec.frames_per_scene,
                    end_frame: (j + 1) * spec.frames_per_scene,
                    caption: caption.clone(),
                })
                .collect(),
            provenance: Provenance::Synthetic,
        });
        scripts.push(script);
    }
    DatasetManifest { records }.write_atomic(&out_dir.join("manifest.jsonl"))?;
    std::fs::write(out_dir.join("scripts.jsonl"), write_scripts_jsonl(&scripts))?;
    let specs_text: String = specs
        .iter()
        .map(|s| serde_json::to_string(s).expect("spec serializes") + "\n")
        .collect();
    std::fs::write(out_dir.join("specs.jsonl"), specs_text)?;
    let vocab = Vocabulary::build(grammar_phrases().iter().map(|s| s.as_str()));
    vocab.save(&out_dir.join("vocab.txt"))?;
    println!(
        "wrote {count} synthetic videos, manifest, scripts, specs and vocab to {}",
        out_dir.display()
    );
    Ok(())
}

fn corpus_config(cfg: &RunConfig) -> Result<CorpusConfig> {
    let default = CorpusConfig::default();
    Ok(CorpusConfig {
        size: cfg.get_usize("synthetic.size", default.size)?,
        frames_per_scene: cfg.get_usize("frames_per_scene", default.frames_per_scene)?,
        shape_radius: cfg.get_f64("synthetic.shape_radius", default.shape_radius)?,
        speed: cfg.get_f64("synthetic.speed", default.speed)?,
        scene_count_weights: default.scene_count_weights,
    })
}

// ── scene-cut ───────────────────────────────────────────────────────────

/// Detect scene boundaries in one video and write them as JSON.
pub fn scene_cut(cfg: &RunConfig, video_path: &Path, out_dir: &Path) -> Result<()> {
    let threshold = cfg.get_f64("datapipe.threshold", DEFAULT_CUT_THRESHOLD)?;
    let min_len = cfg.get_usize("datapipe.min_scene_len", DEFAULT_MIN_SCENE_LEN)?;
    std::fs::create_dir_all(out_dir)?;
    cfg.write_snapshot(out_dir)?;
    let video = VideoTensor::load(video_path)
        .with_context(|| format!("loading {}", video_path.display()))?;
    let cuts = detect_scenes(&video, threshold, min_len);
    let json = serde_json::json!({
        "video": video_path.to_string_lossy(),
        "frames": video.frames,
        "threshold": threshold,
        "min_scene_len": min_len,
        "boundaries": cuts.boundaries,
        "used_len": cuts.used_len,
        "ranges": cuts.ranges(),
        "middle_frames": middle_frames(&cuts),
    });
    std::fs::write(
        out_dir.join("scene_cuts.json"),
        serde_json::to_string_pretty(&json)?,
    )?;
    println!("{} scenes, boundaries {:?}", cuts.num_scenes(), cuts.boundaries);
    Ok(())
}

// ── make-dataset ────────────────────────────────────────────────────────

/// Build a captioned manifest from a directory of videos: scene cuts,
/// middle frames, external captioner. A sidecar `<name>.caption.txt` beside
/// a video supplies its common caption.
pub fn make_dataset(cfg: &RunConfig, in_dir: &Path, out_dir: &Path) -> Result<()> {
    let endpoint = cfg
        .get("endpoint")
        .ok_or_else(|| anyhow!("make-dataset needs --endpoint (the captioner URL)"))?
        .to_string();
    let threshold = cfg.get_f64("datapipe.threshold", DEFAULT_CUT_THRESHOLD)?;
    let min_len = cfg.get_usize("datapipe.min_scene_len", DEFAULT_MIN_SCENE_LEN)?;
    std::fs::create_dir_all(out_dir)?;
    cfg.write_snapshot(out_dir)?;

    let mut names: Vec<PathBuf> = Vec::new();
    for entry in std::fs::read_dir(in_dir)? {
        let path = entry?.path();
        let is_video = path.extension().is_some_and(|e| e == "tvid")
            || (path.is_dir() && path.join("index.txt").exists());
        if is_video {
            names.push(path);
        }
    }
    names.sort();
    if names.is_empty() {
        bail!("no .tvid files or PPM directories under {}", in_dir.display());
    }

    let mut records = Vec::new();
    let mut failures = 0usize;
    for path in &names {
        match caption_one(cfg, &endpoint, path, threshold, min_len) {
            Ok(record) => records.push(record),
            Err(e) => {
                failures += 1;
                eprintln!("warning: skipping {}: {e}", path.display());
            }
        }
    }
    if records.is_empty() {
        bail!("every video failed captioning ({failures} failures)");
    }
    // Written once at the end: a failed run leaves no torn manifest.
    DatasetManifest { records }.write_atomic(&out_dir.join("manifest.jsonl"))?;
    println!(
        "captioned {} videos ({failures} skipped); manifest at {}",
        names.len() - failures,
        out_dir.join("manifest.jsonl").display()
    );
    Ok(())
}

fn caption_one(
    cfg: &RunConfig,
    endpoint: &str,
    path: &Path,
    threshold: f64,
    min_len: usize,
) -> Result<ManifestRecord> {
    let video = VideoTensor::load(path)?;
    let cuts = detect_scenes(&video, threshold, min_len);
    let frames = middle_frames(&cuts);
    let sidecar = path.with_extension("caption.txt");
    let common_caption = std::fs::read_to_string(&sidecar)
        .map(|s| s.trim().to_string())
        .unwrap_or_default();
    let mut client = ClientConfig::new(endpoint);
    client.model = cfg.get("model").map(|s| s.to_string());
    let captions = caption_scenes(&video, &frames, &common_caption, client)?;
    Ok(ManifestRecord {
        video: path.to_string_lossy().into_owned(),
        source_caption: (!common_caption.is_empty()).then_some(common_caption),
        scenes: cuts
            .ranges()
            .iter()
            .zip(captions)
            .map(|(&(start_frame, end_frame), caption)| SceneRange {
                start_frame,
                end_frame,
                caption,
            })
            .collect(),
        provenance: Provenance::Captioned,
    })
}

/// Print the captioner prompt for a common caption (inspection helper).
pub fn show_caption_prompt(common: &str) -> String {
    build_caption_prompt(common)
}

// ── train ───────────────────────────────────────────────────────────────

pub fn denoiser_config(cfg: &RunConfig) -> Result<DenoiserConfig> {
    let d = DenoiserConfig::default();
    Ok(DenoiserConfig {
        max_frames: cfg.get_usize("model.max_frames", d.max_frames)?,
        channels: 3,
        height: cfg.get_usize("model.height", d.height)?,
        width: cfg.get_usize("model.width", d.width)?,
        model_dim: cfg.get_usize("model.dim", d.model_dim)?,
        heads: cfg.get_usize("model.heads", d.heads)?,
        blocks: cfg.get_usize("model.blocks", d.blocks)?,
        patch: cfg.get_usize("model.patch", d.patch)?,
        text_tokens: cfg.get_usize("model.text_tokens", d.text_tokens)?,
        temporal_pos_enabled: cfg.get_bool("model.temporal_pos", true)?,
        temporal_enabled: cfg.get_bool("model.temporal", true)?,
    })
}

pub fn schedule_config(cfg: &RunConfig) -> Result<ScheduleConfig> {
    let d = ScheduleConfig::default();
    Ok(ScheduleConfig {
        num_steps: cfg.get_usize("schedule.steps", d.num_steps)?,
        beta_min: cfg.get_f64("schedule.beta_min", d.beta_min)?,
        beta_max: cfg.get_f64("schedule.beta_max", d.beta_max)?,
        ..d
    })
}

pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        batch_size: cfg.get_usize("train.batch_size", d.batch_size)?,
        learning_rate: cfg.get_f64("train.lr", d.learning_rate)?,
        warmup_steps: cfg.get_usize("train.warmup_steps", d.warmup_steps)?,
        max_grad_norm: cfg.get_f64("train.max_grad_norm", d.max_grad_norm)?,
        beta1: cfg.get_f64("train.beta1", d.beta1)?,
        beta2: cfg.get_f64("train.beta2", d.beta2)?,
        weight_decay: cfg.get_f64("train.weight_decay", d.weight_decay)?,
        adam_eps: cfg.get_f64("train.adam_eps", d.adam_eps)?,
        total_steps: cfg.get_usize("steps", d.total_steps)?,
        mode: conditioning_mode(&cfg.get_or("mode", "talc"))?,
        null_drop_prob: cfg.get_f64("train.null_drop_prob", d.null_drop_prob)?,
        seed: cfg.get_u64("seed", d.seed)?,
        checkpoint_every: cfg.get_usize("train.checkpoint_every", d.checkpoint_every)?,
    })
}

/// Train on a manifest; writes metrics, vocab and checkpoints under out_dir.
pub fn train(cfg: &RunConfig, manifest_path: &Path, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    cfg.write_snapshot(out_dir)?;
    let manifest = DatasetManifest::read(manifest_path)?;
    let base_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let vocab = match cfg.get("vocab") {
        Some(path) => Some(Vocabulary::load(Path::new(path))?),
        None => None,
    };
    let (_, _, report) = fit(
        &manifest,
        base_dir,
        denoiser_config(cfg)?,
        schedule_config(cfg)?,
        train_config(cfg)?,
        vocab,
        Some(out_dir),
    )?;
    if report.skipped_records > 0 {
        eprintln!("warning: skipped {} unreadable manifest records", report.skipped_records);
    }
    println!(
        "trained {} steps: loss {:.4} -> {:.4} (tail mean {:.4}); checkpoint at {}",
        report.steps,
        report.initial_loss,
        report.final_loss,
        report.tail_mean_loss,
        out_dir.join("checkpoint_final.talc").display()
    );
    Ok(())
}

// ── generate ────────────────────────────────────────────────────────────

pub fn sample_config(cfg: &RunConfig) -> Result<SampleConfig> {
    let d = SampleConfig::default();
    Ok(SampleConfig {
        mode: parse_mode(&cfg.get_or("mode", "talc"))?,
        frames_per_scene: cfg.get_usize("frames_per_scene", d.frames_per_scene)?,
        steps: cfg.get_usize("steps", d.steps)?,
        guidance: cfg.get_f64("guidance", d.guidance)?,
        seed: cfg.get_u64("seed", d.seed)?,
    })
}

/// Load scripts from a path, or the built-in benchmark set for `builtin`.
pub fn load_scripts(path: &str) -> Result<Vec<MultiSceneScript>> {
    if path == "builtin" {
        return Ok(talc::conditioning::benchmark_scripts());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
    Ok(read_scripts_jsonl(&text)?)
}

/// Generate one video per script in the configured mode; writes
/// `<id>__<mode>.tvid` plus a PPM contact sheet for each.
pub fn generate_videos(
    cfg: &RunConfig,
    ckpt: &Path,
    vocab_path: &Path,
    scripts_path: &str,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    cfg.write_snapshot(out_dir)?;
    let model = DenoiserModel::load(ckpt)?;
    let vocab = Vocabulary::load(vocab_path)?;
    let sample_cfg = sample_config(cfg)?;
    let scripts = load_scripts(scripts_path)?;
    if scripts.is_empty() {
        bail!("no scripts in {scripts_path}");
    }
    for script in &scripts {
        let video = generate(script, &model, &vocab, &sample_cfg)
            .with_context(|| format!("generating {}", script.id))?;
        let stem = format!("{}__{}", script.id, sample_cfg.mode);
        video.write_tvid(&out_dir.join(format!("{stem}.tvid")))?;
        video.write_contact_sheet(&out_dir.join(format!("{stem}.ppm")))?;
    }
    println!(
        "generated {} videos in mode {} under {}",
        scripts.len(),
        sample_cfg.mode,
        out_dir.display()
    );
    Ok(())
}

// ── evaluate ────────────────────────────────────────────────────────────

/// Score generated videos against their scripts. The oracle judge needs the
/// ground-truth specs (`--specs`); the external judge needs `--endpoint`.
pub fn evaluate(
    cfg: &RunConfig,
    videos_dir: &Path,
    scripts_path: &str,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    cfg.write_snapshot(out_dir)?;
    let judge = cfg.get_or("judge", "oracle");
    let scripts = load_scripts(scripts_path)?;
    let specs: std::collections::BTreeMap<String, talc::datapipe::SyntheticSpec> =
        match cfg.get("specs") {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                let mut map = std::collections::BTreeMap::new();
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    let spec: talc::datapipe::SyntheticSpec = serde_json::from_str(line)?;
                    map.insert(spec.id.clone(), spec);
                }
                map
            }
            None => Default::default(),
        };
    let mut items = Vec::new();
    for script in &scripts {
        for mode in SampleMode::ALL {
            let path = videos_dir.join(format!("{}__{}.tvid", script.id, mode));
            if !path.exists() {
                continue;
            }
            let video = VideoTensor::read_tvid(&path)?;
            let score = match judge.as_str() {
                "oracle" => {
                    let spec = specs.get(&script.id).ok_or_else(|| {
                        anyhow!("oracle judge: no spec for script {} (pass --specs)", script.id)
                    })?;
                    oracle_score(&video, script, spec)?
                }
                "external" => {
                    let endpoint = cfg
                        .get("endpoint")
                        .ok_or_else(|| anyhow!("external judge needs --endpoint"))?;
                    let mut client = ClientConfig::new(endpoint);
                    client.model = cfg.get("model").map(|s| s.to_string());
                    external_judge(&video, script, client)?
                }
                other => bail!("unknown judge {other:?}; expected oracle | external"),
            };
            items.push(ScoredItem {
                id: script.id.clone(),
                scenario: script.scenario,
                n_scenes: script.num_scenes(),
                mode,
                score,
            });
        }
    }
    if items.is_empty() {
        bail!("no videos matched <id>__<mode>.tvid under {}", videos_dir.display());
    }
    std::fs::write(out_dir.join("scores.jsonl"), write_scores_jsonl(&items))?;
    println!("scored {} videos; scores at {}", items.len(), out_dir.join("scores.jsonl").display());
    Ok(())
}

// ── report ──────────────────────────────────────────────────────────────

/// Aggregate scored items (and optionally imported human judgments) into
/// the scenario/scene-count report tables.
pub fn report(cfg: &RunConfig, scores_path: Option<&Path>, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    cfg.write_snapshot(out_dir)?;
    let mut items = Vec::new();
    if let Some(path) = scores_path {
        items.extend(read_scores_jsonl(&std::fs::read_to_string(path)?)?);
    }
    if let Some(path) = cfg.get("human_csv") {
        items.extend(import_human_csv(&std::fs::read_to_string(path)?)?);
    }
    if items.is_empty() {
        bail!("no scores to aggregate (pass --scores and/or --human-csv)");
    }
    let agg = aggregate(&items)?;
    std::fs::write(out_dir.join("report.txt"), agg.render_text())?;
    std::fs::write(out_dir.join("report.csv"), agg.render_csv())?;
    print!("{}", agg.render_text());
    Ok(())
}
