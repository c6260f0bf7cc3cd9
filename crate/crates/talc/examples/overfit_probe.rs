//! Scratch probe for overfit hyperparameters (not part of the test suite).
use talc::conditioning::ConditioningMode;
use talc::datapipe::*;
use talc::denoiser::DenoiserConfig;
use talc::rng::Rng;
use talc::schedule::ScheduleConfig;
use talc::textenc::Vocabulary;
use talc::trainer::{TrainConfig, Trainer};

fn main() {
    let spec = SyntheticSpec {
        id: "probe".into(),
        size: 8,
        frames_per_scene: 2,
        shape_radius: 1.5,
        speed: 1.0,
        scenes: vec![
            SyntheticScene { shape: Shape::Square, color: NamedColor::Red, motion: Motion::Right, background: BACKGROUNDS[0] },
            SyntheticScene { shape: Shape::Square, color: NamedColor::Red, motion: Motion::Up, background: BACKGROUNDS[0] },
        ],
    };
    let mut rng = Rng::new(4);
    let (video, script) = generate_synthetic(&spec, &mut rng).unwrap();
    let vocab = Vocabulary::build(script.scenes.iter().map(|s| s.as_str()));
    let dconfig = DenoiserConfig {
        max_frames: 8, channels: 3, height: 8, width: 8, model_dim: 16, heads: 2,
        blocks: 1, patch: 2, text_tokens: 12, temporal_pos_enabled: true, temporal_enabled: true,
    };
    for lr in [3e-3, 1e-2, 2e-2, 3e-2] {
        let cfg = TrainConfig {
            batch_size: 1, learning_rate: lr, warmup_steps: 0, total_steps: 200,
            null_drop_prob: 0.05, checkpoint_every: 0, mode: ConditioningMode::Talc,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(dconfig.clone(), ScheduleConfig::default(), vocab.clone(), cfg).unwrap();
        let mut first = 0.0;
        let mut last = 0.0;
        let mut min = f64::INFINITY;
        let mut tail_avg = 0.0;
        for step in 1..=200 {
            let s = t.training_step(&[(video.clone(), script.clone())]).unwrap();
            if step == 1 { first = s.loss; }
            last = s.loss;
            min = min.min(s.loss);
            if step > 180 { tail_avg += s.loss / 20.0; }
        }
        println!("lr={lr:.0e} first={first:.4} last={last:.4} min={min:.4} tail20={tail_avg:.4} ratio={:.3}", tail_avg / first);
    }
}
