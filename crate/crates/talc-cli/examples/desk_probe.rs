//! Scratch probe for desk-scale timing and method ordering (dev only).
use std::time::Instant;
use talc_cli::desk::{reproduce_desk, DeskConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let corpus: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(48);
    let guidance: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2.5);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0);
    let cfg = DeskConfig {
        train_steps: steps,
        corpus_items: corpus,
        guidance,
        learning_rate: lr,
        seed,
        ..DeskConfig::default()
    };
    let out = std::env::temp_dir().join(format!("desk_probe_{steps}_{corpus}_{guidance}_{lr}_{seed}"));
    let _ = std::fs::remove_dir_all(&out);
    let t0 = Instant::now();
    match reproduce_desk(&cfg, &out) {
        Ok(summary) => {
            println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
            print!("{}", summary.report.render_text());
        }
        Err(e) => {
            println!("FAILED after {:.1}s: {e:#}", t0.elapsed().as_secs_f64());
        }
    }
}
