//! Score a trained checkpoint against its ground truth: novel-view PSNR
//! and SSIM for both rendering paths, normal mean angular error, aligned
//! albedo PSNR, and relighting PSNR under the held-out environment.
//!
//! Run `generate_dataset` and `train_tiny` first, then:
//! `cargo run --release --example evaluate_metrics`

use irvox::math::Aabb;
use irvox::trainer::TrainState;

fn main() {
    let ckpt = std::path::Path::new("out/example_run/ckpt_final.tirc");
    if !ckpt.exists() {
        eprintln!("checkpoint missing; run the train_tiny example first");
        std::process::exit(3);
    }
    let state: TrainState<f32> = TrainState::load(ckpt, Aabb::unit()).unwrap();
    let data = std::path::Path::new("out/example_scene");
    let report = match irvox::cli::evaluate(&state, data, data, 128, 0) {
        Ok(r) => r,
        Err(_) => {
            eprintln!("evaluation failed");
            std::process::exit(3);
        }
    };
    print!("{}", report.to_text());
}
