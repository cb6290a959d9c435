//! Generate a small procedural ground-truth dataset (posed images plus
//! normal/albedo/roughness maps and a held-out relighting environment).
//! The other examples consume its output.
//!
//! Run with: `cargo run --release --example generate_dataset`

use irvox::oracle::{make_scene, EnvPreset, GenConfig, GenLights, ScenePreset};

fn main() {
    let out = std::path::Path::new("out/example_scene");
    let cfg = GenConfig {
        preset: ScenePreset::SphereSlab,
        env: EnvPreset::Studio,
        train_views: 12,
        test_views: 3,
        width: 72,
        height: 72,
        lights: GenLights::Single,
        shading_dirs: 128,
        indirect_dirs: 8,
        dense_resolution: 128,
        seed: 7,
    };
    let t0 = std::time::Instant::now();
    make_scene(&cfg, out).unwrap();
    println!(
        "wrote {} train + {} test views at {}x{} to {} in {:.1?}",
        cfg.train_views,
        cfg.test_views,
        cfg.width,
        cfg.height,
        out.display(),
        t0.elapsed()
    );
    println!("ground truth: test/*_normal.pfm, *_albedo.pfm, *_roughness.pfm, *_relight.png");
    println!("environments: env_gt.pfm (capture), env_relight.hdr (held out)");
}
