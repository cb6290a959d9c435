//! Spherical-Gaussian environment lighting: evaluate a mixture, rotate it
//! about the azimuth, estimate the hemisphere integral by stratified
//! sampling, and export lat-long images.
//!
//! Run with: `cargo run --release --example sg_environment`

use std::f64::consts::PI;

use irvox::math::{RngKey, StreamTag, Vec3};
use irvox::oracle::gen::studio_env;
use irvox::scene_io::{write_hdr, write_pfm};
use irvox::shading::{rotate_env, stratified_sphere_dirs};

fn main() {
    let env = studio_env();
    let up = Vec3::new(0.0, 0.0, 1.0);
    println!("radiance toward +Z: {:?}", env.eval(up).0);

    // Rotation equivariance about the azimuth.
    let rot = rotate_env(&env, 120f64.to_radians());
    let d = Vec3::new(0.3, -0.5, 0.81).normalized();
    let a = rot.eval(d);
    let b = env.eval(d.rotate_z(-120f64.to_radians()));
    println!("rotation equivariance residual: {:.3e}", (a - b).norm());

    // Stratified Monte Carlo: the sphere measure integrates to 4 pi and a
    // cosine lobe over the upper hemisphere to pi.
    let mut rng = RngKey(5).stream(StreamTag::SecondaryDir, 0, 0);
    let dirs = stratified_sphere_dirs::<f64>(512, &mut rng);
    let sphere: f64 = dirs.iter().map(|s| s.weight).sum();
    let cosine: f64 = dirs
        .iter()
        .filter(|s| s.dir.dot(up) > 0.0)
        .map(|s| s.weight * s.dir.dot(up))
        .sum();
    println!(
        "sphere measure estimate: {sphere:.4} (4 pi = {:.4})",
        4.0 * PI
    );
    println!("cosine-lobe estimate:    {cosine:.4} (pi  = {:.4})", PI);

    let out = std::path::Path::new("out/sg_environment");
    std::fs::create_dir_all(out).unwrap();
    let lut = env.to_latlong(128, 256);
    let rgb: Vec<f32> = lut.texels.iter().map(|&v| v as f32).collect();
    write_hdr(&out.join("studio.hdr"), 256, 128, &rgb).unwrap();
    write_pfm(&out.join("studio.pfm"), 256, 128, &rgb).unwrap();
    println!("wrote {}", out.join("studio.hdr").display());
}
