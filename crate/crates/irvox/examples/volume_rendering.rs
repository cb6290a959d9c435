//! March rays through simple media: verify the homogeneous closed form,
//! inspect transmittance and surface points, and build an alpha mask for
//! empty-space skipping.
//!
//! Run with: `cargo run --release --example volume_rendering`

use irvox::math::{Aabb, Vec3};
use irvox::volume_render::{
    build_alpha_mask, march_ray, transmittance, DensityField, MarchOpts, Ray,
};

struct Slab {
    sigma: f64,
}

impl DensityField<f64> for Slab {
    fn density(&self, p: Vec3<f64>) -> f64 {
        if p.z().abs() < 0.25 {
            self.sigma
        } else {
            0.0
        }
    }
    fn bbox(&self) -> Aabb<f64> {
        Aabb::unit()
    }
}

fn main() {
    // Homogeneous slab: C = (1 - e^{-sigma L}) c, T = e^{-sigma L}.
    let field = Slab { sigma: 3.0 };
    let ray = Ray {
        origin: Vec3::new(0.0, 0.0, -2.0),
        dir: Vec3::new(0.0, 0.0, 1.0),
        t_near: 1.75, // enters the slab
        t_far: 2.25,  // exits the slab
    };
    let color = Vec3::new(0.9, 0.5, 0.2);
    for n in [8usize, 64, 1024] {
        let mut opts = MarchOpts::exact(n, None);
        let r = march_ray(&field, |_, _| color, &ray, &mut opts);
        let want = 1.0 - (-3.0f64 * 0.5).exp();
        println!(
            "n = {n:4}: C_r = {:.12} (closed form {:.12}), acc + T_end = {:.12}",
            r.color.x(),
            want * color.x(),
            r.acc + r.t_end
        );
    }

    let full = Ray {
        origin: Vec3::new(0.0, 0.0, -2.0),
        dir: Vec3::new(0.0, 0.0, 1.0),
        t_near: 1.0,
        t_far: 3.0,
    };
    let mut opts = MarchOpts::exact(256, Some(Vec3::splat(1.0)));
    let r = march_ray(&field, |_, _| color, &full, &mut opts);
    println!(
        "through the box: acc {:.4}, surface point z = {:.4} (slab center 0)",
        r.acc,
        r.xhat.z()
    );
    println!(
        "transmittance straight through: {:.6}",
        transmittance(&field, &full, 96, None)
    );

    let mask = build_alpha_mask(&field, [32, 32, 32], 0.05, 1e-4);
    println!(
        "alpha mask at 32^3: {:.1}% occupied (slab fills 25% plus a dilated shell)",
        100.0 * mask.occupancy_fraction()
    );
}
