//! Shared fixtures for the benchmarks.

use sdedit_core::guide_tools::RasterImage;
use sdedit_core::{GmmComponent, GmmSpec, NoiseStream};

/// `k` isotropic components on a circle of radius 2 in the first two axes.
pub fn ring_gmm(k: usize, dim: usize, std: f64) -> GmmSpec {
    let components = (0..k)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / k as f64;
            let mut mean = vec![0.0; dim];
            mean[0] = 2.0 * a.cos();
            if dim > 1 {
                mean[1] = 2.0 * a.sin();
            }
            GmmComponent { weight: 1.0 / k as f64, mean, std }
        })
        .collect();
    GmmSpec::new(components).expect("valid mixture")
}

/// A smooth RGB gradient with per-pixel noise, values in `[0, 1]`.
pub fn noisy_image(width: usize, height: usize, seed: u64) -> RasterImage {
    let noise = NoiseStream::new(seed).normal_vec(0, 0, width * height * 3);
    let mut data = Vec::with_capacity(noise.len());
    for y in 0..height {
        for x in 0..width {
            let base = [x as f64 / width as f64, y as f64 / height as f64, 0.5];
            for (c, b) in base.iter().enumerate() {
                let z = noise[(y * width + x) * 3 + c];
                data.push((b + 0.05 * z).clamp(0.0, 1.0));
            }
        }
    }
    RasterImage::new(width, height, 3, data).expect("valid image")
}
