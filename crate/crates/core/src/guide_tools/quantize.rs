//! Adaptive palette: seeded k-means++ in colour space with a fixed number of
//! Lloyd iterations. Exact distance ties go to the lowest cluster index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RasterImage;
use crate::error::{Error, Result};

pub const LLOYD_ITERATIONS: usize = 25;
pub const MAX_PALETTE: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    colors: Vec<Vec<f64>>,
}

impl Palette {
    pub fn colors(&self) -> &[Vec<f64>] {
        &self.colors
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    /// Index of the closest palette colour (lowest index on ties).
    pub fn nearest(&self, px: &[f64]) -> usize {
        nearest(&self.colors, px).0
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centers: &[Vec<f64>], px: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = sq(c, px);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn distinct(img: &RasterImage) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for px in img.pixels() {
        let key: Vec<u64> = px.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            out.push(px.to_vec());
        }
    }
    out
}

/// Reduces `img` to at most `k` colours.
///
/// When the image has no more than `k` distinct colours the palette is
/// exactly those colours (first-appearance order) and the image is unchanged.
pub fn quantize_adaptive(img: &RasterImage, k: usize, seed: u64) -> Result<(RasterImage, Palette)> {
    if k == 0 || k > MAX_PALETTE {
        return Err(Error::InvalidParameter(format!("palette size must be in 1..=256, got {k}")));
    }
    let unique = distinct(img);
    if unique.len() <= k {
        return Ok((img.clone(), Palette { colors: unique }));
    }

    let pixels: Vec<&[f64]> = img.pixels().collect();
    let ch = img.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = vec![pixels[rng.random_range(0..pixels.len())].to_vec()];
    let mut d2: Vec<f64> = pixels.iter().map(|p| sq(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = pixels.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            break;
        };
        let c = pixels[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(&pixels) {
            *d = d.min(sq(p, &c));
        }
        centers.push(c);
    }

    let mut assign = vec![0usize; pixels.len()];
    for _ in 0..LLOYD_ITERATIONS {
        for (a, p) in assign.iter_mut().zip(&pixels) {
            *a = nearest(&centers, p).0;
        }
        let mut sums = vec![vec![0.0; ch]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (&a, p) in assign.iter().zip(&pixels) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p.iter()).for_each(|(s, v)| *s += v);
        }
        let mut moved = false;
        for (c, (s, &n)) in centers.iter_mut().zip(sums.iter().zip(&counts)) {
            // Empty clusters keep their previous centre.
            if n > 0 {
                let next: Vec<f64> = s.iter().map(|v| v / n as f64).collect();
                moved |= next != *c;
                *c = next;
            }
        }
        if !moved {
            break;
        }
    }

    // Keep only used, distinct colours; reassign against the final palette.
    let mut used = vec![false; centers.len()];
    for p in &pixels {
        used[nearest(&centers, p).0] = true;
    }
    let mut colors: Vec<Vec<f64>> = Vec::new();
    for (c, u) in centers.into_iter().zip(used) {
        if u && !colors.contains(&c) {
            colors.push(c);
        }
    }
    let data: Vec<f64> = pixels
        .iter()
        .flat_map(|p| colors[nearest(&colors, p).0].iter().copied())
        .collect();
    let out = RasterImage::new(img.width(), img.height(), ch, data)?;
    Ok((out, Palette { colors }))
}
