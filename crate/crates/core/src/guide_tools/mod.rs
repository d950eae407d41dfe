//! Building guides and masks: the stroke-painting simulator (median filter
//! followed by an adaptive palette), mask derivation from edits, and I/O.

mod median;
mod quantize;
mod raster;

pub use median::median_filter;
pub use quantize::{quantize_adaptive, Palette, LLOYD_ITERATIONS, MAX_PALETTE};
pub use raster::{
    format_vector, parse_vector, parse_vector_rows, read_vector, write_vector, RasterImage,
};

use crate::error::{Error, Result};
use crate::sampler::EditMask;

/// Reference kernel size at 256 pixels of image height.
pub const REFERENCE_KERNEL: usize = 23;
pub const REFERENCE_HEIGHT: usize = 256;
/// Default palette size for simulated strokes.
pub const DEFAULT_STROKE_COLORS: usize = 6;

/// Median kernel that keeps the reference receptive fraction at height `h`:
/// the odd integer nearest `23 h / 256`, at least 3.
pub fn stroke_kernel_for_height(height: usize) -> usize {
    let target = REFERENCE_KERNEL as f64 * height as f64 / REFERENCE_HEIGHT as f64;
    // Nearest odd integer: odd numbers are 2m + 1.
    let m = ((target - 1.0) / 2.0).round().max(0.0) as usize;
    (2 * m + 1).max(3)
}

/// Simulated stroke painting: median filter, then reduce to `colors` colours.
pub fn simulate_stroke(img: &RasterImage, kernel: usize, colors: usize, seed: u64) -> Result<RasterImage> {
    let smoothed = median_filter(img, kernel)?;
    Ok(quantize_adaptive(&smoothed, colors, seed)?.0)
}

/// Marks every pixel where any channel moved by more than `threshold`;
/// the mark applies to all channels of that pixel.
pub fn mask_from_edit(original: &RasterImage, edited: &RasterImage, threshold: f64) -> Result<EditMask> {
    if !original.same_shape(edited) {
        return Err(Error::shape(original.shape(), edited.shape()));
    }
    let (w, h, ch) = (original.width(), original.height(), original.channels());
    let plane = w * h;
    let mut omega = vec![false; plane * ch];
    for (i, (a, b)) in original.pixels().zip(edited.pixels()).enumerate() {
        if a.iter().zip(b).any(|(x, y)| (x - y).abs() > threshold) {
            for c in 0..ch {
                omega[c * plane + i] = true;
            }
        }
    }
    EditMask::new(omega, original.shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes(seed: u64, size: usize) -> RasterImage {
        // Smooth background plus a few flat discs; deterministic per seed.
        let s = seed as f64;
        RasterImage::from_fn(size, size, 3, |x, y, c| {
            let (fx, fy) = (x as f64 / size as f64, y as f64 / size as f64);
            let mut v = 0.5 + 0.3 * ((fx * 3.0 + s) * (c as f64 + 1.0)).sin() * (fy * 2.0 + s * 0.5).cos();
            let (cx, cy) = (0.3 + 0.1 * (s % 3.0), 0.6 - 0.1 * (s % 2.0));
            if (fx - cx).powi(2) + (fy - cy).powi(2) < 0.04 {
                v = [0.9, 0.2, 0.1][c];
            }
            v
        })
        .unwrap()
    }

    fn naive_median(img: &RasterImage, k: usize) -> Vec<f64> {
        let (w, h, ch) = (img.width() as isize, img.height() as isize, img.channels());
        let r = (k / 2) as isize;
        let mirror = |i: isize, n: isize| -> usize {
            let mut i = i;
            while i < 0 || i >= n {
                if i < 0 {
                    i = -i;
                }
                if i >= n {
                    i = 2 * (n - 1) - i;
                }
            }
            i as usize
        };
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut win = Vec::new();
                    for dy in -r..=r {
                        for dx in -r..=r {
                            win.push(img.get(mirror(x + dx, w), mirror(y + dy, h), c));
                        }
                    }
                    win.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    out.push(win[win.len() / 2]);
                }
            }
        }
        out
    }

    #[test]
    fn kernel_scaling_rule() {
        assert_eq!(stroke_kernel_for_height(256), 23);
        assert_eq!(stroke_kernel_for_height(64), 5);
        assert_eq!(stroke_kernel_for_height(32), 3);
        assert_eq!(stroke_kernel_for_height(8), 3);
        assert_eq!(stroke_kernel_for_height(128), 11);
    }

    #[test]
    fn median_matches_naive_oracle() {
        let img = RasterImage::from_fn(5, 5, 1, |x, y, _| {
            if (x, y) == (1, 3) { 1.0 } else { ((x * 7 + y * 3) % 5) as f64 / 10.0 }
        })
        .unwrap();
        let out = median_filter(&img, 3).unwrap();
        assert_eq!(out.data(), &naive_median(&img, 3)[..]);
        assert!(out.get(1, 3, 0) < 1.0);

        let img = shapes(2, 11);
        for k in [3, 5, 23] {
            assert_eq!(median_filter(&img, k).unwrap().data(), &naive_median(&img, k)[..]);
        }
    }

    #[test]
    fn median_idempotent_on_large_flat_regions() {
        let img = RasterImage::from_fn(20, 20, 1, |x, _, _| if x < 10 { 0.1 } else { 0.8 }).unwrap();
        let once = median_filter(&img, 5).unwrap();
        assert_eq!(once, img);
        assert_eq!(median_filter(&once, 5).unwrap(), once);
    }

    #[test]
    fn quantize_two_color_image_unchanged() {
        let img = RasterImage::from_fn(4, 4, 3, |x, _, c| if x < 2 { [1.0, 0.0, 0.0][c] } else { 0.25 }).unwrap();
        let (out, palette) = quantize_adaptive(&img, 2, 0).unwrap();
        assert_eq!(out, img);
        assert_eq!(palette.colors(), &[vec![1.0, 0.0, 0.0], vec![0.25, 0.25, 0.25]]);
        // Asking for more colours than exist returns the distinct palette.
        let (out, palette) = quantize_adaptive(&img, 5, 0).unwrap();
        assert_eq!(out, img);
        assert_eq!(palette.len(), 2);
    }

    #[test]
    fn quantize_single_color_is_mean() {
        let img = shapes(1, 8);
        let (out, palette) = quantize_adaptive(&img, 1, 3).unwrap();
        let n = (img.width() * img.height()) as f64;
        for c in 0..3 {
            let mean: f64 = img.pixels().map(|p| p[c]).sum::<f64>() / n;
            assert!((palette.colors()[0][c] - mean).abs() < 1e-12);
        }
        assert_eq!(out.distinct_colors(), 1);
    }

    #[test]
    fn quantize_rejects_bad_k() {
        let img = shapes(1, 4);
        assert!(quantize_adaptive(&img, 0, 0).is_err());
        assert!(quantize_adaptive(&img, 257, 0).is_err());
    }

    /// Exhaustive optimum of the within-cluster squared error over all
    /// labelings in canonical (first-appearance) form.
    fn brute_force_sse(points: &[Vec<f64>], k: usize) -> f64 {
        fn sse(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
            let d = points[0].len();
            let mut sums = vec![vec![0.0; d]; k];
            let mut counts = vec![0.0; k];
            for (p, &l) in points.iter().zip(labels) {
                counts[l] += 1.0;
                for i in 0..d {
                    sums[l][i] += p[i];
                }
            }
            points
                .iter()
                .zip(labels)
                .map(|(p, &l)| (0..d).map(|i| (p[i] - sums[l][i] / counts[l]).powi(2)).sum::<f64>())
                .sum()
        }
        fn rec(points: &[Vec<f64>], k: usize, labels: &mut Vec<usize>, used: usize, best: &mut f64) {
            if labels.len() == points.len() {
                if used == k {
                    *best = best.min(sse(points, labels, k));
                }
                return;
            }
            let remaining = points.len() - labels.len();
            if k - used > remaining {
                return;
            }
            for l in 0..(used + 1).min(k) {
                labels.push(l);
                rec(points, k, labels, used.max(l + 1), best);
                labels.pop();
            }
        }
        let mut best = f64::INFINITY;
        rec(points, k, &mut Vec::new(), 0, &mut best);
        best
    }

    #[test]
    fn quantize_close_to_exhaustive_optimum() {
        for seed in 0..3u64 {
            let img = RasterImage::from_fn(4, 4, 3, |x, y, c| {
                let h = (x * 13 + y * 29 + c * 7 + seed as usize * 17) % 23;
                h as f64 / 22.0
            })
            .unwrap();
            let points: Vec<Vec<f64>> = img.pixels().map(<[f64]>::to_vec).collect();
            let optimum = brute_force_sse(&points, 3);
            let (out, palette) = quantize_adaptive(&img, 3, seed).unwrap();
            assert!(palette.len() <= 3);
            let got = img.squared_error(&out).unwrap();
            assert!(got <= optimum * 1.05 + 1e-12, "seed {seed}: {got} vs optimum {optimum}");
        }
    }

    #[test]
    fn reconstruction_error_nonincreasing_in_k() {
        let img = shapes(4, 32);
        let mut prev = f64::INFINITY;
        for k in [3, 6, 16, 30, 50] {
            let (out, palette) = quantize_adaptive(&img, k, 11).unwrap();
            assert!(palette.len() <= k);
            let err = img.squared_error(&out).unwrap();
            assert!(err <= prev, "k = {k}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn stroke_simulation() {
        let flat = RasterImage::filled(16, 16, &[0.3, 0.5, 0.7]).unwrap();
        assert_eq!(simulate_stroke(&flat, 5, 6, 1).unwrap(), flat);

        let edge = RasterImage::from_fn(12, 12, 3, |x, y, _| if x + y < 12 { 0.1 } else { 0.9 }).unwrap();
        let out = simulate_stroke(&edge, 3, 2, 1).unwrap();
        assert!(out.distinct_colors() <= 2);

        let img = shapes(7, 32);
        let kernel = stroke_kernel_for_height(img.height());
        let out = simulate_stroke(&img, kernel, 6, 5).unwrap();
        assert!(out.distinct_colors() <= 6);
        let two_stage = quantize_adaptive(&median_filter(&img, kernel).unwrap(), 6, 5).unwrap().0;
        assert_eq!(out, two_stage);
        assert_eq!(simulate_stroke(&img, kernel, 6, 5).unwrap(), out);
    }

    #[test]
    fn masks_from_edits() {
        let a = shapes(3, 6);
        assert_eq!(mask_from_edit(&a, &a, 0.1).unwrap().editable_count(), 0);

        let painted = RasterImage::from_fn(6, 6, 3, |x, y, c| if a.get(x, y, c) < 0.5 { 1.0 } else { 0.0 }).unwrap();
        let m = mask_from_edit(&a, &painted, 0.0).unwrap();
        assert_eq!(m.editable_count(), 6 * 6 * 3);

        let gray = RasterImage::filled(4, 4, &[0.2]).unwrap();
        let edited = RasterImage::from_fn(4, 4, 1, |x, y, _| if (x, y) == (2, 1) { 0.7 } else { 0.2 }).unwrap();
        let m = mask_from_edit(&gray, &edited, 0.1).unwrap();
        assert_eq!(m.editable_count(), 1);
        assert!(m.omega()[4 + 2]);

        let small = RasterImage::filled(3, 4, &[0.2]).unwrap();
        assert!(mask_from_edit(&gray, &small, 0.1).is_err());
    }
}
