use rayon::prelude::*;

use super::RasterImage;
use crate::error::{Error, Result};

/// Mirror index into `0..n` without repeating the edge sample (`d c b | a b c d | c b a`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Per-channel median over a `kernel x kernel` window with reflect padding.
pub fn median_filter(img: &RasterImage, kernel: usize) -> Result<RasterImage> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "median kernel must be odd and >= 1, got {kernel}"
        )));
    }
    if kernel == 1 {
        return Ok(img.clone());
    }
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let r = (kernel / 2) as isize;
    let mid = kernel * kernel / 2;
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut window = Vec::with_capacity(kernel * kernel);
            let mut row = Vec::with_capacity(w * ch);
            for x in 0..w {
                for c in 0..ch {
                    window.clear();
                    for dy in -r..=r {
                        let yy = reflect(y as isize + dy, h);
                        for dx in -r..=r {
                            window.push(img.get(reflect(x as isize + dx, w), yy, c));
                        }
                    }
                    let (_, m, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
                    row.push(*m);
                }
            }
            row
        })
        .collect();
    RasterImage::new(w, h, ch, rows.concat())
}
