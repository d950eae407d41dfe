//! Raster images in `[0, 1]`, binary PPM/PGM codecs, and flat text vectors.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{EditMask, Guide, Shape};

/// Interleaved (`H x W x C`) image with values clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("image dimensions must be >= 1".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidParameter(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(
                format!("{width}x{height}x{channels}"),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidParameter("image contains NaN".into()));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, color: &[f64]) -> Result<Self> {
        let data = (0..width * height).flat_map(|_| color.iter().copied()).collect();
        Self::new(width, height, color.len(), data)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let at = (y * self.width + x) * self.channels;
        &self.data[at..at + self.channels]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.channels)
    }

    pub fn same_shape(&self, other: &RasterImage) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn shape(&self) -> Shape {
        Shape::Image { channels: self.channels, height: self.height, width: self.width }
    }

    /// Number of distinct pixel colors.
    pub fn distinct_colors(&self) -> usize {
        let mut seen: Vec<Vec<u64>> = self
            .pixels()
            .map(|p| p.iter().map(|v| v.to_bits()).collect())
            .collect();
        seen.sort();
        seen.dedup();
        seen.len()
    }

    /// Channel-major guide (`C x H x W`).
    pub fn to_guide(&self) -> Guide {
        let plane = self.width * self.height;
        let mut chw = vec![0.0; self.data.len()];
        for (i, px) in self.pixels().enumerate() {
            for (c, v) in px.iter().enumerate() {
                chw[c * plane + i] = *v;
            }
        }
        Guide::image(self.channels, self.height, self.width, chw).expect("valid image guide")
    }

    /// Inverse of [`to_guide`](Self::to_guide); values are clamped to `[0, 1]`.
    pub fn from_chw(shape: Shape, chw: &[f64]) -> Result<Self> {
        let Shape::Image { channels, height, width } = shape else {
            return Err(Error::shape("image shape", shape));
        };
        if chw.len() != shape.len() {
            return Err(Error::shape(shape, format!("[{}]", chw.len())));
        }
        let plane = width * height;
        let mut data = vec![0.0; chw.len()];
        for i in 0..plane {
            for c in 0..channels {
                let v = chw[c * plane + i];
                data[i * channels + c] = if v.is_nan() { 0.0 } else { v };
            }
        }
        Self::new(width, height, channels, data)
    }

    /// Binary mask from an image: pixels brighter than one half are editable.
    pub fn to_mask(&self, shape: Shape) -> Result<EditMask> {
        let guide = self.to_guide();
        let omega: Vec<bool> = match shape {
            s if s == guide.shape() => guide.data().iter().map(|v| *v > 0.5).collect(),
            // A single-channel mask broadcasts over colour channels.
            Shape::Image { channels, height, width }
                if self.channels == 1 && height == self.height && width == self.width =>
            {
                let plane: Vec<bool> = guide.data().iter().map(|v| *v > 0.5).collect();
                (0..channels).flat_map(|_| plane.iter().copied()).collect()
            }
            s => return Err(Error::shape(s, guide.shape())),
        };
        EditMask::new(omega, shape)
    }

    /// Encodes as binary PPM (`P6`, 3 channels) or PGM (`P5`, 1 channel), maxval 255.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        out
    }

    pub fn from_pnm(bytes: &[u8]) -> Result<Self> {
        let mut cursor = 0;
        let mut token = |bytes: &[u8]| -> Result<String> {
            loop {
                while cursor < bytes.len() && bytes[cursor].is_ascii_whitespace() {
                    cursor += 1;
                }
                if cursor < bytes.len() && bytes[cursor] == b'#' {
                    while cursor < bytes.len() && bytes[cursor] != b'\n' {
                        cursor += 1;
                    }
                    continue;
                }
                break;
            }
            let start = cursor;
            while cursor < bytes.len() && !bytes[cursor].is_ascii_whitespace() {
                cursor += 1;
            }
            if start == cursor {
                return Err(Error::Format("truncated PNM header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..cursor]).into_owned())
        };
        let magic = token(bytes)?;
        let channels = match magic.as_str() {
            "P6" => 3,
            "P5" => 1,
            other => return Err(Error::Format(format!("unsupported PNM magic `{other}`"))),
        };
        let num = |s: String| {
            s.parse::<usize>()
                .map_err(|e| Error::Format(format!("PNM header field `{s}`: {e}")))
        };
        let width = num(token(bytes)?)?;
        let height = num(token(bytes)?)?;
        let maxval = num(token(bytes)?)?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("only 8-bit PNM supported, maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let start = cursor + 1;
        let n = width * height * channels;
        if bytes.len() < start + n {
            return Err(Error::Format(format!(
                "PNM raster truncated: need {n} bytes, have {}",
                bytes.len().saturating_sub(start)
            )));
        }
        let data = bytes[start..start + n]
            .iter()
            .map(|&b| b as f64 / maxval as f64)
            .collect();
        Self::new(width, height, channels, data)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pnm(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pnm()).map_err(|e| Error::io(path, e))
    }

    /// Sum of squared differences over all values.
    pub fn squared_error(&self, other: &RasterImage) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::shape(self.shape(), other.shape()));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum())
    }
}

/// Whitespace-separated numbers; `#` starts a comment.
pub fn parse_vector(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .map(|line| line.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace)
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|e| Error::Format(format!("vector entry `{tok}`: {e}")))
        })
        .collect()
}

pub fn format_vector(values: &[f64]) -> String {
    let mut out = String::new();
    for v in values {
        // `{:?}` is the shortest representation that round-trips.
        out.push_str(&format!("{v:?}\n"));
    }
    out
}

pub fn read_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vector(&text)
}

pub fn write_vector(path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(format_vector(values).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Newline-separated lists of vectors (one per line), e.g. batches of guides.
pub fn parse_vector_rows(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .map(|line| line.split('#').next().unwrap_or("").trim())
        .filter(|line| !line.is_empty())
        .map(parse_vector)
        .collect()
}
