//! File formats and preset resolution for the CLI.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sdedit_core::guide_tools::{format_vector, parse_vector, parse_vector_rows, RasterImage};
use sdedit_core::{EditMask, GmmSpec, Guide, Shape};
use sdedit_service::presets::{self, LoadedPreset, ModelSpec, PresetFile};
use serde_json::{json, Map, Value};

/// A resolved preset plus its mixture, when it has one.
pub struct PresetSource {
    pub preset: LoadedPreset,
    pub gmm: Option<GmmSpec>,
    pub origin: String,
}

impl PresetSource {
    pub fn resolve(name: &str, preset_dir: Option<&Path>) -> Result<Self> {
        let as_path = Path::new(name);
        let (file, base, origin): (PresetFile, Option<PathBuf>, String) =
            if as_path.extension().is_some_and(|e| e == "toml") {
                (read_preset_file(as_path)?, as_path.parent().map(Path::to_path_buf), as_path.display().to_string())
            } else if let Some(found) = find_in_dir(name, preset_dir)? {
                let base = found.parent().map(Path::to_path_buf);
                (read_preset_file(&found)?, base, found.display().to_string())
            } else if let Some(b) = presets::builtin().into_iter().find(|p| p.name == name) {
                (b, None, format!("builtin:{name}"))
            } else {
                bail!("unknown preset `{name}` (not a built-in, not in the preset directory, not a .toml file)");
            };
        let gmm = match &file.model {
            ModelSpec::Gmm { components } => Some(GmmSpec::new(components.clone())?),
            ModelSpec::Mlp { .. } => None,
        };
        let preset = LoadedPreset::build(file, base.as_deref())?;
        Ok(Self { preset, gmm, origin })
    }
}

fn read_preset_file(path: &Path) -> Result<PresetFile> {
    presets::read_file(path).with_context(|| format!("reading preset {}", path.display()))
}

fn find_in_dir(name: &str, dir: Option<&Path>) -> Result<Option<PathBuf>> {
    let Some(dir) = dir else { return Ok(None) };
    let Ok(entries) = std::fs::read_dir(dir) else { return Ok(None) };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    for p in paths {
        if read_preset_file(&p).is_ok_and(|f| f.name == name) {
            return Ok(Some(p));
        }
    }
    Ok(None)
}

fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "pgm" | "pnm"))
}

pub fn read_guide(path: &Path, shape: Shape) -> Result<Guide> {
    let guide = if is_image_path(path) {
        RasterImage::read(path)?.to_guide()
    } else {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Guide::flat(parse_vector(&text)?)?
    };
    if guide.len() != shape.len() {
        bail!("guide {} has shape {}, the preset expects {shape}", path.display(), guide.shape());
    }
    if guide.shape() != shape {
        // A flat file for an image preset is accepted in CHW order.
        return Ok(match shape {
            Shape::Image { channels, height, width } => Guide::image(channels, height, width, guide.data().to_vec())?,
            Shape::Flat { .. } => Guide::flat(guide.data().to_vec())?,
        });
    }
    Ok(guide)
}

pub fn read_mask(path: &Path, shape: Shape) -> Result<EditMask> {
    if is_image_path(path) {
        return Ok(RasterImage::read(path)?.to_mask(shape)?);
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(EditMask::from_values(&parse_vector(&text)?, shape)?)
}

pub fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_vector_rows(&text)?)
}

pub fn extension_for(shape: Shape) -> &'static str {
    match shape {
        Shape::Image { channels: 1, .. } => "pgm",
        Shape::Image { .. } => "ppm",
        Shape::Flat { .. } => "txt",
    }
}

/// Images are clamped to `[0, 1]` and written as PNM; vectors as text.
pub fn write_output(path: &Path, values: &[f64], shape: Shape) -> Result<()> {
    match shape {
        Shape::Image { .. } => {
            let clamped: Vec<f64> = values.iter().map(|v| v.clamp(0.0, 1.0)).collect();
            RasterImage::from_chw(shape, &clamped)?.write(path)?;
        }
        Shape::Flat { .. } => {
            std::fs::write(path, format_vector(values)).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(())
}

/// Vector batches go to one file, one row per sample; image batches to a directory.
pub fn write_batch(out: &Path, shape: Shape, outputs: &[Vec<f64>]) -> Result<Vec<PathBuf>> {
    match shape {
        Shape::Flat { .. } => {
            let mut text = String::new();
            for row in outputs {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                text.push_str(&line.join(" "));
                text.push('\n');
            }
            std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
            Ok(vec![out.to_path_buf()])
        }
        Shape::Image { .. } => {
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            outputs
                .iter()
                .enumerate()
                .map(|(i, o)| {
                    let path = out.join(format!("sample-{i:04}.{}", extension_for(shape)));
                    write_output(&path, o, shape)?;
                    Ok(path)
                })
                .collect()
        }
    }
}

pub fn manifest_path(out: &Path, explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let mut s = out.as_os_str().to_os_string();
            s.push(".json");
            PathBuf::from(s)
        }
    }
}

/// JSON record of one run: command, preset, schedule, and caller-supplied fields.
pub struct Manifest(Map<String, Value>);

impl Manifest {
    pub fn new(command: &str, src: &PresetSource) -> Self {
        let mut m = Map::new();
        m.insert("command".into(), json!(command));
        m.insert("preset".into(), json!(src.preset.info.name));
        m.insert("preset_source".into(), json!(src.origin));
        m.insert("schedule".into(), serde_json::to_value(&src.preset.info.schedule).unwrap_or(Value::Null));
        m.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        Self(m)
    }

    pub fn with(mut self, key: &str, value: Value) -> Self {
        self.0.insert(key.into(), value);
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(&Value::Object(self.0.clone()))?;
        std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
    }
}
