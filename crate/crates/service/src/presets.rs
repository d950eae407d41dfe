//! Model presets: a named score model, its schedule, and the guide shape it
//! accepts. Two are built in; more can be loaded from a directory of TOML
//! files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sdedit_core::score::LearnedScore;
use sdedit_core::schedule::ScheduleConfig;
use sdedit_core::{
    AnalyticGmmScore, ClassifierGradient, Error, GmmComponent, GmmSpec, NoiseSchedule, Result, ScoreModel, Shape,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    /// Exact score of a Gaussian mixture; also provides class guidance.
    Gmm { components: Vec<GmmComponent> },
    /// A trained score network; relative paths resolve against the preset file.
    Mlp { weights: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub shape: Shape,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub model: ModelSpec,
}

/// Public description returned by `GET /v1/presets`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetInfo {
    pub name: String,
    pub description: String,
    pub shape: Shape,
    pub schedule: ScheduleConfig,
    pub model_kind: String,
    pub num_classes: Option<usize>,
}

type Built = (
    Arc<dyn ScoreModel>,
    Option<Arc<dyn ClassifierGradient + Send + Sync>>,
    &'static str,
    Option<usize>,
    NoiseSchedule,
);

/// A preset with its score model constructed.
pub struct LoadedPreset {
    pub info: PresetInfo,
    pub schedule: NoiseSchedule,
    pub score: Arc<dyn ScoreModel>,
    pub classifier: Option<Arc<dyn ClassifierGradient + Send + Sync>>,
}

impl std::fmt::Debug for LoadedPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoadedPreset").field("info", &self.info).finish_non_exhaustive()
    }
}

impl LoadedPreset {
    pub fn build(file: PresetFile, base_dir: Option<&Path>) -> Result<Self> {
        let declared = if file.schedule == ScheduleConfig::default() {
            None
        } else {
            Some(file.schedule.resolve()?)
        };
        let built: Built = match &file.model {
            ModelSpec::Gmm { components } => {
                let schedule = match declared {
                    Some(s) => s,
                    None => NoiseSchedule::from_preset("ve-toy")?,
                };
                let gmm = GmmSpec::new(components.clone())?;
                let classes = gmm.len();
                let model = Arc::new(AnalyticGmmScore::new(gmm, schedule));
                (model.clone(), Some(model), "gmm", Some(classes), schedule)
            }
            ModelSpec::Mlp { weights } => {
                let path = match base_dir {
                    Some(dir) if weights.is_relative() => dir.join(weights),
                    _ => weights.clone(),
                };
                let (learned, header) = LearnedScore::load(&path)?;
                if declared.is_some_and(|s| s != header.schedule) {
                    return Err(Error::InvalidParameter(format!(
                        "preset {} declares a schedule that differs from the one in {}",
                        file.name,
                        path.display()
                    )));
                }
                (Arc::new(learned), None, "mlp", None, header.schedule)
            }
        };
        let (score, classifier, kind, classes, schedule) = built;
        if score.dim() != file.shape.len() {
            return Err(Error::shape(file.shape, format!("model dim {}", score.dim())));
        }
        Ok(Self {
            info: PresetInfo {
                name: file.name,
                description: file.description,
                shape: file.shape,
                schedule: schedule.into(),
                model_kind: kind.into(),
                num_classes: classes,
            },
            schedule,
            score,
            classifier,
        })
    }
}

/// Two well-separated modes in the plane.
pub fn toy_2d() -> PresetFile {
    PresetFile {
        name: "toy-2d".into(),
        description: "Two-mode Gaussian mixture in 2-D (modes at (-1, 0) and (1, 0), std 0.2)".into(),
        shape: Shape::Flat { len: 2 },
        schedule: ScheduleConfig { preset: Some("ve-toy".into()), ..Default::default() },
        model: ModelSpec::Gmm {
            components: vec![
                GmmComponent { weight: 0.5, mean: vec![-1.0, 0.0], std: 0.2 },
                GmmComponent { weight: 0.5, mean: vec![1.0, 0.0], std: 0.2 },
            ],
        },
    }
}

/// Tiny RGB "scenes": sky over ground, split at three horizon heights.
pub fn toy_scenes_32() -> PresetFile {
    let (c, h, w) = (3, 32, 32);
    let sky = [0.45, 0.65, 0.95];
    let grounds = [[0.25, 0.6, 0.2], [0.85, 0.75, 0.45], [0.35, 0.35, 0.4]];
    let horizons = [10, 16, 22];
    let components = horizons
        .iter()
        .zip(grounds)
        .map(|(&horizon, ground)| {
            let mut mean = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                for y in 0..h {
                    for _ in 0..w {
                        mean.push(if y < horizon { sky[ch] } else { ground[ch] });
                    }
                }
            }
            GmmComponent { weight: 1.0 / 3.0, mean, std: 0.05 }
        })
        .collect();
    PresetFile {
        name: "toy-scenes-32".into(),
        description: "Three 32x32 RGB sky/ground scenes as a Gaussian mixture".into(),
        shape: Shape::Image { channels: c, height: h, width: w },
        schedule: ScheduleConfig { preset: Some("ve-toy".into()), ..Default::default() },
        model: ModelSpec::Gmm { components },
    }
}

pub fn builtin() -> Vec<PresetFile> {
    vec![toy_2d(), toy_scenes_32()]
}

/// Reads every `*.toml` file in `dir` (sorted by file name).
pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<LoadedPreset>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(load_file)
        .collect()
}

/// Reads one preset file; relative weight paths resolve against its directory.
pub fn load_file(path: impl AsRef<Path>) -> Result<LoadedPreset> {
    let path = path.as_ref();
    LoadedPreset::build(read_file(path)?, path.parent())
}

/// Parses a preset file without building its model.
pub fn read_file(path: impl AsRef<Path>) -> Result<PresetFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(toml::from_str(&text)?)
}

#[derive(Debug, Default)]
pub struct PresetRegistry {
    presets: BTreeMap<String, Arc<LoadedPreset>>,
}

impl PresetRegistry {
    pub fn with_builtins() -> Result<Self> {
        let mut reg = Self::default();
        for file in builtin() {
            reg.insert(LoadedPreset::build(file, None)?);
        }
        Ok(reg)
    }

    /// Later entries replace earlier ones with the same name.
    pub fn insert(&mut self, preset: LoadedPreset) {
        self.presets.insert(preset.info.name.clone(), Arc::new(preset));
    }

    pub fn get(&self, name: &str) -> Option<Arc<LoadedPreset>> {
        self.presets.get(name).cloned()
    }

    pub fn infos(&self) -> Vec<PresetInfo> {
        self.presets.values().map(|p| p.info.clone()).collect()
    }
}
