//! On-disk dataset: `manifest.json` plus `volumes/<sample_id>.ms3t` (and the
//! JSON sidecar written next to each volume).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{generate_sample, load_volume, save_volume, write_atomic, PhantomSpec, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    #[serde(flatten)]
    pub spec: PhantomSpec,
    /// Training samples generated for this source.
    pub samples: usize,
    /// Whether training samples carry labels.
    #[serde(default)]
    pub labeled: bool,
    /// Extra labelled samples held out for evaluation.
    #[serde(default)]
    pub test_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub sources: Vec<SourceConfig>,
}

impl Default for DataConfig {
    /// A clean labelled source, a mildly shifted one and a strongly shifted,
    /// noisier one.
    fn default() -> Self {
        let source = |name: &str, seed, offset, scale, noise, blur, samples, labeled| SourceConfig {
            spec: PhantomSpec {
                name: name.into(),
                rng_seed: seed,
                transform: crate::volume::SourceTransform {
                    intensity_offset: offset,
                    intensity_scale: scale,
                    noise_stddev: noise,
                    blur_radius: blur,
                },
                ..Default::default()
            },
            samples,
            labeled,
            test_samples: 4,
        };
        DataConfig {
            sources: vec![
                source("clinic-a", 1, 0.0, 1.0, 40.0, 0.6, 20, true),
                source("clinic-b", 2, 150.0, 0.9, 80.0, 0.8, 60, false),
                source("clinic-c", 3, 450.0, 0.6, 160.0, 1.2, 60, false),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub sample_id: String,
    pub source_id: String,
    pub file: String,
    pub labeled: bool,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// `(train, test)` volumes for every configured source, in config order.
pub fn generate_volumes(cfg: &DataConfig) -> Result<(Vec<Volume>, Vec<Volume>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut names: Vec<&str> = cfg.sources.iter().map(|s| s.spec.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("source names must be unique".into()));
    }
    for s in &cfg.sources {
        for i in 0..s.samples {
            train.push(generate_sample(&s.spec, i, s.labeled)?);
        }
        for i in s.samples..s.samples + s.test_samples {
            test.push(generate_sample(&s.spec, i, true)?);
        }
    }
    Ok((train, test))
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// Writes every volume and the manifest. Refuses a non-empty `dir` unless
/// `force` is set, in which case the directory is cleared first.
pub fn write_dataset(cfg: &DataConfig, dir: &Path, force: bool) -> Result<DatasetManifest> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::OutputExists(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let vol_dir = dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let (train, test) = generate_volumes(cfg)?;
    let mut entries = Vec::new();
    for (split, vols) in [(Split::Train, &train), (Split::Test, &test)] {
        for v in vols {
            let file = format!("volumes/{}.ms3t", v.sample_id);
            save_volume(v, &dir.join(&file))?;
            entries.push(DatasetEntry {
                sample_id: v.sample_id.clone(),
                source_id: v.source_id.clone(),
                file,
                labeled: v.is_labeled(),
                split,
            });
        }
    }
    let manifest = DatasetManifest { entries };
    let path = manifest_path(dir);
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    write_atomic(&path, &bytes)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(dir);
    if !path.exists() {
        return Err(Error::Missing(path));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(&path, e))
}

/// Loads the volumes of one split, checking them against their entries.
pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<Volume>> {
    manifest
        .split(split)
        .map(|e| {
            let v = load_volume(&dir.join(&e.file))?;
            if v.sample_id != e.sample_id || v.is_labeled() != e.labeled {
                return Err(Error::InvalidVolume(format!(
                    "{} does not match its manifest entry",
                    e.file
                )));
            }
            Ok(v)
        })
        .collect()
}
