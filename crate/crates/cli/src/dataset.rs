//! On-disk layout of a run directory and the synthetic dataset in it.

use std::fs;
use std::path::{Path, PathBuf};

use bsnpp::numerics::derive_seed_indexed;
use bsnpp::synthdata::{gen_video_with, read_annotations, read_features, write_annotations, write_features, AnnotationFile, GenConfig, VideoRecord};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_err, CliError, CliResult};

/// Paths under a run's `--out` directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model").join("checkpoint.bsnc")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("model").join("train_log.csv")
    }

    pub fn proposals_dir(&self) -> PathBuf {
        self.root.join("proposals")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub length: usize,
    /// Relative to the data directory.
    pub features: String,
    pub annotations: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub channels: usize,
    pub videos: Vec<IndexEntry>,
}

pub const INDEX_FILE: &str = "index.json";

/// Videos of the configured synthetic dataset, in id order.
pub fn generate(cfg: &RunConfig) -> CliResult<Vec<VideoRecord<f64>>> {
    let d = &cfg.data;
    let gen = GenConfig {
        n_classes: d.n_classes,
        amplitude: d.amplitude,
        noise_std: d.noise_std,
        ..GenConfig::new(d.length, cfg.model.feature_dim, d.n_actions)
    };
    (0..d.n_videos)
        .map(|k| {
            let mut v = gen_video_with::<f64>(derive_seed_indexed(cfg.data_seed(), "video", k as u64), &gen)?;
            v.id = format!("video_{k:04}");
            Ok(v)
        })
        .collect()
}

pub(crate) fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Removes files with extension `ext` directly inside `dir`.
pub(crate) fn clear_files(dir: &Path, ext: &str) -> CliResult<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let p = entry.map_err(|e| io_err(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == ext) {
            fs::remove_file(&p).map_err(|e| io_err(&p, e))?;
        }
    }
    Ok(())
}

/// Writes features, annotations and the index; returns every path written.
pub fn write_dataset(dir: &Path, channels: usize, videos: &[VideoRecord<f64>]) -> CliResult<Vec<PathBuf>> {
    let (fdir, adir) = (dir.join("features"), dir.join("annotations"));
    for d in [&fdir, &adir] {
        ensure_dir(d)?;
    }
    clear_files(&fdir, "bsnf")?;
    clear_files(&adir, "json")?;
    let mut written = Vec::new();
    let mut entries = Vec::new();
    for v in videos {
        let (f, a) = (format!("features/{}.bsnf", v.id), format!("annotations/{}.json", v.id));
        write_features(&dir.join(&f), &v.features)?;
        write_annotations(&dir.join(&a), &AnnotationFile::of(v))?;
        written.push(dir.join(&f));
        written.push(dir.join(&a));
        entries.push(IndexEntry { id: v.id.clone(), length: v.len(), features: f, annotations: a });
    }
    let index = DatasetIndex { channels, videos: entries };
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    written.push(path);
    Ok(written)
}

pub fn read_index(dir: &Path) -> CliResult<DatasetIndex> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Loads every indexed video, checking shapes against the index and `channels`.
pub fn load_dataset(dir: &Path, channels: usize) -> CliResult<Vec<VideoRecord<f64>>> {
    let index = read_index(dir)?;
    if index.channels != channels {
        return Err(CliError::Data(format!(
            "{}: dataset has {} feature channels, model expects {channels}",
            dir.display(),
            index.channels
        )));
    }
    index
        .videos
        .iter()
        .map(|e| {
            let fpath = dir.join(&e.features);
            let features = read_features::<f64>(&fpath)?;
            let ann = read_annotations(&dir.join(&e.annotations))?;
            if features.shape() != [e.length, channels] || ann.length != e.length || ann.id != e.id {
                return Err(CliError::Data(format!(
                    "{}: shape {:?} or annotation header ({}, {}) disagrees with index entry ({}, {})",
                    fpath.display(),
                    features.shape(),
                    ann.id,
                    ann.length,
                    e.id,
                    e.length
                )));
            }
            Ok(VideoRecord { id: e.id.clone(), features, annotations: ann.instances })
        })
        .collect()
}

/// `*.json` files of a directory in file-name order.
pub(crate) fn json_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}
