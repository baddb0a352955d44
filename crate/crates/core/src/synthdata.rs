//! Synthetic untrimmed-video feature sequences with planted action instances,
//! sliding-window training data and label assignment.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::temporal_iou;
use crate::numerics::{derive_seed, rng_from_seed, Scalar, Tensor};

/// An annotated action interval in snippet units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionInstance {
    pub start: f64,
    pub end: f64,
    #[serde(default)]
    pub label: u32,
}

impl ActionInstance {
    pub fn new(start: f64, end: f64, label: u32) -> Self {
        Self { start, end, label }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// One untrimmed video: a `[T, C]` feature sequence plus its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord<S = f64> {
    pub id: String,
    pub features: Tensor<S>,
    pub annotations: Vec<ActionInstance>,
}

impl<S: Scalar> VideoRecord<S> {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }
}

/// A fixed-length crop of a video with annotations in window coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Window<S = f64> {
    pub video_id: String,
    pub start_offset: usize,
    /// `[l_w, C]`.
    pub features: Tensor<S>,
    pub annotations: Vec<ActionInstance>,
}

impl<S: Scalar> Window<S> {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Training targets of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    pub window_len: usize,
    pub max_duration: usize,
    pub g_start: Vec<f64>,
    pub g_end: Vec<f64>,
    /// `[D, l_w]` row-major, row `j` is duration `j`.
    pub g_conf: Vec<f64>,
}

impl LabelSet {
    pub fn new(annotations: &[ActionInstance], window_len: usize, max_duration: usize) -> Self {
        let (g_start, g_end) = assign_boundary_labels(annotations, window_len);
        let g_conf = assign_confidence_labels(annotations, window_len, max_duration);
        Self { window_len, max_duration, g_start, g_end, g_conf }
    }

    pub fn conf(&self, j: usize, i: usize) -> f64 {
        self.g_conf[j * self.window_len + i]
    }
}

/// Generator settings. `new` picks durations that fit comfortably.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub length: usize,
    pub channels: usize,
    pub n_actions: usize,
    pub n_classes: u32,
    pub min_duration: usize,
    pub max_duration: usize,
    pub amplitude: f64,
    pub noise_std: f64,
}

impl GenConfig {
    pub fn new(length: usize, channels: usize, n_actions: usize) -> Self {
        let per = length / n_actions.max(1);
        let max_duration = (per / 2).max(4);
        Self {
            length,
            channels,
            n_actions,
            n_classes: 2,
            min_duration: 4.min(max_duration),
            max_duration,
            amplitude: 5.0,
            noise_std: 1.0,
        }
    }
}

/// Pattern added to in-action snippets of class `label`: `±amplitude` on the
/// class's dimensions, zero elsewhere.
pub fn class_pattern(label: u32, channels: usize, amplitude: f64) -> Vec<f64> {
    let mut rng = rng_from_seed(derive_seed(label as u64, "class-pattern"));
    (0..channels)
        .map(|c| {
            let on = (c + label as usize) % 2 == 0 || channels == 1;
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            if on {
                sign * amplitude
            } else {
                0.0
            }
        })
        .collect()
}

/// Envelope of an instance at snippet `t` (ramps over two snippets at each edge).
fn envelope(inst: &ActionInstance, t: usize) -> f64 {
    let t = t as f64;
    if t < inst.start || t >= inst.end {
        return 0.0;
    }
    let rise = (t - inst.start + 1.0) / 2.0;
    let fall = (inst.end - t) / 2.0;
    rise.min(fall).min(1.0)
}

pub fn gen_video(seed: u64, length: usize, channels: usize, n_actions: usize) -> Result<VideoRecord<f64>> {
    gen_video_with(seed, &GenConfig::new(length, channels, n_actions))
}

/// Deterministic synthetic video; features are rounded through `f32` so they
/// survive the on-disk format bit-exactly.
pub fn gen_video_with<S: Scalar>(seed: u64, cfg: &GenConfig) -> Result<VideoRecord<S>> {
    if cfg.n_actions == 0 || cfg.length == 0 || cfg.channels == 0 {
        return Err(Error::InvalidArgument(format!(
            "need n_actions, length and channels ≥ 1, got {}, {}, {}",
            cfg.n_actions, cfg.length, cfg.channels
        )));
    }
    if cfg.min_duration == 0 || cfg.min_duration > cfg.max_duration {
        return Err(Error::InvalidArgument(format!(
            "duration range [{}, {}] is empty",
            cfg.min_duration, cfg.max_duration
        )));
    }
    let n = cfg.n_actions;
    let needed = n * cfg.min_duration + (n - 1);
    if needed > cfg.length {
        return Err(Error::Infeasible(format!(
            "{n} actions of at least {} snippets need {needed} snippets, video has {}",
            cfg.min_duration, cfg.length
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut durations: Vec<usize> = (0..n).map(|_| rng.random_range(cfg.min_duration..=cfg.max_duration)).collect();
    // Shrink the longest draws until the packing fits.
    while durations.iter().sum::<usize>() + (n - 1) > cfg.length {
        let k = (0..n).max_by_key(|&k| (durations[k], std::cmp::Reverse(k))).expect("n ≥ 1");
        durations[k] -= 1;
    }
    let slack = cfg.length - durations.iter().sum::<usize>() - (n - 1);
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let label = rng.random_range(0..cfg.n_classes.max(1));
    let mut annotations = Vec::with_capacity(n);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (k, &d) in durations.iter().enumerate() {
        cursor += cuts[k] - prev_cut;
        prev_cut = cuts[k];
        annotations.push(ActionInstance::new(cursor as f64, (cursor + d) as f64, label));
        cursor += d + 1;
    }

    let pattern = class_pattern(label, cfg.channels, cfg.amplitude);
    let mut data = Vec::with_capacity(cfg.length * cfg.channels);
    for t in 0..cfg.length {
        let a: f64 = annotations.iter().map(|inst| envelope(inst, t)).sum();
        for p in &pattern {
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = (cfg.noise_std * z + a * p) as f32;
            data.push(S::of(v as f64));
        }
    }
    Ok(VideoRecord {
        id: format!("video_{seed:08}"),
        features: Tensor::new(vec![cfg.length, cfg.channels], data)?,
        annotations,
    })
}

/// Offsets of every window of length `window_len` at stride `window_len / 4`.
pub fn window_offsets(length: usize, window_len: usize) -> Vec<usize> {
    if window_len > length {
        return vec![0];
    }
    let stride = (window_len / 4).max(1);
    (0..=(length - window_len)).step_by(stride).collect()
}

/// Copies rows `[offset, offset + window_len)` of a `[T, C]` sequence, zero
/// padding past the end.
pub fn crop_features<S: Scalar>(features: &Tensor<S>, offset: usize, window_len: usize) -> Tensor<S> {
    let (len, c) = (features.shape()[0], features.shape()[1]);
    let mut out = vec![S::zero(); window_len * c];
    let rows = window_len.min(len.saturating_sub(offset));
    out[..rows * c].copy_from_slice(&features.data()[offset * c..(offset + rows) * c]);
    Tensor::new(vec![window_len, c], out).expect("crop shape")
}

/// Translates annotations into window coordinates, clipping to `[0, window_len]`
/// and keeping fragments with at least one visible snippet.
pub fn clip_annotations(annotations: &[ActionInstance], offset: usize, window_len: usize) -> Vec<ActionInstance> {
    let (lo, hi) = (offset as f64, (offset + window_len) as f64);
    annotations
        .iter()
        .filter_map(|a| {
            let s = a.start.max(lo);
            let e = a.end.min(hi);
            (e - s >= 1.0).then(|| ActionInstance::new(s - lo, e - lo, a.label))
        })
        .collect()
}

pub fn make_windows<S: Scalar>(video: &VideoRecord<S>, window_len: usize) -> Result<Vec<Window<S>>> {
    if window_len == 0 || window_len % 4 != 0 {
        return Err(Error::InvalidArgument(format!("window length {window_len} must be a positive multiple of 4")));
    }
    if window_len > video.len() {
        return Err(Error::InvalidArgument(format!(
            "window length {window_len} exceeds video length {}",
            video.len()
        )));
    }
    Ok(window_offsets(video.len(), window_len)
        .into_iter()
        .filter_map(|offset| {
            let annotations = clip_annotations(&video.annotations, offset, window_len);
            (!annotations.is_empty()).then(|| Window {
                video_id: video.id.clone(),
                start_offset: offset,
                features: crop_features(&video.features, offset, window_len),
                annotations,
            })
        })
        .collect())
}

/// Binary start/end labels: snippet `i` is positive when it lies in
/// `[t − d/10, t + d/10]` around a boundary `t` of any instance of duration `d`.
pub fn assign_boundary_labels(annotations: &[ActionInstance], window_len: usize) -> (Vec<f64>, Vec<f64>) {
    let mut g_start = vec![0.0; window_len];
    let mut g_end = vec![0.0; window_len];
    for a in annotations {
        let r = a.duration() / 10.0;
        for i in 0..window_len {
            let t = i as f64;
            if t >= a.start - r && t <= a.start + r {
                g_start[i] = 1.0;
            }
            if t >= a.end - r && t <= a.end + r {
                g_end[i] = 1.0;
            }
        }
    }
    (g_start, g_end)
}

/// `g_conf[j][i]` is the best IoU of `[i, i + j]` against any instance; cells
/// with `i + j ≥ window_len` are zero.
pub fn assign_confidence_labels(annotations: &[ActionInstance], window_len: usize, max_duration: usize) -> Vec<f64> {
    let mut g = vec![0.0; max_duration * window_len];
    for j in 0..max_duration {
        for i in 0..window_len.saturating_sub(j) {
            let prop = (i as f64, (i + j) as f64);
            g[j * window_len + i] = annotations
                .iter()
                .map(|a| temporal_iou(prop, (a.start, a.end)))
                .fold(0.0, f64::max);
        }
    }
    g
}

const FEATURE_MAGIC: &[u8; 4] = b"BSNF";
const FEATURE_VERSION: u32 = 1;

/// Writes a `[T, C]` sequence as `BSNF`, version, T, C, then `T·C` little-endian `f32`.
pub fn write_features<S: Scalar>(path: &Path, features: &Tensor<S>) -> Result<()> {
    let (t, c) = (features.shape()[0], features.shape()[1]);
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(FEATURE_MAGIC)?;
    write(&FEATURE_VERSION.to_le_bytes())?;
    write(&(t as u32).to_le_bytes())?;
    write(&(c as u32).to_le_bytes())?;
    for x in features.data() {
        write(&(x.to_f64_lossy() as f32).to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "missing BSNF header"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap());
    if word(1) != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", word(1))));
    }
    let (t, c) = (word(2) as usize, word(3) as usize);
    if bytes.len() != 16 + 4 * t * c {
        return Err(Error::format(path, format!("expected {t}×{c} floats, file has {} bytes", bytes.len())));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| S::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
        .collect();
    Tensor::new(vec![t, c], data).map_err(|e| Error::format(path, e.to_string()))
}

/// Per-video annotation document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub id: String,
    pub length: usize,
    pub instances: Vec<ActionInstance>,
}

impl AnnotationFile {
    pub fn of<S: Scalar>(video: &VideoRecord<S>) -> Self {
        Self { id: video.id.clone(), length: video.len(), instances: video.annotations.clone() }
    }
}

pub fn write_annotations(path: &Path, doc: &AnnotationFile) -> Result<()> {
    let text = serde_json::to_string_pretty(doc).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<AnnotationFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_video_has_disjoint_sorted_instances() {
        let v = gen_video(1, 64, 16, 2).unwrap();
        assert_eq!(v.features.shape(), &[64, 16]);
        assert_eq!(v.annotations.len(), 2);
        let (a, b) = (v.annotations[0], v.annotations[1]);
        assert!(0.0 <= a.start && a.start < a.end && a.end < b.start && b.end <= 64.0);
        assert_eq!(gen_video(1, 64, 16, 2).unwrap(), v);
    }

    #[test]
    fn infeasible_packing_is_rejected() {
        let mut cfg = GenConfig::new(10, 4, 3);
        cfg.min_duration = 4;
        cfg.max_duration = 4;
        assert!(matches!(gen_video_with::<f64>(0, &cfg), Err(Error::Infeasible(_))));
    }

    #[test]
    fn boundary_regions_follow_tenth_of_duration() {
        let (gs, ge) = assign_boundary_labels(&[ActionInstance::new(20.0, 40.0, 0)], 50);
        let ones = |g: &[f64]| g.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect::<Vec<_>>();
        assert_eq!(ones(&gs), vec![18, 19, 20, 21, 22]);
        assert_eq!(ones(&ge), vec![38, 39, 40, 41, 42]);
        let (gs, ge) = assign_boundary_labels(&[], 8);
        assert!(gs.iter().chain(&ge).all(|&v| v == 0.0));
    }

    #[test]
    fn windows_follow_quarter_stride_and_drop_empty() {
        let v = VideoRecord {
            id: "v".into(),
            features: Tensor::<f64>::zeros(vec![64, 2]),
            annotations: vec![ActionInstance::new(40.0, 50.0, 0)],
        };
        let offsets: Vec<usize> = make_windows(&v, 32).unwrap().iter().map(|w| w.start_offset).collect();
        assert_eq!(offsets, vec![16, 24, 32]);
        let w = &make_windows(&v, 32).unwrap()[0];
        assert_eq!(w.annotations, vec![ActionInstance::new(24.0, 32.0, 0)]);
        assert!(make_windows(&v, 30).is_err());

        let whole = VideoRecord { features: Tensor::<f64>::zeros(vec![100, 2]), ..v };
        assert_eq!(make_windows(&whole, 100).unwrap().len(), 1);
    }

    #[test]
    fn conf_labels_peak_on_exact_cells() {
        let g = assign_confidence_labels(&[ActionInstance::new(3.0, 8.0, 0)], 16, 8);
        assert_eq!(g[5 * 16 + 3], 1.0);
        assert!(assign_confidence_labels(&[], 16, 8).iter().all(|&v| v == 0.0));
        for j in 0..8 {
            for i in 16 - j..16 {
                assert_eq!(g[j * 16 + i], 0.0);
            }
        }
    }
}
