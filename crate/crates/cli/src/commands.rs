//! The five subcommands. Each takes a resolved config, writes its outputs
//! and a manifest, and returns a summary for the caller to print.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bsnpp::evaluation::{ar_at_an, auc, detection_map, temporal_iou, Detection, MapReport, RecallCurve, VideoResult};
use bsnpp::inference::{ranking_order, read_proposals, write_proposals, Proposal, ProposalFile};
use bsnpp::model::Model;
use bsnpp::pipeline::Predictor;
use bsnpp::synthdata::{make_windows, read_annotations, ActionInstance, AnnotationFile};
use bsnpp::training::checkpoint::{read_checkpoint, save_checkpoint};
use bsnpp::training::{StepRecord, TrainLog, TrainSample, Trainer};
use log::{info, warn};

use crate::config::RunConfig;
use crate::dataset::{clear_files, ensure_dir, generate, json_files, load_dataset, write_dataset, Layout};
use crate::error::{io_err, CliError, CliResult};
use crate::manifest::RunManifest;

fn finish(layout: &Layout, command: &str, cfg: &RunConfig, inputs: &[PathBuf], artifacts: &[PathBuf], clock: Instant) -> CliResult<()> {
    RunManifest::new(command, cfg, inputs, artifacts, clock.elapsed().as_secs_f64()).write(&layout.manifest(command))
}

/// Writes the synthetic dataset to `out` (the run's data directory by default).
pub fn gen_data(cfg: &RunConfig, layout: &Layout, out: Option<&Path>) -> CliResult<Vec<PathBuf>> {
    let clock = Instant::now();
    let dir = out.map_or_else(|| layout.data_dir(), Path::to_path_buf);
    let videos = generate(cfg)?;
    let written = write_dataset(&dir, cfg.model.feature_dim, &videos)?;
    info!("wrote {} videos to {}", videos.len(), dir.display());
    finish(layout, "gen-data", cfg, &[], &written, clock)?;
    Ok(written)
}

/// Training windows of every video, in dataset order.
pub fn training_samples(cfg: &RunConfig, videos: &[bsnpp::synthdata::VideoRecord<f64>]) -> CliResult<Vec<TrainSample<f64>>> {
    let mut samples = Vec::new();
    for v in videos {
        for w in make_windows(v, cfg.model.window_len).map_err(|e| CliError::Data(format!("video {}: {e}", v.id)))? {
            samples.push(TrainSample::new(w, cfg.model.max_duration));
        }
    }
    Ok(samples)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains on the dataset in `data_dir`, writing the checkpoint and the
/// per-step loss log. With `resume` the run continues from the checkpoint's
/// step and the log is appended to.
pub fn train(cfg: &RunConfig, layout: &Layout, data_dir: &Path, resume: bool) -> CliResult<TrainSummary> {
    let clock = Instant::now();
    let videos = load_dataset(data_dir, cfg.model.feature_dim)?;
    let samples = training_samples(cfg, &videos)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!("{}: no annotated training windows", data_dir.display())));
    }
    let (ckpt, log_path) = (layout.checkpoint(), layout.train_log());
    ensure_dir(ckpt.parent().expect("checkpoint has a parent"))?;
    let mut model = Model::<f64>::new(cfg.model.clone(), cfg.init_seed())?;
    let mut trainer = if resume {
        let stored = read_checkpoint(&ckpt)?;
        let diff = stored.manifest_diff(&model);
        if !diff.is_empty() {
            return Err(mismatch(&ckpt, &diff));
        }
        match stored.restore(&ckpt, &mut model)? {
            Some((adam, step)) => {
                info!("resuming from step {step}");
                Trainer::resume(model, adam, step, cfg.train_config())?
            }
            None => return Err(CliError::Data(format!("{}: checkpoint has no optimizer state to resume from", ckpt.display()))),
        }
    } else {
        Trainer::new(model, cfg.train_config())?
    };
    let total = trainer.total_steps(samples.len());
    info!("{} windows, steps {}..{total}", samples.len(), trainer.step);
    let mut records: Vec<StepRecord> = Vec::new();
    let write_log = |records: &[StepRecord]| -> CliResult<()> {
        if resume {
            TrainLog::append_csv(records, &log_path)?;
        } else {
            TrainLog { records: records.to_vec() }.write_csv(&log_path)?;
        }
        Ok(())
    };
    while trainer.step < total {
        match trainer.train_step(&samples) {
            Ok(r) => {
                if r.step % 50 == 0 || r.step + 1 == total {
                    info!("step {} epoch {} lr {:e} loss {:.6}", r.step, r.epoch, r.lr, r.loss.total);
                }
                records.push(r);
            }
            Err(e @ bsnpp::Error::Divergence { .. }) => {
                save_checkpoint(&ckpt, &trainer.model, Some((&trainer.adam, trainer.step)))?;
                write_log(&records)?;
                return Err(CliError::Divergence(format!("{e}; last good checkpoint saved to {}", ckpt.display())));
            }
            Err(e) => return Err(e.into()),
        }
    }
    save_checkpoint(&ckpt, &trainer.model, Some((&trainer.adam, trainer.step)))?;
    write_log(&records)?;
    finish(layout, "train", cfg, &[data_dir.to_path_buf()], &[ckpt.clone(), log_path.clone()], clock)?;
    Ok(TrainSummary {
        steps: records.len(),
        first_loss: records.first().map(|r| r.loss.total),
        last_loss: records.last().map(|r| r.loss.total),
        checkpoint: ckpt,
        log: log_path,
    })
}

fn mismatch(path: &Path, diff: &[String]) -> CliError {
    CliError::Config(format!("{} does not match the configured model:\n  {}", path.display(), diff.join("\n  ")))
}

/// Loads a checkpoint into a model built from the config, refusing mismatches.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> CliResult<Model<f64>> {
    let stored = read_checkpoint(checkpoint)?;
    let mut model = Model::<f64>::new(cfg.model.clone(), cfg.init_seed())?;
    let diff = stored.manifest_diff(&model);
    if !diff.is_empty() {
        return Err(mismatch(checkpoint, &diff));
    }
    stored.restore(checkpoint, &mut model)?;
    Ok(model)
}

/// Writes one proposal file per video of `data_dir`; returns the paths.
pub fn infer(cfg: &RunConfig, layout: &Layout, checkpoint: &Path, data_dir: &Path, out: Option<&Path>) -> CliResult<Vec<PathBuf>> {
    let clock = Instant::now();
    let model = load_model(cfg, checkpoint)?;
    let videos = load_dataset(data_dir, cfg.model.feature_dim)?;
    let dir = out.map_or_else(|| layout.proposals_dir(), Path::to_path_buf);
    ensure_dir(&dir)?;
    clear_files(&dir, "json")?;
    let predictor = Predictor::new(&model, cfg.inference.clone())?;
    let mut written = Vec::new();
    for v in &videos {
        let proposals = predictor.infer_video(v)?;
        let path = dir.join(format!("{}.json", v.id));
        write_proposals(&path, &ProposalFile { id: v.id.clone(), proposals })?;
        written.push(path);
    }
    info!("wrote proposals for {} videos to {}", videos.len(), dir.display());
    finish(layout, "infer", cfg, &[checkpoint.to_path_buf(), data_dir.to_path_buf()], &written, clock)?;
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub curve: RecallCurve,
    pub auc: f64,
    pub map: MapReport,
    pub csv: PathBuf,
    pub json: PathBuf,
}

/// Labels each proposal with the class of its best-overlapping ground truth,
/// standing in for an external classifier.
pub fn oracle_detections(proposals: &[Proposal], gts: &[ActionInstance]) -> Vec<Detection> {
    if gts.is_empty() {
        return Vec::new();
    }
    proposals
        .iter()
        .map(|p| {
            let mut best = (f64::NEG_INFINITY, 0);
            for g in gts {
                let iou = temporal_iou((p.start, p.end), (g.start, g.end));
                if iou > best.0 {
                    best = (iou, g.label);
                }
            }
            Detection { start: p.start, end: p.end, score: p.score, label: best.1 }
        })
        .collect()
}

/// Pairs proposal and annotation files by video id.
pub fn load_results(proposals_dir: &Path, annotations_dir: &Path) -> CliResult<Vec<VideoResult>> {
    let mut props: BTreeMap<String, Vec<Proposal>> = BTreeMap::new();
    for p in json_files(proposals_dir)? {
        let doc = read_proposals(&p)?;
        props.insert(doc.id, doc.proposals);
    }
    let mut anns: BTreeMap<String, AnnotationFile> = BTreeMap::new();
    for p in json_files(annotations_dir)? {
        let doc = read_annotations(&p)?;
        anns.insert(doc.id.clone(), doc);
    }
    let no_ann: Vec<&str> = props.keys().filter(|k| !anns.contains_key(*k)).map(String::as_str).collect();
    let no_prop: Vec<&str> = anns.keys().filter(|k| !props.contains_key(*k)).map(String::as_str).collect();
    if !no_ann.is_empty() || !no_prop.is_empty() {
        let mut msg = String::from("video ids differ between proposals and annotations");
        if !no_ann.is_empty() {
            write!(msg, "; missing annotation file for: {}", no_ann.join(", ")).unwrap();
        }
        if !no_prop.is_empty() {
            write!(msg, "; missing proposals for: {}", no_prop.join(", ")).unwrap();
        }
        return Err(CliError::Data(msg));
    }
    Ok(props
        .into_iter()
        .map(|(id, mut proposals)| {
            proposals.sort_by(ranking_order);
            let ground_truth = anns.remove(&id).expect("ids checked").instances;
            VideoResult { id, proposals, ground_truth }
        })
        .collect())
}

fn fmt_t(t: f64) -> String {
    format!("{t:.2}")
}

/// Writes `metrics.csv` (metric, threshold, an, value) and `summary.json`.
pub fn eval(cfg: &RunConfig, layout: &Layout, proposals_dir: &Path, annotations_dir: &Path, out: Option<&Path>) -> CliResult<EvalSummary> {
    let clock = Instant::now();
    let results = load_results(proposals_dir, annotations_dir)?;
    let curve = ar_at_an(&results, &cfg.eval);
    let area = auc(&curve);
    let dets: Vec<Vec<Detection>> = results.iter().map(|r| oracle_detections(&r.proposals, &r.ground_truth)).collect();
    let gts: Vec<Vec<ActionInstance>> = results.iter().map(|r| r.ground_truth.clone()).collect();
    let map = detection_map(&dets, &gts, &cfg.detection_thresholds)?;
    if results.iter().all(|r| r.ground_truth.is_empty()) {
        warn!("no ground truth in {}; metrics are zero", annotations_dir.display());
    }

    let mut csv = String::from("metric,threshold,an,value\n");
    for (t, row) in cfg.eval.tiou_thresholds.iter().zip(&curve.per_threshold) {
        for (an, r) in curve.an_values.iter().zip(row) {
            writeln!(csv, "recall,{},{an},{r}", fmt_t(*t)).unwrap();
        }
    }
    for (an, ar) in curve.an_values.iter().zip(&curve.ar_values) {
        writeln!(csv, "AR,,{an},{ar}").unwrap();
    }
    writeln!(csv, "AUC,,,{area}").unwrap();
    for (t, m) in map.thresholds.iter().zip(&map.map) {
        writeln!(csv, "mAP,{},,{m}", fmt_t(*t)).unwrap();
    }
    writeln!(csv, "avg_mAP,,,{}", map.average).unwrap();

    let mut summary = serde_json::Map::new();
    for an in [1, 10, 100] {
        if let Some(v) = curve.ar_at(an) {
            summary.insert(format!("AR@{an}"), v.into());
        }
    }
    summary.insert("AUC".into(), area.into());
    for (t, m) in map.thresholds.iter().zip(&map.map) {
        summary.insert(format!("mAP@{}", fmt_t(*t)), (*m).into());
    }
    summary.insert("avg_mAP".into(), map.average.into());
    summary.insert("videos".into(), results.len().into());

    let dir = out.map_or_else(|| layout.report_dir(), Path::to_path_buf);
    ensure_dir(&dir)?;
    let (csv_path, json_path) = (dir.join("metrics.csv"), dir.join("summary.json"));
    fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, e))?;
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(summary)).expect("summary serializes");
    fs::write(&json_path, text + "\n").map_err(|e| io_err(&json_path, e))?;
    finish(
        layout,
        "eval",
        cfg,
        &[proposals_dir.to_path_buf(), annotations_dir.to_path_buf()],
        &[csv_path.clone(), json_path.clone()],
        clock,
    )?;
    Ok(EvalSummary { curve, auc: area, map, csv: csv_path, json: json_path })
}

/// gen-data, train, infer and eval in one run directory.
pub fn report(cfg: &RunConfig, layout: &Layout) -> CliResult<EvalSummary> {
    gen_data(cfg, layout, None)?;
    let data = layout.data_dir();
    train(cfg, layout, &data, false)?;
    infer(cfg, layout, &layout.checkpoint(), &data, None)?;
    eval(cfg, layout, &layout.proposals_dir(), &data.join("annotations"), None)
}
