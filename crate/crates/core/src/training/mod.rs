//! Multi-task objective and the optimisation loop.

pub mod checkpoint;
pub mod losses;

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cbg::{cbg_forward, feature_input, FusionMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{derive_seed_indexed, rng_from_seed, AdamConfig, AdamState, SamplePlan, Scalar, Tape};
use crate::prb::{plan_for, prb_forward};
use crate::sampling::{regression_sample_with, two_stage_sample_with, SamplerConfig};
use crate::synthdata::{LabelSet, Window};

pub use losses::{cbg_loss, cbg_loss_with, prb_loss, total_loss, weighted_bl_loss, CbgTerms, PrbTerms};

/// A run of epochs at one learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrPhase {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the confidence-map loss.
    pub beta: f64,
    /// L2 coefficient over all parameters.
    pub gamma: f64,
    pub batch_size: usize,
    pub lr_schedule: Vec<LrPhase>,
    /// Optional cap on optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Cells drawn per window for each confidence-map term.
    pub n_cells: usize,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default = "one")]
    pub threads: usize,
    /// `ForwardOnly` trains without the reversed pass and the consistency term.
    #[serde(default)]
    pub fusion: FusionMode,
}

fn one() -> usize {
    1
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            beta: 10.0,
            gamma: 1e-4,
            batch_size: 16,
            lr_schedule: vec![LrPhase { epochs: 7, lr: 1e-3 }, LrPhase { epochs: 3, lr: 1e-4 }],
            max_steps: None,
            seed: 0,
            n_cells: 64,
            sampler: SamplerConfig::default(),
            threads: 1,
            fusion: FusionMode::Bidirectional,
        }
    }

    /// Eight windows at batch 4 give two steps per epoch, so 150 epochs are 300 steps.
    pub fn desk() -> Self {
        Self {
            batch_size: 4,
            lr_schedule: vec![LrPhase { epochs: 105, lr: 1e-3 }, LrPhase { epochs: 45, lr: 1e-4 }],
            max_steps: Some(300),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be > 0, got {}", self.beta));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be > 0, got {}", self.gamma));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if self.epochs() == 0 {
            return bad("lr_schedule must cover at least one epoch".into());
        }
        if self.lr_schedule.iter().any(|p| !(p.lr > 0.0 && p.lr.is_finite())) {
            return bad("learning rates must be positive".into());
        }
        if self.n_cells < 2 {
            return bad("n_cells must be ≥ 2".into());
        }
        if self.threads == 0 {
            return bad("threads must be ≥ 1".into());
        }
        self.sampler.validate()
    }

    pub fn epochs(&self) -> usize {
        self.lr_schedule.iter().map(|p| p.epochs).sum()
    }

    /// Learning rate of a zero-based epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let mut start = 0;
        for p in &self.lr_schedule {
            if epoch < start + p.epochs {
                return p.lr;
            }
            start += p.epochs;
        }
        self.lr_schedule.last().map_or(0.0, |p| p.lr)
    }
}

/// A window with its precomputed targets.
#[derive(Clone, Debug)]
pub struct TrainSample<S = f64> {
    pub window: Window<S>,
    pub labels: LabelSet,
}

impl<S: Scalar> TrainSample<S> {
    pub fn new(window: Window<S>, max_duration: usize) -> Self {
        let labels = LabelSet::new(&window.annotations, window.len(), max_duration);
        Self { window, labels }
    }
}

/// Loss components of one window.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WindowLoss {
    pub cbg: CbgTerms,
    pub prb: PrbTerms,
    /// `cbg + β · prb`.
    pub total: f64,
}

/// Per-window loss and its gradient with respect to every parameter.
pub fn window_objective<S: Scalar>(
    model: &Model<S>,
    plan: &Arc<SamplePlan<S>>,
    sample: &TrainSample<S>,
    cfg: &TrainConfig,
    sample_seed: u64,
) -> Result<(WindowLoss, Vec<Vec<S>>)> {
    let mut tape = Tape::new();
    let x = feature_input(&mut tape, &sample.window.features)?;
    let trace = cbg_forward(&mut tape, model, x, cfg.fusion)?;
    let (l_cbg, cbg) = cbg_loss_with(&mut tape, &trace, &sample.labels.g_start, &sample.labels.g_end, cfg.fusion)?;
    let prb_trace = prb_forward(&mut tape, model, trace.base, plan)?;
    let mut rng = rng_from_seed(sample_seed);
    let sampler = SamplerConfig { n_cells: cfg.n_cells, ..cfg.sampler.clone() };
    let cls = match two_stage_sample_with(&sample.labels, &sampler, &mut rng) {
        Ok(c) => c,
        Err(Error::Infeasible(msg)) => {
            log::debug!("window {}@{}: {msg}", sample.window.video_id, sample.window.start_offset);
            Vec::new()
        }
        Err(e) => return Err(e),
    };
    let reg = regression_sample_with(&sample.labels, cfg.n_cells, &mut rng);
    let (l_prb, prb) = prb_loss(&mut tape, prb_trace.maps, &reg, &cls)?;
    let weighted = tape.scale(l_prb, S::of(cfg.beta));
    let loss = tape.add(l_cbg, weighted)?;
    let grads = tape.backward(loss)?;
    let total = tape.value(loss).data()[0].to_f64_lossy();
    Ok((WindowLoss { cbg, prb, total }, model.store.collect_grads(&tape, &grads)))
}

/// Batch-level loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub cbg: f64,
    pub prb: f64,
    pub l2: f64,
    pub total: f64,
    pub bl_fwd: f64,
    pub bl_bwd: f64,
    pub bl_deep: f64,
    pub consistency: f64,
    pub reg: f64,
    pub cls: f64,
}

/// `mean_b(L_CBG + β·L_PRB) + γ·Σθ²` and its gradient. Windows are evaluated
/// on `pool` when given; gradients are summed in batch order, so the result
/// does not depend on the thread count.
pub fn batch_objective<S: Scalar>(
    model: &Model<S>,
    plan: &Arc<SamplePlan<S>>,
    batch: &[&TrainSample<S>],
    seeds: &[u64],
    cfg: &TrainConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(BatchLoss, Vec<Vec<S>>)> {
    if batch.is_empty() || batch.len() != seeds.len() {
        return Err(Error::InvalidArgument(format!("batch of {} windows with {} seeds", batch.len(), seeds.len())));
    }
    let run = |(s, &seed): (&&TrainSample<S>, &u64)| window_objective(model, plan, s, cfg, seed);
    let results: Vec<Result<(WindowLoss, Vec<Vec<S>>)>> = match pool {
        Some(pool) => pool.install(|| batch.par_iter().zip(seeds.par_iter()).map(run).collect()),
        None => batch.iter().zip(seeds).map(run).collect(),
    };
    let inv = 1.0 / batch.len() as f64;
    let mut grads: Vec<Vec<S>> = model.store.iter().map(|p| vec![S::zero(); p.tensor.len()]).collect();
    let mut out = BatchLoss::default();
    for r in results {
        let (wl, g) = r?;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, &d) in acc.iter_mut().zip(gi) {
                *a += d;
            }
        }
        out.cbg += wl.cbg.total * inv;
        out.prb += wl.prb.total * inv;
        out.bl_fwd += wl.cbg.fwd * inv;
        out.bl_bwd += wl.cbg.bwd * inv;
        out.bl_deep += wl.cbg.deep * inv;
        out.consistency += wl.cbg.consistency * inv;
        out.reg += wl.prb.reg * inv;
        out.cls += wl.prb.cls * inv;
        out.total += wl.total * inv;
    }
    let (scale, two_gamma) = (S::of(inv), S::of(2.0 * cfg.gamma));
    let mut l2 = 0.0;
    for (acc, p) in grads.iter_mut().zip(model.store.iter()) {
        for (a, &theta) in acc.iter_mut().zip(p.tensor.data()) {
            *a = *a * scale + two_gamma * theta;
            l2 += theta.to_f64_lossy().powi(2);
        }
    }
    out.l2 = cfg.gamma * l2;
    out.total += out.l2;
    Ok((out, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: BatchLoss,
    /// Wall time of the step; kept out of the CSV so logs stay reproducible.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

pub const LOG_HEADER: &str = "step,epoch,lr,total,cbg,prb,l2,bl_fwd,bl_bwd,bl_deep,consistency,reg,cls";

impl TrainLog {
    pub fn csv_row(r: &StepRecord) -> String {
        let l = &r.loss;
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.step, r.epoch, r.lr, l.total, l.cbg, l.prb, l.l2, l.bl_fwd, l.bl_bwd, l.bl_deep, l.consistency, l.reg, l.cls
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&Self::csv_row(r));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Appends rows to an existing log (or creates it with a header).
    pub fn append_csv(records: &[StepRecord], path: &Path) -> Result<()> {
        let exists = path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut out = String::new();
        if !exists {
            out.push_str(LOG_HEADER);
            out.push('\n');
        }
        for r in records {
            out.push_str(&Self::csv_row(r));
            out.push('\n');
        }
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn total_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.seconds).sum()
    }
}

/// Model, optimizer and schedule position; everything a resumed run needs.
pub struct Trainer<S: Scalar = f64> {
    pub model: Model<S>,
    pub adam: AdamState<S>,
    pub config: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: usize,
    plan: Arc<SamplePlan<S>>,
    pool: Option<rayon::ThreadPool>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Model<S>, config: TrainConfig) -> Result<Self> {
        let adam = AdamState::new(&model.store, AdamConfig::default());
        Self::resume(model, adam, 0, config)
    }

    pub fn resume(model: Model<S>, adam: AdamState<S>, step: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let pool = if config.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.threads)
                    .build()
                    .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        let plan = plan_for(&model.config);
        Ok(Self { model, adam, config, step, plan, pool })
    }

    pub fn plan(&self) -> &Arc<SamplePlan<S>> {
        &self.plan
    }

    pub fn steps_per_epoch(&self, n_windows: usize) -> usize {
        n_windows.div_ceil(self.config.batch_size)
    }

    /// Total steps the schedule (and `max_steps`) allows.
    pub fn total_steps(&self, n_windows: usize) -> usize {
        let full = self.steps_per_epoch(n_windows) * self.config.epochs();
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    /// Window order of an epoch, derived from the seed so resumption is exact.
    pub fn epoch_order(&self, epoch: usize, n_windows: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n_windows).collect();
        let mut rng = rng_from_seed(derive_seed_indexed(self.config.seed, "shuffle", epoch as u64));
        order.shuffle(&mut rng);
        order
    }

    /// One optimizer step on the batch the schedule places at `self.step`.
    /// On a non-finite loss or gradient the parameters are left untouched.
    pub fn train_step(&mut self, data: &[TrainSample<S>]) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let clock = Instant::now();
        let spe = self.steps_per_epoch(data.len());
        let epoch = self.step / spe;
        let k = self.step % spe;
        let order = self.epoch_order(epoch, data.len());
        let bs = self.config.batch_size;
        let idx = &order[k * bs..((k + 1) * bs).min(data.len())];
        let batch: Vec<&TrainSample<S>> = idx.iter().map(|&i| &data[i]).collect();
        let seeds: Vec<u64> = idx
            .iter()
            .map(|&i| derive_seed_indexed(self.config.seed, "sample", (self.step * data.len() + i) as u64))
            .collect();
        let (loss, grads) = batch_objective(&self.model, &self.plan, &batch, &seeds, &self.config, self.pool.as_ref())?;
        let finite = loss.total.is_finite() && grads.iter().flatten().all(|g| g.is_finite());
        if !finite {
            return Err(Error::Divergence { step: self.step, what: format!("loss {}", loss.total) });
        }
        self.model.store.zero_grad();
        self.model.store.add_grads(&grads, S::one());
        let lr = self.config.lr_at_epoch(epoch);
        self.adam.step(&mut self.model.store, lr);
        let record = StepRecord { step: self.step, epoch, lr, loss, seconds: clock.elapsed().as_secs_f64() };
        self.step += 1;
        Ok(record)
    }

    /// Trains until the schedule ends; `on_step` sees every record.
    pub fn run(&mut self, data: &[TrainSample<S>], mut on_step: impl FnMut(&StepRecord)) -> Result<TrainLog> {
        let total = self.total_steps(data.len());
        let mut log = TrainLog::default();
        while self.step < total {
            let r = self.train_step(data)?;
            on_step(&r);
            log.records.push(r);
        }
        Ok(log)
    }
}

/// Trains a fresh model; convenience wrapper over [`Trainer`].
pub fn train<S: Scalar>(model: Model<S>, data: &[TrainSample<S>], cfg: &TrainConfig) -> Result<(Model<S>, TrainLog)> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let log = trainer.run(data, |r| log::debug!("step {} loss {:.6}", r.step, r.loss.total))?;
    Ok((trainer.model, log))
}
