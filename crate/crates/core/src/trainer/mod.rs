//! Training loop, evaluation and the experiment drivers built on them.

mod experiments;
mod metrics;
mod sampler;

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{ClassLabel, FrameSequence, Silhouette};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig};
use crate::model::{BagBatch, Mode, Model};
use crate::tensor::Tensor;

pub use experiments::{
    format_ratio, max_subset_size, parse_ratio, run_ablation, run_sweep, stratified_split, subsample_to_ratio,
    sweep_csv, write_sweep_csv, Ablation, SweepRow,
};
pub use metrics::EvalReport;
pub use sampler::{ratio_of, Ratio, SampledBatch, Sampler, SamplerConfig, WindowRef};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Batches per epoch; `None` means one pass worth of subjects.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    /// Windows evaluated together in one forward pass.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            steps_per_epoch: None,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            grad_clip: 5.0,
            seed: 0,
            sampler: SamplerConfig::default(),
            loss: LossConfig::default(),
            eval_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("train.steps_per_epoch must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("train.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return Err(Error::Config("train.weight_decay and train.grad_clip must be non-negative".into()));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("train.eval_batch must be positive".into()));
        }
        self.sampler.validate()?;
        self.loss.validate()
    }

    fn steps_for(&self, subjects: usize) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| subjects.div_ceil(self.sampler.subjects_per_batch).max(1))
    }
}

/// Mean loss terms over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub total: f64,
    pub triplet: f64,
    pub ce: f64,
    pub bce: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochLosses>,
    /// Set when training stopped on a non-finite loss; `model` then holds the
    /// last parameters that produced a finite loss.
    pub diverged: Option<String>,
}

impl TrainOutcome {
    /// Fails with a numeric error if training diverged.
    pub fn ok(self) -> Result<(Model, Vec<EpochLosses>)> {
        match self.diverged {
            Some(msg) => Err(Error::Numeric(msg)),
            None => Ok((self.model, self.history)),
        }
    }
}

pub fn history_csv(history: &[EpochLosses]) -> String {
    let mut s = String::from("epoch,L_total,L_triplet,L_ce,L_binaryce\n");
    for h in history {
        writeln!(s, "{},{},{},{},{}", h.epoch, h.total, h.triplet, h.ce, h.bce).unwrap();
    }
    s
}

pub fn write_history_csv(path: &Path, history: &[EpochLosses]) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

fn window_slices<'a>(dataset: &'a [FrameSequence], windows: &[WindowRef]) -> Vec<&'a [Silhouette]> {
    windows.iter().map(|w| &dataset[w.seq].frames[w.frames.clone()]).collect()
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// SGD with momentum and a cosine learning-rate schedule.
pub fn train(dataset: &[FrameSequence], mut model: Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sampler = Sampler::new(dataset, cfg.sampler.clone())?;
    let min_len = dataset.iter().map(|s| s.len()).min().unwrap_or(0);
    if min_len < model.config().bags {
        return Err(Error::Argument(format!(
            "a sequence has {min_len} frames, fewer than the {} bags",
            model.config().bags
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps = cfg.steps_for(dataset.len());
    let total_steps = steps * cfg.epochs;
    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let mut sums = [0.0f64; 4];
        for _ in 0..steps {
            let batch = sampler.sample(&mut rng);
            let windows = window_slices(dataset, &batch.windows);
            let bags = BagBatch::new(model.config(), &windows)?;

            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &bags, Mode::Train, true)?;
            let loss = total_loss(&mut tape, &out, &batch.labels, &cfg.loss)?;
            if !loss.total_value.is_finite() {
                let msg = format!("loss became {} at epoch {epoch}, step {step}", loss.total_value);
                log::error!("{msg}; keeping the last finite parameters");
                return Ok(TrainOutcome { model, history, diverged: Some(msg) });
            }
            tape.backward(loss.total)?;
            let grads: Vec<Vec<f64>> = out
                .params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
                .collect();
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                let msg = format!("gradient norm became {norm} at epoch {epoch}, step {step}");
                log::error!("{msg}; keeping the last finite parameters");
                return Ok(TrainOutcome { model, history, diverged: Some(msg) });
            }
            let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
            let lr = cosine_lr(cfg.lr, step, total_steps);
            for ((p, g), v) in model.params_mut().iter_mut().zip(&grads).zip(&mut velocity) {
                for ((w, &g), v) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                    *v = cfg.momentum * *v + clip * g + cfg.weight_decay * *w;
                    *w -= lr * *v;
                }
            }
            model.update_running(&out.bn_stats);

            for (s, x) in sums.iter_mut().zip([loss.total_value, loss.triplet, loss.ce, loss.bce]) {
                *s += x;
            }
            step += 1;
        }
        let n = steps as f64;
        let e = EpochLosses { epoch, total: sums[0] / n, triplet: sums[1] / n, ce: sums[2] / n, bce: sums[3] / n };
        log::info!(
            "epoch {epoch}: L_total {:.4} L_triplet {:.4} L_ce {:.4} L_binaryce {:.4}",
            e.total,
            e.triplet,
            e.ce,
            e.bce
        );
        history.push(e);
    }
    Ok(TrainOutcome { model, history, diverged: None })
}

/// Evaluation windows of length `t` covering a sequence of `len` frames:
/// `ceil(len / t)` evenly spaced windows, or the whole sequence if it is
/// not longer than `t`.
pub fn eval_windows(len: usize, t: usize) -> Vec<Range<usize>> {
    if len <= t {
        return vec![0..len];
    }
    let n = len.div_ceil(t);
    let span = len - t;
    (0..n)
        .map(|i| {
            let s = ((i * span) as f64 / (n - 1) as f64).round() as usize;
            s..s + t
        })
        .collect()
}

/// Per-sequence outputs averaged over its evaluation windows.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub subject_id: Vec<String>,
    pub truth: Vec<ClassLabel>,
    pub predicted: Vec<ClassLabel>,
    /// Mean ternary logits, `[N, 3]`.
    pub logits: Tensor,
    /// Mean pre-BNNeck embedding, `[N, D]`.
    pub embeddings: Tensor,
}

impl Predictions {
    pub fn report(&self) -> EvalReport {
        EvalReport::from_predictions(&self.truth, &self.predicted)
    }

    /// `subject_id,label,e0,...` with one row per sequence.
    pub fn embeddings_csv(&self) -> String {
        let d = self.embeddings.shape()[1];
        let mut s = String::from("subject_id,label");
        for j in 0..d {
            write!(s, ",e{j}").unwrap();
        }
        s.push('\n');
        for (i, (id, label)) in self.subject_id.iter().zip(&self.truth).enumerate() {
            write!(s, "{id},{label}").unwrap();
            for x in &self.embeddings.data()[i * d..(i + 1) * d] {
                write!(s, ",{x}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

pub fn predict(model: &Model, dataset: &[FrameSequence], window: usize, eval_batch: usize) -> Result<Predictions> {
    if dataset.is_empty() {
        return Err(Error::arg("evaluation over an empty dataset"));
    }
    if window == 0 || eval_batch == 0 {
        return Err(Error::arg("evaluation window and batch must be positive"));
    }
    let refs: Vec<WindowRef> = dataset
        .iter()
        .enumerate()
        .flat_map(|(seq, s)| eval_windows(s.len(), window).into_iter().map(move |frames| WindowRef { seq, frames }))
        .collect();
    if let Some(s) = dataset.iter().find(|s| s.len() < model.config().bags) {
        return Err(Error::Argument(format!(
            "{} has {} frames, fewer than the {} bags",
            s.subject_id,
            s.len(),
            model.config().bags
        )));
    }
    let n = dataset.len();
    let mut logits = vec![0.0; n * 3];
    let mut emb: Vec<f64> = Vec::new();
    let mut dim = 0;
    let mut counts = vec![0usize; n];
    for chunk in refs.chunks(eval_batch) {
        let windows = window_slices(dataset, chunk);
        let bags = BagBatch::new(model.config(), &windows)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &bags, Mode::Eval, false)?;
        let l = tape.value(out.logits3);
        let f = tape.value(out.metric_feature);
        if dim == 0 {
            dim = f.shape()[1];
            emb = vec![0.0; n * dim];
        }
        for (r, w) in chunk.iter().enumerate() {
            counts[w.seq] += 1;
            for c in 0..3 {
                logits[w.seq * 3 + c] += l.data()[r * 3 + c];
            }
            for j in 0..dim {
                emb[w.seq * dim + j] += f.data()[r * dim + j];
            }
        }
    }
    for (i, &c) in counts.iter().enumerate() {
        let inv = 1.0 / c as f64;
        logits[i * 3..i * 3 + 3].iter_mut().for_each(|x| *x *= inv);
        emb[i * dim..(i + 1) * dim].iter_mut().for_each(|x| *x *= inv);
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite logits during evaluation".into()));
    }
    let predicted = (0..n)
        .map(|i| {
            let row = &logits[i * 3..i * 3 + 3];
            let best = (0..3).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            ClassLabel::from_index(best).unwrap()
        })
        .collect();
    Ok(Predictions {
        subject_id: dataset.iter().map(|s| s.subject_id.clone()).collect(),
        truth: dataset.iter().map(|s| s.label).collect(),
        predicted,
        logits: Tensor::new(vec![n, 3], logits)?,
        embeddings: Tensor::new(vec![n, dim], emb)?,
    })
}

pub fn evaluate(model: &Model, dataset: &[FrameSequence], window: usize, eval_batch: usize) -> Result<EvalReport> {
    Ok(predict(model, dataset, window, eval_batch)?.report())
}

#[cfg(test)]
mod tests;
