use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampler::{ratio_of, Ratio};
use super::{evaluate, train, EvalReport, TrainConfig};
use crate::data::{ClassLabel, FrameSequence, TextGuidance};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, PartitionMode};

/// Parses `pos:neu:neg`, e.g. `1:1:8`.
pub fn parse_ratio(s: &str) -> Result<Ratio> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::Argument(format!("ratio {s:?} is not of the form pos:neu:neg"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut r = [0.0; 3];
    for (slot, p) in r.iter_mut().zip(&parts) {
        *slot = p.trim().parse::<f64>().map_err(|_| bad())?;
        if !(slot.is_finite() && *slot >= 0.0) {
            return Err(bad());
        }
    }
    if r.iter().sum::<f64>() <= 0.0 {
        return Err(bad());
    }
    Ok(r)
}

pub fn format_ratio(r: &Ratio) -> String {
    r.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(":")
}

/// Per-class split into (train, test) dataset indices, both ascending.
/// Each class with at least two members contributes one or more test items.
pub fn stratified_split(dataset: &[FrameSequence], test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test_fraction must be in [0, 1), got {test_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for c in ClassLabel::ALL {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset[i].label == c).collect();
        idx.shuffle(&mut rng);
        let mut n_test = (idx.len() as f64 * test_fraction).round() as usize;
        if test_fraction > 0.0 && idx.len() >= 2 {
            n_test = n_test.clamp(1, idx.len() - 1);
        }
        te.extend_from_slice(&idx[..n_test]);
        tr.extend_from_slice(&idx[n_test..]);
    }
    tr.sort_unstable();
    te.sort_unstable();
    Ok((tr, te))
}

fn class_members(dataset: &[FrameSequence], indices: &[usize]) -> [Vec<usize>; 3] {
    let mut by_class: [Vec<usize>; 3] = Default::default();
    for &i in indices {
        by_class[dataset[i].label.index()].push(i);
    }
    by_class
}

/// Size of the largest subset of `indices` whose class counts follow `ratio`.
pub fn max_subset_size(dataset: &[FrameSequence], indices: &[usize], ratio: &Ratio) -> usize {
    let by_class = class_members(dataset, indices);
    let unit = ClassLabel::ALL
        .iter()
        .filter(|&&c| ratio_of(ratio, c) > 0.0)
        .map(|&c| by_class[c.index()].len() as f64 / ratio_of(ratio, c))
        .fold(f64::INFINITY, f64::min)
        .floor();
    ClassLabel::ALL.iter().map(|&c| (unit * ratio_of(ratio, c)).round() as usize).sum()
}

/// Subset of `indices` with class counts proportional to `ratio` and
/// `total` members (rounded per class). Members are taken in index order.
pub fn subsample_to_ratio(
    dataset: &[FrameSequence],
    indices: &[usize],
    ratio: &Ratio,
    total: usize,
) -> Result<Vec<usize>> {
    let by_class = class_members(dataset, indices);
    let sum: f64 = ratio.iter().sum();
    let mut out = Vec::with_capacity(total);
    for c in ClassLabel::ALL {
        let want = (total as f64 * ratio_of(ratio, c) / sum).round() as usize;
        let have = &by_class[c.index()];
        if want > have.len() || (want == 0 && ratio_of(ratio, c) > 0.0) {
            return Err(Error::Sampler(format!(
                "cannot draw {total} subjects at ratio {}: class {c} would need {want}, {} available",
                format_ratio(ratio),
                have.len()
            )));
        }
        out.extend_from_slice(&have[..want]);
    }
    out.sort_unstable();
    Ok(out)
}

fn pick(dataset: &[FrameSequence], idx: &[usize]) -> Vec<FrameSequence> {
    idx.iter().map(|&i| dataset[i].clone()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: Ratio,
    pub train_counts: [usize; 3],
    pub report: EvalReport,
}

/// For each class ratio, trains on a subset of `train_pool` with that class
/// mix (the sampler uses the same ratio) and evaluates on `test_set`. All
/// training subsets have the same size, the largest every ratio can reach, so
/// only the class balance changes between rows. Test subjects of classes a
/// ratio excludes are left out of that row's evaluation.
pub fn run_sweep(
    train_pool: &[FrameSequence],
    test_set: &[FrameSequence],
    ratios: &[Ratio],
    model_cfg: &ModelConfig,
    text: &TextGuidance,
    train_cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    let all: Vec<usize> = (0..train_pool.len()).collect();
    let size = ratios
        .iter()
        .map(|r| max_subset_size(train_pool, &all, r))
        .min()
        .ok_or_else(|| Error::Config("sweep needs at least one ratio".into()))?;
    let mut rows = Vec::with_capacity(ratios.len());
    for ratio in ratios {
        let subset = pick(train_pool, &subsample_to_ratio(train_pool, &all, ratio, size)?);
        let mut held_out = test_set.to_vec();
        for c in ClassLabel::ALL {
            if ratio_of(ratio, c) == 0.0 {
                log::warn!("ratio {} excludes class {c}; its metrics are undefined", format_ratio(ratio));
                held_out.retain(|s| s.label != c);
            }
        }
        if held_out.is_empty() {
            return Err(Error::Config(format!("ratio {} leaves no test subjects", format_ratio(ratio))));
        }
        let mut cfg = train_cfg.clone();
        cfg.sampler.ratio = *ratio;
        log::info!("sweep ratio {}: class counts {:?}", format_ratio(ratio), crate::data::class_counts(&subset));
        let model = Model::new(model_cfg.clone(), text.clone())?;
        let (model, _) = train(&subset, model, &cfg)?.ok()?;
        let report = evaluate(&model, &held_out, cfg.sampler.window, cfg.eval_batch)?;
        rows.push(SweepRow { ratio: *ratio, train_counts: crate::data::class_counts(&subset), report });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("ratio,accuracy,macro_f1,sensitivity,specificity\n");
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            format_ratio(&r.ratio),
            r.report.accuracy,
            r.report.macro_f1,
            opt(r.report.sensitivity),
            opt(r.report.specificity)
        )
        .unwrap();
    }
    s
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    std::fs::write(path, sweep_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoBam,
    NoText,
    NoIbta,
    NoDtw,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::Full, Ablation::NoBam, Ablation::NoText, Ablation::NoIbta, Ablation::NoDtw];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoBam => "no_bam",
            Ablation::NoText => "no_text",
            Ablation::NoIbta => "no_ibta",
            Ablation::NoDtw => "no_dtw",
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Ablation::Full => {}
            Ablation::NoBam => c.borderline_head = false,
            Ablation::NoText => c.text = false,
            Ablation::NoIbta => c.cascade = false,
            Ablation::NoDtw => c.partition = PartitionMode::Uniform,
        }
        c
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            Error::Argument(format!("unknown ablation {s:?}; expected one of full, no_bam, no_text, no_ibta, no_dtw"))
        })
    }
}

pub fn run_ablation(
    variant: Ablation,
    train_set: &[FrameSequence],
    test_set: &[FrameSequence],
    model_cfg: &ModelConfig,
    text: &TextGuidance,
    train_cfg: &TrainConfig,
) -> Result<EvalReport> {
    let model = Model::new(variant.apply(model_cfg), text.clone())?;
    let (model, _) = train(train_set, model, train_cfg)?.ok()?;
    evaluate(&model, test_set, train_cfg.sampler.window, train_cfg.eval_batch)
}
