use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassLabel, FrameSequence};
use crate::error::{Error, Result};
use crate::losses::BatchLabels;

/// Class ratio in `positive : neutral : negative` order.
pub type Ratio = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Subjects per batch (P).
    pub subjects_per_batch: usize,
    /// Windows per subject (Q).
    pub samples_per_subject: usize,
    /// Window length T in frames.
    pub window: usize,
    /// Target class mix of each batch, positive : neutral : negative.
    pub ratio: Ratio,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { subjects_per_batch: 8, samples_per_subject: 2, window: 30, ratio: [1.0, 1.0, 8.0] }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects_per_batch < 2 || self.samples_per_subject < 2 {
            return Err(Error::Config("sampler needs subjects_per_batch >= 2 and samples_per_subject >= 2".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("sampler.window must be positive".into()));
        }
        if self.ratio.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || self.ratio.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!(
                "sampler.ratio {:?} must be non-negative with a positive sum",
                self.ratio
            )));
        }
        Ok(())
    }
}

/// Ratio entry for a class (the ratio is stored positive-first).
pub fn ratio_of(ratio: &Ratio, class: ClassLabel) -> f64 {
    match class {
        ClassLabel::Positive => ratio[0],
        ClassLabel::Neutral => ratio[1],
        ClassLabel::Negative => ratio[2],
    }
}

/// One sampled window: a frame range of dataset entry `seq`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub seq: usize,
    pub frames: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledBatch {
    pub windows: Vec<WindowRef>,
    pub labels: BatchLabels,
}

/// Draws P subjects with a class mix that follows the configured ratio, then
/// Q windows per subject.
#[derive(Clone, Debug)]
pub struct Sampler {
    config: SamplerConfig,
    /// Dataset indices per class, `ClassLabel::index` order.
    by_class: [Vec<usize>; 3],
    lengths: Vec<usize>,
    labels: Vec<ClassLabel>,
    ids: Vec<String>,
}

impl Sampler {
    pub fn new(dataset: &[FrameSequence], config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let mut by_class: [Vec<usize>; 3] = Default::default();
        for (i, s) in dataset.iter().enumerate() {
            by_class[s.label.index()].push(i);
        }
        if dataset.len() < config.subjects_per_batch {
            return Err(Error::Sampler(format!(
                "dataset has {} subjects, a batch needs {}",
                dataset.len(),
                config.subjects_per_batch
            )));
        }
        let usable = ClassLabel::ALL
            .iter()
            .filter(|&&c| !by_class[c.index()].is_empty() && ratio_of(&config.ratio, c) > 0.0)
            .count();
        if usable < 2 {
            return Err(Error::Sampler(
                "sampling needs subjects from at least two classes with a positive ratio".into(),
            ));
        }
        let exact = dataset.iter().filter(|s| s.frames.len() == config.window).count();
        if exact > 0 {
            log::warn!("{exact} subject(s) have exactly {} frames; their windows will coincide", config.window);
        }
        Ok(Sampler {
            config,
            by_class,
            lengths: dataset.iter().map(|s| s.frames.len()).collect(),
            labels: dataset.iter().map(|s| s.label).collect(),
            ids: dataset.iter().map(|s| s.subject_id.clone()).collect(),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// Per-class subject quotas by systematic sampling of the ratio, so each
    /// count is the floor or ceiling of its expectation. At least two classes
    /// are always represented.
    pub fn class_quota<R: Rng>(&self, rng: &mut R) -> [usize; 3] {
        let p = self.config.subjects_per_batch;
        let order = [ClassLabel::Positive, ClassLabel::Neutral, ClassLabel::Negative];
        let weight = |c: ClassLabel| {
            if self.by_class[c.index()].is_empty() {
                0.0
            } else {
                ratio_of(&self.config.ratio, c)
            }
        };
        let total: f64 = order.iter().map(|&c| weight(c)).sum();
        let u: f64 = rng.random();
        let mut quota = [0usize; 3];
        let mut cum = 0.0;
        let mut prev = 0usize;
        for c in order {
            cum += weight(c) / total;
            let upto = ((p as f64 * cum + u).floor() as usize).min(p);
            quota[c.index()] = upto - prev;
            prev = upto;
        }
        let short = p - prev;
        if short > 0 {
            let top = (0..3).max_by(|&a, &b| quota[a].cmp(&quota[b])).unwrap();
            quota[top] += short;
        }
        if quota.iter().filter(|&&q| q > 0).count() < 2 {
            let full = (0..3).find(|&i| quota[i] > 0).unwrap();
            let other = ClassLabel::ALL
                .iter()
                .map(|c| c.index())
                .filter(|&i| i != full && weight(ClassLabel::from_index(i).unwrap()) > 0.0)
                .max_by(|&a, &b| {
                    let (wa, wb) =
                        (weight(ClassLabel::from_index(a).unwrap()), weight(ClassLabel::from_index(b).unwrap()));
                    wa.total_cmp(&wb).then(b.cmp(&a))
                })
                .expect("two usable classes");
            quota[full] -= 1;
            quota[other] += 1;
        }
        quota
    }

    fn windows_for<R: Rng>(&self, seq: usize, rng: &mut R) -> Vec<Range<usize>> {
        let (len, t, q) = (self.lengths[seq], self.config.window, self.config.samples_per_subject);
        if len <= t {
            return vec![0..len; q];
        }
        let starts: Vec<usize> = (0..=len - t).collect();
        let chosen: Vec<usize> = if starts.len() >= q {
            starts.choose_multiple(rng, q).copied().collect()
        } else {
            (0..q).map(|_| *starts.choose(rng).unwrap()).collect()
        };
        chosen.into_iter().map(|s| s..s + t).collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> SampledBatch {
        let quota = self.class_quota(rng);
        let mut subjects = Vec::with_capacity(self.config.subjects_per_batch);
        for c in ClassLabel::ALL {
            let pool = &self.by_class[c.index()];
            let want = quota[c.index()];
            if want <= pool.len() {
                subjects.extend(pool.choose_multiple(rng, want).copied());
            } else {
                let mut all = pool.clone();
                all.shuffle(rng);
                subjects.extend(all);
                subjects.extend((0..want - pool.len()).map(|_| *pool.choose(rng).unwrap()));
            }
        }
        let mut windows = Vec::new();
        let mut class3 = Vec::new();
        let mut ids = Vec::new();
        for &s in &subjects {
            for frames in self.windows_for(s, rng) {
                windows.push(WindowRef { seq: s, frames });
                class3.push(self.labels[s]);
                ids.push(self.ids[s].clone());
            }
        }
        SampledBatch { windows, labels: BatchLabels::new(class3, ids) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(pos: usize, neu: usize, neg: usize) -> Vec<FrameSequence> {
        let cfg =
            SynthConfig { front_frames: [4, 5], turning_frames: [4, 5], back_frames: [4, 5], ..SynthConfig::default() };
        generate_dataset(pos, neu, neg, &cfg, 1).unwrap()
    }

    fn has_valid_triplet(labels: &[ClassLabel], ids: &[String]) -> bool {
        (0..labels.len()).any(|a| {
            (0..labels.len()).any(|p| p != a && labels[p] == labels[a] && ids[p] == ids[a])
                && labels.iter().any(|&l| l != labels[a])
        })
    }

    #[test]
    fn two_by_two_batch() {
        let ds = dataset(1, 1, 2);
        let cfg = SamplerConfig { subjects_per_batch: 2, samples_per_subject: 2, window: 8, ratio: [1.0, 1.0, 8.0] };
        let sampler = Sampler::new(&ds, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let b = sampler.sample(&mut rng);
            assert_eq!(b.windows.len(), 4);
            assert!(has_valid_triplet(&b.labels.class3, &b.labels.subject_id));
        }
    }

    #[test]
    fn windows_are_distinct_when_possible() {
        let ds = dataset(2, 2, 4);
        let cfg = SamplerConfig { subjects_per_batch: 4, samples_per_subject: 3, window: 6, ratio: [1.0, 1.0, 2.0] };
        let sampler = Sampler::new(&ds, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sampler.sample(&mut rng);
        for chunk in b.windows.chunks(3) {
            assert_eq!(chunk[0].seq, chunk[2].seq);
            assert!(chunk.iter().all(|w| w.frames.len() == 6));
            assert!(
                chunk[0].frames != chunk[1].frames
                    && chunk[1].frames != chunk[2].frames
                    && chunk[0].frames != chunk[2].frames
            );
        }
    }

    #[test]
    fn exact_length_subject_gives_identical_windows() {
        let mut ds = dataset(1, 0, 1);
        let t = ds[0].frames.len();
        let keep = t.min(ds[1].frames.len());
        ds[1].frames.truncate(keep);
        let cfg = SamplerConfig { subjects_per_batch: 2, samples_per_subject: 2, window: t, ratio: [1.0, 1.0, 1.0] };
        let sampler = Sampler::new(&ds, cfg).unwrap();
        let b = sampler.sample(&mut ChaCha8Rng::seed_from_u64(2));
        let w: Vec<_> = b.windows.iter().filter(|w| w.seq == 0).collect();
        assert_eq!(w[0].frames, w[1].frames);
        assert_eq!(w[0].frames, 0..t);
    }

    #[test]
    fn ratio_frequencies_match_in_expectation() {
        let ds = dataset(5, 5, 40);
        let cfg = SamplerConfig { subjects_per_batch: 8, samples_per_subject: 2, window: 8, ratio: [1.0, 1.0, 8.0] };
        let sampler = Sampler::new(&ds, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 3];
        for _ in 0..1000 {
            let b = sampler.sample(&mut rng);
            assert!(has_valid_triplet(&b.labels.class3, &b.labels.subject_id));
            for c in &b.labels.class3 {
                counts[c.index()] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        assert!((freq[ClassLabel::Negative.index()] - 0.8).abs() < 0.02, "{freq:?}");
        assert!((freq[ClassLabel::Neutral.index()] - 0.1).abs() < 0.02, "{freq:?}");
        assert!((freq[ClassLabel::Positive.index()] - 0.1).abs() < 0.02, "{freq:?}");
    }

    #[test]
    fn missing_classes_and_small_datasets() {
        let ds = dataset(2, 0, 3);
        let cfg = SamplerConfig { ratio: [1.0, 1.0, 2.0], subjects_per_batch: 4, ..SamplerConfig::default() };
        let sampler = Sampler::new(&ds, cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let q = sampler.class_quota(&mut rng);
            assert_eq!(q[ClassLabel::Neutral.index()], 0);
            assert_eq!(q.iter().sum::<usize>(), 4);
            assert!(q[ClassLabel::Positive.index()] > 0 && q[ClassLabel::Negative.index()] > 0);
        }
        assert!(matches!(Sampler::new(&ds[..3], cfg.clone()), Err(Error::Sampler(_))));
        let single = dataset(0, 0, 5);
        assert!(matches!(Sampler::new(&single, cfg), Err(Error::Sampler(_))));
    }
}
