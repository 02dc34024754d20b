//! Per-frame motion descriptors, dynamic time warping, and contiguous
//! agglomerative clustering of a sequence into phase bags.

use std::ops::Range;

use crate::autodiff::kernels::strip_bounds;
use crate::data::Silhouette;
use crate::error::{Error, Result};

pub const DEFAULT_STRIPS: usize = 16;

/// Strip-wise motion magnitude for every frame: entry `r` of frame `t` is the
/// mean absolute pixel difference between frames `t` and `t - 1` inside
/// horizontal strip `r`. Frame 0 is compared with frame 1.
pub fn frame_features(frames: &[Silhouette], strips: usize) -> Result<Vec<Vec<f64>>> {
    if frames.len() < 2 {
        return Err(Error::arg(format!("need at least 2 frames for motion features, got {}", frames.len())));
    }
    let (h, w) = (frames[0].height(), frames[0].width());
    if strips == 0 || strips > h {
        return Err(Error::arg(format!("cannot split {h} rows into {strips} strips")));
    }
    if frames.iter().any(|f| (f.height(), f.width()) != (h, w)) {
        return Err(Error::dim("frames in a sequence must share one size"));
    }
    let diff = |a: &Silhouette, b: &Silhouette| -> Vec<f64> {
        (0..strips)
            .map(|r| {
                let (lo, hi) = strip_bounds(h, strips, r);
                let (pa, pb) = (&a.pixels()[lo * w..hi * w], &b.pixels()[lo * w..hi * w]);
                let changed = pa.iter().zip(pb).filter(|(x, y)| x != y).count();
                changed as f64 / pa.len() as f64
            })
            .collect()
    };
    Ok((0..frames.len())
        .map(|t| {
            let prev = if t == 0 { 1 } else { t - 1 };
            diff(&frames[t], &frames[prev])
        })
        .collect())
}

fn dtw_core(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> f64 {
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[j],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = cost(i, j) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

/// Classic DTW between two sequences of equal-dimension vectors, with
/// Euclidean element cost.
pub fn dtw_distance<A: AsRef<[f64]>, B: AsRef<[f64]>>(a: &[A], b: &[B]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::arg("dtw_distance needs two non-empty sequences"));
    }
    let dim = a[0].as_ref().len();
    if a.iter().map(|x| x.as_ref().len()).chain(b.iter().map(|x| x.as_ref().len())).any(|d| d != dim) {
        return Err(Error::dim("dtw_distance elements must share one dimension"));
    }
    Ok(dtw_core(a.len(), b.len(), |i, j| {
        a[i].as_ref().iter().zip(b[j].as_ref()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }))
}

/// DTW between scalar sequences.
pub fn dtw_scalar(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::arg("dtw_scalar needs two non-empty sequences"));
    }
    Ok(dtw_core(a.len(), b.len(), |i, j| (a[i] - b[j]).abs()))
}

/// Symmetric frame-by-frame DTW distances, zero on the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    size: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; size * size];
        for i in 0..size {
            for j in i + 1..size {
                let d = f(i, j);
                data[i * size + j] = d;
                data[j * size + i] = d;
            }
        }
        DistanceMatrix { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.size)
    }

    /// `size x size` CSV, full `f64` precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Pairwise DTW over descriptors read as scalar sequences across strips.
pub fn distance_matrix(features: &[Vec<f64>]) -> Result<DistanceMatrix> {
    if features.len() < 2 {
        return Err(Error::arg(format!("need at least 2 frames, got {}", features.len())));
    }
    if features.iter().any(|f| f.is_empty() || f.len() != features[0].len()) {
        return Err(Error::dim("frame descriptors must be non-empty and equally long"));
    }
    Ok(DistanceMatrix::from_fn(features.len(), |i, j| dtw_scalar(&features[i], &features[j]).expect("non-empty")))
}

/// `K + 1` increasing frame indices from 0 to S.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BagPartition {
    pub boundaries: Vec<usize>,
}

impl BagPartition {
    pub fn k(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn ranges(&self) -> Vec<Range<usize>> {
        self.boundaries.windows(2).map(|w| w[0]..w[1]).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Near-equal contiguous split; the first `S mod K` bags get one extra frame.
    pub fn uniform(len: usize, k: usize) -> Result<Self> {
        check_k(len, k)?;
        let mut boundaries = vec![0];
        let (base, extra) = (len / k, len % k);
        for i in 0..k {
            boundaries.push(boundaries[i] + base + usize::from(i < extra));
        }
        Ok(BagPartition { boundaries })
    }
}

fn check_k(len: usize, k: usize) -> Result<()> {
    if k == 0 || k > len {
        return Err(Error::arg(format!("bag count K={k} must be in 1..={len}")));
    }
    Ok(())
}

/// Contiguity-constrained average-linkage clustering. Starting from
/// singletons, the adjacent pair with the smallest mean cross distance is
/// merged until `k` segments remain. Ties go to the pair with the smaller
/// merged size, then to the leftmost pair.
pub fn cluster_bags(d: &DistanceMatrix, k: usize) -> Result<BagPartition> {
    let s = d.size();
    check_k(s, k)?;
    // prefix[i][j] = sum of D over rows < i, cols < j.
    let n = s + 1;
    let mut prefix = vec![0.0; n * n];
    for i in 0..s {
        for j in 0..s {
            prefix[(i + 1) * n + j + 1] =
                d.get(i, j) + prefix[i * n + j + 1] + prefix[(i + 1) * n + j] - prefix[i * n + j];
        }
    }
    let block = |r: Range<usize>, c: Range<usize>| {
        prefix[r.end * n + c.end] - prefix[r.start * n + c.end] - prefix[r.end * n + c.start]
            + prefix[r.start * n + c.start]
    };

    let mut bounds: Vec<usize> = (0..=s).collect();
    while bounds.len() - 1 > k {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..bounds.len() - 2 {
            let (a, b) = (bounds[i]..bounds[i + 1], bounds[i + 1]..bounds[i + 2]);
            let (na, nb) = (a.len(), b.len());
            let avg = block(a, b) / (na * nb) as f64;
            let key = (avg, na + nb, i);
            let better = match best {
                None => true,
                Some((bavg, bsize, _)) => avg < bavg || (avg == bavg && na + nb < bsize),
            };
            if better {
                best = Some(key);
            }
        }
        let (_, _, i) = best.expect("at least two segments");
        bounds.remove(i + 1);
    }
    Ok(BagPartition { boundaries: bounds })
}

/// Descriptors, distances and clustering in one call.
pub fn partition_sequence(frames: &[Silhouette], k: usize) -> Result<BagPartition> {
    check_k(frames.len(), k)?;
    if k == 1 {
        return Ok(BagPartition { boundaries: vec![0, frames.len()] });
    }
    let feats = frame_features(frames, DEFAULT_STRIPS)?;
    cluster_bags(&distance_matrix(&feats)?, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sequence, SwayProfile, View, FRAME_HEIGHT, FRAME_WIDTH};
    use proptest::prelude::*;

    /// Minimum cost over every monotone alignment path from (0,0) to the end,
    /// found by explicit depth-first enumeration.
    fn brute_dtw(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        fn walk(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize, acc: f64, best: &mut f64) {
            let c: f64 = a[i].iter().zip(&b[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let acc = acc + c;
            if i + 1 == a.len() && j + 1 == b.len() {
                *best = best.min(acc);
                return;
            }
            if i + 1 < a.len() {
                walk(a, b, i + 1, j, acc, best);
            }
            if j + 1 < b.len() {
                walk(a, b, i, j + 1, acc, best);
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                walk(a, b, i + 1, j + 1, acc, best);
            }
        }
        let mut best = f64::INFINITY;
        walk(a, b, 0, 0, 0.0, &mut best);
        best
    }

    fn seq(vals: &[f64]) -> Vec<Vec<f64>> {
        vals.iter().map(|&v| vec![v]).collect()
    }

    #[test]
    fn hand_example() {
        let (a, b) = (seq(&[0.0, 0.0]), seq(&[0.0, 1.0, 1.0]));
        assert_eq!(brute_dtw(&a, &b), 2.0);
        assert_eq!(dtw_distance(&a, &b).unwrap(), 2.0);
        assert_eq!(dtw_scalar(&[0.0, 0.0], &[0.0, 1.0, 1.0]).unwrap(), 2.0);
    }

    #[test]
    fn empty_is_rejected() {
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(matches!(dtw_distance(&empty, &seq(&[1.0])), Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn matches_path_enumeration(
            dim in 1usize..=3,
            la in 1usize..=6,
            lb in 1usize..=6,
            raw in proptest::collection::vec(-5.0f64..5.0, 36),
        ) {
            let a: Vec<Vec<f64>> = (0..la).map(|i| raw[i * dim..(i + 1) * dim].to_vec()).collect();
            let b: Vec<Vec<f64>> = (0..lb).map(|i| raw[18 + i * dim..18 + (i + 1) * dim].to_vec()).collect();
            let dp = dtw_distance(&a, &b).unwrap();
            prop_assert!((dp - brute_dtw(&a, &b)).abs() < 1e-9);
            prop_assert_eq!(dp, dtw_distance(&b, &a).unwrap());
            prop_assert_eq!(dtw_distance(&a, &a).unwrap(), 0.0);
            prop_assert!(dp >= 0.0);
        }

        #[test]
        fn clustering_nests_and_partitions(vals in proptest::collection::vec(0.0f64..1.0, 3..14)) {
            let feats: Vec<Vec<f64>> = vals.iter().map(|&v| vec![v, 1.0 - v, v * v]).collect();
            let d = distance_matrix(&feats).unwrap();
            let s = feats.len();
            let mut coarser: Option<BagPartition> = None;
            for k in 1..=s {
                let p = cluster_bags(&d, k).unwrap();
                prop_assert_eq!(p.k(), k);
                prop_assert_eq!(p.boundaries[0], 0);
                prop_assert_eq!(*p.boundaries.last().unwrap(), s);
                prop_assert!(p.boundaries.windows(2).all(|w| w[0] < w[1]));
                if let Some(c) = &coarser {
                    prop_assert!(c.boundaries.iter().all(|b| p.boundaries.contains(b)));
                }
                coarser = Some(p);
            }
        }
    }

    fn frame_with_rows(rows: Range<usize>) -> Silhouette {
        let mut f = Silhouette::empty(FRAME_HEIGHT, FRAME_WIDTH);
        for y in rows {
            for x in 30..50 {
                f.set(y, x, true);
            }
        }
        f
    }

    #[test]
    fn features_locality() {
        let a = frame_with_rows(40..80);
        let feats = frame_features(&[a.clone(), a.clone()], 16).unwrap();
        assert!(feats.iter().flatten().all(|&v| v == 0.0));

        let mut b = a.clone();
        b.set(2, 3, true);
        let feats = frame_features(&[a.clone(), b], 16).unwrap();
        for f in &feats {
            assert!(f[0] > 0.0);
            assert!(f[1..].iter().all(|&v| v == 0.0));
        }
        assert!(frame_features(&[a], 16).is_err());
    }

    #[test]
    fn constant_sequence_gives_zero_matrix_and_balanced_bags() {
        let frames = vec![frame_with_rows(10..100); 8];
        let feats = frame_features(&frames, 16).unwrap();
        let d = distance_matrix(&feats).unwrap();
        assert!(d.rows().flatten().all(|&v| v == 0.0));
        let p = partition_sequence(&frames, 4).unwrap();
        assert_eq!(p.sizes(), vec![2, 2, 2, 2]);
    }

    #[test]
    fn two_blocks_split_at_three() {
        let feats: Vec<Vec<f64>> = (0..6).map(|i| if i < 3 { vec![0.0; 4] } else { vec![5.0; 4] }).collect();
        let d = distance_matrix(&feats).unwrap();
        // Exhaustive: the within-segment mean distance is zero only for a cut at 3.
        let within = |cut: usize| {
            let mut tot = 0.0;
            for seg in [0..cut, cut..6] {
                for i in seg.clone() {
                    for j in seg.clone() {
                        tot += d.get(i, j);
                    }
                }
            }
            tot
        };
        let best = (1..6).min_by(|&a, &b| within(a).total_cmp(&within(b))).unwrap();
        assert_eq!(best, 3);
        assert_eq!(cluster_bags(&d, 2).unwrap().boundaries, vec![0, 3, 6]);
    }

    #[test]
    fn extreme_k() {
        let feats: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let d = distance_matrix(&feats).unwrap();
        assert_eq!(cluster_bags(&d, 5).unwrap().boundaries, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(cluster_bags(&d, 1).unwrap().boundaries, vec![0, 5]);
        assert!(matches!(cluster_bags(&d, 6), Err(Error::Argument(_))));
        assert!(cluster_bags(&d, 0).is_err());
    }

    #[test]
    fn uniform_split() {
        assert_eq!(BagPartition::uniform(30, 4).unwrap().sizes(), vec![8, 8, 7, 7]);
        assert_eq!(BagPartition::uniform(8, 4).unwrap().sizes(), vec![2, 2, 2, 2]);
    }

    fn walker() -> (SwayProfile, Vec<Silhouette>) {
        let profile = SwayProfile::three_phase(1.0, 0.08, 10, [14, 10, 14]);
        let frames = generate_sequence(&profile, 11).unwrap().frames;
        (profile, frames)
    }

    #[test]
    fn turning_moves_more_than_front() {
        let (profile, frames) = walker();
        let feats = frame_features(&frames, 16).unwrap();
        let mean_total = |r: Range<usize>| {
            let n = r.len() as f64;
            r.map(|t| feats[t].iter().sum::<f64>()).sum::<f64>() / n
        };
        let b = profile.phase_boundaries();
        let turning = mean_total(b[0]..b[1]);
        let front_mid = mean_total(b[0] / 4..3 * b[0] / 4);
        assert!(turning > front_mid, "{turning} vs {front_mid}");
    }

    #[test]
    fn within_phase_closer_than_across() {
        let (profile, frames) = walker();
        let d = distance_matrix(&frame_features(&frames, 16).unwrap()).unwrap();
        let mut phase = Vec::new();
        for p in &profile.phase_plan {
            phase.extend(std::iter::repeat_n(p.view, p.frames));
        }
        let (mut win, mut nw, mut cross, mut nc) = (0.0, 0, 0.0, 0);
        for i in 0..frames.len() {
            for j in i + 1..frames.len() {
                if phase[i] == phase[j] {
                    win += d.get(i, j);
                    nw += 1;
                } else {
                    cross += d.get(i, j);
                    nc += 1;
                }
            }
        }
        assert!(win / nw as f64 <= cross / nc as f64, "{} vs {}", win / nw as f64, cross / nc as f64);
        assert!(phase.contains(&View::Turning));
    }

    #[test]
    fn bags_follow_phases() {
        let (_, frames) = walker();
        let p = partition_sequence(&frames, 4).unwrap();
        let bags: Vec<Silhouette> = p.ranges().into_iter().flat_map(|r| frames[r].to_vec()).collect();
        assert_eq!(bags, frames);

        // Low-sway walkers: every phase change lands within two frames of a bag edge.
        let mut hits = 0;
        for seed in 0..10u64 {
            let period = 8 + (seed % 5) as usize;
            let budget = [10 + (seed % 7) as usize, period, 10 + 3 * (seed % 3) as usize];
            let profile = SwayProfile::three_phase(0.5, 0.04, period, budget);
            let frames = generate_sequence(&profile, seed).unwrap().frames;
            let p = partition_sequence(&frames, 4).unwrap();
            let aligned = profile.phase_boundaries().iter().all(|&b| p.boundaries.iter().any(|&x| x.abs_diff(b) <= 2));
            hits += usize::from(aligned);
        }
        assert!(hits >= 6, "{hits}/10 sequences aligned");
    }

    #[test]
    fn deterministic() {
        let (_, frames) = walker();
        assert_eq!(partition_sequence(&frames, 4).unwrap(), partition_sequence(&frames, 4).unwrap());
    }
}
