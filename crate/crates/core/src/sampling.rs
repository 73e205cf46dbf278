//! Scene-wise index samplers. A trajectory is a scene, so every pair and
//! triple stays inside one trajectory and spans at most `horizon` steps.

use crate::world::Dataset;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("trajectory of length {len} is too short, need at least {need}")]
    TooShort { len: usize, need: usize },
    #[error("invalid sample spec: {0}")]
    BadSpec(String),
    #[error("no candidates to sample from")]
    Empty,
}

pub type Result<T> = std::result::Result<T, SamplingError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    /// Maximum index span `k - i` (or `j - i` for pairs).
    pub horizon: usize,
    pub n_buckets: usize,
    /// Cumulative heading change above which a triple is dropped.
    pub rotation_threshold: f64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec {
            horizon: 10,
            n_buckets: 8,
            rotation_threshold: std::f64::consts::PI,
        }
    }
}

impl SampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(SamplingError::BadSpec(format!("horizon {} < 2", self.horizon)));
        }
        if self.n_buckets < 2 {
            return Err(SamplingError::BadSpec(format!("n_buckets {} < 2", self.n_buckets)));
        }
        Ok(())
    }
}

/// `(i, j)` with `i < j <= i + horizon`: `i` uniform over starts, then `j`
/// uniform over the ends reachable from `i`.
pub fn sample_pair(len: usize, spec: &SampleSpec, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if len < 2 {
        return Err(SamplingError::TooShort { len, need: 2 });
    }
    let i = rng.gen_range(0..len - 1);
    let j_max = (i + spec.horizon).min(len - 1);
    let j = rng.gen_range(i + 1..=j_max);
    Ok((i, j))
}

/// `(i, j, k)` with `i < j < k <= i + horizon`, uniform over that set.
///
/// Draws a start, an end and a middle, then accepts with probability
/// proportional to how many triples the drawn `(i, k)` stands for, which
/// cancels the non-uniform proposal exactly.
pub fn sample_triple(
    len: usize,
    spec: &SampleSpec,
    rng: &mut impl Rng,
) -> Result<(usize, usize, usize)> {
    if len < 3 {
        return Err(SamplingError::TooShort { len, need: 3 });
    }
    if spec.horizon < 2 {
        return Err(SamplingError::BadSpec(format!("horizon {} < 2", spec.horizon)));
    }
    let n_ends = |i: usize| (i + spec.horizon).min(len - 1) - (i + 1);
    let bound = n_ends(0) * n_ends(0);
    loop {
        let i = rng.gen_range(0..len - 2);
        let k = rng.gen_range(i + 2..=(i + spec.horizon).min(len - 1));
        let j = rng.gen_range(i + 1..k);
        if rng.gen_range(0..bound) < n_ends(i) * (k - i - 1) {
            return Ok((i, j, k));
        }
    }
}

/// Keeps a triple unless its cumulative absolute heading change exceeds
/// `threshold`. Worlds without headings (`None`) keep everything.
pub fn rotation_filter(headings: Option<&[f64]>, triple: (usize, usize, usize), threshold: f64) -> bool {
    let Some(h) = headings else {
        return true;
    };
    let (i, _, k) = triple;
    let turn: f64 = h[i..=k].windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    turn <= threshold
}

/// Equal-width bucketing over `[min, max]` of a set of magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct Buckets {
    pub edges: Vec<f64>,
    /// Bucket of each candidate.
    pub assignment: Vec<usize>,
}

pub fn bucketize(mags: &[f64], n_buckets: usize) -> Option<Buckets> {
    let lo = mags.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mags.is_empty() || hi <= lo {
        return None;
    }
    let width = (hi - lo) / n_buckets as f64;
    let edges = (0..=n_buckets)
        .map(|b| if b == n_buckets { hi } else { lo + b as f64 * width })
        .collect();
    let assignment = mags
        .iter()
        .map(|&m| (((m - lo) / width) as usize).min(n_buckets - 1))
        .collect();
    Some(Buckets { edges, assignment })
}

/// Indices drawn from a magnitude-stratified candidate pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Stratified {
    pub picked: Vec<usize>,
    pub buckets: Option<Buckets>,
    /// Set when every candidate fell into one bucket and the draw is plain
    /// uniform.
    pub degenerate: bool,
}

/// Draws up to `ceil(n / n_buckets)` candidates per bucket without
/// replacement. Sparse buckets contribute what they have.
pub fn stratify_candidates(
    mags: &[f64],
    n: usize,
    n_buckets: usize,
    rng: &mut impl Rng,
) -> Result<Stratified> {
    if mags.is_empty() {
        return Err(SamplingError::Empty);
    }
    if n < n_buckets || n_buckets < 2 {
        return Err(SamplingError::BadSpec(format!(
            "n = {n} must be at least n_buckets = {n_buckets} >= 2"
        )));
    }
    let buckets = bucketize(mags, n_buckets);
    let single = buckets.as_ref().map_or(true, |b| {
        b.assignment.iter().all(|&a| a == b.assignment[0])
    });
    if single {
        let take = n.min(mags.len());
        let mut picked = sample_indices(rng, mags.len(), take).into_vec();
        picked.sort_unstable();
        return Ok(Stratified {
            picked,
            buckets,
            degenerate: true,
        });
    }
    let b = buckets.expect("non-degenerate");
    let per = n.div_ceil(n_buckets);
    let mut members = vec![Vec::new(); n_buckets];
    for (idx, &a) in b.assignment.iter().enumerate() {
        members[a].push(idx);
    }
    let mut picked = Vec::with_capacity(per * n_buckets);
    for m in &members {
        let take = per.min(m.len());
        let mut chosen: Vec<usize> = sample_indices(rng, m.len(), take)
            .into_iter()
            .map(|k| m[k])
            .collect();
        chosen.sort_unstable();
        picked.extend(chosen);
    }
    Ok(Stratified {
        picked,
        buckets: Some(b),
        degenerate: false,
    })
}

/// A frame pair inside trajectory `traj` of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairRef {
    pub traj: usize,
    pub i: usize,
    pub j: usize,
}

/// Every in-horizon ordered pair `i < j` of the listed trajectories.
pub fn candidate_pairs(dataset: &Dataset, trajs: &[usize], horizon: usize) -> Vec<PairRef> {
    let mut out = Vec::new();
    for &traj in trajs {
        let len = dataset.trajectories[traj].len();
        for i in 0..len {
            for j in i + 1..=(i + horizon).min(len.saturating_sub(1)) {
                out.push(PairRef { traj, i, j });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct StratifiedPairs {
    pub pairs: Vec<PairRef>,
    pub degenerate: bool,
}

/// Magnitude-stratified pairs over `‖s_j - s_i‖` from the listed trajectories.
pub fn stratified_pairs_by_magnitude(
    dataset: &Dataset,
    trajs: &[usize],
    n: usize,
    spec: &SampleSpec,
    rng: &mut impl Rng,
) -> Result<StratifiedPairs> {
    spec.validate()?;
    let cands = candidate_pairs(dataset, trajs, spec.horizon);
    let mags: Vec<f64> = cands
        .iter()
        .map(|p| {
            let d = dataset.trajectories[p.traj].displacement(p.i, p.j);
            d[0].hypot(d[1])
        })
        .collect();
    let s = stratify_candidates(&mags, n, spec.n_buckets, rng)?;
    if s.degenerate {
        log::warn!("all {} candidate pairs share one magnitude bucket", cands.len());
    }
    Ok(StratifiedPairs {
        pairs: s.picked.iter().map(|&k| cands[k]).collect(),
        degenerate: s.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::{any, prop_assert, proptest};
    use std::collections::HashMap;

    fn spec(h: usize) -> SampleSpec {
        SampleSpec {
            horizon: h,
            ..Default::default()
        }
    }

    #[test]
    fn short_trajectories() {
        let mut rng = stream(0);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..500 {
            seen.insert(sample_pair(3, &spec(10), &mut rng).unwrap());
            assert_eq!(sample_triple(3, &spec(10), &mut rng).unwrap(), (0, 1, 2));
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![(0, 1), (0, 2), (1, 2)]);
        assert!(sample_pair(1, &spec(10), &mut rng).is_err());
        assert!(sample_triple(2, &spec(10), &mut rng).is_err());
    }

    #[test]
    fn pair_constraints_and_determinism() {
        let mut a = stream(5);
        let mut b = stream(5);
        for _ in 0..10_000 {
            let p = sample_pair(50, &spec(10), &mut a).unwrap();
            assert!(p.0 < p.1 && p.1 - p.0 <= 10 && p.1 < 50);
            assert_eq!(p, sample_pair(50, &spec(10), &mut b).unwrap());
        }
    }

    #[test]
    fn triples_are_uniform() {
        // T = 6, H = 5: every i < j < k < 6 is valid, 20 triples.
        let all: Vec<(usize, usize, usize)> = (0..6)
            .flat_map(|i| (i + 1..6).flat_map(move |j| (j + 1..6).map(move |k| (i, j, k))))
            .filter(|t| t.2 - t.0 <= 5)
            .collect();
        assert_eq!(all.len(), 20);
        let draws = 50_000;
        let mut counts: HashMap<(usize, usize, usize), usize> = HashMap::new();
        let mut rng = stream(11);
        for _ in 0..draws {
            *counts.entry(sample_triple(6, &spec(5), &mut rng).unwrap()).or_default() += 1;
        }
        assert_eq!(counts.len(), 20);
        let expected = draws as f64 / 20.0;
        let chi2: f64 = all
            .iter()
            .map(|t| {
                let o = *counts.get(t).unwrap_or(&0) as f64;
                (o - expected).powi(2) / expected
            })
            .sum();
        // df = 19, 0.999 quantile.
        assert!(chi2 < 43.82, "chi2 = {chi2}");
    }

    #[test]
    fn triples_short_horizon_uniform() {
        // T = 8, H = 3 makes the per-start end count vary.
        let all: Vec<(usize, usize, usize)> = (0..8)
            .flat_map(|i| (i + 1..8).flat_map(move |j| (j + 1..8).map(move |k| (i, j, k))))
            .filter(|t| t.2 - t.0 <= 3)
            .collect();
        let draws = 40_000;
        let mut counts: HashMap<(usize, usize, usize), usize> = HashMap::new();
        let mut rng = stream(12);
        for _ in 0..draws {
            *counts.entry(sample_triple(8, &spec(3), &mut rng).unwrap()).or_default() += 1;
        }
        assert_eq!(counts.len(), all.len());
        let expected = draws as f64 / all.len() as f64;
        let chi2: f64 = counts.values().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        // 16 triples, df = 15, 0.999 quantile.
        assert_eq!(all.len(), 16);
        assert!(chi2 < 37.70, "chi2 = {chi2}");
    }

    #[test]
    fn rotation_filter_contract() {
        assert!(rotation_filter(None, (0, 1, 2), 0.0));
        let flat = [0.3, 0.3, 0.3, 0.3];
        assert!(rotation_filter(Some(&flat), (0, 1, 3), 0.0));
        let turning = [0.0, 0.1, -0.1, 0.0];
        assert!(!rotation_filter(Some(&turning), (0, 1, 2), 0.0));
        assert!(rotation_filter(Some(&turning), (0, 1, 2), 0.31));
        assert!(!rotation_filter(Some(&turning), (0, 2, 3), 0.3));
        assert_eq!(
            rotation_filter(Some(&turning), (1, 2, 3), 0.25),
            rotation_filter(Some(&turning), (1, 2, 3), 0.25)
        );
    }

    #[test]
    fn one_pair_per_constructed_bucket() {
        let mags: Vec<f64> = (1..=8).map(|b| 0.1 * b as f64).collect();
        let s = stratify_candidates(&mags, 8, 8, &mut stream(0)).unwrap();
        assert!(!s.degenerate);
        let b = s.buckets.as_ref().unwrap();
        let mut per = vec![0; 8];
        for &k in &s.picked {
            per[b.assignment[k]] += 1;
        }
        assert_eq!(per, vec![1; 8]);
    }

    #[test]
    fn degenerate_magnitudes_fall_back() {
        let s = stratify_candidates(&[0.5; 20], 8, 4, &mut stream(0)).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.picked.len(), 8);
    }

    #[test]
    fn bucket_edges_match_histogram() {
        let mut rng = stream(9);
        let mags: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..3.0)).collect();
        let b = bucketize(&mags, 8).unwrap();
        let lo = mags.iter().cloned().fold(f64::MAX, f64::min);
        let hi = mags.iter().cloned().fold(f64::MIN, f64::max);
        for (k, &m) in mags.iter().enumerate() {
            // Reference: linear scan for the last edge not above m.
            let mut bin = 0;
            for e in 1..8 {
                if m >= lo + (hi - lo) * e as f64 / 8.0 {
                    bin = e;
                }
            }
            assert_eq!(b.assignment[k], bin);
        }
        assert_eq!(b.edges.len(), 9);
        assert_eq!(b.edges[8], hi);
    }

    proptest! {
        #[test]
        fn triples_respect_constraints(len in 3usize..40, h in 2usize..12, seed in any::<u64>()) {
            let mut rng = stream(seed);
            for _ in 0..50 {
                let (i, j, k) = sample_triple(len, &spec(h), &mut rng).unwrap();
                prop_assert!(i < j && j < k && k < len && k - i <= h);
            }
        }

        #[test]
        fn bucket_sizes_balanced(seed in any::<u64>(), n in 8usize..64) {
            let mut rng = stream(seed);
            let mags: Vec<f64> = (0..2000).map(|k| (k % 100) as f64).collect();
            let s = stratify_candidates(&mags, n, 8, &mut rng).unwrap();
            let b = s.buckets.unwrap();
            let mut per = vec![0usize; 8];
            for &k in &s.picked {
                per[b.assignment[k]] += 1;
            }
            let max = *per.iter().max().unwrap();
            let min = *per.iter().min().unwrap();
            prop_assert!(max - min <= 1);
            prop_assert!(s.picked.len() >= n);
        }
    }
}
