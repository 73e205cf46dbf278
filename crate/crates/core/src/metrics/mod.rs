//! Structured-latent metrics.
//!
//! Every metric comes in two layers: a `*_value` function over explicit latent
//! vectors, and a sampling wrapper that draws scene-wise index sets from a
//! dataset and queries a [`LatentFn`]. Ratios with a zero denominator and
//! correlations with a zero variance are reported as sentinels rather than
//! NaN.

mod probe;
mod report;
mod transfer;

pub use probe::{
    build_probe_dataset, env_probe, goal_probe, logistic_probe, shuffled_env_probe, EnvProbeResult,
    GoalProbeResult, ProbeConfig, ProbeDataset,
};
pub use report::{evaluate, EvalConfig, Evaluation, MetricsReport};
pub use transfer::{
    motion_transfer, norm_trajectory, transfer_cases, write_grid, write_ppm, MotionTransfer,
    NormTrajectory, TransferCase, NORM_TRAJ_HEADER,
};

use crate::model::{self, ModelParams, Placement};
use crate::rng::Rng;
use crate::sampling::{sample_pair, sample_triple, stratified_pairs_by_magnitude, PairRef, SampleSpec, SamplingError};
use crate::tensor::TensorError;
use crate::train::gather;
use crate::world::Dataset;
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("class {class} has {count} samples, need at least {need}")]
    UnderPopulated { class: u32, count: usize, need: usize },
    #[error("invalid metric input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// A metric result, or the reason it has no numeric value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MetricValue {
    Value(f64),
    /// A normalizing denominator was zero.
    Degenerate,
    /// A correlation had zero variance.
    Undefined,
}

impl MetricValue {
    pub fn value(self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(v),
            _ => None,
        }
    }

    fn ratio(num: f64, den: f64) -> Self {
        if den > 0.0 && den.is_finite() && num.is_finite() {
            MetricValue::Value(num / den)
        } else {
            MetricValue::Degenerate
        }
    }
}

impl std::fmt::Display for MetricValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricValue::Value(v) => write!(f, "{v}"),
            MetricValue::Degenerate => f.write_str("degenerate"),
            MetricValue::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MetricValue::Value(v) if v.is_finite() => s.serialize_f64(*v),
            MetricValue::Undefined => s.serialize_str("undefined"),
            _ => s.serialize_str("degenerate"),
        }
    }
}

impl<'de> Deserialize<'de> for MetricValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(MetricValue::Value(v)),
            Raw::Str(s) if s == "degenerate" => Ok(MetricValue::Degenerate),
            Raw::Str(s) if s == "undefined" => Ok(MetricValue::Undefined),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("unknown sentinel {s:?}"))),
        }
    }
}

/// Anything that maps frame pairs of a dataset to latent vectors.
pub trait LatentFn {
    fn latents(&self, dataset: &Dataset, pairs: &[PairRef]) -> Result<Vec<Vec<f64>>>;
}

/// Ground-truth latents `z_ij = s_j - s_i`.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleLatent;

impl LatentFn for OracleLatent {
    fn latents(&self, dataset: &Dataset, pairs: &[PairRef]) -> Result<Vec<Vec<f64>>> {
        Ok(pairs
            .iter()
            .map(|p| dataset.trajectories[p.traj].displacement(p.i, p.j).to_vec())
            .collect())
    }
}

/// Latents from a trained model at a given placement.
#[derive(Clone, Debug)]
pub struct ModelLatent<'a> {
    pub params: &'a ModelParams<f32>,
    pub placement: Placement,
    pub batch: usize,
}

impl<'a> ModelLatent<'a> {
    pub fn new(params: &'a ModelParams<f32>, placement: Placement) -> Self {
        ModelLatent {
            params,
            placement,
            batch: 256,
        }
    }
}

impl LatentFn for ModelLatent<'_> {
    fn latents(&self, dataset: &Dataset, pairs: &[PairRef]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(self.batch.max(1)) {
            let o_i = gather(dataset, chunk.iter().map(|p| (p.traj, p.i)), true);
            let o_j = gather(dataset, chunk.iter().map(|p| (p.traj, p.j)), true);
            let z = model::latent(self.params, &o_i, &o_j, self.placement)?;
            for r in 0..chunk.len() {
                out.push(z.row(r).iter().map(|&v| f64::from(v)).collect());
            }
        }
        Ok(out)
    }
}

/// Adapter for closures `(dataset, pair) -> latent`.
pub struct FnLatent<F>(pub F);

impl<F: Fn(&Dataset, PairRef) -> Vec<f64>> LatentFn for FnLatent<F> {
    fn latents(&self, dataset: &Dataset, pairs: &[PairRef]) -> Result<Vec<Vec<f64>>> {
        Ok(pairs.iter().map(|&p| (self.0)(dataset, p)).collect())
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Composition residual `E‖z_ik - z_ij - z_jk‖²` over the mean squared norm
/// of all three pair latents of every triple.
pub fn norm_ac_value(z_ij: &[Vec<f64>], z_jk: &[Vec<f64>], z_ik: &[Vec<f64>]) -> MetricValue {
    let num = mean((0..z_ik.len()).map(|t| {
        let r: Vec<f64> = z_ik[t]
            .iter()
            .zip(&z_ij[t])
            .zip(&z_jk[t])
            .map(|((a, b), c)| a - b - c)
            .collect();
        sq_norm(&r)
    }));
    let den = mean(z_ij.iter().chain(z_jk).chain(z_ik).map(|z| sq_norm(z)));
    MetricValue::ratio(num, den)
}

/// Pearson correlation; `Undefined` when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> MetricValue {
    let n = x.len().min(y.len());
    if n < 2 {
        return MetricValue::Undefined;
    }
    let mx = mean(x[..n].iter().copied());
    let my = mean(y[..n].iter().copied());
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for k in 0..n {
        let (dx, dy) = (x[k] - mx, y[k] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return MetricValue::Undefined;
    }
    MetricValue::Value((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-dimension 1st and 99th percentiles of a set of state vectors.
pub fn state_bounds(states: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let dims = states.first().map_or(0, Vec::len);
    (0..dims)
        .map(|d| {
            let mut col: Vec<f64> = states.iter().map(|v| v[d]).collect();
            col.sort_by(f64::total_cmp);
            (percentile(&col, 1.0), percentile(&col, 99.0))
        })
        .collect()
}

/// Maps each state coordinate to `[0, 1]` by its percentile bounds, clipping
/// outside them.
pub fn rescale_state(s: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    s.iter()
        .zip(bounds)
        .map(|(x, &(lo, hi))| {
            if hi > lo {
                ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect()
}

/// `‖rescale(s_j) - rescale(s_i)‖` for each `(s_i, s_j)`.
pub fn rescaled_magnitudes(pairs: &[(Vec<f64>, Vec<f64>)], bounds: &[(f64, f64)]) -> Vec<f64> {
    pairs
        .iter()
        .map(|(a, b)| {
            let (ra, rb) = (rescale_state(a, bounds), rescale_state(b, bounds));
            let d: Vec<f64> = rb.iter().zip(&ra).map(|(x, y)| x - y).collect();
            norm(&d)
        })
        .collect()
}

/// Pearson r between `‖z‖` and the rescaled displacement magnitude.
pub fn displacement_corr_value(
    z: &[Vec<f64>],
    pairs: &[(Vec<f64>, Vec<f64>)],
    bounds: &[(f64, f64)],
) -> MetricValue {
    let zn: Vec<f64> = z.iter().map(|v| norm(v)).collect();
    pearson(&zn, &rescaled_magnitudes(pairs, bounds))
}

/// `E‖z_ii‖ / E‖z_ij‖`.
pub fn norm_identity_value(z_ii: &[Vec<f64>], z_ij: &[Vec<f64>]) -> MetricValue {
    MetricValue::ratio(
        mean(z_ii.iter().map(|z| norm(z))),
        mean(z_ij.iter().map(|z| norm(z))),
    )
}

/// `E‖z_ij + z_ji‖ / E‖z_ij‖`.
pub fn delta_inv_value(z_ij: &[Vec<f64>], z_ji: &[Vec<f64>]) -> MetricValue {
    let num = mean(z_ij.iter().zip(z_ji).map(|(a, b)| {
        let s: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
        norm(&s)
    }));
    MetricValue::ratio(num, mean(z_ij.iter().map(|z| norm(z))))
}

/// `E‖Σ_t z_{i_t i_{t+1}}‖ / E‖z_{i_t i_{t+1}}‖` over closed cycles, each
/// given as its list of edge latents.
pub fn cycle_residual_value(cycles: &[Vec<Vec<f64>>]) -> MetricValue {
    let num = mean(cycles.iter().map(|edges| {
        let dim = edges.first().map_or(0, Vec::len);
        let mut s = vec![0.0; dim];
        for e in edges {
            for (a, b) in s.iter_mut().zip(e) {
                *a += b;
            }
        }
        norm(&s)
    }));
    let den = mean(cycles.iter().flat_map(|c| c.iter().map(|e| norm(e))));
    MetricValue::ratio(num, den)
}

fn pick_traj(trajs: &[usize], rng: &mut Rng) -> Result<usize> {
    if trajs.is_empty() {
        return Err(MetricsError::Invalid("no trajectories to evaluate".into()));
    }
    Ok(trajs[rng.gen_range(0..trajs.len())])
}

fn check_n(n: usize, min: usize, what: &str) -> Result<()> {
    if n < min {
        return Err(MetricsError::Invalid(format!("{what} needs n >= {min}, got {n}")));
    }
    Ok(())
}

pub fn sample_triples(
    dataset: &Dataset,
    trajs: &[usize],
    spec: &SampleSpec,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<(usize, usize, usize, usize)>> {
    (0..n)
        .map(|_| {
            let traj = pick_traj(trajs, rng)?;
            let (i, j, k) = sample_triple(dataset.trajectories[traj].len(), spec, rng)?;
            Ok((traj, i, j, k))
        })
        .collect()
}

pub fn sample_pairs(
    dataset: &Dataset,
    trajs: &[usize],
    spec: &SampleSpec,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<PairRef>> {
    (0..n)
        .map(|_| {
            let traj = pick_traj(trajs, rng)?;
            let (i, j) = sample_pair(dataset.trajectories[traj].len(), spec, rng)?;
            Ok(PairRef { traj, i, j })
        })
        .collect()
}

pub fn norm_ac(
    f: &dyn LatentFn,
    dataset: &Dataset,
    trajs: &[usize],
    spec: &SampleSpec,
    n: usize,
    rng: &mut Rng,
) -> Result<MetricValue> {
    check_n(n, 1, "norm_ac")?;
    let t = sample_triples(dataset, trajs, spec, n, rng)?;
    let refs = |a: fn(&(usize, usize, usize, usize)) -> (usize, usize)| -> Vec<PairRef> {
        t.iter()
            .map(|x| {
                let (i, j) = a(x);
                PairRef { traj: x.0, i, j }
            })
            .collect()
    };
    let z_ij = f.latents(dataset, &refs(|x| (x.1, x.2)))?;
    let z_jk = f.latents(dataset, &refs(|x| (x.2, x.3)))?;
    let z_ik = f.latents(dataset, &refs(|x| (x.1, x.3)))?;
    Ok(norm_ac_value(&z_ij, &z_jk, &z_ik))
}

pub fn displacement_corr(
    f: &dyn LatentFn,
    dataset: &Dataset,
    trajs: &[usize],
    spec: &SampleSpec,
    n: usize,
    rng: &mut Rng,
) -> Result<MetricValue> {
    check_n(n, 3, "displacement_corr")?;
    let s = stratified_pairs_by_magnitude(dataset, trajs, n, spec, rng)?;
    let z = f.latents(dataset, &s.pairs)?;
    let state = |traj: usize, t: usize| -> Vec<f64> {
        dataset.trajectories[traj].state(t).iter().map(|&x| f64::from(x)).collect()
    };
    let all: Vec<Vec<f64>> = trajs
        .iter()
        .flat_map(|&tr| (0..dataset.trajectories[tr].len()).map(move |t| (tr, t)))
        .map(|(tr, t)| state(tr, t))
        .collect();
    let bounds = state_bounds(&all);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = s
        .pairs
        .iter()
        .map(|p| (state(p.traj, p.i), state(p.traj, p.j)))
        .collect();
    Ok(displacement_corr_value(&z, &pairs, &bounds))
}

pub fn norm_identity(
    f: &dyn LatentFn,
    dataset: &Dataset,
    trajs: &[usize],
    spec: &SampleSpec,
    n: usize,
    rng: &mut Rng,
) -> Result<MetricValue> {
    check_n(n, 1, "norm_identity")?;
    let mut same = Vec::with_capacity(n);
    for _ in 0..n {
        let traj = pick_traj(trajs, rng)?;
        let t = rng.gen_range(0..dataset.trajectories[traj].len());
        same.push(PairRef { traj, i: t, j: t });
    }
    let pairs = sample_pairs(dataset, trajs, spec, n, rng)?;
    Ok(norm_identity_value(
        &f.latents(dataset, &same)?,
        &f.latents(dataset, &pairs)?,
    ))
}

pub fn delta_inv(
    f: &dyn LatentFn,
    dataset: &Dataset,
    trajs: &[usize],
    spec: &SampleSpec,
    n: usize,
    rng: &mut Rng,
) -> Result<MetricValue> {
    check_n(n, 1, "delta_inv")?;
    let pairs = sample_pairs(dataset, trajs, spec, n, rng)?;
    let rev: Vec<PairRef> = pairs
        .iter()
        .map(|p| PairRef {
            traj: p.traj,
            i: p.j,
            j: p.i,
        })
        .collect();
    Ok(delta_inv_value(
        &f.latents(dataset, &pairs)?,
        &f.latents(dataset, &rev)?,
    ))
}

/// Cycles `i_0 < i_1 < ... < i_{m-1}` within the horizon of `i_0`, closed by
/// the edge back to `i_0`.
pub fn sample_cycles(
    dataset: &Dataset,
    trajs: &[usize],
    spec: &SampleSpec,
    m: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<(usize, Vec<usize>)>> {
    if m < 3 {
        return Err(MetricsError::Invalid(format!("cycle length {m} < 3")));
    }
    if spec.horizon < m - 1 {
        return Err(MetricsError::Invalid(format!(
            "horizon {} cannot hold {} distinct frames",
            spec.horizon,
            m - 1
        )));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let traj = pick_traj(trajs, rng)?;
        let len = dataset.trajectories[traj].len();
        if len < m {
            return Err(SamplingError::TooShort { len, need: m }.into());
        }
        let i0 = rng.gen_range(0..=len - m);
        let window = (i0 + spec.horizon).min(len - 1) - i0;
        let mut rest: Vec<usize> = sample_indices(rng, window, m - 1)
            .into_iter()
            .map(|k| i0 + 1 + k)
            .collect();
        rest.sort_unstable();
        let mut nodes = vec![i0];
        nodes.extend(rest);
        out.push((traj, nodes));
    }
    Ok(out)
}

pub fn cycle_residual(
    f: &dyn LatentFn,
    dataset: &Dataset,
    trajs: &[usize],
    spec: &SampleSpec,
    m: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<MetricValue> {
    check_n(n, 1, "cycle_residual")?;
    let cycles = sample_cycles(dataset, trajs, spec, m, n, rng)?;
    let refs: Vec<PairRef> = cycles
        .iter()
        .flat_map(|(traj, nodes)| {
            (0..nodes.len()).map(move |t| PairRef {
                traj: *traj,
                i: nodes[t],
                j: nodes[(t + 1) % nodes.len()],
            })
        })
        .collect();
    let z = f.latents(dataset, &refs)?;
    let grouped: Vec<Vec<Vec<f64>>> = z.chunks(m).map(<[Vec<f64>]>::to_vec).collect();
    Ok(cycle_residual_value(&grouped))
}
