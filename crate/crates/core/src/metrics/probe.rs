//! Linear probes on latent actions: environment identity (scene leakage) and
//! goal position beyond motion content (future leakage).

use super::{LatentFn, MetricsError, Result};
use crate::rng::Rng;
use crate::sampling::{sample_pair, PairRef, SampleSpec};
use crate::world::Dataset;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Smallest class the probes accept.
pub const MIN_CLASS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Same-trajectory pairs drawn per environment.
    pub per_class: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            per_class: 500,
            iterations: 500,
            learning_rate: 0.5,
            train_fraction: 0.8,
        }
    }
}

/// Latents with their environment label and ground-truth geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub latents: Vec<Vec<f64>>,
    pub env_labels: Vec<u32>,
    pub start_states: Vec<[f64; 2]>,
    pub goal_states: Vec<[f64; 2]>,
}

impl ProbeDataset {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.env_labels.iter().map(|&c| c as usize + 1).max().unwrap_or(0)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes()];
        for &l in &self.env_labels {
            c[l as usize] += 1;
        }
        c
    }

    pub fn displacements(&self) -> Vec<Vec<f64>> {
        self.start_states
            .iter()
            .zip(&self.goal_states)
            .map(|(a, b)| vec![b[0] - a[0], b[1] - a[1]])
            .collect()
    }
}

/// Draws `per_class` random same-trajectory pairs per environment from the
/// listed trajectories.
pub fn build_probe_dataset(
    f: &dyn LatentFn,
    dataset: &Dataset,
    trajs: &[usize],
    spec: &SampleSpec,
    per_class: usize,
    rng: &mut Rng,
) -> Result<ProbeDataset> {
    let envs = dataset.env_count();
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for env in 0..envs {
        let own: Vec<usize> = trajs
            .iter()
            .copied()
            .filter(|&t| dataset.trajectories[t].env_id == env)
            .collect();
        if own.is_empty() || per_class < MIN_CLASS {
            return Err(MetricsError::UnderPopulated {
                class: env,
                count: if own.is_empty() { 0 } else { per_class },
                need: MIN_CLASS,
            });
        }
        for _ in 0..per_class {
            let traj = own[rng.gen_range(0..own.len())];
            let (i, j) = sample_pair(dataset.trajectories[traj].len(), spec, rng)?;
            pairs.push(PairRef { traj, i, j });
            labels.push(env);
        }
    }
    let state = |p: &PairRef, t: usize| {
        let s = dataset.trajectories[p.traj].state(t);
        [f64::from(s[0]), f64::from(s[1])]
    };
    Ok(ProbeDataset {
        latents: f.latents(dataset, &pairs)?,
        env_labels: labels,
        start_states: pairs.iter().map(|p| state(p, p.i)).collect(),
        goal_states: pairs.iter().map(|p| state(p, p.j)).collect(),
    })
}

/// Per-class shuffled split; the first `fraction` of each class trains.
fn stratified_split(labels: &[u32], fraction: f64, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_classes = labels.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&k| labels[k] as usize == c).collect();
        if idx.len() < MIN_CLASS {
            return Err(MetricsError::UnderPopulated {
                class: c as u32,
                count: idx.len(),
                need: MIN_CLASS,
            });
        }
        idx.shuffle(rng);
        let n_train = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Column means and standard deviations over `rows` (unit std for constant
/// columns).
fn moments(x: &[Vec<f64>], rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = x.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    let mut mu = vec![0.0; d];
    for &r in rows {
        for (m, v) in mu.iter_mut().zip(&x[r]) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut sd = vec![0.0; d];
    for &r in rows {
        for k in 0..d {
            sd[k] += (x[r][k] - mu[k]).powi(2);
        }
    }
    for s in sd.iter_mut() {
        *s = (*s / n).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    (mu, sd)
}

fn standardize(x: &[Vec<f64>], mu: &[f64], sd: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| r.iter().zip(mu).zip(sd).map(|((v, m), s)| (v - m) / s).collect())
        .collect()
}

/// Multinomial logistic regression trained by full-batch gradient descent on
/// a stratified split; returns held-out accuracy.
pub fn logistic_probe(
    features: &[Vec<f64>],
    labels: &[u32],
    cfg: &ProbeConfig,
    rng: &mut Rng,
) -> Result<f64> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(MetricsError::Invalid("features and labels differ in length".into()));
    }
    let (train, test) = stratified_split(labels, cfg.train_fraction, rng)?;
    let (mu, sd) = moments(features, &train);
    let x = standardize(features, &mu, &sd);
    let d = x[0].len() + 1;
    let c = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    let mut w = vec![0.0f64; d * c];
    let n = train.len() as f64;
    let logits = |w: &[f64], row: &[f64]| -> Vec<f64> {
        (0..c)
            .map(|k| {
                let mut s = w[(d - 1) * c + k];
                for (f, v) in row.iter().enumerate() {
                    s += v * w[f * c + k];
                }
                s
            })
            .collect()
    };
    for _ in 0..cfg.iterations {
        let mut grad = vec![0.0f64; d * c];
        for &r in &train {
            let z = logits(&w, &x[r]);
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
            let tot: f64 = e.iter().sum();
            for k in 0..c {
                let delta = e[k] / tot - if labels[r] as usize == k { 1.0 } else { 0.0 };
                for (f, v) in x[r].iter().enumerate() {
                    grad[f * c + k] += v * delta;
                }
                grad[(d - 1) * c + k] += delta;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= cfg.learning_rate * gi / n;
        }
    }
    let correct = test
        .iter()
        .filter(|&&r| {
            let z = logits(&w, &x[r]);
            let mut best = 0;
            for k in 1..c {
                if z[k] > z[best] {
                    best = k;
                }
            }
            best == labels[r] as usize
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvProbeResult {
    pub accuracy: f64,
    pub shuffled_accuracy: f64,
    pub chance: f64,
    pub class_counts: Vec<usize>,
}

/// Environment probe plus its label-shuffled control.
pub fn env_probe(probe: &ProbeDataset, cfg: &ProbeConfig, rng: &mut Rng) -> Result<EnvProbeResult> {
    let counts = probe.class_counts();
    if let Some((c, &n)) = counts.iter().enumerate().find(|(_, &n)| n < MIN_CLASS) {
        return Err(MetricsError::UnderPopulated {
            class: c as u32,
            count: n,
            need: MIN_CLASS,
        });
    }
    let accuracy = logistic_probe(&probe.latents, &probe.env_labels, cfg, rng)?;
    let shuffled_accuracy = shuffled_env_probe(probe, cfg, rng)?;
    Ok(EnvProbeResult {
        accuracy,
        shuffled_accuracy,
        chance: 1.0 / counts.len().max(1) as f64,
        class_counts: counts,
    })
}

/// The same protocol with labels permuted, which should land at chance.
pub fn shuffled_env_probe(probe: &ProbeDataset, cfg: &ProbeConfig, rng: &mut Rng) -> Result<f64> {
    let mut labels = probe.env_labels.clone();
    labels.shuffle(rng);
    logistic_probe(&probe.latents, &labels, cfg, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalProbeResult {
    /// Held-out R² of the goal residual, clamped at 0.
    pub r2: f64,
    /// A design matrix was rank-deficient and the ridge fallback was used.
    pub ridge_fallback: bool,
}

const RIDGE: f64 = 1e-6;

/// Least squares with intercept on standardized inputs.
struct Ols {
    mu: Vec<f64>,
    sd: Vec<f64>,
    coef: DMatrix<f64>,
    ridged: bool,
}

impl Ols {
    fn fit(x: &[Vec<f64>], y: &[Vec<f64>], rows: &[usize]) -> Ols {
        let (mu, sd) = moments(x, rows);
        let d = mu.len() + 1;
        let k = y[0].len();
        let xs = DMatrix::from_fn(rows.len(), d, |r, c| {
            if c + 1 == d {
                1.0
            } else {
                (x[rows[r]][c] - mu[c]) / sd[c]
            }
        });
        let ys = DMatrix::from_fn(rows.len(), k, |r, c| y[rows[r]][c]);
        let mut a = xs.transpose() * &xs;
        let b = xs.transpose() * ys;
        let eig = a.clone().symmetric_eigenvalues();
        let max = eig.iter().cloned().fold(0.0f64, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let ridged = !(min > 1e-10 * max.max(1e-300));
        if ridged {
            a += DMatrix::identity(d, d) * RIDGE;
        }
        let coef = match a.clone().cholesky() {
            Some(ch) => ch.solve(&b),
            None => a
                .pseudo_inverse(1e-12)
                .map(|p| p * &b)
                .unwrap_or_else(|_| DMatrix::zeros(d, k)),
        };
        Ols { mu, sd, coef, ridged }
    }

    fn predict(&self, row: &[f64]) -> Vec<f64> {
        let d = self.mu.len() + 1;
        let mut v = DVector::zeros(d);
        for c in 0..d - 1 {
            v[c] = (row[c] - self.mu[c]) / self.sd[c];
        }
        v[d - 1] = 1.0;
        (self.coef.transpose() * v).iter().copied().collect()
    }
}

/// Goal leakage beyond motion content.
///
/// Fits `Δs ≈ A(z)`, then `s_j ≈ B(A(z))`, and measures how well `z`
/// linearly predicts the part of `s_j` that the motion estimate leaves
/// unexplained. All fits use the training split; R² is held-out.
pub fn goal_probe(probe: &ProbeDataset, cfg: &ProbeConfig, rng: &mut Rng) -> Result<GoalProbeResult> {
    let (train, test) = stratified_split(&probe.env_labels, cfg.train_fraction, rng)?;
    let z = &probe.latents;
    let ds = probe.displacements();
    let goal: Vec<Vec<f64>> = probe.goal_states.iter().map(|g| g.to_vec()).collect();

    let motion = Ols::fit(z, &ds, &train);
    let ds_hat: Vec<Vec<f64>> = z.iter().map(|r| motion.predict(r)).collect();
    let from_motion = Ols::fit(&ds_hat, &goal, &train);
    let resid: Vec<Vec<f64>> = goal
        .iter()
        .zip(&ds_hat)
        .map(|(g, h)| {
            let p = from_motion.predict(h);
            vec![g[0] - p[0], g[1] - p[1]]
        })
        .collect();
    let leak = Ols::fit(z, &resid, &train);

    let k = resid[0].len();
    let mut mean = vec![0.0; k];
    for &r in &test {
        for c in 0..k {
            mean[c] += resid[r][c] / test.len() as f64;
        }
    }
    let (mut sse, mut sst) = (0.0, 0.0);
    for &r in &test {
        let p = leak.predict(&z[r]);
        for c in 0..k {
            sse += (resid[r][c] - p[c]).powi(2);
            sst += (resid[r][c] - mean[c]).powi(2);
        }
    }
    let r2 = if sst > 0.0 { (1.0 - sse / sst).max(0.0) } else { 0.0 };
    Ok(GoalProbeResult {
        r2,
        ridge_fallback: motion.ridged || from_motion.ridged || leak.ridged,
    })
}
