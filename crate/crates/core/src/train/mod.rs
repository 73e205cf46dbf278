//! Optimizer, schedule, clipping, the training loop and its step log.

mod checkpoint;
mod steplog;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError,
};
pub use steplog::{classify_stability, Stability, StabilityThresholds, StepLog, StepRecord};

use crate::model::{
    self, AcForm, LossOptions, LossWeights, ModelConfig, ModelParams, PairBatch, Placement,
    TripleBatch,
};
use crate::rng::{derive_seed, stream, Rng};
use crate::sampling::{sample_pair, sample_triple, SampleSpec, SamplingError};
use crate::tensor::{Graph, Tensor, TensorError};
use crate::world::Dataset;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const BATCH_TAG: u64 = 0x4241_5443;
const RESEED_TAG: u64 = 0x5253_4544;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_pairs: usize,
    pub batch_triples: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub ac_form: AcForm,
    pub placement: Placement,
    pub ac_proprio: bool,
    pub eval_every: usize,
    /// Codebook rows unused for this many steps are re-seeded; 0 disables.
    pub dead_code_steps: usize,
    /// Fraction of each environment's trajectories held out from training.
    pub holdout: f64,
    pub sample: SampleSpec,
    pub stability: StabilityThresholds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 5000,
            batch_pairs: 64,
            batch_triples: 64,
            base_lr: 3e-4,
            warmup_steps: 200,
            clip_norm: 1.0,
            weights: LossWeights::default(),
            ac_form: AcForm::Fdm,
            placement: Placement::PostVq,
            ac_proprio: true,
            eval_every: 500,
            dead_code_steps: 500,
            holdout: 0.2,
            sample: SampleSpec::default(),
            stability: StabilityThresholds::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.steps == 0 || self.steps <= self.warmup_steps {
            return bad(format!(
                "steps ({}) must exceed warmup_steps ({})",
                self.steps, self.warmup_steps
            ));
        }
        if self.batch_pairs == 0 || self.batch_triples == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if !self.weights.is_valid() {
            return bad("loss weights must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad(format!("holdout {} must be in [0, 1)", self.holdout));
        }
        self.sample.validate()?;
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            weights: self.weights,
            ac_form: self.ac_form,
            placement: self.placement,
            ac_proprio: self.ac_proprio,
        }
    }
}

/// Linear warmup to `base_lr`, constant afterwards.
pub fn lr_at(step: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        return base_lr;
    }
    base_lr * (step as f64 / warmup_steps as f64).min(1.0)
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`;
/// returns the factor applied. Fails on any non-finite entry.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f64) -> std::result::Result<f64, f64> {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(norm);
    }
    if norm <= max_norm {
        return Ok(1.0);
    }
    let factor = max_norm / norm;
    for g in grads.iter_mut() {
        for x in g.iter_mut() {
            *x = (f64::from(*x) * factor) as f32;
        }
    }
    Ok(factor)
}

/// Adam moments mirroring the parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params
            .named()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        OptState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Increments the step counter first.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &[Vec<f32>],
    state: &mut OptState,
    lr: f64,
) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.len() || grads.len() != state.m.len() {
        return Err(TrainError::Config(format!(
            "{} gradients for {} parameter arrays",
            grads.len(),
            tensors.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1 as f32, state.beta2 as f32);
    for (k, tensor) in tensors.iter_mut().enumerate() {
        let g = &grads[k];
        if g.len() != tensor.len() {
            return Err(TrainError::Config(format!(
                "gradient {k} has {} entries, parameter has {}",
                g.len(),
                tensor.len()
            )));
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (e, p) in tensor.data_mut().iter_mut().enumerate() {
            m[e] = b1 * m[e] + (1.0 - b1) * g[e];
            v[e] = b2 * v[e] + (1.0 - b2) * g[e] * g[e];
            let m_hat = f64::from(m[e]) / c1;
            let v_hat = f64::from(v[e]) / c2;
            *p -= (lr * m_hat / (v_hat.sqrt() + state.eps)) as f32;
        }
    }
    Ok(())
}

/// Frames and states of a pair batch.
pub fn pair_batch(dataset: &Dataset, refs: &[(usize, usize, usize)]) -> PairBatch<f32> {
    let frames = |k: usize| gather(dataset, refs.iter().map(|r| (r.0, [r.1, r.2][k])), true);
    let states = |k: usize| gather(dataset, refs.iter().map(|r| (r.0, [r.1, r.2][k])), false);
    PairBatch {
        o_i: frames(0),
        o_j: frames(1),
        s_i: states(0),
        s_j: states(1),
    }
}

/// Frames and states of a triple batch; refs are `(traj, i, j, k)`.
pub fn triple_batch(dataset: &Dataset, refs: &[(usize, usize, usize, usize)]) -> TripleBatch<f32> {
    let at = |k: usize, frames: bool| {
        gather(dataset, refs.iter().map(|r| (r.0, [r.1, r.2, r.3][k])), frames)
    };
    TripleBatch {
        o_i: at(0, true),
        o_j: at(1, true),
        o_k: at(2, true),
        s_i: at(0, false),
        s_j: at(1, false),
        s_k: at(2, false),
    }
}

/// Stacks frames (or states) at `(traj, t)` into a `[B, width]` matrix.
pub fn gather(
    dataset: &Dataset,
    at: impl Iterator<Item = (usize, usize)>,
    frames: bool,
) -> Tensor<f32> {
    let mut data = Vec::new();
    let mut rows = 0;
    for (traj, t) in at {
        let tr = &dataset.trajectories[traj];
        if frames {
            data.extend_from_slice(tr.frame(t));
        } else {
            data.extend_from_slice(&tr.state(t));
        }
        rows += 1;
    }
    let width = data.len() / rows.max(1);
    Tensor::matrix(rows, width, data).expect("non-empty batch")
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainRun {
    /// Parameters after the last finite step.
    pub params: ModelParams<f32>,
    pub log: StepLog,
    pub status: Stability,
    pub reseeded_codes: usize,
}

/// Trains on the non-held-out trajectories of `dataset`.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<TrainRun> {
    train_with(dataset, cfg, model_cfg, &mut |_, _| Ok(()))
}

/// [`train`] with a callback invoked every `eval_every` steps and after the
/// final step, e.g. to write intermediate checkpoints.
pub fn train_with(
    dataset: &Dataset,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    on_eval: &mut dyn FnMut(usize, &ModelParams<f32>) -> Result<()>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let train_ids = dataset.split(cfg.holdout).train;
    if train_ids.is_empty() {
        return Err(TrainError::Config("no training trajectories".into()));
    }
    let mut params = ModelParams::<f32>::init(model_cfg, cfg.seed);
    let mut opt = OptState::new(&params);
    let mut rng = stream(derive_seed(&[cfg.seed, BATCH_TAG]));
    let mut reseed_rng = stream(derive_seed(&[cfg.seed, RESEED_TAG]));
    let opts = cfg.loss_options();
    let mut log = StepLog::default();
    let mut last_used = vec![0usize; model_cfg.codebook_size];
    let mut reseeded = 0;
    let mut aborted = false;

    for step in 1..=cfg.steps {
        let pairs = sample_pairs(dataset, &train_ids, cfg.batch_pairs, &cfg.sample, &mut rng)?;
        let triples = sample_triples(dataset, &train_ids, cfg.batch_triples, &cfg.sample, &mut rng)?;
        let pb = pair_batch(dataset, &pairs);
        let tb = triple_batch(dataset, &triples);

        let mut g = Graph::<f32>::new();
        let bound = params.bind(&mut g, true);
        let pv = pb.bind(&mut g);
        let tv = tb.bind(&mut g);
        let terms = model::total_loss(&mut g, &bound, model_cfg, &pv, &tv, &opts)?;
        let vals = terms.values(&g);
        let lr = lr_at(step, cfg.base_lr, cfg.warmup_steps);
        let mean_z_norm = mean_row_norm(g.value(terms.pair_latent));
        log.records.push(StepRecord {
            step,
            loss_total: vals.total,
            loss_rec: vals.rec,
            loss_vq: vals.vq,
            loss_ac: vals.ac,
            loss_proprio: vals.proprio,
            mean_z_norm,
            lr,
        });
        if !vals.total.is_finite() || !mean_z_norm.is_finite() {
            log::warn!("non-finite loss at step {step}; stopping");
            aborted = true;
            break;
        }
        g.backward(terms.total)?;
        let mut grads = bound.grads(&g);
        if clip_grad_norm(&mut grads, cfg.clip_norm).is_err() {
            log::warn!("non-finite gradient at step {step}; stopping");
            aborted = true;
            break;
        }
        let before = params.clone();
        adam_step(&mut params, &grads, &mut opt, lr)?;
        if !params.all_finite() {
            params = before;
            aborted = true;
            break;
        }

        for &k in &terms.pair_quant.indices {
            last_used[k] = step;
        }
        if cfg.dead_code_steps > 0 {
            let pre = g.value(terms.pair_quant.pre_rows);
            reseeded += reseed_dead_codes(
                &mut params,
                &mut opt,
                &mut last_used,
                step,
                cfg.dead_code_steps,
                pre,
                &mut reseed_rng,
            );
        }
        if step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            on_eval(step, &params)?;
        }
    }
    let status = if aborted {
        Stability::Explode
    } else {
        classify_stability(&log, &cfg.stability).unwrap_or(Stability::Explode)
    };
    log.status = Some(status);
    Ok(TrainRun {
        params,
        log,
        status,
        reseeded_codes: reseeded,
    })
}

fn sample_pairs(
    dataset: &Dataset,
    ids: &[usize],
    n: usize,
    spec: &SampleSpec,
    rng: &mut Rng,
) -> Result<Vec<(usize, usize, usize)>> {
    (0..n)
        .map(|_| {
            let traj = ids[rng.gen_range(0..ids.len())];
            let (i, j) = sample_pair(dataset.trajectories[traj].len(), spec, rng)?;
            Ok((traj, i, j))
        })
        .collect()
}

fn sample_triples(
    dataset: &Dataset,
    ids: &[usize],
    n: usize,
    spec: &SampleSpec,
    rng: &mut Rng,
) -> Result<Vec<(usize, usize, usize, usize)>> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let traj = ids[rng.gen_range(0..ids.len())];
        let t = sample_triple(dataset.trajectories[traj].len(), spec, rng)?;
        // The world has no headings, so the filter keeps every triple.
        if crate::sampling::rotation_filter(None, t, spec.rotation_threshold) {
            out.push((traj, t.0, t.1, t.2));
        }
    }
    Ok(out)
}

fn mean_row_norm(z: &Tensor<f32>) -> f64 {
    let rows = z.shape()[0];
    (0..rows)
        .map(|r| z.row(r).iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / rows as f64
}

/// Resets codebook rows idle for `patience` steps to random in-batch encoder
/// slices and clears their optimizer moments. Returns the number reset.
fn reseed_dead_codes(
    params: &mut ModelParams<f32>,
    opt: &mut OptState,
    last_used: &mut [usize],
    step: usize,
    patience: usize,
    pre_rows: &Tensor<f32>,
    rng: &mut Rng,
) -> usize {
    let d = params.config.code_dim;
    let cb = params.codebook_index();
    let n_rows = pre_rows.shape()[0];
    let mut count = 0;
    for (k, used) in last_used.iter_mut().enumerate() {
        if step - *used < patience {
            continue;
        }
        let src = pre_rows.row(rng.gen_range(0..n_rows)).to_vec();
        params.codebook.data_mut()[k * d..(k + 1) * d].copy_from_slice(&src);
        opt.m[cb][k * d..(k + 1) * d].fill(0.0);
        opt.v[cb][k * d..(k + 1) * d].fill(0.0);
        *used = step;
        count += 1;
    }
    count
}
