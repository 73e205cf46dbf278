//! Latent action model: inverse dynamics encoder, VQ bottleneck, image and
//! state forward dynamics decoders, and every training loss.
//!
//! All functions are generic over [`Real`] so the same code trains in `f32`
//! and is gradient-checked in `f64`.

mod params;

pub use params::{Bottleneck, Bound, Linear, Mlp, ModelConfig, ModelParams};

use crate::tensor::{Graph, Real, Result, Tensor, TensorError, Var};
use params::mlp_forward;
use serde::{Deserialize, Serialize};

/// Form of the additive-composition term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcForm {
    /// Decode `o_k` from `o_i` and the summed latents.
    Fdm,
    /// Latent residual `z_ik - z_ij - z_jk`, no stop-gradient.
    IdmNoSg,
    /// Residual with the target `z_ik` detached.
    IdmSgZik,
    /// Residual with the sum `z_ij + z_jk` detached.
    IdmSgSum,
}

impl AcForm {
    pub const ALL: [AcForm; 4] = [AcForm::Fdm, AcForm::IdmNoSg, AcForm::IdmSgZik, AcForm::IdmSgSum];

    pub fn as_str(self) -> &'static str {
        match self {
            AcForm::Fdm => "fdm",
            AcForm::IdmNoSg => "idm-no-sg",
            AcForm::IdmSgZik => "idm-sg-zik",
            AcForm::IdmSgSum => "idm-sg-sum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        AcForm::ALL.into_iter().find(|f| f.as_str() == s)
    }
}

/// Which latent the additive term (and the exported latent action) uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Concatenated codebook rows.
    #[default]
    PostVq,
    /// Continuous encoder output.
    PreVq,
}

impl Placement {
    pub fn as_str(self) -> &'static str {
        match self {
            Placement::PostVq => "post_vq",
            Placement::PreVq => "pre_vq",
        }
    }

    /// Accepts `post`/`pre` as well as the full names.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "post" | "post_vq" | "post-vq" => Some(Placement::PostVq),
            "pre" | "pre_vq" | "pre-vq" => Some(Placement::PreVq),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ac: f64,
    pub beta_commit: f64,
    pub w_codebook: f64,
    pub w_proprio: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ac: 1.0,
            beta_commit: 0.25,
            w_codebook: 1.0,
            w_proprio: 1.0,
        }
    }
}

impl LossWeights {
    pub fn is_valid(&self) -> bool {
        [self.lambda_ac, self.beta_commit, self.w_codebook, self.w_proprio]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Everything that shapes the objective besides the weights of the model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub ac_form: AcForm,
    pub placement: Placement,
    /// Add the state-decoder analogue of the composed-latent term.
    pub ac_proprio: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            weights: LossWeights::default(),
            ac_form: AcForm::Fdm,
            placement: Placement::PostVq,
            ac_proprio: true,
        }
    }
}

/// Encoder `f(o_i, o_j)` on a batch: `[B, D] x [B, D] -> [B, n_tokens*code_dim]`.
/// The network sees `o_i` and the frame difference `o_j - o_i`.
pub fn idm_forward<T: Real>(g: &mut Graph<T>, p: &Bound, o_i: Var, o_j: Var) -> Result<Var> {
    let diff = g.sub(o_j, o_i)?;
    let x = g.concat(&[o_i, diff])?;
    mlp_forward(g, &p.idm, x)
}

/// Image decoder `F(o_i, z)`, squashed to [0, 1] by a sigmoid.
pub fn fdm_img<T: Real>(g: &mut Graph<T>, p: &Bound, o_i: Var, z: Var) -> Result<Var> {
    let x = g.concat(&[o_i, z])?;
    let h = mlp_forward(g, &p.fdm_img, x)?;
    Ok(g.sigmoid(h))
}

/// State decoder predicting `s_j` from `(s_i, z)`.
pub fn fdm_proprio<T: Real>(g: &mut Graph<T>, p: &Bound, s_i: Var, z: Var) -> Result<Var> {
    let x = g.concat(&[s_i, z])?;
    mlp_forward(g, &p.fdm_proprio, x)
}

/// Index of the nearest codebook row under Euclidean distance; ties go to the
/// lowest index.
pub fn nearest_code<T: Real>(codebook: &Tensor<T>, v: &[T]) -> Result<usize> {
    let rows = *codebook.shape().first().unwrap_or(&0);
    if rows == 0 || codebook.is_empty() {
        return Err(TensorError::Empty("codebook"));
    }
    let mut best = 0;
    let mut best_d = T::infinity();
    for r in 0..rows {
        let mut d = T::zero();
        for (&c, &x) in codebook.row(r).iter().zip(v) {
            let e = c - x;
            d += e * e;
        }
        if d < best_d {
            best_d = d;
            best = r;
        }
    }
    Ok(best)
}

/// Result of passing a batch of encodings through the bottleneck.
#[derive(Clone, Debug)]
pub struct Quantized {
    /// Continuous encoder output, `[B, n_tokens*code_dim]`.
    pub z_pre: Var,
    /// Post-bottleneck latent consumed by the decoders, same shape.
    pub z: Var,
    /// Selected code per token, `B*n_tokens` entries in row-major order.
    pub indices: Vec<usize>,
    /// `z_pre` viewed as `[B*n_tokens, code_dim]`.
    pub pre_rows: Var,
    /// Selected codebook rows, `[B*n_tokens, code_dim]`.
    pub code_rows: Var,
}

/// Splits each encoding into `n_tokens` slices and snaps every slice to its
/// nearest code. The forward value is the selected code and the gradient
/// passes straight through to `z_pre`; the codebook only learns through
/// [`loss_vq`].
pub fn vq_quantize<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    z_pre: Var,
) -> Result<Quantized> {
    let shape = g.value(z_pre).shape().to_vec();
    let d = cfg.code_dim;
    if shape.len() != 2 || shape[1] != cfg.latent_dim() {
        return Err(TensorError::ShapeMismatch {
            op: "vq_quantize",
            left: shape,
            right: vec![cfg.latent_dim()],
        });
    }
    let rows = shape[0] * cfg.n_tokens;
    let pre_rows = g.reshape(z_pre, &[rows, d])?;
    let indices = {
        let cb = g.value(p.codebook);
        let pv = g.value(pre_rows);
        (0..rows)
            .map(|r| nearest_code(cb, pv.row(r)))
            .collect::<Result<Vec<_>>>()?
    };
    let code_rows = g.gather_rows(p.codebook, &indices)?;
    let z = match cfg.bottleneck {
        Bottleneck::Vq => {
            let st = g.straight_through(pre_rows, code_rows)?;
            g.reshape(st, &shape)?
        }
        Bottleneck::Identity => z_pre,
    };
    Ok(Quantized {
        z_pre,
        z,
        indices,
        pre_rows,
        code_rows,
    })
}

/// Mean over rows of the squared Euclidean distance between `[N, d]` rows.
pub fn row_sq_dist<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = *g.value(a).shape().last().unwrap_or(&1);
    let m = g.mse(a, b)?;
    Ok(g.scale(m, T::of(d as f64)))
}

/// Codebook loss plus commitment loss, per token slice, averaged over tokens
/// and batch.
pub fn loss_vq<T: Real>(g: &mut Graph<T>, q: &Quantized, w: &LossWeights) -> Result<Var> {
    let pre_sg = g.stop_gradient(q.pre_rows);
    let codebook_term = row_sq_dist(g, pre_sg, q.code_rows)?;
    let code_sg = g.stop_gradient(q.code_rows);
    let commit_term = row_sq_dist(g, q.pre_rows, code_sg)?;
    let a = g.scale(codebook_term, T::of(w.w_codebook));
    let b = g.scale(commit_term, T::of(w.beta_commit));
    g.add(a, b)
}

/// Batched pairs `(o_i, o_j, s_i, s_j)` with images flattened to rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch<T> {
    pub o_i: Tensor<T>,
    pub o_j: Tensor<T>,
    pub s_i: Tensor<T>,
    pub s_j: Tensor<T>,
}

/// Batched same-trajectory triples.
#[derive(Clone, Debug, PartialEq)]
pub struct TripleBatch<T> {
    pub o_i: Tensor<T>,
    pub o_j: Tensor<T>,
    pub o_k: Tensor<T>,
    pub s_i: Tensor<T>,
    pub s_j: Tensor<T>,
    pub s_k: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct PairVars {
    pub o_i: Var,
    pub o_j: Var,
    pub s_i: Var,
    pub s_j: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TripleVars {
    pub o_i: Var,
    pub o_j: Var,
    pub o_k: Var,
    pub s_i: Var,
    pub s_j: Var,
    pub s_k: Var,
}

impl<T: Real> PairBatch<T> {
    pub fn len(&self) -> usize {
        self.o_i.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bind(&self, g: &mut Graph<T>) -> PairVars {
        PairVars {
            o_i: g.constant(self.o_i.clone()),
            o_j: g.constant(self.o_j.clone()),
            s_i: g.constant(self.s_i.clone()),
            s_j: g.constant(self.s_j.clone()),
        }
    }
}

impl<T: Real> TripleBatch<T> {
    pub fn len(&self) -> usize {
        self.o_i.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bind(&self, g: &mut Graph<T>) -> TripleVars {
        TripleVars {
            o_i: g.constant(self.o_i.clone()),
            o_j: g.constant(self.o_j.clone()),
            o_k: g.constant(self.o_k.clone()),
            s_i: g.constant(self.s_i.clone()),
            s_j: g.constant(self.s_j.clone()),
            s_k: g.constant(self.s_k.clone()),
        }
    }
}

/// Encodes a batch of pairs and returns the quantization record plus the
/// latent selected by `placement`.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    o_i: Var,
    o_j: Var,
    placement: Placement,
) -> Result<(Var, Quantized)> {
    let z_pre = idm_forward(g, p, o_i, o_j)?;
    let q = vq_quantize(g, p, cfg, z_pre)?;
    let latent = match placement {
        Placement::PostVq => q.z,
        Placement::PreVq => q.z_pre,
    };
    Ok((latent, q))
}

/// Reconstruction terms for a pair batch, returned unweighted as
/// `(image_mse, state_mse)`.
pub fn loss_rec_terms<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    pairs: &PairVars,
    z: Var,
) -> Result<(Var, Var)> {
    let pred = fdm_img(g, p, pairs.o_i, z)?;
    let img = g.mse(pairs.o_j, pred)?;
    let s_pred = fdm_proprio(g, p, pairs.s_i, z)?;
    let st = g.mse(pairs.s_j, s_pred)?;
    Ok((img, st))
}

/// `mse(o_j, F(o_i, z_ij)) + w_proprio * mse(s_j, P(s_i, z_ij))` with `z_ij`
/// taken through the bottleneck.
pub fn loss_rec<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    pairs: &PairVars,
    w_proprio: f64,
) -> Result<Var> {
    let (_, q) = encode(g, p, cfg, pairs.o_i, pairs.o_j, Placement::PostVq)?;
    let (img, st) = loss_rec_terms(g, p, pairs, q.z)?;
    let st = g.scale(st, T::of(w_proprio));
    g.add(img, st)
}

/// Latents of a triple batch at the requested placement: `(z_ij, z_jk, z_ik)`.
/// `z_ik` is only encoded when `with_ik` is set.
pub fn triple_latents<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    t: &TripleVars,
    placement: Placement,
    with_ik: bool,
) -> Result<(Var, Var, Option<Var>)> {
    let (z_ij, _) = encode(g, p, cfg, t.o_i, t.o_j, placement)?;
    let (z_jk, _) = encode(g, p, cfg, t.o_j, t.o_k, placement)?;
    let z_ik = if with_ik {
        Some(encode(g, p, cfg, t.o_i, t.o_k, placement)?.0)
    } else {
        None
    };
    Ok((z_ij, z_jk, z_ik))
}

/// Decoder-side composition term: `mse(o_k, F(o_i, z_ij + z_jk))`, plus the
/// state analogue weighted by `w_proprio` when `ac_proprio` is set.
pub fn loss_ac_fdm<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    t: &TripleVars,
    z_ij: Var,
    z_jk: Var,
    w_proprio: f64,
    ac_proprio: bool,
) -> Result<Var> {
    let sum = g.add(z_ij, z_jk)?;
    let pred = fdm_img(g, p, t.o_i, sum)?;
    let img = g.mse(t.o_k, pred)?;
    if !ac_proprio {
        return Ok(img);
    }
    let s_pred = fdm_proprio(g, p, t.s_i, sum)?;
    let st = g.mse(t.s_k, s_pred)?;
    let st = g.scale(st, T::of(w_proprio));
    g.add(img, st)
}

/// Encoder-side composition residual `‖z_ik - (z_ij + z_jk)‖²`, averaged over
/// the batch, with the stop-gradient placement of `form`.
pub fn loss_ac_idm<T: Real>(
    g: &mut Graph<T>,
    z_ij: Var,
    z_jk: Var,
    z_ik: Var,
    form: AcForm,
) -> Result<Var> {
    let sum = g.add(z_ij, z_jk)?;
    let (target, composed) = match form {
        AcForm::IdmNoSg => (z_ik, sum),
        AcForm::IdmSgZik => (g.stop_gradient(z_ik), sum),
        AcForm::IdmSgSum => (z_ik, g.stop_gradient(sum)),
        AcForm::Fdm => {
            return Err(TensorError::ShapeMismatch {
                op: "loss_ac_idm: fdm is not an encoder-side form",
                left: vec![],
                right: vec![],
            })
        }
    };
    row_sq_dist(g, target, composed)
}

/// Graph handles and scalar values of every objective component.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub rec: Var,
    pub proprio: Var,
    pub vq: Var,
    /// Unweighted composition term; `None` when `lambda_ac == 0`.
    pub ac: Option<Var>,
    /// Pair-batch quantization, for codebook bookkeeping.
    pub pair_quant: Quantized,
    /// Pair-batch latent at the configured placement.
    pub pair_latent: Var,
}

/// Scalar breakdown of [`LossTerms`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub rec: f64,
    pub proprio: f64,
    pub vq: f64,
    pub ac: f64,
}

impl LossTerms {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossValues {
        let v = |x: Var| g.value(x).item().as_f64();
        LossValues {
            total: v(self.total),
            rec: v(self.rec),
            proprio: v(self.proprio),
            vq: v(self.vq),
            ac: self.ac.map_or(0.0, v),
        }
    }
}

/// Full objective
/// `rec + w_proprio * proprio + vq + lambda_ac * ac`.
///
/// With `lambda_ac == 0` the composition term is not built at all, so the
/// result is exactly the plain reconstruction-plus-regularizer objective.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    pairs: &PairVars,
    triples: &TripleVars,
    opts: &LossOptions,
) -> Result<LossTerms> {
    let w = &opts.weights;
    let (pair_latent, q) = encode(g, p, cfg, pairs.o_i, pairs.o_j, opts.placement)?;
    let (rec, proprio) = loss_rec_terms(g, p, pairs, q.z)?;
    let vq = loss_vq(g, &q, w)?;
    let wp = g.scale(proprio, T::of(w.w_proprio));
    let base = g.add(rec, wp)?;
    let mut total = g.add(base, vq)?;
    let mut ac = None;
    if w.lambda_ac != 0.0 {
        let with_ik = opts.ac_form != AcForm::Fdm;
        let (z_ij, z_jk, z_ik) = triple_latents(g, p, cfg, triples, opts.placement, with_ik)?;
        let term = match opts.ac_form {
            AcForm::Fdm => loss_ac_fdm(g, p, triples, z_ij, z_jk, w.w_proprio, opts.ac_proprio)?,
            form => loss_ac_idm(g, z_ij, z_jk, z_ik.expect("encoded"), form)?,
        };
        let scaled = g.scale(term, T::of(w.lambda_ac));
        total = g.add(total, scaled)?;
        ac = Some(term);
    }
    Ok(LossTerms {
        total,
        rec,
        proprio,
        vq,
        ac,
        pair_quant: q,
        pair_latent,
    })
}

/// Per-pair encoding record.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentAction<T> {
    pub z_pre: Vec<T>,
    pub indices: Vec<usize>,
    pub z: Vec<T>,
}

/// Encodes a batch of frame pairs without recording gradients.
pub fn encode_pairs<T: Real>(
    params: &ModelParams<T>,
    o_i: &Tensor<T>,
    o_j: &Tensor<T>,
) -> Result<Vec<LatentAction<T>>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let a = g.constant(o_i.clone());
    let b = g.constant(o_j.clone());
    let z_pre = idm_forward(&mut g, &p, a, b)?;
    let q = vq_quantize(&mut g, &p, &params.config, z_pre)?;
    let n = params.config.n_tokens;
    let pre = g.value(q.z_pre);
    let z = g.value(q.z);
    Ok((0..pre.shape()[0])
        .map(|r| LatentAction {
            z_pre: pre.row(r).to_vec(),
            indices: q.indices[r * n..(r + 1) * n].to_vec(),
            z: z.row(r).to_vec(),
        })
        .collect())
}

/// Exported latent action of each pair at the given placement, `[B, d]`.
pub fn latent<T: Real>(
    params: &ModelParams<T>,
    o_i: &Tensor<T>,
    o_j: &Tensor<T>,
    placement: Placement,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let a = g.constant(o_i.clone());
    let b = g.constant(o_j.clone());
    let (z, _) = encode(&mut g, &p, &params.config, a, b, placement)?;
    Ok(g.value(z).clone())
}

/// Decodes `F(o, z)` for a batch without recording gradients.
pub fn decode<T: Real>(params: &ModelParams<T>, o: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let a = g.constant(o.clone());
    let b = g.constant(z.clone());
    let out = fdm_img(&mut g, &p, a, b)?;
    Ok(g.value(out).clone())
}

/// Decodes `P(s, z)` for a batch without recording gradients.
pub fn decode_state<T: Real>(
    params: &ModelParams<T>,
    s: &Tensor<T>,
    z: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let a = g.constant(s.clone());
    let b = g.constant(z.clone());
    let out = fdm_proprio(&mut g, &p, a, b)?;
    Ok(g.value(out).clone())
}
