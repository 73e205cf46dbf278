use crate::rng::{derive_seed, stream};
use crate::tensor::{Graph, Real, Result, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

const INIT_TAG: u64 = 0x494e_4954;

/// How the encoder output reaches the decoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Bottleneck {
    /// Nearest-code lookup with a straight-through gradient.
    #[default]
    Vq,
    /// Decoders see the continuous encoding; the codebook still trains
    /// through the VQ loss. Makes the whole objective smooth, which is what
    /// finite-difference checks need.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Flattened frame length (`H*W*3`).
    pub obs_dim: usize,
    pub idm_hidden: Vec<usize>,
    pub fdm_hidden: Vec<usize>,
    pub proprio_hidden: Vec<usize>,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub n_tokens: usize,
    pub state_dim: usize,
    #[serde(default)]
    pub bottleneck: Bottleneck,
}

impl ModelConfig {
    pub fn for_image(h: usize, w: usize) -> Self {
        ModelConfig {
            obs_dim: h * w * 3,
            idm_hidden: vec![256, 256],
            fdm_hidden: vec![256, 256],
            proprio_hidden: vec![64],
            codebook_size: 32,
            code_dim: 8,
            n_tokens: 2,
            state_dim: 2,
            bottleneck: Bottleneck::Vq,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.n_tokens * self.code_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> Mlp<T> {
    fn init(widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| T::of(rng.gen_range(-a..a)))
                    .collect();
                Linear {
                    weight: Tensor::matrix(fan_in, fan_out, data).expect("positive widths"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Mlp { layers }
    }

    fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }
}

/// All learnable arrays: encoder, codebook, image decoder, state decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub idm: Mlp<T>,
    pub codebook: Tensor<T>,
    pub fdm_img: Mlp<T>,
    pub fdm_proprio: Mlp<T>,
}

fn push_mlp<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, prefix: &str, m: &'a Mlp<T>) {
    for (i, l) in m.layers.iter().enumerate() {
        out.push((format!("{prefix}.{i}.weight"), &l.weight));
        out.push((format!("{prefix}.{i}.bias"), &l.bias));
    }
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

impl<T: Real> ModelParams<T> {
    /// Glorot-uniform weights, zero biases, codebook uniform in [-0.5, 0.5].
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = stream(derive_seed(&[seed, INIT_TAG]));
        let d = config.latent_dim();
        let idm = Mlp::init(&widths(2 * config.obs_dim, &config.idm_hidden, d), &mut rng);
        let codebook = Tensor::matrix(
            config.codebook_size,
            config.code_dim,
            (0..config.codebook_size * config.code_dim)
                .map(|_| T::of(rng.gen_range(-0.5..=0.5)))
                .collect(),
        )
        .expect("non-empty codebook");
        let fdm_img = Mlp::init(
            &widths(config.obs_dim + d, &config.fdm_hidden, config.obs_dim),
            &mut rng,
        );
        let fdm_proprio = Mlp::init(
            &widths(config.state_dim + d, &config.proprio_hidden, config.state_dim),
            &mut rng,
        );
        ModelParams {
            config: config.clone(),
            idm,
            codebook,
            fdm_img,
            fdm_proprio,
        }
    }

    /// Arrays in canonical order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        push_mlp(&mut out, "idm", &self.idm);
        out.push(("codebook".to_string(), &self.codebook));
        push_mlp(&mut out, "fdm_img", &self.fdm_img);
        push_mlp(&mut out, "fdm_proprio", &self.fdm_proprio);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for l in self.idm.layers.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.codebook);
        for l in self.fdm_img.layers.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for l in self.fdm_proprio.layers.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn codebook_index(&self) -> usize {
        2 * self.idm.layers.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            idm: self.idm.cast(),
            codebook: self.codebook.cast(),
            fdm_img: self.fdm_img.cast(),
            fdm_proprio: self.fdm_proprio.cast(),
        }
    }

    /// Adds every array to `g` as a leaf. `trainable` controls whether the
    /// leaves receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        fn bind_mlp<T: Real>(g: &mut Graph<T>, m: &Mlp<T>, trainable: bool, all: &mut Vec<Var>) -> Vec<(Var, Var)> {
            m.layers
                .iter()
                .map(|l| {
                    let w = g.leaf(l.weight.clone(), trainable);
                    let b = g.leaf(l.bias.clone(), trainable);
                    all.push(w);
                    all.push(b);
                    (w, b)
                })
                .collect()
        }
        let mut all = Vec::new();
        let idm = bind_mlp(g, &self.idm, trainable, &mut all);
        let codebook = g.leaf(self.codebook.clone(), trainable);
        all.push(codebook);
        let fdm_img = bind_mlp(g, &self.fdm_img, trainable, &mut all);
        let fdm_proprio = bind_mlp(g, &self.fdm_proprio, trainable, &mut all);
        Bound {
            idm,
            codebook,
            fdm_img,
            fdm_proprio,
            all,
        }
    }
}

/// Graph handles for a [`ModelParams`], in the same canonical order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub idm: Vec<(Var, Var)>,
    pub codebook: Var,
    pub fdm_img: Vec<(Var, Var)>,
    pub fdm_proprio: Vec<(Var, Var)>,
    pub all: Vec<Var>,
}

impl Bound {
    /// Regroups handles given in canonical order (as from
    /// [`ModelParams::named`]) for a model of shape `cfg`.
    pub fn from_vars(cfg: &ModelConfig, vars: Vec<Var>) -> Bound {
        let pairs = |v: &[Var]| -> Vec<(Var, Var)> { v.chunks_exact(2).map(|c| (c[0], c[1])).collect() };
        let n_idm = 2 * (cfg.idm_hidden.len() + 1);
        let n_img = 2 * (cfg.fdm_hidden.len() + 1);
        Bound {
            idm: pairs(&vars[..n_idm]),
            codebook: vars[n_idm],
            fdm_img: pairs(&vars[n_idm + 1..n_idm + 1 + n_img]),
            fdm_proprio: pairs(&vars[n_idm + 1 + n_img..]),
            all: vars,
        }
    }

    /// Gradients for every array, zero-filled where the loss did not reach.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> Vec<Vec<T>> {
        self.all
            .iter()
            .map(|&v| {
                g.grad(v)
                    .map_or_else(|| vec![T::zero(); g.value(v).len()], <[T]>::to_vec)
            })
            .collect()
    }
}

/// Dense layers with tanh between them and a linear final layer.
pub(crate) fn mlp_forward<T: Real>(g: &mut Graph<T>, layers: &[(Var, Var)], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let lin = g.matmul(h, w)?;
        h = g.add(lin, b)?;
        if i + 1 < layers.len() {
            h = g.tanh(h);
        }
    }
    Ok(h)
}
