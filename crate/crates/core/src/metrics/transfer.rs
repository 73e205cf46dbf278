use super::{norm, LatentFn, Result};
use crate::model::{self, ModelParams, Placement};
use crate::rng::Rng;
use crate::sampling::{sample_triple, PairRef, SampleSpec};
use rand::Rng as _;
use crate::tensor::Tensor;
use crate::world::Dataset;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

pub const NORM_TRAJ_HEADER: &str = "t,z_norm,z_norm_normalized,ds_norm,ds_norm_normalized";

/// `‖z_{0t}‖` against `‖s_t - s_0‖` for `t = 1..T-1`, each also divided by
/// its series maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct NormTrajectory {
    pub z_norm: Vec<f64>,
    pub ds_norm: Vec<f64>,
    /// The latent series is identically zero.
    pub degenerate: bool,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(0.0f64, f64::max);
    v.iter().map(|x| if m > 0.0 { x / m } else { 0.0 }).collect()
}

impl NormTrajectory {
    pub fn z_normalized(&self) -> Vec<f64> {
        normalized(&self.z_norm)
    }

    pub fn ds_normalized(&self) -> Vec<f64> {
        normalized(&self.ds_norm)
    }

    pub fn to_csv(&self) -> String {
        let (zn, dn) = (self.z_normalized(), self.ds_normalized());
        let mut s = format!("{NORM_TRAJ_HEADER}\n");
        for k in 0..self.z_norm.len() {
            let _ = writeln!(s, "{},{},{},{},{}", k + 1, self.z_norm[k], zn[k], self.ds_norm[k], dn[k]);
        }
        s
    }
}

pub fn norm_trajectory(f: &dyn LatentFn, dataset: &Dataset, traj: usize) -> Result<NormTrajectory> {
    let tr = &dataset.trajectories[traj];
    if tr.len() < 2 {
        return Err(crate::sampling::SamplingError::TooShort { len: tr.len(), need: 2 }.into());
    }
    let refs: Vec<PairRef> = (1..tr.len()).map(|t| PairRef { traj, i: 0, j: t }).collect();
    let z_norm: Vec<f64> = f.latents(dataset, &refs)?.iter().map(|z| norm(z)).collect();
    let ds_norm = (1..tr.len())
        .map(|t| {
            norm(&tr.displacement(0, t))
        })
        .collect();
    let degenerate = z_norm.iter().all(|&v| v == 0.0);
    Ok(NormTrajectory {
        z_norm,
        ds_norm,
        degenerate,
    })
}

/// Decoding the same target frame with `z_ik` and with `z_ij + z_jk`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionTransfer {
    pub direct: Vec<f32>,
    pub composed: Vec<f32>,
    pub mse: f64,
}

/// Transfers the motion of source triple `(traj, i, j, k)` onto target frame
/// `(traj, t)` through the model's image decoder.
pub fn motion_transfer(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    src: (usize, usize, usize, usize),
    target: (usize, usize),
    placement: Placement,
) -> Result<MotionTransfer> {
    let (traj, i, j, k) = src;
    let frame = |t: usize| {
        let tr = &dataset.trajectories[traj];
        Tensor::matrix(1, tr.frame_len(), tr.frame(t).to_vec()).expect("frame")
    };
    let z = |a: usize, b: usize| model::latent(params, &frame(a), &frame(b), placement);
    let (z_ij, z_jk, z_ik) = (z(i, j)?, z(j, k)?, z(i, k)?);
    let sum: Vec<f32> = z_ij.data().iter().zip(z_jk.data()).map(|(a, b)| a + b).collect();
    let z_sum = Tensor::matrix(1, sum.len(), sum).expect("latent");
    let tt = &dataset.trajectories[target.0];
    let o = Tensor::matrix(1, tt.frame_len(), tt.frame(target.1).to_vec()).expect("frame");
    let direct = model::decode(params, &o, &z_ik)?.into_data();
    let composed = model::decode(params, &o, &z_sum)?.into_data();
    let mse = direct
        .iter()
        .zip(&composed)
        .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
        .sum::<f64>()
        / direct.len() as f64;
    Ok(MotionTransfer {
        direct,
        composed,
        mse,
    })
}

/// A source triple and the frame its motion is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransferCase {
    pub src: (usize, usize, usize, usize),
    pub target: (usize, usize),
}

/// `count` cases: each source triple comes from one listed trajectory and
/// its target frame from a different one when there is more than one.
pub fn transfer_cases(
    dataset: &Dataset,
    trajs: &[usize],
    spec: &SampleSpec,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<TransferCase>> {
    if trajs.is_empty() {
        return Err(super::MetricsError::Invalid("no trajectories".into()));
    }
    (0..count)
        .map(|_| {
            let a = rng.gen_range(0..trajs.len());
            let b = if trajs.len() > 1 {
                (a + rng.gen_range(1..trajs.len())) % trajs.len()
            } else {
                a
            };
            let (src, tgt) = (trajs[a], trajs[b]);
            let (i, j, k) = sample_triple(dataset.trajectories[src].len(), spec, rng)?;
            let t = rng.gen_range(0..dataset.trajectories[tgt].len());
            Ok(TransferCase {
                src: (src, i, j, k),
                target: (tgt, t),
            })
        })
        .collect()
}

/// Raw little-endian f32 grid preceded by `u32` height, width and channels.
pub fn write_grid(path: &Path, img: &[f32], h: usize, w: usize) -> std::io::Result<()> {
    let mut out = Vec::with_capacity(12 + img.len() * 4);
    for v in [h as u32, w as u32, 3] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in img {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)
}

/// Binary PPM (P6), 8 bits per channel.
pub fn write_ppm(path: &Path, img: &[f32], h: usize, w: usize) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = img
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    f.flush()
}
