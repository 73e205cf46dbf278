//! `ACLAMDS1` dataset files.
//!
//! Layout (little-endian): the 8 magic bytes `ACLAMDS1`, a `u32` header
//! length, a UTF-8 JSON header, then for each trajectory `u32 env_id`,
//! `u32 T`, `T*H*W*3` f32 frame values, `T*2` f32 states and `(T-1)*2` f32
//! actions. Trajectories are stored env-major.

use super::{gen_trajectory, make_scene, Result, Trajectory, WorldConfig, WorldError, WorldState};
use crate::rng::derive_seed;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"ACLAMDS1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub traj_per_env: usize,
    pub steps: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub world: WorldConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            traj_per_env: 25,
            steps: 50,
            image_h: 32,
            image_w: 32,
            world: WorldConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub image_hw: [usize; 2],
    pub channels: usize,
    pub env_count: u32,
    pub traj_count: usize,
    pub steps_per_traj: usize,
    pub seed: u64,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

/// Trajectory indices of a train/held-out partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Generates every trajectory of the dataset. Each trajectory gets its own
/// scene and random stream derived from `(seed, env_id, index)`.
pub fn gen_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let mut trajectories = Vec::with_capacity(cfg.world.env_count as usize * cfg.traj_per_env);
    for env in 0..cfg.world.env_count {
        for idx in 0..cfg.traj_per_env {
            let traj_seed = derive_seed(&[cfg.seed, env as u64, idx as u64]);
            let scene = make_scene(traj_seed, env, &cfg.world)?;
            trajectories.push(gen_trajectory(
                &scene,
                traj_seed,
                cfg.steps,
                cfg.image_h,
                cfg.image_w,
                &cfg.world,
            )?);
        }
    }
    Ok(Dataset {
        header: DatasetHeader {
            format_version: 1,
            image_hw: [cfg.image_h, cfg.image_w],
            channels: 3,
            env_count: cfg.world.env_count,
            traj_count: trajectories.len(),
            steps_per_traj: cfg.steps,
            seed: cfg.seed,
            dtype: "f32".into(),
        },
        trajectories,
    })
}

impl Dataset {
    pub fn env_count(&self) -> u32 {
        self.header.env_count
    }

    pub fn traj_per_env(&self) -> usize {
        self.header.traj_count / self.header.env_count.max(1) as usize
    }

    /// Trajectory `index` of environment `env_id`.
    pub fn get(&self, env_id: u32, index: usize) -> Option<&Trajectory> {
        let per = self.traj_per_env();
        if env_id >= self.env_count() || index >= per {
            return None;
        }
        self.trajectories.get(env_id as usize * per + index)
    }

    /// Holds out the last `holdout` fraction (rounded up, at least one) of
    /// each environment's trajectories.
    pub fn split(&self, holdout: f64) -> Split {
        let per = self.traj_per_env();
        let n_test = ((per as f64 * holdout).ceil() as usize).clamp(1, per.saturating_sub(1).max(1));
        let mut split = Split {
            train: Vec::new(),
            test: Vec::new(),
        };
        for env in 0..self.env_count() as usize {
            for idx in 0..per {
                let global = env * per + idx;
                if idx + n_test >= per {
                    split.test.push(global);
                } else {
                    split.train.push(global);
                }
            }
        }
        split
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.trajectories {
            out.extend_from_slice(&t.env_id.to_le_bytes());
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            for v in &t.frames {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for s in &t.states {
                out.extend_from_slice(&s.p[0].to_le_bytes());
                out.extend_from_slice(&s.p[1].to_le_bytes());
            }
            for a in &t.actions {
                out.extend_from_slice(&a[0].to_le_bytes());
                out.extend_from_slice(&a[1].to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(|_| WorldError::BadMagic)? != MAGIC {
            return Err(WorldError::BadMagic);
        }
        let header_len = r.u32()? as usize;
        let header: DatasetHeader = serde_json::from_slice(r.take(header_len)?)?;
        if header.format_version != 1 || header.channels != 3 || header.dtype != "f32" {
            return Err(WorldError::HeaderMismatch(format!(
                "unsupported format {} / channels {} / dtype {}",
                header.format_version, header.channels, header.dtype
            )));
        }
        if header.env_count == 0 || header.traj_count % header.env_count as usize != 0 {
            return Err(WorldError::HeaderMismatch(format!(
                "{} trajectories cannot be balanced over {} environments",
                header.traj_count, header.env_count
            )));
        }
        let [h, w] = header.image_hw;
        let t_len = header.steps_per_traj;
        if t_len < 3 {
            return Err(WorldError::HeaderMismatch(format!("steps_per_traj {t_len}")));
        }
        let per_traj = 8 + 4 * (t_len * h * w * 3 + t_len * 2 + (t_len - 1) * 2);
        let needed = r.pos + per_traj * header.traj_count;
        if bytes.len() < needed {
            return Err(WorldError::Truncated {
                needed,
                found: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(WorldError::HeaderMismatch(format!(
                "{} trailing bytes after {} trajectories",
                bytes.len() - needed,
                header.traj_count
            )));
        }
        let per_env = header.traj_count / header.env_count as usize;
        let mut trajectories = Vec::with_capacity(header.traj_count);
        for k in 0..header.traj_count {
            let env_id = r.u32()?;
            let t = r.u32()? as usize;
            if t != t_len {
                return Err(WorldError::HeaderMismatch(format!(
                    "trajectory {k} has T={t}, header says {t_len}"
                )));
            }
            if env_id as usize != k / per_env {
                return Err(WorldError::HeaderMismatch(format!(
                    "trajectory {k} has env_id {env_id}, expected {}",
                    k / per_env
                )));
            }
            let frames = r.f32s(t * h * w * 3)?;
            let states = r
                .f32s(t * 2)?
                .chunks_exact(2)
                .map(|c| WorldState { p: [c[0], c[1]] })
                .collect();
            let actions = r
                .f32s((t - 1) * 2)?
                .chunks_exact(2)
                .map(|c| [c[0], c[1]])
                .collect();
            trajectories.push(Trajectory {
                env_id,
                image_h: h,
                image_w: w,
                states,
                frames,
                actions,
            });
        }
        Ok(Dataset {
            header,
            trajectories,
        })
    }
}

/// Reads and validates an `ACLAMDS1` file.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(WorldError::Truncated {
                needed: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
