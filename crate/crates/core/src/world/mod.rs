//! Deterministic 2-D tabletop world: a disk-shaped agent translating over a
//! static scene of colored distractor disks.
//!
//! Scenes, trajectories and datasets are all pure functions of their seeds.
//! Rendering uses a hard pixel-center membership test, so frames are
//! bit-reproducible.

mod dataset;

pub use dataset::{gen_dataset, load_dataset, Dataset, DatasetConfig, DatasetHeader, Split};

use crate::rng::{derive_seed, stream};
use rand::Rng;
use serde::{Deserialize, Serialize};

const SCENE_TAG: u64 = 0x5343_454e;
const TRAJ_TAG: u64 = 0x5452_414a;

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("env_id {env_id} out of range for {env_count} environments")]
    EnvOutOfRange { env_id: u32, env_count: u32 },
    #[error("distractor placement failed after {0} attempts")]
    RejectionExhausted(usize),
    #[error("action norm {norm} exceeds step_max {max}")]
    ActionTooLarge { norm: f64, max: f64 },
    #[error("trajectory length {0} is below the minimum of 3")]
    TooShort(usize),
    #[error("image {h}x{w} is below the 16x16 minimum")]
    ImageTooSmall { h: usize, w: usize },
    #[error("bad magic: expected ACLAMDS1")]
    BadMagic,
    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("header/payload mismatch: {0}")]
    HeaderMismatch(String),
    #[error("invalid header json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, WorldError>;

/// Physical parameters of the world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub env_count: u32,
    pub agent_radius: f32,
    pub step_max: f32,
    pub step_min: f32,
    /// Probability that a step which would hit the boundary is reflected
    /// back into the interior instead of clamped.
    pub interior_bias: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            env_count: 4,
            agent_radius: 0.06,
            step_max: 0.12,
            step_min: 0.01,
            interior_bias: 0.9,
        }
    }
}

impl WorldConfig {
    pub fn margin(&self) -> f32 {
        self.agent_radius
    }
}

pub type Rgb = [f32; 3];

pub const AGENT_COLOR: Rgb = [1.0, 1.0, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub center: [f32; 2],
    pub radius: f32,
    pub color: Rgb,
}

/// Static part of a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub env_id: u32,
    pub background_color: Rgb,
    pub distractors: Vec<Distractor>,
    pub agent_radius: f32,
    pub agent_color: Rgb,
}

/// Agent position; doubles as the proprioceptive state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub p: [f32; 2],
}

/// A rollout. `frames` holds `T` images of `H*W*3` values each, row-major
/// with interleaved RGB channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub env_id: u32,
    pub image_h: usize,
    pub image_w: usize,
    pub states: Vec<WorldState>,
    pub frames: Vec<f32>,
    pub actions: Vec<[f32; 2]>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn frame_len(&self) -> usize {
        self.image_h * self.image_w * 3
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn state(&self, t: usize) -> [f32; 2] {
        self.states[t].p
    }

    /// `s_j - s_i`, computed in double precision.
    pub fn displacement(&self, i: usize, j: usize) -> [f64; 2] {
        let (a, b) = (self.states[i].p, self.states[j].p);
        [b[0] as f64 - a[0] as f64, b[1] as f64 - a[1] as f64]
    }
}

fn hsv(h: f32, s: f32, v: f32) -> Rgb {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hue of environment `env_id`; environments are spread evenly on the color wheel.
pub fn env_hue(env_id: u32, env_count: u32) -> f32 {
    env_id as f32 / env_count as f32
}

/// Background palette of one environment (three shades of the env hue).
pub fn background_palette(env_id: u32, env_count: u32) -> [Rgb; 3] {
    let h = env_hue(env_id, env_count);
    [hsv(h, 0.55, 0.35), hsv(h, 0.55, 0.45), hsv(h, 0.55, 0.55)]
}

/// Builds the static scene for `(seed, env_id)`.
pub fn make_scene(seed: u64, env_id: u32, cfg: &WorldConfig) -> Result<SceneSpec> {
    if env_id >= cfg.env_count {
        return Err(WorldError::EnvOutOfRange {
            env_id,
            env_count: cfg.env_count,
        });
    }
    let mut rng = stream(derive_seed(&[seed, env_id as u64, SCENE_TAG]));
    let palette = background_palette(env_id, cfg.env_count);
    let background_color = palette[rng.gen_range(0..palette.len())];
    let count = rng.gen_range(2..=5usize);
    let family = env_hue(env_id, cfg.env_count) + 0.5;

    const MAX_ATTEMPTS: usize = 10_000;
    let mut distractors: Vec<Distractor> = Vec::with_capacity(count);
    let mut attempts = 0;
    while distractors.len() < count {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(WorldError::RejectionExhausted(MAX_ATTEMPTS));
        }
        let radius: f32 = rng.gen_range(0.04..=0.10);
        let center = [
            rng.gen_range(radius..=1.0 - radius),
            rng.gen_range(radius..=1.0 - radius),
        ];
        let color = hsv(
            family + rng.gen_range(-0.08..=0.08),
            0.75,
            rng.gen_range(0.7..=0.9),
        );
        let clear = distractors.iter().all(|d| {
            let dx = d.center[0] - center[0];
            let dy = d.center[1] - center[1];
            (dx * dx + dy * dy).sqrt() >= d.radius + radius
        });
        if clear {
            distractors.push(Distractor {
                center,
                radius,
                color,
            });
        }
    }
    Ok(SceneSpec {
        env_id,
        background_color,
        distractors,
        agent_radius: cfg.agent_radius,
        agent_color: AGENT_COLOR,
    })
}

fn paint_disk(img: &mut [f32], h: usize, w: usize, center: [f32; 2], radius: f32, color: Rgb) {
    let r2 = radius * radius;
    for y in 0..h {
        let py = (y as f32 + 0.5) / h as f32 - center[1];
        for x in 0..w {
            let px = (x as f32 + 0.5) / w as f32 - center[0];
            if px * px + py * py <= r2 {
                img[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
            }
        }
    }
}

/// Renders an `h×w×3` frame: background, distractors in order, agent last.
/// The x coordinate maps to columns and y to rows.
pub fn render(scene: &SceneSpec, state: &WorldState, h: usize, w: usize) -> Result<Vec<f32>> {
    if h < 16 || w < 16 {
        return Err(WorldError::ImageTooSmall { h, w });
    }
    let mut img = Vec::with_capacity(h * w * 3);
    for _ in 0..h * w {
        img.extend_from_slice(&scene.background_color);
    }
    for d in &scene.distractors {
        paint_disk(&mut img, h, w, d.center, d.radius, d.color);
    }
    paint_disk(&mut img, h, w, state.p, scene.agent_radius, scene.agent_color);
    Ok(img)
}

fn clamp_pos(v: f32, margin: f32) -> f32 {
    v.clamp(margin, 1.0 - margin)
}

/// Applies a displacement and clamps to the reachable interior.
pub fn step(state: &WorldState, action: [f32; 2], cfg: &WorldConfig) -> Result<WorldState> {
    let norm = (action[0] as f64).hypot(action[1] as f64);
    if norm > cfg.step_max as f64 + 1e-6 {
        return Err(WorldError::ActionTooLarge {
            norm,
            max: cfg.step_max as f64,
        });
    }
    let m = cfg.margin();
    Ok(WorldState {
        p: [
            clamp_pos(state.p[0] + action[0], m),
            clamp_pos(state.p[1] + action[1], m),
        ],
    })
}

/// True when `state + action` leaves the interior on some axis.
pub fn would_clamp(state: &WorldState, action: [f32; 2], cfg: &WorldConfig) -> bool {
    let m = cfg.margin();
    (0..2).any(|a| {
        let v = state.p[a] + action[a];
        v < m || v > 1.0 - m
    })
}

/// Rolls out `steps` states from a random interior start.
pub fn gen_trajectory(
    scene: &SceneSpec,
    seed: u64,
    steps: usize,
    h: usize,
    w: usize,
    cfg: &WorldConfig,
) -> Result<Trajectory> {
    if steps < 3 {
        return Err(WorldError::TooShort(steps));
    }
    let mut rng = stream(derive_seed(&[seed, scene.env_id as u64, TRAJ_TAG]));
    let m = cfg.margin();
    let mut state = WorldState {
        p: [rng.gen_range(m..=1.0 - m), rng.gen_range(m..=1.0 - m)],
    };
    let mut states = Vec::with_capacity(steps);
    let mut actions = Vec::with_capacity(steps - 1);
    let mut frames = Vec::with_capacity(steps * h * w * 3);
    states.push(state);
    frames.extend(render(scene, &state, h, w)?);
    for _ in 1..steps {
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let mag: f64 = rng.gen_range(cfg.step_min as f64..=cfg.step_max as f64);
        let mut action = [(mag * angle.cos()) as f32, (mag * angle.sin()) as f32];
        if would_clamp(&state, action, cfg) && rng.gen_bool(cfg.interior_bias) {
            for a in 0..2 {
                let v = state.p[a] + action[a];
                if v < m || v > 1.0 - m {
                    action[a] = -action[a];
                }
            }
        }
        state = step(&state, action, cfg)?;
        states.push(state);
        actions.push(action);
        frames.extend(render(scene, &state, h, w)?);
    }
    Ok(Trajectory {
        env_id: scene.env_id,
        image_h: h,
        image_w: w,
        states,
        frames,
        actions,
    })
}
