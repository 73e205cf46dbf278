use super::probe::{build_probe_dataset, env_probe, goal_probe, EnvProbeResult, GoalProbeResult, ProbeConfig};
use super::{
    cycle_residual, delta_inv, displacement_corr, norm_ac, norm_identity, LatentFn, MetricValue, Result,
};
use crate::model::Placement;
use crate::rng::{derive_seed, stream};
use crate::sampling::SampleSpec;
use crate::world::Dataset;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_instances: usize,
    pub spec: SampleSpec,
    pub cycle_m: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_instances: 4096,
            spec: SampleSpec::default(),
            cycle_m: 3,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub norm_ac: MetricValue,
    pub pearson_r: MetricValue,
    pub norm_identity: MetricValue,
    pub delta_inv: MetricValue,
    pub cycle_residual: MetricValue,
    pub env_probe_acc: f64,
    pub goal_probe_r2: f64,
    pub n_instances: usize,
    pub seed: u64,
    pub placement: Placement,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// The report plus the probe details behind its two probe fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub env_probe: EnvProbeResult,
    pub goal_probe: GoalProbeResult,
}

const TAGS: [u64; 7] = [0x4e41, 0x5052, 0x4944, 0x494e, 0x4359, 0x5052_4f42, 0x474f];

/// Runs every metric on the listed trajectories. Each metric draws from its
/// own stream derived from `seed`, so adding or skipping one never shifts the
/// others.
pub fn evaluate(
    f: &dyn LatentFn,
    dataset: &Dataset,
    trajs: &[usize],
    cfg: &EvalConfig,
    seed: u64,
    placement: Placement,
) -> Result<Evaluation> {
    let rng = |k: usize| stream(derive_seed(&[seed, TAGS[k]]));
    let n = cfg.n_instances;
    let spec = &cfg.spec;
    let probe_set = build_probe_dataset(f, dataset, trajs, spec, cfg.probe.per_class, &mut rng(5))?;
    let env = env_probe(&probe_set, &cfg.probe, &mut rng(5))?;
    let goal = goal_probe(&probe_set, &cfg.probe, &mut rng(6))?;
    let report = MetricsReport {
        norm_ac: norm_ac(f, dataset, trajs, spec, n, &mut rng(0))?,
        pearson_r: displacement_corr(f, dataset, trajs, spec, n, &mut rng(1))?,
        norm_identity: norm_identity(f, dataset, trajs, spec, n, &mut rng(2))?,
        delta_inv: delta_inv(f, dataset, trajs, spec, n, &mut rng(3))?,
        cycle_residual: cycle_residual(f, dataset, trajs, spec, cfg.cycle_m, n, &mut rng(4))?,
        env_probe_acc: env.accuracy,
        goal_probe_r2: goal.r2,
        n_instances: n,
        seed,
        placement,
    };
    Ok(Evaluation {
        report,
        env_probe: env,
        goal_probe: goal,
    })
}
