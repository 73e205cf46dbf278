//! Environment and goal probes on two hand-built latent functions: the true
//! displacement, and the displacement with the environment id appended.
//! The second leaks context and the environment probe finds it.
//!
//! ```text
//! cargo run --release --example probes
//! ```

use aclam::metrics::{build_probe_dataset, env_probe, goal_probe, FnLatent, LatentFn, OracleLatent, ProbeConfig};
use aclam::rng::stream;
use aclam::sampling::SampleSpec;
use aclam::world::{gen_dataset, DatasetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = gen_dataset(&DatasetConfig {
        traj_per_env: 10,
        steps: 30,
        image_h: 16,
        image_w: 16,
        ..Default::default()
    })?;
    let all: Vec<usize> = (0..data.trajectories.len()).collect();
    let cfg = ProbeConfig {
        per_class: 300,
        ..Default::default()
    };
    let leaky = FnLatent(|d: &aclam::world::Dataset, p: aclam::sampling::PairRef| {
        let tr = &d.trajectories[p.traj];
        let mut z = tr.displacement(p.i, p.j).to_vec();
        z.push(f64::from(tr.env_id));
        z
    });
    let cases: [(&str, &dyn LatentFn); 2] = [("oracle", &OracleLatent), ("leaky", &leaky)];
    for (name, f) in cases {
        let mut rng = stream(7);
        let set = build_probe_dataset(f, &data, &all, &SampleSpec::default(), cfg.per_class, &mut rng)?;
        let env = env_probe(&set, &cfg, &mut rng)?;
        let goal = goal_probe(&set, &cfg, &mut rng)?;
        println!(
            "{name:>6}: env accuracy {:.3} (shuffled {:.3}, chance {:.3}), goal residual R2 {:.3}",
            env.accuracy, env.shuffled_accuracy, env.chance, goal.r2
        );
    }
    Ok(())
}
