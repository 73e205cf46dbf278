//! Writes the latent-norm and displacement-norm series of one trajectory
//! for the true-displacement latent and for a saturating one.
//!
//! ```text
//! cargo run --example norm_trajectory -- /tmp/norms
//! ```

use aclam::metrics::{norm_trajectory, FnLatent, OracleLatent};
use aclam::world::{gen_dataset, Dataset, DatasetConfig};
use aclam::sampling::PairRef;
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "aclam-norms".into()));
    std::fs::create_dir_all(&out)?;
    let data = gen_dataset(&DatasetConfig {
        traj_per_env: 2,
        steps: 40,
        image_h: 16,
        image_w: 16,
        ..Default::default()
    })?;

    let oracle = norm_trajectory(&OracleLatent, &data, 0)?;
    let saturating = FnLatent(|d: &Dataset, p: PairRef| {
        d.trajectories[p.traj]
            .displacement(p.i, p.j)
            .iter()
            .map(|v| (8.0 * v).tanh())
            .collect()
    });
    let squashed = norm_trajectory(&saturating, &data, 0)?;

    std::fs::write(out.join("oracle.csv"), oracle.to_csv())?;
    std::fs::write(out.join("saturating.csv"), squashed.to_csv())?;
    let (a, b, c) = (oracle.z_normalized(), oracle.ds_normalized(), squashed.z_normalized());
    println!("  t  oracle  |ds|  saturating");
    for t in (0..a.len()).step_by(5) {
        println!("{t:3}  {:.3}  {:.3}  {:.3}", a[t], b[t], c[t]);
    }
    println!("csv files in {}", out.display());
    Ok(())
}
