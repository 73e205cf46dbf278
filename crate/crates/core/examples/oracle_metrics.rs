//! Every latent metric for the true displacement and for two corrupted
//! versions of it.

use aclam::metrics::{
    cycle_residual, delta_inv, displacement_corr, norm_ac, norm_identity, FnLatent, LatentFn, OracleLatent,
};
use aclam::rng::stream;
use aclam::sampling::{PairRef, SampleSpec};
use aclam::world::{gen_dataset, Dataset, DatasetConfig, WorldConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Without wall clamping the true displacement composes exactly.
    let data = gen_dataset(&DatasetConfig {
        image_h: 16,
        image_w: 16,
        world: WorldConfig {
            interior_bias: 1.0,
            ..Default::default()
        },
        ..Default::default()
    })?;
    let all: Vec<usize> = (0..data.trajectories.len()).collect();
    let spec = SampleSpec::default();
    let n = 2000;

    let squared = FnLatent(|d: &Dataset, p: PairRef| {
        d.trajectories[p.traj].displacement(p.i, p.j).iter().map(|v| v * v.abs()).collect()
    });
    let offset = FnLatent(|d: &Dataset, p: PairRef| {
        let [x, y] = d.trajectories[p.traj].displacement(p.i, p.j);
        vec![x + 0.05, y]
    });
    let cases: [(&str, &dyn LatentFn); 3] = [("oracle", &OracleLatent), ("squared", &squared), ("offset", &offset)];

    println!("{:>8} {:>9} {:>9} {:>9} {:>9} {:>9}", "latent", "norm_ac", "pearson", "norm_id", "delta_inv", "cycle");
    for (name, f) in cases {
        let mut rng = stream(0);
        println!(
            "{name:>8} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            norm_ac(f, &data, &all, &spec, n, &mut rng)?.value().unwrap_or(f64::NAN),
            displacement_corr(f, &data, &all, &spec, n, &mut rng)?.value().unwrap_or(f64::NAN),
            norm_identity(f, &data, &all, &spec, n, &mut rng)?.value().unwrap_or(f64::NAN),
            delta_inv(f, &data, &all, &spec, n, &mut rng)?.value().unwrap_or(f64::NAN),
            cycle_residual(f, &data, &all, &spec, 3, n, &mut rng)?.value().unwrap_or(f64::NAN),
        );
    }
    Ok(())
}
