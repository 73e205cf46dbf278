//! Runs a small design grid and prints the per-seed table, the seed medians
//! and how each directional expectation came out.
//!
//! ```text
//! cargo run --release --example ablation_grid -- 300
//! ```

use aclam::ablation::{expectations_csv, expectations, run_grid, table_csv, Design, GridConfig};
use aclam::metrics::EvalConfig;
use aclam::model::ModelConfig;
use aclam::train::TrainConfig;
use aclam::world::{gen_dataset, DatasetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: usize = std::env::args().nth(1).map_or(Ok(200), |s| s.parse())?;
    let data = gen_dataset(&DatasetConfig {
        traj_per_env: 10,
        steps: 30,
        image_h: 16,
        image_w: 16,
        ..Default::default()
    })?;
    let grid = GridConfig {
        train: TrainConfig {
            steps,
            warmup_steps: steps / 10,
            batch_pairs: 16,
            batch_triples: 16,
            base_lr: 1e-3,
            ..Default::default()
        },
        model: ModelConfig {
            idm_hidden: vec![64],
            fdm_hidden: vec![64],
            ..ModelConfig::for_image(16, 16)
        },
        eval: EvalConfig {
            n_instances: 512,
            ..Default::default()
        },
        eval_seed: 0,
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cells = run_grid(&data, &grid, &Design::ALL, &[0, 1], threads, &|c| {
        eprintln!("{} seed {}: {}", c.design.as_str(), c.seed, c.status);
    });
    print!("{}", table_csv(&cells));
    println!();
    print!("{}", expectations_csv(&expectations(&cells)));
    Ok(())
}
