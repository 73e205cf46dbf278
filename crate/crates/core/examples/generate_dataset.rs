//! Generates a small synthetic dataset, saves it, reloads it and dumps the
//! first frame of every environment as a PPM image.
//!
//! ```text
//! cargo run --release --example generate_dataset -- /tmp/aclam-data
//! ```

use aclam::metrics::write_ppm;
use aclam::world::{gen_dataset, load_dataset, DatasetConfig};
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "aclam-data".into()));
    std::fs::create_dir_all(&out)?;

    let cfg = DatasetConfig {
        traj_per_env: 5,
        steps: 20,
        image_h: 32,
        image_w: 32,
        ..Default::default()
    };
    let data = gen_dataset(&cfg)?;
    let path = out.join("toy.aclamds");
    data.save(&path)?;

    let back = load_dataset(&path)?;
    assert_eq!(back, data);
    let h = &back.header;
    println!(
        "{}: {} environments, {} trajectories of {} steps, {}x{}",
        path.display(),
        h.env_count,
        h.traj_count,
        h.steps_per_traj,
        h.image_hw[0],
        h.image_hw[1]
    );

    for env in 0..back.env_count() {
        let tr = back.get(env, 0).expect("every environment has trajectories");
        let img = out.join(format!("env{env}_frame0.ppm"));
        write_ppm(&img, tr.frame(0), h.image_hw[0], h.image_hw[1])?;
        let [x, y] = tr.state(0);
        println!("env {env}: start ({x:.3}, {y:.3}) -> {}", img.display());
    }

    let split = back.split(0.2);
    println!("train trajectories {:?}", split.train);
    println!("held-out trajectories {:?}", split.test);
    Ok(())
}
