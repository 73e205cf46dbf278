//! Trains briefly, then decodes held-out target frames with a direct latent
//! and with a composed one and writes both as PPM images.
//!
//! ```text
//! cargo run --release --example motion_transfer -- /tmp/transfer 800
//! ```

use aclam::metrics::{motion_transfer, transfer_cases, write_ppm};
use aclam::model::ModelConfig;
use aclam::rng::stream;
use aclam::sampling::SampleSpec;
use aclam::train::{train, TrainConfig};
use aclam::world::{gen_dataset, DatasetConfig};
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "aclam-transfer".into()));
    let steps: usize = args.next().map_or(Ok(400), |s| s.parse())?;
    std::fs::create_dir_all(&out)?;

    let data = gen_dataset(&DatasetConfig {
        image_h: 16,
        image_w: 16,
        ..Default::default()
    })?;
    let model = ModelConfig {
        idm_hidden: vec![128, 128],
        fdm_hidden: vec![128, 128],
        ..ModelConfig::for_image(16, 16)
    };
    let cfg = TrainConfig {
        steps,
        warmup_steps: steps / 10,
        batch_pairs: 32,
        batch_triples: 32,
        base_lr: 1e-3,
        ..Default::default()
    };
    let run = train(&data, &cfg, &model)?;
    println!("training {}", run.status);

    let test = data.split(cfg.holdout).test;
    let cases = transfer_cases(&data, &test, &SampleSpec::default(), 5, &mut stream(3))?;
    for (n, c) in cases.iter().enumerate() {
        let m = motion_transfer(&run.params, &data, c.src, c.target, cfg.placement)?;
        write_ppm(&out.join(format!("{n}_direct.ppm")), &m.direct, 16, 16)?;
        write_ppm(&out.join(format!("{n}_composed.ppm")), &m.composed, 16, 16)?;
        println!("case {n}: source {:?} target {:?} mse {:.2e}", c.src, c.target, m.mse);
    }
    println!("images in {}", out.display());
    Ok(())
}
