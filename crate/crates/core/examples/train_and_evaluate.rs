//! Trains a model with the composition loss, evaluates it on held-out
//! trajectories and writes a checkpoint.
//!
//! ```text
//! cargo run --release --example train_and_evaluate -- 1000
//! ```

use aclam::metrics::{evaluate, EvalConfig, ModelLatent};
use aclam::model::ModelConfig;
use aclam::train::{read_checkpoint, train, write_checkpoint, TrainConfig};
use aclam::world::{gen_dataset, DatasetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let steps: usize = std::env::args().nth(1).map_or(Ok(400), |s| s.parse())?;

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
    let last = run.log.records.last().expect("at least one step");
    println!(
        "status {} after {} steps: total {:.4} rec {:.4} ac {:.4}, {} codes reseeded",
        run.status, last.step, last.loss_total, last.loss_rec, last.loss_ac, run.reseeded_codes
    );

    let test = data.split(cfg.holdout).test;
    let f = ModelLatent::new(&run.params, cfg.placement);
    let eval = EvalConfig {
        n_instances: 1024,
        ..Default::default()
    };
    let e = evaluate(&f, &data, &test, &eval, 0, cfg.placement)?;
    print!("{}", e.report.to_json());

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.aclamck");
    write_checkpoint(&path, &run.params, &serde_json::json!({ "steps": steps }))?;
    let ck = read_checkpoint(&path, Some(&model))?;
    assert_eq!(ck.params, run.params);
    println!("checkpoint round trip ok ({} scalars)", run.params.num_scalars());
    Ok(())
}
