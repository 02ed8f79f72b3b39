//! Trains the desk-scale grid and evaluates it on held-out scenes.
//!
//! ```text
//! cargo run --release --example train_desk -- 20
//! ```

use std::time::Instant;

use gridnet::cli::RunConfig;
use gridnet::data::DatasetManifest;
use gridnet::grid::{count_params_exact, GridModel};
use gridnet::metrics::{evaluate, predict_scenes, CategoryMap};
use gridnet::train::{TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args().nth(1).map_or(Ok(20), |a| a.parse())?;
    let cfg = RunConfig::default();
    let d = &cfg.data;
    let c = cfg.grid.num_classes;
    let train = DatasetManifest::range(d.width, d.height, c, d.max_shapes, d.train_first_seed, d.train_scenes).generate()?;
    let test = DatasetManifest::range(d.width, d.height, c, d.max_shapes, d.eval_first_seed, d.eval_scenes).generate()?;

    let side = cfg.augment.out_size;
    let model = GridModel::<f32>::build(&cfg.grid, (side, side), cfg.seed)?;
    println!("{} parameters", count_params_exact(&model));
    let tc = TrainConfig {
        epochs,
        lr_drop_epoch: cfg.train.lr_drop_epoch.min(epochs * 3 / 4),
        ..cfg.train.clone()
    };
    let mut trainer = Trainer::new(model, tc)?;
    let start = Instant::now();
    while trainer.epoch < trainer.cfg.epochs {
        let log = trainer.train_epoch(&train, &cfg.augment)?;
        println!("epoch {:>3}  loss {:.4}  lr {:.2e}  {:.0?}", log.epoch, log.mean_loss, log.lr_last, start.elapsed());
    }
    let samples = predict_scenes(&mut trainer.model, &test, &[1.0])?;
    let report = evaluate(&samples, c, &CategoryMap::default_for(c))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
