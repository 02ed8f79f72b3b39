//! Compares single-scale and majority-vote predictions of a briefly trained
//! grid, or of a checkpoint given on the command line.

use gridnet::cli::RunConfig;
use gridnet::data::DatasetManifest;
use gridnet::grid::GridModel;
use gridnet::metrics::{evaluate, predict_scenes, CategoryMap};
use gridnet::train::{load_checkpoint, TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig::default();
    let d = &cfg.data;
    let c = cfg.grid.num_classes;
    let test = DatasetManifest::range(d.width, d.height, c, d.max_shapes, d.eval_first_seed, 20).generate()?;

    let mut model = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(path.as_ref())?.model,
        None => {
            let train = DatasetManifest::range(d.width, d.height, c, d.max_shapes, 0, 60).generate()?;
            let side = cfg.augment.out_size;
            let model = GridModel::<f32>::build(&cfg.grid, (side, side), 0)?;
            let tc = TrainConfig {
                epochs: 5,
                lr_drop_epoch: 5,
                ..cfg.train.clone()
            };
            let mut trainer = Trainer::new(model, tc)?;
            while trainer.epoch < trainer.cfg.epochs {
                trainer.train_epoch(&train, &cfg.augment)?;
            }
            trainer.model
        }
    };
    let map = CategoryMap::default_for(c);
    for scales in [vec![1.0], vec![0.5], vec![1.0, 0.5], cfg.scales.clone()] {
        let samples = predict_scenes(&mut model, &test, &scales)?;
        let r = evaluate(&samples, c, &map)?;
        println!(
            "scales {scales:?}: IoU {:.4}  iIoU {:.4}  category IoU {:.4}",
            r.mean_iou.unwrap_or(f64::NAN),
            r.mean_iiou.unwrap_or(f64::NAN),
            r.mean_category_iou.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
