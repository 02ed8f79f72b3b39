//! Interrupts a run with a checkpoint and shows that resuming reproduces the
//! uninterrupted run bit for bit.

use gridnet::data::{AugmentConfig, DatasetManifest};
use gridnet::grid::{GridModel, GridSpec};
use gridnet::train::{load_checkpoint, save_checkpoint, TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenes = DatasetManifest::range(64, 64, 4, 4, 0, 12).generate()?;
    let aug = AugmentConfig {
        crop_min: 32,
        crop_max: 64,
        out_size: 32,
        hflip_p: 0.5,
    };
    let model = GridModel::<f32>::build(&GridSpec::symmetric(4, 2, 2, 4, 4), (32, 32), 0)?;
    let cfg = TrainConfig {
        epochs: 4,
        lr_drop_epoch: 3,
        ..TrainConfig::default()
    };
    let mut straight = Trainer::new(model, cfg)?;
    let dir = std::env::temp_dir().join(format!("gridnet-resume-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("epoch_2.ckpt");

    for _ in 0..2 {
        straight.train_epoch(&scenes, &aug)?;
    }
    save_checkpoint(&straight, &path)?;
    println!("saved {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());
    while straight.epoch < straight.cfg.epochs {
        let log = straight.train_epoch(&scenes, &aug)?;
        println!("uninterrupted epoch {}: loss {:.6}", log.epoch, log.mean_loss);
    }

    let mut resumed = load_checkpoint(&path)?.into_trainer();
    while resumed.epoch < resumed.cfg.epochs {
        let log = resumed.train_epoch(&scenes, &aug)?;
        println!("resumed       epoch {}: loss {:.6}", log.epoch, log.mean_loss);
    }
    let same = straight.model.params().iter().zip(resumed.model.params()).all(|(a, b)| {
        a.value.iter().map(|v| v.to_bits()).eq(b.value.iter().map(|v| v.to_bits()))
    });
    println!("parameters identical: {same}");
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
