//! Generates a few scenes and augmented patches and writes them as PPM/PGM
//! files.
//!
//! ```text
//! cargo run --release --example synthetic_scenes -- out/scenes
//! ```

use std::path::PathBuf;

use gridnet::data::{export_scene, generate_scene, random_patch, AugmentConfig, DatasetManifest, Scene, SceneMeta};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map_or_else(|| PathBuf::from("scenes"), PathBuf::from);
    std::fs::create_dir_all(&dir)?;
    let manifest = DatasetManifest::range(128, 128, 4, 6, 0, 4);
    std::fs::write(dir.join("manifest.json"), manifest.to_json())?;

    let aug = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for &seed in &manifest.seeds {
        let scene = generate_scene(seed, 128, 128, 4, 6)?;
        export_scene(&scene, &dir, &format!("scene_{seed:03}"))?;
        for shape in &scene.meta.shapes {
            println!("scene {seed}: {:?} class {} instance {} bbox {:?}", shape.kind, shape.class, shape.instance, shape.bbox);
        }
        let patch = random_patch(&scene, &aug, &mut rng)?;
        let as_scene = Scene {
            width: patch.size,
            height: patch.size,
            image: patch.image,
            labels: patch.labels,
            instances: patch.instances,
            meta: SceneMeta {
                seed,
                num_classes: 4,
                shapes: Vec::new(),
            },
        };
        export_scene(&as_scene, &dir, &format!("patch_{seed:03}"))?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}
