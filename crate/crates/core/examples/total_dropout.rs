//! Samples total-dropout masks and shows their effect on a forward pass.

use gridnet::grid::{GridModel, GridSpec, Topology};
use gridnet::regularization::sample_drop_mask;
use gridnet::tensor::{NormMode, Shape, Tape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = GridSpec::symmetric(4, 2, 2, 4, 4);
    let topo = Topology::of(&spec);
    let mut model = GridModel::<f32>::build(&spec, (32, 32), 1)?;
    let x = Tensor::from_vec(
        Shape::new(1, 3, 32, 32),
        (0..3 * 32 * 32).map(|k| ((k * 37) % 101) as f32 / 101.0).collect(),
    )?;

    let mut reference = None;
    for step in 0..4 {
        let mask = sample_drop_mask(&spec, spec.keep_prob, 7, step)?;
        let pattern: Vec<String> = mask
            .keep
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, k)| match (topo.has_horizontal[i][j], k) {
                        (false, _) => '-',
                        (true, true) => '1',
                        (true, false) => '0',
                    })
                    .collect()
            })
            .collect();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &x, NormMode::Train, Some(&mask))?;
        let logits = tape.value(out.logits).data().to_vec();
        let reference = reference.get_or_insert_with(|| logits.clone());
        let diff = logits.iter().zip(reference.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        println!("step {step}: keep {} | max change vs step 0: {diff:.4}", pattern.join(" "));
    }
    Ok(())
}
