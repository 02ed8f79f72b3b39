//! Prints the connection masks of the presets and which blocks each one
//! actually computes.

use gridnet::grid::{preset_mask, GridModel, GridSpec, MaskChoice, MaskPreset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = GridSpec::reference(4);
    for preset in [MaskPreset::Full, MaskPreset::Frrn, MaskPreset::UNet, MaskPreset::ConvDeconv] {
        let mask = preset_mask(preset, &base)?;
        let mut spec = base.clone();
        spec.mask = MaskChoice::Preset(preset);
        let model = GridModel::<f32>::build(&spec, (32, 32), 0)?;
        println!("{preset:?}  (R residual, I identity only, V vertical only, . unused)");
        for i in 0..spec.n_streams {
            let row: String = (0..spec.n_columns())
                .map(|j| {
                    if !model.is_live(i, j) {
                        '.'
                    } else if mask.residual_on[i][j] {
                        'R'
                    } else if mask.identity_on[i][j] {
                        'I'
                    } else {
                        'V'
                    }
                })
                .collect();
            println!("  stream {i}: {row}");
        }
    }
    Ok(())
}
