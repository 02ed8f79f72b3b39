//! Parameter and activation counts of the reference grid and a few variants.
//!
//! ```text
//! cargo run --release --example grid_report
//! ```

use gridnet::grid::{
    approx_activation_count, approx_param_count, count_params_exact, count_params_pruned, grid_report, GridModel,
    GridSpec, MaskChoice, MaskPreset,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = GridSpec::reference(19);
    let model = GridModel::<f32>::build(&spec, (400, 400), 0)?;
    println!("{}", serde_json::to_string_pretty(&grid_report(&model))?);

    println!("\nstreams  exact params  approx params");
    for ns in 1..=6 {
        let s = GridSpec::symmetric(ns, 3, 3, 16, 19);
        let m = GridModel::<f32>::build(&s, (64, 64), 0)?;
        println!("{ns:>7}  {:>12}  {:>13}", count_params_exact(&m), approx_param_count(&s));
    }

    println!("\nmask        trainable params");
    for preset in [MaskPreset::Full, MaskPreset::Frrn, MaskPreset::UNet, MaskPreset::ConvDeconv] {
        let mut s = spec.clone();
        s.mask = MaskChoice::Preset(preset);
        let m = GridModel::<f32>::build(&s, (64, 64), 0)?;
        println!("{:<11} {:>16}", format!("{preset:?}"), count_params_pruned(&m));
    }

    let wide = GridSpec::symmetric(5, 3, 6, 16, 19);
    println!(
        "\nthree extra Up columns add {:.0} activations at 400x400",
        approx_activation_count(&wide, (400, 400)) - approx_activation_count(&spec, (400, 400))
    );
    Ok(())
}
