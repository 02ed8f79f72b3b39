//! Finite-difference check of the reverse-mode gradients, first on a small
//! conv -> BN -> ReLU -> deconv chain and then on a whole grid.

use gridnet::grid::{gradcheck_grid, GridSpec};
use gridnet::tensor::gradcheck::{finite_diff_gradcheck, Evaluation, GradcheckConfig};
use gridnet::tensor::{BatchNormConfig, BatchNormState, ConvGeometry, NormMode, Shape, Tape, Tensor, TensorError, Var};

/// Loss of the chain and the leaf of every input group.
fn chain(tape: &mut Tape<f64>, v: &[Vec<f64>]) -> Result<(Var, Vec<Var>), TensorError> {
    let shapes = [
        Shape::new(2, 2, 7, 6),
        Shape::new(3, 2, 3, 3),
        Shape::new(1, 3, 1, 1),
        Shape::new(1, 3, 1, 1),
        Shape::new(3, 2, 3, 3),
    ];
    let leaves: Vec<Var> = v
        .iter()
        .zip(shapes)
        .map(|(x, s)| Tensor::from_vec(s, x.clone()).map(|t| tape.leaf(t.requiring_grad())))
        .collect::<Result<_, _>>()?;
    let y = tape.conv2d_down(leaves[0], leaves[1], None, ConvGeometry::down(3))?;
    let mut state = BatchNormState::new(3);
    let y = tape.batch_norm(y, leaves[2], leaves[3], &mut state, NormMode::Train, &BatchNormConfig::default())?;
    let y = tape.relu(y);
    let y = tape.deconv2d_up(y, leaves[4], None, ConvGeometry::down(3), (7, 6))?;
    let weights: Vec<f64> = (0..tape.shape(y).numel()).map(|k| ((k * 13) % 7) as f64 - 3.0).collect();
    Ok((tape.weighted_sum(y, &weights)?, leaves))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sizes = [2 * 2 * 42, 54, 3, 3, 54];
    let mut values: Vec<Vec<f64>> = sizes
        .iter()
        .enumerate()
        .map(|(g, &n)| (0..n).map(|k| ((k * 7 + g * 3) as f64 * 0.61).sin()).collect())
        .collect();
    let mut tape = Tape::new();
    let (loss, leaves) = chain(&mut tape, &values)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(sizes)
        .map(|(&v, n)| tape.grad(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
        .collect();
    let cfg = GradcheckConfig {
        samples: 80,
        ..Default::default()
    };
    let report = finite_diff_gradcheck(&mut values, &analytic, &cfg, |v| {
        let mut tape = Tape::new();
        let (loss, _) = chain(&mut tape, v).expect("fixed shapes");
        Evaluation {
            loss: tape.value(loss).data()[0],
            signature: tape.relu_signature(),
        }
    });
    println!(
        "chain: {} coordinates, {} kinks resampled, max relative error {:.2e}, passed {}",
        report.checked,
        report.skipped_kinks,
        report.max_rel_error,
        report.passed()
    );

    let spec = GridSpec::symmetric(3, 1, 1, 4, 4);
    let report = gradcheck_grid(&spec, 1, (16, 16), &GradcheckConfig { samples: 100, ..cfg })?;
    println!(
        "grid:  {} coordinates, max relative error {:.2e}, passed {}",
        report.checked,
        report.max_rel_error,
        report.passed()
    );
    Ok(())
}
