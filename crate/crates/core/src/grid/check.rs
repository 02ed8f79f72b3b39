use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{GridError, GridModel, GridSpec};
use crate::tensor::gradcheck::{finite_diff_gradcheck, Evaluation, GradcheckConfig, GradcheckReport};
use crate::tensor::{NormMode, Shape, Tape, Tensor};

/// Finite-difference check of the whole grid in double precision: random
/// `[batch, in_channels, h, w]` input, random labels, train-mode batch
/// normalization and the pixel-wise cross-entropy loss.
pub fn gradcheck_grid(
    spec: &GridSpec,
    batch: usize,
    input_hw: (usize, usize),
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport, GridError> {
    let mut model = GridModel::<f64>::build(spec, input_hw, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = Shape::new(batch, spec.in_channels, input_hw.0, input_hw.1);
    let data = (0..shape.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let input = Tensor::from_vec(shape, data)?;
    let labels: Vec<u8> = (0..batch * input_hw.0 * input_hw.1)
        .map(|_| rng.random_range(0..spec.num_classes) as u8)
        .collect();

    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &input, NormMode::Train, None)?;
    let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
    tape.backward(loss)?;
    let analytic = model.gradients(&tape, &out);
    let mut values: Vec<Vec<f64>> = model.params().iter().map(|p| p.value.clone()).collect();

    let report = finite_diff_gradcheck(&mut values, &analytic, cfg, |v| {
        for (p, x) in model.params_mut().iter_mut().zip(v) {
            p.value.copy_from_slice(x);
        }
        let mut tape = Tape::new();
        let out = model
            .forward(&mut tape, &input, NormMode::Train, None)
            .expect("shapes validated by the first forward");
        let loss = tape
            .softmax_cross_entropy(out.logits, &labels)
            .expect("labels validated by the first forward");
        Evaluation {
            loss: tape.value(loss).data()[0],
            signature: tape.relu_signature(),
        }
    });
    Ok(report)
}
