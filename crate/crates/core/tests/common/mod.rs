//! Oracles shared by the integration tests and the acceptance run. They are
//! written against the tensor primitives and parameter names only, never
//! against the grid wiring they check.
#![allow(dead_code)]

use gridnet::grid::GridModel;
use gridnet::tensor::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_input(seed: u64, shape: Shape) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn named(tape: &mut Tape<f32>, model: &GridModel<f32>, name: &str) -> Option<Var> {
    let p = &model.params()[model.param_index(name)?];
    Some(tape.constant(Tensor::from_vec(p.shape, p.value.clone()).unwrap()))
}

fn bn(tape: &mut Tape<f32>, model: &GridModel<f32>, prefix: &str, x: Var) -> Var {
    let gamma = named(tape, model, &format!("{prefix}.gamma")).unwrap();
    let beta = named(tape, model, &format!("{prefix}.beta")).unwrap();
    let mut state = BatchNormState::new(tape.shape(x).c);
    tape.batch_norm(x, gamma, beta, &mut state, NormMode::Train, &BatchNormConfig::default())
        .unwrap()
}

/// Plain encoder-decoder for the 5-stream, 3 + 3 column grid: stem, the four
/// strided convolutions 0 -> 2 -> 3 -> 4, the four transposed convolutions
/// 4 -> 3 -> 2 -> 0, head. Batch statistics in every normalization.
pub fn sequential_conv_deconv(model: &GridModel<f32>, x: &Tensor<f32>) -> Vec<f32> {
    let (h, w) = (x.shape().h, x.shape().w);
    let side = |n: usize, k: u32| n.div_ceil(1 << k);
    let mut tape = Tape::<f32>::new();
    let input = tape.constant(x.clone());
    let a = bn(&mut tape, model, "stem.bn", input);
    let (cw, cb) = (named(&mut tape, model, "stem.conv.weight"), named(&mut tape, model, "stem.conv.bias"));
    let mut y = tape.conv2d(a, cw.unwrap(), cb, ConvGeometry::same(3)).unwrap();
    for (i, j) in [(1, 0), (2, 0), (3, 1), (4, 2)] {
        let p = format!("block.{i}.{j}.sub");
        let a = bn(&mut tape, model, &format!("{p}.bn"), y);
        let a = tape.relu(a);
        let wv = named(&mut tape, model, &format!("{p}.conv.weight")).unwrap();
        let bv = named(&mut tape, model, &format!("{p}.conv.bias"));
        y = tape.conv2d_down(a, wv, bv, ConvGeometry::down(3)).unwrap();
    }
    for (i, j) in [(3, 3), (2, 4), (1, 5), (0, 5)] {
        let p = format!("block.{i}.{j}.up");
        let a = bn(&mut tape, model, &format!("{p}.bn"), y);
        let a = tape.relu(a);
        let wv = named(&mut tape, model, &format!("{p}.deconv.weight")).unwrap();
        let bv = named(&mut tape, model, &format!("{p}.deconv.bias"));
        let target = (side(h, i as u32), side(w, i as u32));
        y = tape.deconv2d_up(a, wv, bv, ConvGeometry::down(3), target).unwrap();
    }
    let (hw, hb) = (named(&mut tape, model, "head.conv.weight"), named(&mut tape, model, "head.conv.bias"));
    let logits = tape.conv2d(y, hw.unwrap(), hb, ConvGeometry::same(1)).unwrap();
    tape.value(logits).data().to_vec()
}

/// Textbook scalar Adam with inverse-time learning-rate decay.
pub struct ScalarAdam {
    pub lr: f64,
    pub decay: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    pub fn new() -> Self {
        ScalarAdam {
            lr: 0.01,
            decay: 5e-6,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    pub fn step(&mut self, theta: f64, g: f64) -> f64 {
        let lr = self.lr / (1.0 + self.decay * self.t as f64);
        self.t += 1;
        self.m = self.b1 * self.m + (1.0 - self.b1) * g;
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g;
        let mhat = self.m / (1.0 - self.b1.powi(self.t));
        let vhat = self.v / (1.0 - self.b2.powi(self.t));
        theta - lr * mhat / (vhat.sqrt() + self.eps)
    }
}

/// A deterministic gradient sequence with mixed signs and magnitudes.
pub fn gradient_sequence(step: usize, k: usize) -> f64 {
    ((step * 7 + k * 3) as f64 * 0.37).sin() * (k + 1) as f64
}
