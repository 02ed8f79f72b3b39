use serde::Serialize;

use super::model::{BlockKey, GridModel};
use super::spec::GridSpec;
use crate::tensor::Scalar;

/// Every allocated parameter, including those switched off by the mask.
pub fn count_params_exact<T: Scalar>(model: &GridModel<T>) -> usize {
    model.params().iter().map(|p| p.value.len()).sum()
}

/// Parameters that take part in the forward pass under the mask.
pub fn count_params_pruned<T: Scalar>(model: &GridModel<T>) -> usize {
    model
        .params()
        .iter()
        .filter(|p| !p.frozen)
        .map(|p| p.value.len())
        .sum()
}

/// `18 * 2^(2 (N_S - 1)) * F_0^2 * (2.5 N_Cs + N_Cu - 2)`.
pub fn approx_param_count(spec: &GridSpec) -> f64 {
    let depth = 2.0 * (spec.n_streams as f64 - 1.0);
    let f0 = spec.base_features as f64;
    18.0 * depth.exp2() * f0 * f0 * (2.5 * spec.n_sub() as f64 + spec.n_up() as f64 - 2.0)
}

/// `6 * H_0 * W_0 * F_0 * (4 N_Cu + 3 N_Cs - 2)`.
pub fn approx_activation_count(spec: &GridSpec, (h, w): (usize, usize)) -> f64 {
    6.0 * h as f64
        * w as f64
        * spec.base_features as f64
        * (4.0 * spec.n_up() as f64 + 3.0 * spec.n_sub() as f64 - 2.0)
}

/// Element count of every intermediate of a single-image forward.
pub fn exact_activation_count<T: Scalar>(model: &GridModel<T>, input_hw: (usize, usize)) -> usize {
    model.activation_tally(input_hw).0
}

#[derive(Clone, Debug, Serialize)]
pub struct GridReport {
    pub spec: GridSpec,
    pub input_hw: (usize, usize),
    pub exact_params: usize,
    pub pruned_params: usize,
    pub approx_params: f64,
    pub exact_over_approx_params: f64,
    pub approx_activations: f64,
    pub exact_activations: usize,
    pub block_output_activations: usize,
    pub exact_over_approx_activations: f64,
    /// `(F_i, H_i, W_i)` per stream.
    pub stream_shapes: Vec<(usize, usize, usize)>,
    pub eval_order: Vec<BlockKey>,
}

pub fn grid_report<T: Scalar>(model: &GridModel<T>) -> GridReport {
    let spec = model.spec();
    let hw = model.input_hw();
    let exact_params = count_params_exact(model);
    let approx_params = approx_param_count(spec);
    let (exact_activations, block_output_activations) = model.activation_tally(hw);
    let approx_activations = approx_activation_count(spec, hw);
    GridReport {
        spec: spec.clone(),
        input_hw: hw,
        exact_params,
        pruned_params: count_params_pruned(model),
        approx_params,
        exact_over_approx_params: exact_params as f64 / approx_params,
        approx_activations,
        exact_activations,
        block_output_activations,
        exact_over_approx_activations: exact_activations as f64 / approx_activations,
        stream_shapes: model.stream_shapes(),
        eval_order: model.eval_order().to_vec(),
    }
}
