use gridnet::grid::*;
use gridnet::regularization::sample_drop_mask;
use gridnet::tensor::*;
use proptest::prelude::*;

mod common;
use common::random_input;

fn forward_logits(model: &mut GridModel<f32>, x: &Tensor<f32>, mode: NormMode) -> Vec<f32> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, x, mode, None).unwrap();
    tape.value(out.logits).data().to_vec()
}

#[test]
fn reference_grid_stream_widths_and_deepest_shape() {
    let spec = GridSpec::reference(19);
    let model = GridModel::<f32>::build(&spec, (400, 400), 0).unwrap();
    let shapes = model.stream_shapes();
    let widths: Vec<usize> = shapes.iter().map(|s| s.0).collect();
    assert_eq!(widths, vec![16, 32, 64, 128, 256]);
    assert_eq!(shapes[4], (256, 25, 25));
}

#[test]
fn degenerate_grid_is_stem_plus_head() {
    let spec = GridSpec::symmetric(1, 0, 0, 4, 2);
    let mut model = GridModel::<f32>::build(&spec, (5, 7), 3).unwrap();
    // BN(3) + conv 3->4 3x3 with bias + 1x1 conv 4->2 with bias
    assert_eq!(count_params_exact(&model), 6 + (3 * 4 * 9 + 4) + (4 * 2 + 2));
    assert_eq!(count_params_exact(&model), 128);
    let x = random_input(1, Shape::new(2, 3, 5, 7));
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &x, NormMode::Train, None).unwrap();
    assert!(out.blocks.is_empty());
    assert_eq!(tape.shape(out.logits), Shape::new(2, 2, 5, 7));
}

#[test]
fn build_rejects_small_input_and_unreachable_output() {
    let spec = GridSpec::symmetric(4, 2, 2, 4, 3);
    let err = GridModel::<f32>::build(&spec, (7, 16), 0).unwrap_err();
    assert!(matches!(err, GridError::InputTooSmall { min: 8, .. }), "{err}");

    let mut mask = ConnectionMask::filled(4, 4, true);
    for row in mask.vertical_on.iter_mut() {
        row[3] = false;
    }
    mask.identity_on[0][3] = false;
    mask.residual_on[0][3] = false;
    let mut cut = spec.clone();
    cut.mask = MaskChoice::Explicit(mask);
    assert!(matches!(
        GridModel::<f32>::build(&cut, (16, 16), 0),
        Err(GridError::OutputUnreachable)
    ));
}

#[test]
fn forward_rejects_wrong_channels_and_small_runtime_input() {
    let spec = GridSpec::symmetric(3, 1, 1, 4, 3);
    let mut model = GridModel::<f32>::build(&spec, (16, 16), 0).unwrap();
    let mut tape = Tape::new();
    let err = model
        .forward(&mut tape, &Tensor::zeros(Shape::new(1, 1, 16, 16)), NormMode::Eval, None)
        .unwrap_err();
    assert!(matches!(err, GridError::InputChannels { expected: 3, actual: 1 }));
    let err = model
        .forward(&mut tape, &Tensor::zeros(Shape::new(1, 3, 3, 16)), NormMode::Eval, None)
        .unwrap_err();
    assert!(matches!(err, GridError::InputTooSmall { .. }));
}

#[test]
fn logits_at_input_resolution_for_odd_sizes() {
    let spec = GridSpec::symmetric(4, 2, 2, 2, 5);
    let mut model = GridModel::<f32>::build(&spec, (16, 16), 0).unwrap();
    for (h, w) in [(16, 16), (17, 23), (8, 9)] {
        let x = random_input(h as u64, Shape::new(1, 3, h, w));
        let y = model.predict(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 5, h, w));
    }
}

/// Zero every parameter of every grid block, leaving stem and head.
fn zero_blocks<T: Scalar>(model: &mut GridModel<T>) {
    for p in model.params_mut() {
        if p.name.starts_with("block.") {
            p.value.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

#[test]
fn zero_mappings_keep_the_stem_on_stream_zero() {
    let spec = GridSpec::symmetric(3, 2, 2, 4, 3);
    let mut model = GridModel::<f32>::build(&spec, (16, 16), 5).unwrap();
    zero_blocks(&mut model);
    let x = random_input(2, Shape::new(2, 3, 16, 16));
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &x, NormMode::Train, None).unwrap();
    let stem = tape.value(out.stem).data().to_vec();
    for j in 0..4 {
        assert_eq!(tape.value(out.blocks[&(0, j)]).data(), &stem[..], "block (0, {j})");
    }
}

#[test]
fn fuse_block_border_cases() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(Shape::new(1, 2, 2, 2), 1.5));
    let r = tape.constant(Tensor::full(Shape::new(1, 2, 2, 2), 0.25));
    let v = tape.constant(Tensor::full(Shape::new(1, 2, 2, 2), -2.0));
    let value = |t: &Tape<f64>, out: Var| t.value(out).data()[0];

    let res_only = BlockAddends {
        identity: Some(x),
        residual: Some(r),
        vertical: None,
    };
    let out = fuse_block(&mut tape, &res_only, None).unwrap();
    assert_eq!(value(&tape, out), 1.75);

    let entry = BlockAddends {
        vertical: Some(v),
        ..Default::default()
    };
    let out = fuse_block(&mut tape, &entry, None).unwrap();
    assert_eq!(out, v);

    let dropped = BlockAddends {
        identity: Some(x),
        residual: None,
        vertical: Some(v),
    };
    let out = fuse_block(&mut tape, &dropped, None).unwrap();
    assert_eq!(value(&tape, out), -0.5);

    assert!(matches!(
        fuse_block(&mut tape, &BlockAddends::default(), None),
        Err(GridError::NoInput)
    ));
}

#[test]
fn concat_fusion_projects_back_to_stream_width() {
    let mut spec = GridSpec::symmetric(3, 1, 1, 4, 3);
    spec.fusion = Fusion::Concat;
    let mut model = GridModel::<f32>::build(&spec, (8, 8), 0).unwrap();
    let proj = model.param_index("block.1.1.proj.weight").unwrap();
    assert_eq!(model.params()[proj].shape, Shape::new(8, 16, 1, 1));
    // blocks with a single structural term have no projection
    assert!(model.param_index("block.1.0.proj.weight").is_none());
    let x = random_input(0, Shape::new(2, 3, 8, 8));
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &x, NormMode::Train, None).unwrap();
    assert_eq!(tape.shape(out.blocks[&(1, 1)]), Shape::new(2, 8, 4, 4));
    assert_eq!(tape.shape(out.logits), Shape::new(2, 3, 8, 8));
}

#[test]
fn vertical_residual_adds_shortcuts() {
    let mut spec = GridSpec::symmetric(3, 1, 1, 2, 3);
    spec.vertical_residual = true;
    let mut model = GridModel::<f32>::build(&spec, (8, 8), 0).unwrap();
    let x = random_input(4, Shape::new(1, 3, 8, 8));
    let a = forward_logits(&mut model, &x, NormMode::Train);
    let mut plain_spec = spec.clone();
    plain_spec.vertical_residual = false;
    // same seed, same weights: the shortcuts are parameter-free
    let mut other = GridModel::<f32>::build(&plain_spec, (8, 8), 0).unwrap();
    let b = forward_logits(&mut other, &x, NormMode::Train);
    assert_ne!(a, b);
    assert_eq!(count_params_exact(&model), count_params_exact(&other));
}

#[test]
fn conv_deconv_mask_equals_sequential_encoder_decoder() {
    let mut spec = GridSpec::reference(4);
    spec.base_features = 2;
    spec.mask = MaskChoice::Preset(MaskPreset::ConvDeconv);
    let mut model = GridModel::<f32>::build(&spec, (20, 20), 11).unwrap();
    let mut worst = 0.0f32;
    for (trial, hw) in [(20, 20), (20, 20), (17, 23), (32, 16)].into_iter().enumerate() {
        let x = random_input(100 + trial as u64, Shape::new(2, 3, hw.0, hw.1));
        let grid = forward_logits(&mut model, &x, NormMode::Train);
        let seq = common::sequential_conv_deconv(&model, &x);
        assert_eq!(seq.len(), grid.len());
        for (a, b) in grid.iter().zip(&seq) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-6, "max abs diff {worst}");
}

#[test]
fn conv_deconv_computes_only_the_path() {
    let mut spec = GridSpec::reference(4);
    spec.base_features = 2;
    spec.mask = MaskChoice::Preset(MaskPreset::ConvDeconv);
    let model = GridModel::<f32>::build(&spec, (16, 16), 0).unwrap();
    let live: Vec<(usize, usize)> = model
        .eval_order()
        .iter()
        .copied()
        .filter(|&(i, j)| model.is_live(i, j))
        .collect();
    for i in 0..5 {
        assert!(live.iter().any(|b| b.0 == i), "stream {i} not visited");
    }
    // the turn at stream 4 is a pass-through from the Sub into the Up column
    let deepest: Vec<_> = live.iter().filter(|b| b.0 == 4).collect();
    assert_eq!(deepest, vec![&(4, 2), &(4, 3)]);
    let mask = model.mask();
    assert!(live.iter().all(|&(i, j)| !mask.residual_on[i][j]));
    assert!(count_params_pruned(&model) < count_params_exact(&model));
}

#[test]
fn preset_masks_build_and_run() {
    for preset in [MaskPreset::ConvDeconv, MaskPreset::UNet, MaskPreset::Frrn, MaskPreset::Full] {
        let mut spec = GridSpec::symmetric(4, 3, 3, 2, 3);
        spec.mask = MaskChoice::Preset(preset);
        let mut model = GridModel::<f32>::build(&spec, (16, 16), 0).unwrap();
        let x = random_input(9, Shape::new(2, 3, 16, 16));
        let y = forward_logits(&mut model, &x, NormMode::Train);
        assert!(y.iter().all(|v| v.is_finite()), "{preset:?}");
    }
}

#[test]
fn full_mask_enables_everything_and_frrn_keeps_stream_zero_residual() {
    let spec = GridSpec::reference(4);
    let full = preset_mask(MaskPreset::Full, &spec).unwrap();
    assert!(full.residual_on.iter().flatten().all(|b| *b));
    assert!(full.vertical_on.iter().flatten().all(|b| *b));
    let frrn = preset_mask(MaskPreset::Frrn, &spec).unwrap();
    assert!(frrn.residual_on[0].iter().all(|b| *b));
    assert!(frrn.residual_on[1..].iter().flatten().all(|b| !*b));
}

#[test]
fn every_live_parameter_receives_gradient() {
    let spec = GridSpec::symmetric(3, 2, 2, 4, 3);
    let mut model = GridModel::<f32>::build(&spec, (16, 16), 1).unwrap();
    let x = random_input(5, Shape::new(2, 3, 16, 16));
    let labels: Vec<u8> = (0..2 * 256).map(|k| (k % 3) as u8).collect();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &x, NormMode::Train, None).unwrap();
    let loss = tape.softmax_cross_entropy(out.logits, &labels).unwrap();
    tape.backward(loss).unwrap();
    let grads = model.gradients(&tape, &out);
    for (p, g) in model.params().iter().zip(&grads) {
        assert!(!p.frozen);
        assert!(g.iter().any(|v| *v != 0.0), "{} has an all-zero gradient", p.name);
    }
}

#[test]
fn masking_keeps_storage_and_freezes_parameters() {
    let spec = GridSpec::reference(4);
    let mut masked = spec.clone();
    masked.mask = MaskChoice::Preset(MaskPreset::UNet);
    let a = GridModel::<f32>::build(&spec, (16, 16), 0).unwrap();
    let b = GridModel::<f32>::build(&masked, (16, 16), 0).unwrap();
    assert_eq!(count_params_exact(&a), count_params_exact(&b));
    assert_eq!(count_params_pruned(&a), count_params_exact(&a));
    assert!(count_params_pruned(&b) < count_params_exact(&b));
}

#[test]
fn doubling_base_features_roughly_quadruples_parameters() {
    let a = GridModel::<f32>::build(&GridSpec::symmetric(4, 2, 2, 8, 4), (16, 16), 0).unwrap();
    let b = GridModel::<f32>::build(&GridSpec::symmetric(4, 2, 2, 16, 4), (16, 16), 0).unwrap();
    let ratio = count_params_exact(&b) as f64 / count_params_exact(&a) as f64;
    assert!((3.8..4.05).contains(&ratio), "ratio {ratio}");
}

#[test]
fn approximation_formulas() {
    let spec = GridSpec::reference(19);
    assert_eq!(approx_param_count(&spec), 10_027_008.0);
    assert_eq!(approx_param_count(&GridSpec::symmetric(1, 3, 3, 16, 19)), 39_168.0);
    assert_eq!(approx_activation_count(&spec, (400, 400)), 291_840_000.0);
    let more_up = GridSpec::symmetric(5, 3, 6, 16, 19);
    let delta = approx_activation_count(&more_up, (400, 400)) - approx_activation_count(&spec, (400, 400));
    assert_eq!(delta, 4.0 * 3.0 * 6.0 * 400.0 * 400.0 * 16.0);
    let model = GridModel::<f32>::build(&spec, (400, 400), 0).unwrap();
    let ratio = count_params_exact(&model) as f64 / approx_param_count(&spec);
    assert!((0.5..2.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn activation_tally_matches_the_tape() {
    let mut cases = vec![GridSpec::symmetric(3, 2, 2, 4, 3), GridSpec::symmetric(1, 0, 0, 4, 2)];
    let mut concat = GridSpec::symmetric(3, 1, 2, 2, 3);
    concat.fusion = Fusion::Concat;
    concat.vertical_residual = true;
    cases.push(concat);
    let mut unet = GridSpec::symmetric(4, 3, 3, 2, 3);
    unet.mask = MaskChoice::Preset(MaskPreset::UNet);
    cases.push(unet);
    for spec in cases {
        let mut model = GridModel::<f32>::build(&spec, (16, 16), 0).unwrap();
        for hw in [(16, 16), (13, 21)] {
            let x = random_input(0, Shape::new(1, 3, hw.0, hw.1));
            let mut tape = Tape::new();
            model.forward(&mut tape, &x, NormMode::Train, None).unwrap();
            assert_eq!(exact_activation_count(&model, hw), tape.activation_count(), "{spec:?} {hw:?}");
        }
    }
}

#[test]
fn report_json_has_the_documented_fields() {
    let model = GridModel::<f32>::build(&GridSpec::reference(19), (400, 400), 0).unwrap();
    let json: serde_json::Value = serde_json::to_value(grid_report(&model)).unwrap();
    for key in ["spec", "exact_params", "approx_params", "approx_activations", "stream_shapes", "eval_order"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert_eq!(json["stream_shapes"][4], serde_json::json!([256, 25, 25]));
}

#[test]
fn drop_mask_gates_exactly_the_residual_mappings() {
    let spec = GridSpec::symmetric(3, 2, 2, 4, 3);
    let model = GridModel::<f32>::build(&spec, (16, 16), 2).unwrap();
    let x = random_input(8, Shape::new(2, 3, 16, 16));
    let mask = sample_drop_mask(&spec, 0.5, 77, 3).unwrap();
    assert!(mask.keep.iter().flatten().any(|k| !*k));

    let mut dropped = model.clone();
    let mut tape = Tape::new();
    let out = dropped.forward(&mut tape, &x, NormMode::Train, Some(&mask)).unwrap();
    let a = tape.value(out.logits).data().to_vec();

    let mut zeroed = model.clone();
    for p in zeroed.params_mut() {
        let parts: Vec<&str> = p.name.split('.').collect();
        if parts[0] == "block" && parts[3] == "res" && parts[4] == "conv2" {
            let (i, j): (usize, usize) = (parts[1].parse().unwrap(), parts[2].parse().unwrap());
            if !mask.keeps(i, j) {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    let b = forward_logits(&mut zeroed, &x, NormMode::Train);
    assert_eq!(a, b);

    let all = sample_drop_mask(&spec, 1.0, 77, 3).unwrap();
    let mut m1 = model.clone();
    let mut tape = Tape::new();
    let out = m1.forward(&mut tape, &x, NormMode::Train, Some(&all)).unwrap();
    let with_mask = tape.value(out.logits).data().to_vec();
    let mut m2 = model.clone();
    assert_eq!(with_mask, forward_logits(&mut m2, &x, NormMode::Train));
}

#[test]
fn eval_mode_ignores_the_drop_mask() {
    let spec = GridSpec::symmetric(3, 2, 2, 4, 3);
    let mut model = GridModel::<f32>::build(&spec, (16, 16), 2).unwrap();
    let x = random_input(8, Shape::new(1, 3, 16, 16));
    let none = sample_drop_mask(&spec, 0.0, 1, 0).unwrap();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &x, NormMode::Eval, Some(&none)).unwrap();
    let a = tape.value(out.logits).data().to_vec();
    assert_eq!(a, forward_logits(&mut model, &x, NormMode::Eval));
}

fn arb_columns() -> impl Strategy<Value = Vec<ColumnKind>> {
    prop::collection::vec(prop_oneof![Just(ColumnKind::Sub), Just(ColumnKind::Up)], 0..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn eval_order_respects_dependencies(n_streams in 1usize..5, columns in arb_columns()) {
        let mut spec = GridSpec::symmetric(n_streams, 0, 0, 2, 3);
        spec.columns = columns;
        let model = GridModel::<f32>::build(&spec, (16, 16), 0).unwrap();
        let order = model.eval_order();
        let pos = |b: (usize, usize)| order.iter().position(|x| *x == b).unwrap();
        let topo = model.structure();
        for &(i, j) in order {
            if topo.has_horizontal[i][j] && j > 0 {
                prop_assert!(pos((i, j - 1)) < pos((i, j)));
            }
            if topo.has_vertical[i][j] {
                let src = match spec.columns[j] { ColumnKind::Sub => i - 1, ColumnKind::Up => i + 1 };
                prop_assert!(pos((src, j)) < pos((i, j)));
            }
        }
    }

    #[test]
    fn parameter_count_grows_with_streams_and_columns(n_streams in 1usize..5, n_sub in 1usize..3, n_up in 1usize..3) {
        let count = |s: GridSpec| count_params_exact(&GridModel::<f32>::build(&s, (16, 16), 0).unwrap());
        let base = count(GridSpec::symmetric(n_streams, n_sub, n_up, 2, 3));
        prop_assert!(count(GridSpec::symmetric(n_streams + 1, n_sub, n_up, 2, 3)) > base);
        prop_assert!(count(GridSpec::symmetric(n_streams, n_sub + 1, n_up, 2, 3)) > base);
        prop_assert!(count(GridSpec::symmetric(n_streams, n_sub, n_up + 1, 2, 3)) > base);
    }

    #[test]
    fn stream_dims_are_repeated_ceil_halvings(f0 in 1usize..32, i in 0usize..7, h in 1usize..500, w in 1usize..500) {
        let spec = GridSpec::symmetric(7, 1, 1, f0, 3);
        let (f, sh, sw) = stream_dims(&spec, i, (h, w));
        prop_assert_eq!(f, f0 << i);
        let mut eh = h;
        let mut ew = w;
        for _ in 0..i { eh = eh.div_ceil(2); ew = ew.div_ceil(2); }
        prop_assert_eq!((sh, sw), (eh, ew));
    }

    #[test]
    fn runtime_shapes_match_stream_dims(h in 8usize..30, w in 8usize..30) {
        let spec = GridSpec::symmetric(4, 2, 2, 2, 3);
        let mut model = GridModel::<f32>::build(&spec, (16, 16), 0).unwrap();
        let x = random_input(0, Shape::new(1, 3, h, w));
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &x, NormMode::Eval, None).unwrap();
        for (&(i, _), v) in &out.blocks {
            let (f, sh, sw) = stream_dims(&spec, i, (h, w));
            prop_assert_eq!(tape.shape(*v), Shape::new(1, f, sh, sw));
        }
    }
}
