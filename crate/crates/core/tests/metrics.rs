use gridnet::data::generate_scene;
use gridnet::grid::{GridModel, GridSpec};
use gridnet::metrics::*;
use gridnet::tensor::{Shape, Tensor, IGNORE_LABEL};
use proptest::prelude::*;

#[test]
fn perfect_prediction_is_diagonal_with_unit_iou() {
    let truth = vec![0, 1, 2, 2, 1, 0, 0];
    let mut cm = ConfusionMatrix::new(4);
    cm.accumulate(&truth, &truth).unwrap();
    for t in 0..4 {
        for p in 0..4 {
            if t != p {
                assert_eq!(cm.get(t, p), 0);
            }
        }
    }
    let (per, mean) = iou(&cm);
    assert_eq!(per, vec![Some(1.0), Some(1.0), Some(1.0), None]);
    assert_eq!(mean, Some(1.0));
}

#[test]
fn ignored_pixels_are_counted_separately() {
    let truth = vec![IGNORE_LABEL; 12];
    let pred = vec![1u8; 12];
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&pred, &truth).unwrap();
    assert!(cm.counts.iter().all(|c| *c == 0));
    assert_eq!(cm.ignored, 12);
    let (_, mean) = iou(&cm);
    assert_eq!(mean, None);
}

#[test]
fn two_by_two_single_error() {
    let truth = vec![0, 0, 1, 1];
    let pred = vec![0, 1, 1, 1];
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&pred, &truth).unwrap();
    assert_eq!(cm.counts, vec![1, 1, 0, 2]);
    assert_eq!(cm.true_positives(1), 2);
    assert_eq!(cm.false_positives(1), 1);
    assert_eq!(cm.false_negatives(0), 1);
    let (per, _) = iou(&cm);
    assert_eq!(per, vec![Some(0.5), Some(2.0 / 3.0)]);
}

#[test]
fn iou_formula_and_constant_prediction() {
    assert_eq!(iou_from_counts(3, 1, 2), Some(0.5));
    assert_eq!(iou_from_counts(0, 0, 0), None);
    let truth = vec![0, 0, 0, 1, 1, 2, 2, 2, 2, 2];
    let pred = vec![2u8; 10];
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&pred, &truth).unwrap();
    let (per, _) = iou(&cm);
    assert_eq!(per, vec![Some(0.0), Some(0.0), Some(0.5)]);
}

#[test]
fn rejects_out_of_range_and_mismatched_maps() {
    let mut cm = ConfusionMatrix::new(3);
    assert!(matches!(cm.accumulate(&[0, 3], &[0, 1]), Err(MetricsError::ClassOutOfRange { class: 3, .. })));
    assert!(matches!(cm.accumulate(&[0], &[0, 1]), Err(MetricsError::SizeMismatch { .. })));
}

#[test]
fn average_sized_instances_give_iiou_equal_to_iou() {
    // two instances of class 1, both four pixels
    let truth = vec![0, 1, 1, 1, 1, 0, 1, 1, 1, 1, 0, 0];
    let instances = vec![0, 1, 1, 1, 1, 0, 2, 2, 2, 2, 0, 0];
    let pred = vec![1, 1, 0, 1, 1, 0, 1, 1, 1, 0, 0, 1];
    let report = evaluate(
        &[Sample {
            pred,
            truth,
            instances,
        }],
        2,
        &CategoryMap::default_for(2),
    )
    .unwrap();
    let a = report.per_class_iou[1].unwrap();
    let b = report.per_class_iiou[1].unwrap();
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    // background has no instances
    assert_eq!(report.per_class_iiou[0], None);
}

#[test]
fn missed_small_instance_lowers_iiou() {
    // a large instance (8 px) found, a small one (2 px) missed
    let truth = vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0];
    let instances = vec![1, 1, 1, 1, 1, 1, 1, 1, 2, 2, 0, 0];
    let pred = vec![1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0];
    let s = Sample {
        pred,
        truth,
        instances,
    };
    let r = evaluate(&[s], 2, &CategoryMap::default_for(2)).unwrap();
    // IoU = 8 / (8 + 2); weights 5/8 and 5/2 give iTP = 5, iFN = 5
    assert!((r.per_class_iou[1].unwrap() - 0.8).abs() < 1e-12);
    assert!((r.per_class_iiou[1].unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn average_instance_size_spans_the_whole_set() {
    let a = Sample {
        pred: vec![1, 1, 1, 1, 0, 0],
        truth: vec![1, 1, 1, 1, 0, 0],
        instances: vec![1, 1, 1, 1, 0, 0],
    };
    let b = Sample {
        pred: vec![0, 0, 0, 0, 0, 0],
        truth: vec![1, 1, 0, 0, 0, 0],
        instances: vec![1, 1, 0, 0, 0, 0],
    };
    let r = evaluate(&[a, b], 2, &CategoryMap::default_for(2)).unwrap();
    // avg = 3: iTP = 4 * 3/4 = 3, iFN = 2 * 3/2 = 3
    assert!((r.per_class_iiou[1].unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn category_roll_up() {
    let map = CategoryMap::default_for(5);
    assert_eq!(map.class_to_category, vec![0, 1, 1, 2, 2]);
    assert!(map.validate());
    let truth = vec![1, 2, 3, 4, 0];
    let pred = vec![2, 1, 4, 3, 0];
    let mut cm = ConfusionMatrix::new(5);
    cm.accumulate(&pred, &truth).unwrap();
    let (per, mean) = iou(&cm.rolled_up(&map));
    assert_eq!(per, vec![Some(1.0), Some(1.0), Some(1.0)]);
    assert_eq!(mean, Some(1.0));
    let (_, class_mean) = iou(&cm);
    assert!(class_mean.unwrap() < 1.0);
}

#[test]
fn report_json_fields() {
    let s = Sample {
        pred: vec![0, 1, 1, 2],
        truth: vec![0, 1, 2, 2],
        instances: vec![0, 1, 2, 2],
    };
    let r = evaluate(&[s], 3, &CategoryMap::default_for(3)).unwrap();
    let v = serde_json::to_value(&r).unwrap();
    for key in ["per_class_iou", "mean_iou", "per_class_iiou", "mean_iiou", "per_category_iou", "per_category_iiou", "pixel_counts"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["pixel_counts"], serde_json::json!([1, 1, 2]));
}

/// Counts votes and picks the largest count, scanning classes from the top
/// so that a later equal count (a lower class) replaces the incumbent.
fn vote_oracle(ballot: &[u8], num_classes: usize) -> u8 {
    let mut winner = (num_classes - 1) as u8;
    let mut best = 0;
    for c in (0..num_classes as u8).rev() {
        let n = ballot.iter().filter(|b| **b == c).count();
        if n >= best {
            best = n;
            winner = c;
        }
    }
    winner
}

#[test]
fn majority_vote_enumerated() {
    let (a, b, c) = (0u8, 1u8, 2u8);
    let single = |v: Vec<u8>| majority_vote(&v.iter().map(|x| vec![*x]).collect::<Vec<_>>(), 3)[0];
    assert_eq!(single(vec![a, a, b, c]), a);
    assert_eq!(single(vec![b, b, a, a]), a);
    assert_eq!(single(vec![c, c, c, a]), c);
    for code in 0..81u32 {
        let ballot: Vec<u8> = (0..4).map(|k| ((code / 3u32.pow(k)) % 3) as u8).collect();
        assert_eq!(single(ballot.clone()), vote_oracle(&ballot, 3), "{ballot:?}");
    }
}

#[test]
fn scaled_sides() {
    assert_eq!(scaled_side(128, 1.0 / 1.5), 85);
    assert_eq!(scaled_side(128, 0.5), 64);
    assert_eq!(scaled_side(128, 0.4), 51);
}

fn tiny_model() -> GridModel<f32> {
    let spec = GridSpec::symmetric(3, 1, 1, 4, 4);
    let mut m = GridModel::<f32>::build(&spec, (32, 32), 7).unwrap();
    // perturb running statistics so eval mode is non-trivial
    for (k, (_, st)) in m.buffers_mut().iter_mut().enumerate() {
        st.running_mean.iter_mut().for_each(|v| *v = 0.01 * k as f32);
    }
    m
}

#[test]
fn single_scale_equals_plain_argmax() {
    let mut model = tiny_model();
    let scene = generate_scene(2, 40, 32, 4, 4).unwrap();
    let x = Tensor::from_vec(Shape::new(1, 3, 32, 40), scene.image.clone()).unwrap();
    let direct = model.predict(&x).unwrap().argmax_channels();
    let ms = multiscale_predict(&mut model, &scene.image, (32, 40), &[1.0]).unwrap();
    assert_eq!(ms, direct);
}

#[test]
fn too_small_scales_are_skipped() {
    let mut model = tiny_model();
    let scene = generate_scene(2, 16, 16, 4, 4).unwrap();
    let with_tiny = multiscale_predict(&mut model, &scene.image, (16, 16), &[1.0, 0.1]).unwrap();
    let plain = multiscale_predict(&mut model, &scene.image, (16, 16), &[1.0]).unwrap();
    assert_eq!(with_tiny, plain);
    assert!(matches!(
        multiscale_predict(&mut model, &scene.image, (16, 16), &[0.1]),
        Err(MetricsError::NoUsableScale)
    ));
}

#[test]
fn multiscale_is_deterministic_and_thread_independent() {
    let model = tiny_model();
    let scenes: Vec<_> = (0..5).map(|s| generate_scene(s, 32, 32, 4, 4).unwrap()).collect();
    let scales = [1.0, 1.0 / 1.5, 0.5, 0.4];
    let a = predict_scenes(&mut model.clone(), &scenes, &scales).unwrap();
    let b = predict_scenes(&mut model.clone(), &scenes, &scales).unwrap();
    let c = predict_scenes_parallel(&model, &scenes, &scales, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

fn arb_maps() -> impl Strategy<Value = (Vec<u8>, Vec<u8>, Vec<u16>)> {
    (1usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..4, n),
            prop::collection::vec(0u8..4, n),
            prop::collection::vec(0u16..5, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_is_permutation_equivariant((pred, truth, _) in arb_maps(), perm in Just(vec![0u8, 1, 2, 3]).prop_shuffle()) {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&pred, &truth).unwrap();
        let relabel = |v: &[u8]| v.iter().map(|x| perm[*x as usize]).collect::<Vec<u8>>();
        let mut cm2 = ConfusionMatrix::new(4);
        cm2.accumulate(&relabel(&pred), &relabel(&truth)).unwrap();
        let (a, ma) = iou(&cm);
        let (b, mb) = iou(&cm2);
        for c in 0..4 {
            prop_assert_eq!(a[c], b[perm[c] as usize]);
        }
        let same_mean = match (ma, mb) {
            (Some(x), Some(y)) => (x - y).abs() < 1e-12,
            (x, y) => x == y,
        };
        prop_assert!(same_mean);
    }

    #[test]
    fn accumulation_is_order_independent(samples in prop::collection::vec(arb_maps(), 1..6)) {
        let mut forward = ConfusionMatrix::new(4);
        for (p, t, _) in &samples {
            forward.accumulate(p, t).unwrap();
        }
        let mut backward = ConfusionMatrix::new(4);
        for (p, t, _) in samples.iter().rev() {
            let mut one = ConfusionMatrix::new(4);
            one.accumulate(p, t).unwrap();
            backward.merge(&one);
        }
        prop_assert_eq!(forward, backward);
    }

    #[test]
    fn counts_plus_ignored_cover_every_pixel((pred, mut truth, _) in arb_maps(), holes in prop::collection::vec(any::<bool>(), 60)) {
        for (t, h) in truth.iter_mut().zip(&holes) {
            if *h {
                *t = IGNORE_LABEL;
            }
        }
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&pred, &truth).unwrap();
        prop_assert_eq!(cm.counts.iter().sum::<u64>() + cm.ignored, pred.len() as u64);
    }

    #[test]
    fn iou_stays_in_unit_interval((pred, truth, instances) in arb_maps()) {
        let mut truth = truth;
        // instance ids must belong to one class per image
        for (t, id) in truth.iter_mut().zip(&instances) {
            if *id > 0 {
                *t = 1 + (*id as u8 % 3);
            }
        }
        let r = evaluate(&[Sample { pred, truth, instances }], 4, &CategoryMap::default_for(4)).unwrap();
        for v in r.per_class_iou.iter().chain(&r.per_class_iiou).flatten() {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn vote_matches_oracle(ballots in prop::collection::vec(prop::collection::vec(0u8..5, 7), 1..6)) {
        let out = majority_vote(&ballots, 5);
        for px in 0..7 {
            let ballot: Vec<u8> = ballots.iter().map(|b| b[px]).collect();
            prop_assert_eq!(out[px], vote_oracle(&ballot, 5));
        }
    }
}
