use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::seeded_rng;

fn random_batch(rng: &mut impl Rng, n: usize, len: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect()
}

fn refs(batch: &[Vec<f64>]) -> Vec<&[f64]> {
    batch.iter().map(|v| v.as_slice()).collect()
}

#[test]
fn rainbow_cnn_shapes() {
    let spec = build_rainbow_cnn(10).unwrap();
    let convs = spec
        .layers
        .iter()
        .filter(|l| matches!(l.layer, Layer::Conv2d { .. }))
        .count();
    assert_eq!(convs, 4);
    assert_eq!(spec.input_shape, vec![3, 28, 28]);
    // 28 → 14 → 7 → 3 → 1 under floor pooling, 32 channels
    assert_eq!(spec.flattened_len(), Some(32));
    let last_linear = spec
        .layers
        .iter()
        .rev()
        .find(|l| matches!(l.layer, Layer::Linear { .. }))
        .unwrap();
    assert_eq!(last_linear.output_shape, vec![10]);
    let two = build_rainbow_cnn(2).unwrap();
    assert_eq!(two.layers.last().unwrap().output_shape, vec![2]);
    assert_eq!(two.layers[..16], spec.layers[..16]);
}

#[test]
fn pump_cnn_shapes() {
    let spec = build_pump_cnn(5).unwrap();
    assert_eq!(spec.input_shape, vec![1, 256]);
    // valid conv 5 then pool 2, three times: 256 → 252 → 126 → 122 → 61 → 57 → 28
    assert_eq!(spec.flattened_len(), Some(32 * 28));
    assert_eq!(spec.layers.last().unwrap().output_shape, vec![5]);
    assert_eq!(
        build_pump_cnn(2)
            .unwrap()
            .layers
            .last()
            .unwrap()
            .output_shape,
        vec![2]
    );
}

#[test]
fn too_few_classes_is_a_spec_error() {
    assert!(matches!(build_rainbow_cnn(1), Err(Error::Spec(_))));
    assert!(matches!(build_pump_cnn(0), Err(Error::Spec(_))));
}

#[test]
fn shape_mismatches_are_rejected() {
    let bad = ModelSpec::new(
        "bad",
        vec![4],
        2,
        vec![
            Layer::Linear {
                in_features: 5,
                out_features: 2,
            },
            Layer::Softmax,
        ],
    );
    assert!(matches!(bad, Err(Error::Spec(_))));
    let no_softmax = ModelSpec::new(
        "bad",
        vec![4],
        2,
        vec![Layer::Linear {
            in_features: 4,
            out_features: 2,
        }],
    );
    assert!(matches!(no_softmax, Err(Error::Spec(_))));
}

#[test]
fn declared_shapes_match_runtime_shapes() {
    let mut rng = seeded_rng(1);
    for spec in [build_rainbow_cnn(10).unwrap(), build_pump_cnn(5).unwrap()] {
        let params = init_params(&spec, 2);
        let batch = random_batch(&mut rng, 3, spec.input_len());
        let p = forward(&spec, &params, &refs(&batch)).unwrap();
        assert_eq!((p.rows, p.classes), (3, spec.class_count));
        assert_eq!(p.probabilities.len(), 3 * spec.class_count);
    }
}

#[test]
fn spec_json_round_trip_and_hash() {
    let spec = build_pump_cnn(5).unwrap();
    let text = spec.to_json();
    assert!(text.contains("\"padding\": \"valid\""));
    let back = ModelSpec::from_json(&text).unwrap();
    assert_eq!(back, spec);
    assert_eq!(back.architecture_hash(), spec.architecture_hash());
    assert_ne!(
        build_pump_cnn(4).unwrap().architecture_hash(),
        spec.architecture_hash()
    );
    let tampered = text.replacen(
        "\"output_shape\": [\n        32,\n        252",
        "\"output_shape\": [\n        32,\n        251",
        1,
    );
    assert_ne!(tampered, text);
    assert!(ModelSpec::from_json(&tampered).is_err());
}

#[test]
fn init_is_deterministic_with_stated_law() {
    let spec = build_rainbow_cnn(10).unwrap();
    let a = init_params(&spec, 7);
    assert_eq!(a, init_params(&spec, 7));
    assert_ne!(a, init_params(&spec, 8));
    for slot in spec.layout().slots() {
        let v = a.slot(&slot.name).unwrap();
        if slot.name.ends_with("scale") {
            assert!(v.iter().all(|&x| x == 1.0));
        } else if slot.name.ends_with("bias") || slot.name.ends_with("shift") {
            assert!(v.iter().all(|&x| x == 0.0));
        } else {
            let fan_in: usize = slot.shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            assert!(v.iter().all(|x| x.abs() <= bound));
        }
    }
    // 9216-entry slice of U(-b, b): mean within 3 standard errors of 0
    let w = a.slot("layers.4.weight").unwrap();
    assert!(w.len() >= 9000);
    let bound = (6.0 / 288.0f64).sqrt();
    let se = bound / 3f64.sqrt() / (w.len() as f64).sqrt();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
    assert!((var - bound * bound / 3.0).abs() < 0.05 * bound * bound / 3.0);
}

#[test]
fn zero_parameters_predict_uniform() {
    let spec = build_pump_cnn(5).unwrap();
    let params = ParameterVector::zeros(std::sync::Arc::new(spec.layout()));
    let batch = random_batch(&mut seeded_rng(3), 4, 256);
    let p = forward(&spec, &params, &refs(&batch)).unwrap();
    assert!(p.probabilities.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    assert_eq!(p.argmax(), vec![0; 4]);
}

#[test]
fn linear_softmax_matches_direct_formula() {
    let spec = build_mlp(2, &[], Activation::Relu, 3).unwrap();
    let w = vec![1.0, -0.5, 0.25, 2.0, 0.0, 0.0, 0.3, -0.1, 0.2];
    let params = ParameterVector::new(std::sync::Arc::new(spec.layout()), w.clone()).unwrap();
    let x = [0.4, -1.5];
    let p = forward(&spec, &params, &[&x]).unwrap();
    let z: Vec<f64> = (0..3)
        .map(|c| w[6 + c] + w[2 * c] * x[0] + w[2 * c + 1] * x[1])
        .collect();
    let s: f64 = z.iter().map(|v| v.exp()).sum();
    for c in 0..3 {
        assert!((p.row(0)[c] - z[c].exp() / s).abs() < 1e-15);
    }
}

#[test]
fn batch_of_one_normalizes_to_shift() {
    // flat batch-norm with a single example: normalized activations vanish,
    // so only the shift reaches the next layer
    let spec = ModelSpec::new(
        "bn",
        vec![3],
        2,
        vec![
            Layer::Linear {
                in_features: 3,
                out_features: 4,
            },
            Layer::BatchNorm { channels: 4 },
            Layer::Linear {
                in_features: 4,
                out_features: 2,
            },
            Layer::Softmax,
        ],
    )
    .unwrap();
    let x = [0.3, 0.9, -0.2];
    let base = init_params(&spec, 1);
    let reference = forward(&spec, &base, &[&x]).unwrap();
    let mut other = init_params(&spec, 2).into_values();
    let layout = spec.layout();
    for name in ["layers.1.shift", "layers.2.weight", "layers.2.bias"] {
        let r = layout.range(name).unwrap();
        other[r.clone()].copy_from_slice(&base.values()[r]);
    }
    let other = ParameterVector::new(base.layout().clone(), other).unwrap();
    assert_eq!(forward(&spec, &other, &[&x]).unwrap(), reference);
}

#[test]
fn shape_errors() {
    let spec = build_pump_cnn(5).unwrap();
    let params = init_params(&spec, 0);
    let short = vec![0.0; 255];
    assert!(matches!(
        forward(&spec, &params, &[&short]),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        forward(&spec, &params, &[]),
        Err(Error::EmptyDataset)
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn rows_are_stochastic_and_equivariant(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = seeded_rng(seed);
        let spec = build_rainbow_cnn(10).unwrap();
        let params = init_params(&spec, seed);
        let batch = random_batch(&mut rng, n, spec.input_len());
        let p = forward(&spec, &params, &refs(&batch)).unwrap();
        for i in 0..n {
            let row = p.row(i);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        let permuted: Vec<Vec<f64>> = order.iter().map(|&i| batch[i].clone()).collect();
        let q = forward(&spec, &params, &refs(&permuted)).unwrap();
        for (j, &i) in order.iter().enumerate() {
            for (a, b) in q.row(j).iter().zip(p.row(i)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
