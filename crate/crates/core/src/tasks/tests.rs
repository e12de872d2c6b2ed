use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::data::{Color, Rotation, Scale};
use crate::seeded_rng;

fn descriptor() -> DomainDescriptor {
    DomainDescriptor::Rainbow {
        color: Color::Red,
        rotation: Rotation::Deg0,
        scale: Scale::Full,
    }
}

/// Domain whose example `i` has feature `[i]`, with the given class counts.
fn domain(counts: &[usize]) -> DomainDataset {
    let mut examples = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let i = examples.len() as f64;
            examples.push(LabeledExample::new(vec![i], c));
        }
    }
    DomainDataset::new("d", descriptor(), counts.len(), examples).unwrap()
}

fn labels(set: &[LabeledExample]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for e in set {
        *m.entry(e.label).or_insert(0) += 1;
    }
    m
}

fn assert_disjoint(t: &Task) {
    let s: BTreeSet<_> = t.support_indices.iter().collect();
    assert_eq!(s.len(), t.support_indices.len());
    let q: BTreeSet<_> = t.query_indices.iter().collect();
    assert_eq!(q.len(), t.query_indices.len());
    assert!(s.is_disjoint(&q));
}

#[test]
fn dataset_validation() {
    let ex = |l| LabeledExample::new(vec![0.0], l);
    assert!(matches!(
        DomainDataset::new("d", descriptor(), 2, vec![ex(0), ex(2)]),
        Err(Error::Label(_))
    ));
    assert!(matches!(
        DomainDataset::new("d", descriptor(), 3, vec![ex(0), ex(1)]),
        Err(Error::InsufficientData(_))
    ));
    assert!(matches!(
        DomainDataset::new(
            "d",
            descriptor(),
            1,
            vec![LabeledExample::new(vec![f64::NAN], 0)]
        ),
        Err(Error::Numeric(_))
    ));
    let d = domain(&[2, 3]);
    assert_eq!(d.class_counts(), BTreeMap::from([(0, 2), (1, 3)]));
    assert_eq!(d.indices_of(1), &[2, 3, 4]);
}

#[test]
fn standard_task_sizes() {
    let d = domain(&[5; 10]);
    let t = sample_standard_task(&d, 1, &mut seeded_rng(1)).unwrap();
    assert_eq!((t.support.len(), t.query.len()), (10, 10));
    assert!(labels(&t.support).values().all(|&n| n == 1));
    assert!(labels(&t.query).values().all(|&n| n == 1));
    assert_disjoint(&t);
    assert_eq!(t.domain_id, "d");
    for (e, &i) in t.support.iter().zip(&t.support_indices) {
        assert_eq!(e.features[0], i as f64);
    }
}

#[test]
fn standard_task_at_the_boundary_exhausts_the_domain() {
    let d = domain(&[4, 4, 4]);
    let t = sample_standard_task(&d, 2, &mut seeded_rng(2)).unwrap();
    assert_disjoint(&t);
    let all: BTreeSet<_> = t
        .support_indices
        .iter()
        .chain(&t.query_indices)
        .copied()
        .collect();
    assert_eq!(all, (0..12).collect());
    assert!(matches!(
        sample_standard_task(&d, 3, &mut seeded_rng(2)),
        Err(Error::InsufficientData(_))
    ));
    assert!(matches!(
        sample_standard_task(&d, 0, &mut seeded_rng(2)),
        Err(Error::Config(_))
    ));
}

#[test]
fn standard_inclusion_is_uniform() {
    let d = domain(&[10, 10, 10]);
    let mut rng = seeded_rng(3);
    let trials = 1000;
    let mut hits = vec![0usize; 30];
    for _ in 0..trials {
        let t = sample_standard_task(&d, 2, &mut rng).unwrap();
        for &i in &t.support_indices {
            hits[i] += 1;
        }
    }
    let p = 0.2;
    let mean = trials as f64 * p;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    for (i, &h) in hits.iter().enumerate() {
        assert!(
            (h as f64 - mean).abs() <= 3.0 * sigma,
            "example {i}: {h} hits"
        );
    }
}

#[test]
fn ocda_task_sizes() {
    let d = domain(&[8; 10]);
    let t = sample_ocda_task(&d, 3, 3, &mut seeded_rng(4)).unwrap();
    assert_eq!(t.support.len(), 3);
    assert!(t.support.iter().all(|e| e.label == 3));
    assert_eq!(t.query.len(), 30);
    assert_disjoint(&t);
}

#[test]
fn ocda_boundary_and_errors() {
    // class 1 has exactly 2K, the others exactly K
    let d = domain(&[2, 4, 2]);
    for seed in 0..50 {
        let t = sample_ocda_task(&d, 1, 2, &mut seeded_rng(seed)).unwrap();
        assert_disjoint(&t);
        let q1: BTreeSet<_> = t
            .query_indices
            .iter()
            .filter(|&&i| d.examples()[i].label == 1)
            .collect();
        assert!(t.support_indices.iter().all(|i| !q1.contains(i)));
    }
    assert!(matches!(
        sample_ocda_task(&d, 0, 2, &mut seeded_rng(0)),
        Err(Error::InsufficientData(_))
    ));
    assert!(matches!(
        sample_ocda_task(&d, 3, 1, &mut seeded_rng(0)),
        Err(Error::Label(_))
    ));
}

#[test]
fn ocda_query_histogram_over_many_tasks() {
    let d = domain(&[7, 9, 6, 8, 10]);
    let mut rng = seeded_rng(5);
    for _ in 0..500 {
        let t = sample_ocda_task(&d, 2, 3, &mut rng).unwrap();
        assert_eq!(labels(&t.query), (0..5).map(|c| (c, 3)).collect());
    }
}

#[test]
fn standard_and_ocda_share_the_query() {
    let d = domain(&[6, 7, 8, 9]);
    for seed in 0..20 {
        let a = sample_standard_task(&d, 2, &mut seeded_rng(seed)).unwrap();
        let b = sample_ocda_task(&d, 1, 2, &mut seeded_rng(seed)).unwrap();
        assert_eq!(a.query_indices, b.query_indices);
        // the normal-class support also coincides
        let a_normal: Vec<_> = a
            .support_indices
            .iter()
            .filter(|&&i| d.examples()[i].label == 1)
            .collect();
        let b_normal: Vec<_> = b.support_indices.iter().collect();
        assert_eq!(a_normal, b_normal);
    }
}

#[test]
fn meta_test_task_removes_support_first() {
    let d = domain(&[100; 10]);
    let t = build_meta_test_task(&d, 4, 1, &mut seeded_rng(6)).unwrap();
    assert_eq!(t.support.len(), 1);
    assert_eq!(t.support[0].label, 4);
    assert_eq!(labels(&t.query), (0..10).map(|c| (c, 99)).collect());
    assert_disjoint(&t);
    let again = build_meta_test_task(&d, 4, 1, &mut seeded_rng(6)).unwrap();
    assert_eq!(again.record(), t.record());
}

#[test]
fn meta_test_min_rule_with_empty_support() {
    let d = domain(&[10, 20, 30]);
    let t = build_meta_test_task(&d, 1, 0, &mut seeded_rng(7)).unwrap();
    assert!(t.support.is_empty());
    assert_eq!(
        labels(&t.query),
        BTreeMap::from([(0, 10), (1, 10), (2, 10)])
    );
    // normal class becomes the minimum after removal
    let t = build_meta_test_task(&d, 0, 3, &mut seeded_rng(7)).unwrap();
    assert_eq!(labels(&t.query), BTreeMap::from([(0, 7), (1, 7), (2, 7)]));
    assert!(matches!(
        build_meta_test_task(&domain(&[2, 5]), 0, 2, &mut seeded_rng(7)),
        Err(Error::InsufficientData(_))
    ));
}

#[test]
fn task_record_serializes() {
    let d = domain(&[3, 3]);
    let t = sample_standard_task(&d, 1, &mut seeded_rng(8)).unwrap();
    let json = serde_json::to_string(&t.record()).unwrap();
    let back: TaskRecord = serde_json::from_str(&json).unwrap();
    assert_eq!(back, t.record());
}

fn counts_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..12, 2..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sampler_invariants(counts in counts_strategy(), normal in 0usize..6, k in 1usize..4, seed in any::<u64>()) {
        let d = domain(&counts);
        let n = normal % counts.len();
        let mut rng = seeded_rng(seed);

        match sample_standard_task(&d, k, &mut rng) {
            Ok(t) => {
                assert_disjoint(&t);
                prop_assert!(labels(&t.support).values().all(|&x| x == k));
                prop_assert!(labels(&t.query).values().all(|&x| x == k));
            }
            Err(e) => {
                prop_assert!(matches!(e, Error::InsufficientData(_)));
                prop_assert!(counts.iter().any(|&c| c < 2 * k));
            }
        }

        match sample_ocda_task(&d, n, k, &mut rng) {
            Ok(t) => {
                assert_disjoint(&t);
                prop_assert_eq!(t.support.len(), k);
                prop_assert!(t.support.iter().all(|e| e.label == n));
                prop_assert_eq!(labels(&t.query), (0..counts.len()).map(|c| (c, k)).collect::<BTreeMap<_, _>>());
            }
            Err(e) => {
                prop_assert!(matches!(e, Error::InsufficientData(_)));
                prop_assert!(counts[n] < 2 * k || counts.iter().any(|&c| c < k));
            }
        }

        match build_meta_test_task(&d, n, k, &mut rng) {
            Ok(t) => {
                assert_disjoint(&t);
                prop_assert!(t.support.iter().all(|e| e.label == n));
                let m = counts.iter().enumerate().map(|(c, &x)| if c == n { x - k } else { x }).min().unwrap();
                prop_assert_eq!(labels(&t.query), (0..counts.len()).map(|c| (c, m)).collect::<BTreeMap<_, _>>());
            }
            Err(_) => prop_assert!(counts[n] <= k),
        }
    }
}
