use std::collections::BTreeSet;

use proptest::prelude::*;

use super::pump::pump_descriptor;
use super::*;
use crate::tasks::LabeledExample;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("d{i:02}")).collect()
}

#[test]
fn rainbow_split_sizes() {
    let all: Vec<String> = rainbow_descriptors()
        .iter()
        .map(|d| d.domain_id())
        .collect();
    let s = split_domains(&all, (40, 8, 8), 1).unwrap();
    assert_eq!(
        (s.train.len(), s.validation.len(), s.test.len()),
        (40, 8, 8)
    );
    let union: BTreeSet<_> = s.all().collect();
    assert_eq!(union.len(), 56);
    assert_eq!(s, split_domains(&all, (40, 8, 8), 1).unwrap());
    assert_ne!(s, split_domains(&all, (40, 8, 8), 2).unwrap());
}

#[test]
fn everything_in_train() {
    let s = split_domains(&ids(5), (5, 0, 0), 3).unwrap();
    assert_eq!(s.train.len(), 5);
    assert!(s.validation.is_empty() && s.test.is_empty());
}

#[test]
fn split_count_mismatch_is_config_error() {
    assert!(matches!(
        split_domains(&ids(5), (3, 1, 0), 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        DomainSplit::explicit(vec!["a".into()], vec!["a".into()], vec![]),
        Err(Error::Config(_))
    ));
}

#[test]
fn leave_one_unit_out_matches_twelve_four_four() {
    let descriptors: Vec<DomainDescriptor> = (0..32).map(pump_descriptor).collect();
    let distinct: BTreeSet<String> = descriptors.iter().map(|d| d.domain_id()).collect();
    assert_eq!(distinct.len(), 32);
    let refs: Vec<&DomainDescriptor> = descriptors.iter().collect();
    // P1, P2, P3 on steel -> P4 on concrete
    let s = leave_one_unit_out(&refs, 4, Surface::Steel).unwrap();
    assert_eq!(
        (s.train.len(), s.validation.len(), s.test.len()),
        (12, 4, 4)
    );
    assert!(s.test.iter().all(|id| id.starts_with("pump-P4-concrete")));
    assert!(s
        .validation
        .iter()
        .all(|id| id.starts_with("pump-P4-steel")));
    assert!(s
        .train
        .iter()
        .all(|id| id.contains("-steel-") && !id.contains("P4")));
    let rainbow = rainbow_descriptors();
    assert!(leave_one_unit_out(&[&rainbow[0]], 1, Surface::Steel).is_err());
}

#[test]
fn downsample_min_rule() {
    let d = crate::tasks::DomainDataset::new(
        "d",
        pump_descriptor(0),
        3,
        [5, 9, 7]
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| (0..n).map(move |i| LabeledExample::new(vec![i as f64], c)))
            .collect(),
    )
    .unwrap();
    let out = downsample_balanced(&d, 4).unwrap();
    assert_eq!(
        out.class_counts().values().copied().collect::<Vec<_>>(),
        vec![5, 5, 5]
    );
    assert_eq!(
        out.examples(),
        downsample_balanced(&d, 4).unwrap().examples()
    );
    let again = downsample_balanced(&out, 9).unwrap();
    assert_eq!(again.examples(), out.examples());
}

#[test]
fn descriptor_ids_and_serde() {
    let d = DomainDescriptor::Rainbow {
        color: Color::Red,
        rotation: Rotation::Deg90,
        scale: Scale::Half,
    };
    assert_eq!(d.domain_id(), "rainbow-red-90-half");
    let json = serde_json::to_string(&d).unwrap();
    assert_eq!(serde_json::from_str::<DomainDescriptor>(&json).unwrap(), d);
    let p = pump_descriptor(9);
    assert_eq!(p.domain_id(), "pump-P1-concrete-s1");
}

proptest! {
    #[test]
    fn splits_partition(n in 1usize..40, a in 0usize..40, b in 0usize..40, seed in any::<u64>()) {
        let train = a % (n + 1);
        let val = b % (n - train + 1);
        let test = n - train - val;
        let s = split_domains(&ids(n), (train, val, test), seed).unwrap();
        let mut all: Vec<_> = s.all().cloned().collect();
        all.sort();
        prop_assert_eq!(all, ids(n));
    }

    #[test]
    fn downsample_equalizes(counts in prop::collection::vec(1usize..15, 2..6), seed in any::<u64>()) {
        let examples = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| (0..n).map(move |i| LabeledExample::new(vec![i as f64], c)))
            .collect();
        let d = crate::tasks::DomainDataset::new("d", pump_descriptor(0), counts.len(), examples).unwrap();
        let out = downsample_balanced(&d, seed).unwrap();
        let m = *counts.iter().min().unwrap();
        prop_assert!(out.class_counts().values().all(|&x| x == m));
    }
}
