//! Rainbow-MNIST: 56 domains from the cross product of 7 background colors,
//! 4 rotations and 2 scales, each built from 1000 class-balanced digits.
//!
//! Transform order is scale → rotate → colorize. Half scale is a 2×2 box
//! downscale (bilinear sampling at the midpoint of each 2×2 block) to 14×14,
//! centered on a black 28×28 canvas. Rotations are exact quarter turns.
//! Pixels with intensity below [`BACKGROUND_THRESHOLD`] take the background
//! color; other pixels blend toward white by intensity.

use rand::seq::SliceRandom;
use serde::Serialize;

use super::{Color, DomainDescriptor, Rotation, Scale};
use crate::tasks::{DomainDataset, LabeledExample};
use crate::{seeded_rng, Error, Result};

pub const SIDE: usize = 28;
pub const DOMAIN_COUNT: usize = 56;
pub const PER_CLASS: usize = 100;
pub const CLASSES: usize = 10;
pub const BACKGROUND_THRESHOLD: f64 = 0.1;

/// All 56 descriptors, color-major, then rotation, then scale.
pub fn rainbow_descriptors() -> Vec<DomainDescriptor> {
    let mut out = Vec::with_capacity(DOMAIN_COUNT);
    for color in Color::ALL {
        for rotation in Rotation::ALL {
            for scale in Scale::ALL {
                out.push(DomainDescriptor::Rainbow {
                    color,
                    rotation,
                    scale,
                });
            }
        }
    }
    out
}

/// Parameters of the rendering pipeline, for domain manifests.
#[derive(Clone, Debug, Serialize)]
pub struct RainbowRendering {
    pub order: [&'static str; 3],
    pub background_threshold: f64,
    pub blend: &'static str,
    pub half_scale: &'static str,
    pub rotation: &'static str,
    pub colors: Vec<(&'static str, [f64; 3])>,
    pub output_shape: [usize; 3],
}

pub fn rendering() -> RainbowRendering {
    RainbowRendering {
        order: ["scale", "rotate", "colorize"],
        background_threshold: BACKGROUND_THRESHOLD,
        blend: "out = p + (1 - p) * background",
        half_scale: "2x2 box downscale to 14x14, centered at offset 7 on a black canvas",
        rotation: "exact counter-clockwise quarter turns",
        colors: Color::ALL.iter().map(|c| (c.name(), c.rgb())).collect(),
        output_shape: [3, SIDE, SIDE],
    }
}

fn half_scale(src: &[f64]) -> Vec<f64> {
    let half = SIDE / 2;
    let off = (SIDE - half) / 2;
    let mut out = vec![0.0; SIDE * SIDE];
    for y in 0..half {
        for x in 0..half {
            let s = src[2 * y * SIDE + 2 * x]
                + src[2 * y * SIDE + 2 * x + 1]
                + src[(2 * y + 1) * SIDE + 2 * x]
                + src[(2 * y + 1) * SIDE + 2 * x + 1];
            out[(y + off) * SIDE + x + off] = s / 4.0;
        }
    }
    out
}

/// One counter-clockwise quarter turn of a square image.
pub fn rotate_quarter(src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; SIDE * SIDE];
    for y in 0..SIDE {
        for x in 0..SIDE {
            // destination (y, x) takes source (x, SIDE-1-y)
            out[y * SIDE + x] = src[x * SIDE + (SIDE - 1 - y)];
        }
    }
    out
}

/// Maps a 28×28 grayscale image to 3×28×28 RGB (channel-major).
pub fn rainbow_transform(pixels: &[f64], descriptor: &DomainDescriptor) -> Result<Vec<f64>> {
    let DomainDescriptor::Rainbow {
        color,
        rotation,
        scale,
    } = descriptor
    else {
        return Err(Error::Config(format!(
            "{descriptor} is not a Rainbow-MNIST domain"
        )));
    };
    if pixels.len() != SIDE * SIDE {
        return Err(Error::Shape(format!(
            "expected {} pixels, got {}",
            SIDE * SIDE,
            pixels.len()
        )));
    }
    let mut img = match scale {
        Scale::Full => pixels.to_vec(),
        Scale::Half => half_scale(pixels),
    };
    for _ in 0..rotation.quarter_turns() {
        img = rotate_quarter(&img);
    }
    let bg = color.rgb();
    let plane = SIDE * SIDE;
    let mut out = vec![0.0; 3 * plane];
    for (i, &p) in img.iter().enumerate() {
        for (ch, &b) in bg.iter().enumerate() {
            out[ch * plane + i] = if p < BACKGROUND_THRESHOLD {
                b
            } else {
                p + (1.0 - p) * b
            };
        }
    }
    Ok(out)
}

/// Splits grayscale digits into 56 class-balanced sub-datasets of
/// `PER_CLASS` examples per class and renders each with its descriptor.
pub fn build_rainbow_domains(examples: &[LabeledExample], seed: u64) -> Result<Vec<DomainDataset>> {
    build_rainbow_domains_with(examples, seed, PER_CLASS)
}

/// As [`build_rainbow_domains`] with a configurable per-class domain size.
pub fn build_rainbow_domains_with(
    examples: &[LabeledExample],
    seed: u64,
    per_class: usize,
) -> Result<Vec<DomainDataset>> {
    if per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    let need = DOMAIN_COUNT * per_class;
    let mut by_class = vec![Vec::new(); CLASSES];
    for (i, ex) in examples.iter().enumerate() {
        if ex.label >= CLASSES {
            return Err(Error::Label(format!(
                "digit label {} out of range",
                ex.label
            )));
        }
        if ex.features.len() != SIDE * SIDE {
            return Err(Error::Shape(format!("example {i} is not 28x28 grayscale")));
        }
        by_class[ex.label].push(i);
    }
    if examples.len() < need * CLASSES {
        return Err(Error::InsufficientData(format!(
            "{} examples, {} required for {DOMAIN_COUNT} domains",
            examples.len(),
            need * CLASSES
        )));
    }
    if let Some((c, v)) = by_class.iter().enumerate().find(|(_, v)| v.len() < need) {
        return Err(Error::InsufficientData(format!(
            "digit {c} has {} examples, {need} required",
            v.len()
        )));
    }
    let mut rng = seeded_rng(seed);
    for v in by_class.iter_mut() {
        v.shuffle(&mut rng);
    }
    rainbow_descriptors()
        .into_iter()
        .enumerate()
        .map(|(d, descriptor)| {
            let mut out = Vec::with_capacity(per_class * CLASSES);
            for class_idx in &by_class {
                for &i in &class_idx[d * per_class..(d + 1) * per_class] {
                    let ex = &examples[i];
                    out.push(LabeledExample::new(
                        rainbow_transform(&ex.features, &descriptor)?,
                        ex.label,
                    ));
                }
            }
            DomainDataset::new(descriptor.domain_id(), descriptor, CLASSES, out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digit(seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        (0..SIDE * SIDE)
            .map(|_| {
                if rng.random::<f64>() < 0.3 {
                    rng.random::<f64>()
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn fifty_six_distinct_descriptors() {
        let d = rainbow_descriptors();
        assert_eq!(d.len(), 56);
        let ids: std::collections::BTreeSet<_> = d.iter().map(|x| x.domain_id()).collect();
        assert_eq!(ids.len(), 56);
    }

    #[test]
    fn identity_path_preserves_geometry() {
        let src = digit(1);
        for color in Color::ALL {
            let desc = DomainDescriptor::Rainbow {
                color,
                rotation: Rotation::Deg0,
                scale: Scale::Full,
            };
            let out = rainbow_transform(&src, &desc).unwrap();
            let bg = color.rgb();
            for (i, &p) in src.iter().enumerate() {
                for ch in 0..3 {
                    let v = out[ch * SIDE * SIDE + i];
                    if p < BACKGROUND_THRESHOLD {
                        assert_eq!(v, bg[ch]);
                    } else {
                        assert_eq!(v, p + (1.0 - p) * bg[ch]);
                    }
                }
            }
        }
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let src = digit(2);
        let mut img = src.clone();
        for _ in 0..4 {
            img = rotate_quarter(&img);
        }
        assert_eq!(img, src);
        let once = rotate_quarter(&src);
        assert_ne!(once, src);
    }

    #[test]
    fn quarter_turn_moves_top_right_to_top_left() {
        let mut src = vec![0.0; SIDE * SIDE];
        src[SIDE - 1] = 1.0; // top-right
        let out = rotate_quarter(&src);
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn half_scale_is_centered_box_average() {
        let src = vec![1.0; SIDE * SIDE];
        let out = half_scale(&src);
        assert_eq!(out[7 * SIDE + 7], 1.0);
        assert_eq!(out[20 * SIDE + 20], 1.0);
        assert_eq!(out[6 * SIDE + 7], 0.0);
        assert_eq!(out[21 * SIDE + 21], 0.0);
        assert_eq!(out.iter().sum::<f64>(), 196.0);
    }

    #[test]
    fn small_build_is_class_balanced_and_disjoint() {
        let mut examples = Vec::new();
        for c in 0..CLASSES {
            for j in 0..(DOMAIN_COUNT * 2) {
                examples.push(LabeledExample::new(digit((c * 1000 + j) as u64), c));
            }
        }
        let domains = build_rainbow_domains_with(&examples, 7, 2).unwrap();
        assert_eq!(domains.len(), 56);
        for d in &domains {
            assert!(d.class_counts().values().all(|&n| n == 2));
            assert_eq!(d.examples()[0].features.len(), 3 * SIDE * SIDE);
        }
        assert!(matches!(
            build_rainbow_domains_with(&examples, 7, 3),
            Err(Error::InsufficientData(_))
        ));
    }
}
