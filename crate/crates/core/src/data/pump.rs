//! Synthetic vibration spectra standing in for the centrifugal-pump data.
//!
//! Every domain (pump unit × mounting surface × measurement session) owns a
//! smooth base envelope built in log-amplitude space from unit, surface and
//! session resonances. Each example of class `c` is
//! `envelope × modulation_c × (1 + noise) + peaks_c`, so anomalous classes
//! follow the pattern of the domain's normal class. Domain resonances and
//! class bands are the same kind of feature, which is what makes the
//! domain shift hard without a view of the domain's normal data.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{DomainDescriptor, Surface};
use crate::tasks::{DomainDataset, LabeledExample};
use crate::{Error, Result, SeededRng};

pub const CLASS_NAMES: [&str; 5] = [
    "normal",
    "idle",
    "cavitation",
    "hydraulic-blockage",
    "dry-running",
];
pub const UNITS: u8 = 4;

/// Gaussian feature on the frequency axis (bins).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub center: f64,
    pub width: f64,
    /// Log-amplitude gain for modulations, absolute amplitude for peaks.
    pub gain: f64,
}

impl Band {
    fn at(&self, f: f64) -> f64 {
        let z = (f - self.center) / self.width;
        self.gain * (-0.5 * z * z).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseProfile {
    pub level: f64,
    pub decay: f64,
    pub floor: f64,
    pub unit_resonances: usize,
    pub unit_gain: f64,
    pub surface_resonances: usize,
    pub surface_gain: f64,
    pub session_resonances: usize,
    pub session_gain: f64,
    pub min_width: f64,
    pub max_width: f64,
    /// Half-range of a per-domain broadband log-gain.
    #[serde(default)]
    pub level_spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEffect {
    pub name: String,
    /// Overall amplitude factor.
    pub gain: f64,
    /// Multiplicative modulations of the envelope.
    pub bands: Vec<Band>,
    /// Additive peaks.
    pub peaks: Vec<Band>,
    /// Per-example relative spread of band gains, in `[0, 1)`.
    pub jitter: f64,
}

impl ClassEffect {
    pub fn identity(name: &str) -> Self {
        Self {
            name: name.to_string(),
            gain: 1.0,
            bands: Vec::new(),
            peaks: Vec::new(),
            jitter: 0.0,
        }
    }

    fn band(center: f64, width: f64, gain: f64) -> Band {
        Band {
            center,
            width,
            gain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumConfig {
    pub bins: usize,
    pub base_profiles: BaseProfile,
    pub class_effects: Vec<ClassEffect>,
    pub noise_scale: f64,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            bins: 256,
            base_profiles: BaseProfile {
                level: 1.0,
                decay: 2.0,
                floor: 0.15,
                unit_resonances: 3,
                unit_gain: 0.3,
                surface_resonances: 3,
                surface_gain: 0.6,
                session_resonances: 3,
                session_gain: 0.6,
                min_width: 4.0,
                max_width: 24.0,
                level_spread: 0.5,
            },
            class_effects: vec![
                ClassEffect::identity(CLASS_NAMES[0]),
                ClassEffect {
                    gain: 0.5,
                    ..ClassEffect::identity(CLASS_NAMES[1])
                },
                ClassEffect {
                    bands: vec![ClassEffect::band(185.0, 28.0, 1.4)],
                    jitter: 0.5,
                    ..ClassEffect::identity(CLASS_NAMES[2])
                },
                ClassEffect {
                    bands: vec![
                        ClassEffect::band(40.0, 9.0, 1.8),
                        ClassEffect::band(105.0, 14.0, -1.2),
                    ],
                    jitter: 0.5,
                    ..ClassEffect::identity(CLASS_NAMES[3])
                },
                ClassEffect {
                    bands: vec![
                        ClassEffect::band(64.0, 3.0, 1.8),
                        ClassEffect::band(128.0, 3.0, 1.8),
                        ClassEffect::band(192.0, 3.0, 1.8),
                    ],
                    jitter: 0.5,
                    ..ClassEffect::identity(CLASS_NAMES[4])
                },
            ],
            noise_scale: 0.4,
        }
    }
}

impl SpectrumConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.base_profiles;
        let bad = |m: &str| Err(Error::Config(format!("spectrum config: {m}")));
        if self.bins == 0 {
            return bad("bins must be positive");
        }
        if self.class_effects.len() < 2 {
            return bad("at least two classes are required");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and nonnegative");
        }
        if !(b.level >= 0.0 && b.floor >= 0.0 && b.level + b.floor > 0.0) {
            return bad("envelope level and floor must be nonnegative with a positive sum");
        }
        if !(b.level_spread >= 0.0 && b.level_spread.is_finite()) {
            return bad("level_spread must be finite and nonnegative");
        }
        if !(b.min_width > 0.0 && b.max_width >= b.min_width) {
            return bad("resonance widths must satisfy 0 < min <= max");
        }
        for c in &self.class_effects {
            if !(c.gain > 0.0) || !(0.0..1.0).contains(&c.jitter) {
                return bad("class gain must be positive and jitter in [0, 1)");
            }
            if c.bands.iter().chain(&c.peaks).any(|p| !(p.width > 0.0)) {
                return bad("band widths must be positive");
            }
            if c.peaks.iter().any(|p| p.gain < 0.0) {
                return bad("additive peaks must be nonnegative");
            }
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.class_effects.len()
    }
}

/// splitmix64 finalizer, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, tag: u64, id: u64) -> SeededRng {
    SeededRng::seed_from_u64(mix(mix(seed ^ mix(tag)) ^ id))
}

/// Descriptor of the `d`-th generated domain: unit/surface combinations
/// cycle fastest, sessions slowest.
pub fn pump_descriptor(d: usize) -> DomainDescriptor {
    let combos = UNITS as usize * 2;
    let combo = d % combos;
    DomainDescriptor::Pump {
        unit: (combo / 2) as u8 + 1,
        surface: Surface::ALL[combo % 2],
        session: (d / combos) as u32,
    }
}

fn resonances(rng: &mut SeededRng, count: usize, max_gain: f64, cfg: &SpectrumConfig) -> Vec<Band> {
    let b = &cfg.base_profiles;
    (0..count)
        .map(|_| {
            let center = rng.random_range(0.0..cfg.bins as f64);
            let width = rng.random_range(b.min_width..=b.max_width);
            let magnitude = max_gain * rng.random_range(0.4..=1.0);
            let sign = if rng.random::<f64>() < 0.75 {
                1.0
            } else {
                -1.0
            };
            Band {
                center,
                width,
                gain: sign * magnitude,
            }
        })
        .collect()
}

/// The smooth base envelope of a pump domain.
pub fn base_envelope(
    cfg: &SpectrumConfig,
    descriptor: &DomainDescriptor,
    seed: u64,
) -> Result<Vec<f64>> {
    let DomainDescriptor::Pump {
        unit,
        surface,
        session,
    } = *descriptor
    else {
        return Err(Error::Config(format!("{descriptor} is not a pump domain")));
    };
    let b = &cfg.base_profiles;
    let mut bands = Vec::new();
    bands.extend(resonances(
        &mut stream(seed, 1, unit as u64),
        b.unit_resonances,
        b.unit_gain,
        cfg,
    ));
    bands.extend(resonances(
        &mut stream(seed, 2, surface as u64),
        b.surface_resonances,
        b.surface_gain,
        cfg,
    ));
    let session_id = ((unit as u64) << 40) | ((surface as u64) << 32) | session as u64;
    bands.extend(resonances(
        &mut stream(seed, 3, session_id),
        b.session_resonances,
        b.session_gain,
        cfg,
    ));
    let gain = if b.level_spread > 0.0 {
        stream(seed, 5, session_id)
            .random_range(-b.level_spread..=b.level_spread)
            .exp()
    } else {
        1.0
    };
    Ok((0..cfg.bins)
        .map(|i| {
            let f = i as f64;
            let baseline = b.floor + b.level * (-b.decay * f / cfg.bins as f64).exp();
            gain * baseline * bands.iter().map(|r| r.at(f)).sum::<f64>().exp()
        })
        .collect())
}

/// Multiplicative class modulation at nominal (unjittered) strength.
pub fn class_modulation(effect: &ClassEffect, bins: usize) -> Vec<f64> {
    (0..bins)
        .map(|i| {
            effect.gain
                * effect
                    .bands
                    .iter()
                    .map(|b| b.at(i as f64))
                    .sum::<f64>()
                    .exp()
        })
        .collect()
}

/// Generates `domain_count` domains of `per_class` examples for each class,
/// with features of shape `1 × bins`.
pub fn generate_pump_domains(
    cfg: &SpectrumConfig,
    domain_count: usize,
    per_class: usize,
    seed: u64,
) -> Result<Vec<DomainDataset>> {
    cfg.validate()?;
    if domain_count == 0 || per_class == 0 {
        return Err(Error::Config(
            "domain_count and per_class must be positive".into(),
        ));
    }
    (0..domain_count)
        .map(|d| {
            let descriptor = pump_descriptor(d);
            let envelope = base_envelope(cfg, &descriptor, seed)?;
            let mut rng = stream(seed, 4, d as u64);
            let mut examples = Vec::with_capacity(per_class * cfg.class_count());
            for (label, effect) in cfg.class_effects.iter().enumerate() {
                for _ in 0..per_class {
                    examples.push(LabeledExample::new(
                        sample_spectrum(cfg, &envelope, effect, &mut rng),
                        label,
                    ));
                }
            }
            DomainDataset::new(
                descriptor.domain_id(),
                descriptor,
                cfg.class_count(),
                examples,
            )
        })
        .collect()
}

fn sample_spectrum(
    cfg: &SpectrumConfig,
    envelope: &[f64],
    effect: &ClassEffect,
    rng: &mut SeededRng,
) -> Vec<f64> {
    let strengths: Vec<f64> = effect
        .bands
        .iter()
        .map(|_| {
            if effect.jitter > 0.0 {
                1.0 + effect.jitter * rng.random_range(-1.0..=1.0)
            } else {
                1.0
            }
        })
        .collect();
    let level = if cfg.noise_scale > 0.0 {
        (0.5 * cfg.noise_scale * standard_normal(rng)).exp()
    } else {
        1.0
    };
    envelope
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let f = i as f64;
            let log_mod: f64 = effect
                .bands
                .iter()
                .zip(&strengths)
                .map(|(b, s)| s * b.at(f))
                .sum();
            let noise = if cfg.noise_scale > 0.0 {
                cfg.noise_scale * standard_normal(rng).abs()
            } else {
                0.0
            };
            let peaks: f64 = effect.peaks.iter().map(|p| p.at(f)).sum();
            let v = level * e * effect.gain * log_mod.exp() * (1.0 + noise) + peaks;
            v.max(0.0)
        })
        .collect()
}

fn standard_normal(rng: &mut SeededRng) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_spectrum(d: &DomainDataset, class: usize) -> Vec<f64> {
        let idx = d.indices_of(class);
        let mut m = vec![0.0; 256];
        for &i in idx {
            for (a, b) in m.iter_mut().zip(d.examples()[i].features.iter()) {
                *a += b / idx.len() as f64;
            }
        }
        m
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn thirty_two_domains_of_three_hundred() {
        let domains = generate_pump_domains(&SpectrumConfig::default(), 32, 60, 5).unwrap();
        assert_eq!(domains.len(), 32);
        for d in &domains {
            assert_eq!(d.len(), 300);
            assert_eq!(d.examples()[0].features.len(), 256);
            assert!(d
                .examples()
                .iter()
                .all(|e| e.features.iter().all(|&v| v >= 0.0 && v.is_finite())));
        }
        let ids: std::collections::BTreeSet<_> =
            domains.iter().map(|d| d.domain_id().to_string()).collect();
        assert_eq!(ids.len(), 32);
    }

    #[test]
    fn degenerate_config_reproduces_envelope() {
        let mut cfg = SpectrumConfig::default();
        cfg.noise_scale = 0.0;
        for (i, c) in cfg.class_effects.iter_mut().enumerate() {
            *c = ClassEffect::identity(CLASS_NAMES[i]);
        }
        let domains = generate_pump_domains(&cfg, 3, 4, 9).unwrap();
        for d in &domains {
            let env = base_envelope(&cfg, d.descriptor(), 9).unwrap();
            for e in d.examples() {
                assert_eq!(&e.features[..], &env[..]);
            }
        }
    }

    #[test]
    fn domains_shift_beyond_noise_floor() {
        let cfg = SpectrumConfig::default();
        let domains = generate_pump_domains(&cfg, 2, 60, 11).unwrap();
        let (a, b) = (mean_spectrum(&domains[0], 0), mean_spectrum(&domains[1], 0));
        let between: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        // noise floor: distance between two halves of the same domain's normal class
        let idx = domains[0].indices_of(0);
        let half = idx.len() / 2;
        let mean_of = |ids: &[usize]| {
            let mut m = vec![0.0; 256];
            for &i in ids {
                for (s, v) in m.iter_mut().zip(domains[0].examples()[i].features.iter()) {
                    *s += v / ids.len() as f64;
                }
            }
            m
        };
        let (h1, h2) = (mean_of(&idx[..half]), mean_of(&idx[half..]));
        let within: f64 = h1
            .iter()
            .zip(&h2)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(between > 5.0 * within, "between {between} within {within}");
    }

    #[test]
    fn anomalies_follow_the_normal_envelope() {
        let cfg = SpectrumConfig::default();
        let domains = generate_pump_domains(&cfg, 8, 80, 3).unwrap();
        for d in &domains {
            let normal: Vec<f64> = mean_spectrum(d, 0).iter().map(|v| v.ln()).collect();
            for c in 1..cfg.class_count() {
                let effect = &cfg.class_effects[c];
                // bins the class leaves untouched: there the anomalous mean is
                // the normal mean times a constant
                let quiet: Vec<usize> = (0..256)
                    .filter(|&i| effect.bands.iter().all(|b| b.at(i as f64).abs() < 0.01))
                    .collect();
                assert!(quiet.len() > 64);
                let anomalous: Vec<f64> = mean_spectrum(d, c).iter().map(|v| v.ln()).collect();
                let pick = |v: &[f64]| quiet.iter().map(|&i| v[i]).collect::<Vec<_>>();
                let r = correlation(&pick(&normal), &pick(&anomalous));
                assert!(r > 0.95, "{} class {c}: r={r}", d.domain_id());
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SpectrumConfig::default();
        let a = generate_pump_domains(&cfg, 2, 5, 1).unwrap();
        let b = generate_pump_domains(&cfg, 2, 5, 1).unwrap();
        let c = generate_pump_domains(&cfg, 2, 5, 2).unwrap();
        assert_eq!(a[1].examples(), b[1].examples());
        assert_ne!(a[1].examples(), c[1].examples());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SpectrumConfig::default();
        cfg.noise_scale = -1.0;
        assert!(matches!(
            generate_pump_domains(&cfg, 1, 1, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            generate_pump_domains(&SpectrumConfig::default(), 0, 1, 0),
            Err(Error::Config(_))
        ));
        let mut cfg = SpectrumConfig::default();
        cfg.base_profiles.level_spread = f64::NAN;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn level_spread_is_a_bounded_broadband_gain() {
        let mut flat = SpectrumConfig::default();
        flat.base_profiles.level_spread = 0.0;
        let mut spread = flat.clone();
        spread.base_profiles.level_spread = 0.5;
        let mut gains = Vec::new();
        for d in 0..16 {
            let desc = pump_descriptor(d);
            let a = base_envelope(&flat, &desc, 2).unwrap();
            let b = base_envelope(&spread, &desc, 2).unwrap();
            let g = b[0] / a[0];
            assert!((-0.5..=0.5).contains(&g.ln()), "{g}");
            for (x, y) in a.iter().zip(&b) {
                assert!((y / x - g).abs() < 1e-12);
            }
            gains.push(g);
        }
        gains.sort_by(f64::total_cmp);
        assert!(gains[15] / gains[0] > 1.2, "domains should differ in level");
    }
}
