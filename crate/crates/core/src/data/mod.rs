//! Domain construction: IDX ingestion, Rainbow-MNIST, synthetic pump
//! spectra, CSV spectra, domain splits and balanced down-sampling.

pub mod csv_spectra;
pub mod idx;
pub mod pump;
pub mod rainbow;
pub mod store;

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::tasks::DomainDataset;
use crate::{seeded_rng, Error, Result};

pub use csv_spectra::{load_csv_spectra, write_csv_spectra, CsvSchema};
pub use idx::{load_idx, write_idx};
pub use pump::{generate_pump_domains, SpectrumConfig};
pub use rainbow::{
    build_rainbow_domains, build_rainbow_domains_with, rainbow_descriptors, rainbow_transform,
};
pub use store::{read_domain, write_domain};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Color {
    Red,
    Orange,
    Yellow,
    Green,
    Blue,
    Indigo,
    Violet,
}

impl Color {
    pub const ALL: [Color; 7] = [
        Color::Red,
        Color::Orange,
        Color::Yellow,
        Color::Green,
        Color::Blue,
        Color::Indigo,
        Color::Violet,
    ];

    /// Background color in `[0, 1]` RGB.
    pub fn rgb(self) -> [f64; 3] {
        let [r, g, b]: [u8; 3] = match self {
            Color::Red => [255, 0, 0],
            Color::Orange => [255, 165, 0],
            Color::Yellow => [255, 255, 0],
            Color::Green => [0, 128, 0],
            Color::Blue => [0, 0, 255],
            Color::Indigo => [75, 0, 130],
            Color::Violet => [238, 130, 238],
        };
        [r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0]
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Orange => "orange",
            Color::Yellow => "yellow",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Indigo => "indigo",
            Color::Violet => "violet",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rotation {
    #[serde(rename = "0")]
    Deg0,
    #[serde(rename = "90")]
    Deg90,
    #[serde(rename = "180")]
    Deg180,
    #[serde(rename = "270")]
    Deg270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [
        Rotation::Deg0,
        Rotation::Deg90,
        Rotation::Deg180,
        Rotation::Deg270,
    ];

    /// Number of counter-clockwise quarter turns.
    pub fn quarter_turns(self) -> usize {
        self as usize
    }

    pub fn degrees(self) -> u32 {
        90 * self as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Full,
    Half,
}

impl Scale {
    pub const ALL: [Scale; 2] = [Scale::Full, Scale::Half];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Surface {
    Steel,
    Concrete,
}

impl Surface {
    pub const ALL: [Surface; 2] = [Surface::Steel, Surface::Concrete];

    pub fn name(self) -> &'static str {
        match self {
            Surface::Steel => "steel",
            Surface::Concrete => "concrete",
        }
    }

    pub fn parse(s: &str) -> Option<Surface> {
        match s {
            "steel" => Some(Surface::Steel),
            "concrete" => Some(Surface::Concrete),
            _ => None,
        }
    }
}

/// Environmental factors that index a domain.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DomainDescriptor {
    Rainbow {
        color: Color,
        rotation: Rotation,
        scale: Scale,
    },
    Pump {
        /// Pump unit `1..=4` (P1..P4).
        unit: u8,
        surface: Surface,
        session: u32,
    },
}

impl DomainDescriptor {
    /// Canonical domain id, e.g. `rainbow-red-90-half` or `pump-P2-steel-s1`.
    pub fn domain_id(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for DomainDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainDescriptor::Rainbow {
                color,
                rotation,
                scale,
            } => write!(
                f,
                "rainbow-{}-{}-{}",
                color.name(),
                rotation.degrees(),
                match scale {
                    Scale::Full => "full",
                    Scale::Half => "half",
                }
            ),
            DomainDescriptor::Pump {
                unit,
                surface,
                session,
            } => {
                write!(f, "pump-P{unit}-{}-s{session}", surface.name())
            }
        }
    }
}

/// Partition of domain ids into meta-training, validation and test sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DomainSplit {
    /// Explicit assignment; the declared domain set is the union of the
    /// three lists, which must be pairwise disjoint.
    pub fn explicit(
        train: Vec<String>,
        validation: Vec<String>,
        test: Vec<String>,
    ) -> Result<Self> {
        let split = Self {
            train,
            validation,
            test,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Config(format!(
                    "domain {id} is assigned to more than one split"
                )));
            }
        }
        Ok(())
    }

    /// Every domain id in the split.
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    /// Source domains (training and validation).
    pub fn source(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.validation)
    }
}

/// Deterministic shuffled partition of `domain_ids` into
/// `(train, validation, test)` counts.
pub fn split_domains(
    domain_ids: &[String],
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<DomainSplit> {
    let (train, val, test) = counts;
    if train + val + test != domain_ids.len() {
        return Err(Error::Config(format!(
            "split counts {train}/{val}/{test} do not sum to {} domains",
            domain_ids.len()
        )));
    }
    let mut ids = domain_ids.to_vec();
    let unique: BTreeSet<_> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Config("duplicate domain ids".into()));
    }
    ids.shuffle(&mut seeded_rng(seed));
    let test_ids = ids.split_off(train + val);
    let val_ids = ids.split_off(train);
    DomainSplit::explicit(ids, val_ids, test_ids)
}

/// Leave-one-combination-out split over pump domains: train on the other
/// units on `source_surface`, validate on `held_out_unit` on
/// `source_surface`, test on `held_out_unit` on the other surface.
pub fn leave_one_unit_out(
    domains: &[&DomainDescriptor],
    held_out_unit: u8,
    source_surface: Surface,
) -> Result<DomainSplit> {
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for d in domains {
        let DomainDescriptor::Pump { unit, surface, .. } = d else {
            return Err(Error::Config(format!("{d} is not a pump domain")));
        };
        let id = d.domain_id();
        match (*unit == held_out_unit, *surface == source_surface) {
            (false, true) => train.push(id),
            (true, true) => validation.push(id),
            (true, false) => test.push(id),
            (false, false) => {}
        }
    }
    if train.is_empty() || validation.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "unit P{held_out_unit} with source surface {} leaves an empty split",
            source_surface.name()
        )));
    }
    DomainSplit::explicit(train, validation, test)
}

/// Reduces every class to `min_c N_c` examples by seeded sampling without
/// replacement; surviving examples keep their original relative order.
pub fn downsample_balanced(domain: &DomainDataset, seed: u64) -> Result<DomainDataset> {
    if domain.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let m = domain.class_counts().values().copied().min().unwrap_or(0);
    let mut rng = seeded_rng(seed);
    let mut keep = Vec::with_capacity(m * domain.class_count());
    for c in 0..domain.class_count() {
        let mut idx = domain.indices_of(c).to_vec();
        if idx.len() > m {
            idx.shuffle(&mut rng);
            idx.truncate(m);
        }
        keep.extend(idx);
    }
    keep.sort_unstable();
    domain.select(&keep)
}

#[cfg(test)]
mod tests;
