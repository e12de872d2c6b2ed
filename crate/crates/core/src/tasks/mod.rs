//! Domain datasets and task construction.
//!
//! Three samplers share one sampling discipline: each class gets its own
//! random stream derived from the caller's generator, and the query slice of
//! a class is always drawn first from that stream. The standard and OC-DA
//! samplers therefore produce the same query set from the same generator
//! state and differ only in their support sets.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::DomainDescriptor;
use crate::{Error, Result, SeededRng};

/// A feature tensor (flat, channel-major) with its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub features: Arc<[f64]>,
    pub label: usize,
}

impl LabeledExample {
    pub fn new(features: impl Into<Arc<[f64]>>, label: usize) -> Self {
        Self {
            features: features.into(),
            label,
        }
    }
}

/// Labeled examples of one domain with per-class bookkeeping.
#[derive(Clone, Debug)]
pub struct DomainDataset {
    domain_id: String,
    descriptor: DomainDescriptor,
    class_count: usize,
    examples: Vec<LabeledExample>,
    by_class: Vec<Vec<usize>>,
}

impl DomainDataset {
    /// Validates labels, finiteness and that every class in `0..class_count`
    /// is present.
    pub fn new(
        domain_id: impl Into<String>,
        descriptor: DomainDescriptor,
        class_count: usize,
        examples: Vec<LabeledExample>,
    ) -> Result<Self> {
        let domain_id = domain_id.into();
        let mut by_class = vec![Vec::new(); class_count];
        for (i, ex) in examples.iter().enumerate() {
            if ex.label >= class_count {
                return Err(Error::Label(format!(
                    "{domain_id}: example {i} has label {} outside [0, {class_count})",
                    ex.label
                )));
            }
            if ex.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "{domain_id}: example {i} has non-finite features"
                )));
            }
            by_class[ex.label].push(i);
        }
        if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
            return Err(Error::InsufficientData(format!(
                "{domain_id}: class {c} has no examples"
            )));
        }
        Ok(Self {
            domain_id,
            descriptor,
            class_count,
            examples,
            by_class,
        })
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn descriptor(&self) -> &DomainDescriptor {
        &self.descriptor
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// `N_c`: number of examples per class.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.by_class
            .iter()
            .enumerate()
            .map(|(c, v)| (c, v.len()))
            .collect()
    }

    /// Indices of the examples labeled `class`, ascending.
    pub fn indices_of(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    /// New dataset holding the examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<DomainDataset> {
        let examples = indices.iter().map(|&i| self.examples[i].clone()).collect();
        DomainDataset::new(
            self.domain_id.clone(),
            self.descriptor.clone(),
            self.class_count,
            examples,
        )
    }
}

/// Support and query sets drawn from one domain; disjoint by example index.
#[derive(Clone, Debug)]
pub struct Task {
    pub domain_id: String,
    pub support: Vec<LabeledExample>,
    pub query: Vec<LabeledExample>,
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
}

impl Task {
    fn from_indices(domain: &DomainDataset, support: Vec<usize>, query: Vec<usize>) -> Task {
        let pick = |idx: &[usize]| idx.iter().map(|&i| domain.examples[i].clone()).collect();
        Task {
            domain_id: domain.domain_id.clone(),
            support: pick(&support),
            query: pick(&query),
            support_indices: support,
            query_indices: query,
        }
    }

    pub fn record(&self) -> TaskRecord {
        TaskRecord {
            domain_id: self.domain_id.clone(),
            support: self.support_indices.clone(),
            query: self.query_indices.clone(),
        }
    }
}

/// Audit-log form of a task: domain id and example indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub domain_id: String,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// One independent stream per class, all derived from `rng`.
fn class_streams<R: Rng + ?Sized>(class_count: usize, rng: &mut R) -> Vec<SeededRng> {
    (0..class_count)
        .map(|_| SeededRng::seed_from_u64(rng.next_u64()))
        .collect()
}

/// First `take` entries of a uniformly random permutation of `pool`.
fn draw(pool: &[usize], take: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut v = pool.to_vec();
    for i in 0..take {
        let j = rng.random_range(i..v.len());
        v.swap(i, j);
    }
    v.truncate(take);
    v
}

fn require(domain: &DomainDataset, class: usize, need: usize) -> Result<()> {
    let have = domain.by_class[class].len();
    if have < need {
        return Err(Error::InsufficientData(format!(
            "{}: class {class} has {have} examples, {need} required",
            domain.domain_id
        )));
    }
    Ok(())
}

fn check_class(domain: &DomainDataset, class: usize) -> Result<()> {
    if class >= domain.class_count {
        return Err(Error::Label(format!(
            "normal class {class} is not in the class set of {} (size {})",
            domain.domain_id, domain.class_count
        )));
    }
    Ok(())
}

fn check_shots(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("shots per class K must be positive".into()));
    }
    Ok(())
}

/// Classical N-way K-shot task: `K` support and `K` query examples per class.
pub fn sample_standard_task<R: Rng + ?Sized>(
    domain: &DomainDataset,
    k: usize,
    rng: &mut R,
) -> Result<Task> {
    check_shots(k)?;
    for c in 0..domain.class_count {
        require(domain, c, 2 * k)?;
    }
    let mut support = Vec::with_capacity(k * domain.class_count);
    let mut query = Vec::with_capacity(k * domain.class_count);
    for (c, mut stream) in class_streams(domain.class_count, rng)
        .into_iter()
        .enumerate()
    {
        let picked = draw(&domain.by_class[c], 2 * k, &mut stream);
        query.extend_from_slice(&picked[..k]);
        support.extend_from_slice(&picked[k..]);
    }
    Ok(Task::from_indices(domain, support, query))
}

/// OC-DA task: `K` support examples of `normal_class` only, and a
/// class-balanced query of `K` examples per class.
pub fn sample_ocda_task<R: Rng + ?Sized>(
    domain: &DomainDataset,
    normal_class: usize,
    k: usize,
    rng: &mut R,
) -> Result<Task> {
    check_shots(k)?;
    check_class(domain, normal_class)?;
    for c in 0..domain.class_count {
        require(domain, c, if c == normal_class { 2 * k } else { k })?;
    }
    let mut support = Vec::with_capacity(k);
    let mut query = Vec::with_capacity(k * domain.class_count);
    for (c, mut stream) in class_streams(domain.class_count, rng)
        .into_iter()
        .enumerate()
    {
        if c == normal_class {
            let picked = draw(&domain.by_class[c], 2 * k, &mut stream);
            query.extend_from_slice(&picked[..k]);
            support.extend_from_slice(&picked[k..]);
        } else {
            query.extend(draw(&domain.by_class[c], k, &mut stream));
        }
    }
    Ok(Task::from_indices(domain, support, query))
}

/// Meta-testing task: `K` support examples of `normal_class`, removed from
/// the domain before the query is down-sampled to `m = min_c N_c` examples
/// per class.
pub fn build_meta_test_task<R: Rng + ?Sized>(
    domain: &DomainDataset,
    normal_class: usize,
    k: usize,
    rng: &mut R,
) -> Result<Task> {
    check_class(domain, normal_class)?;
    require(domain, normal_class, k)?;
    let m = (0..domain.class_count)
        .map(|c| domain.by_class[c].len() - if c == normal_class { k } else { 0 })
        .min()
        .unwrap_or(0);
    if m == 0 {
        return Err(Error::InsufficientData(format!(
            "{}: no query examples remain for class {normal_class} after removing {k} support examples",
            domain.domain_id
        )));
    }
    let mut support = Vec::with_capacity(k);
    let mut query = Vec::with_capacity(m * domain.class_count);
    for (c, mut stream) in class_streams(domain.class_count, rng)
        .into_iter()
        .enumerate()
    {
        if c == normal_class {
            let picked = draw(&domain.by_class[c], k + m, &mut stream);
            support.extend_from_slice(&picked[..k]);
            query.extend_from_slice(&picked[k..]);
        } else {
            query.extend(draw(&domain.by_class[c], m, &mut stream));
        }
    }
    Ok(Task::from_indices(domain, support, query))
}

#[cfg(test)]
mod tests;
