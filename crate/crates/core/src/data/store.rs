//! Binary serialization of prepared domains.
//!
//! Layout (little-endian): 8-byte magic `OCDADOM1`, `u32` version, `u64`
//! header length, a JSON header, then per example a `u32` label followed by
//! `feature_len` `f64` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DomainDescriptor;
use crate::tasks::{DomainDataset, LabeledExample};
use crate::{Error, Result};

pub const DOMAIN_MAGIC: &[u8; 8] = b"OCDADOM1";
pub const DOMAIN_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainHeader {
    pub domain_id: String,
    pub descriptor: DomainDescriptor,
    pub class_count: usize,
    pub feature_len: usize,
    pub example_count: usize,
}

pub fn encode_domain(domain: &DomainDataset) -> Result<Vec<u8>> {
    let feature_len = domain.examples().first().map_or(0, |e| e.features.len());
    if domain
        .examples()
        .iter()
        .any(|e| e.features.len() != feature_len)
    {
        return Err(Error::Shape(format!(
            "{}: ragged feature lengths",
            domain.domain_id()
        )));
    }
    let header = DomainHeader {
        domain_id: domain.domain_id().to_string(),
        descriptor: domain.descriptor().clone(),
        class_count: domain.class_count(),
        feature_len,
        example_count: domain.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + domain.len() * (4 + 8 * feature_len));
    out.extend_from_slice(DOMAIN_MAGIC);
    out.extend_from_slice(&DOMAIN_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in domain.examples() {
        out.extend_from_slice(&(e.label as u32).to_le_bytes());
        for v in e.features.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_domain(bytes: &[u8], path: &Path) -> Result<DomainDataset> {
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<(usize, &[u8])> {
        let start = at;
        let slice = bytes
            .get(start..start + n)
            .ok_or_else(|| Error::format(path, Some(start as u64), "unexpected end of file"))?;
        at += n;
        Ok((start, slice))
    };
    let (_, magic) = take(8)?;
    if magic != DOMAIN_MAGIC {
        return Err(Error::format(path, Some(0), "not a domain file"));
    }
    let (off, v) = take(4)?;
    let version = u32::from_le_bytes(v.try_into().unwrap());
    if version != DOMAIN_VERSION {
        return Err(Error::format(
            path,
            Some(off as u64),
            format!("unsupported version {version}"),
        ));
    }
    let (_, n) = take(8)?;
    let n = u64::from_le_bytes(n.try_into().unwrap()) as usize;
    let (off, json) = take(n)?;
    let header: DomainHeader = serde_json::from_slice(json)
        .map_err(|e| Error::format(path, Some(off as u64), e.to_string()))?;
    let mut examples = Vec::with_capacity(header.example_count);
    for _ in 0..header.example_count {
        let (_, l) = take(4)?;
        let label = u32::from_le_bytes(l.try_into().unwrap()) as usize;
        let (_, raw) = take(8 * header.feature_len)?;
        let features: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        examples.push(LabeledExample::new(features, label));
    }
    if at != bytes.len() {
        return Err(Error::format(path, Some(at as u64), "trailing bytes"));
    }
    DomainDataset::new(
        header.domain_id,
        header.descriptor,
        header.class_count,
        examples,
    )
}

pub fn write_domain(path: impl AsRef<Path>, domain: &DomainDataset) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_domain(domain)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_domain(path: impl AsRef<Path>) -> Result<DomainDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_domain(&bytes, path)
}
