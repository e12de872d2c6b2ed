//! Spectra as comma-separated text: one example per row, one domain per file.
//!
//! Header: `domain,unit,surface,session,label,bin_0,...,bin_{bins-1}`.
//! Amplitudes are in mm and bins index frequency in Hz; units are metadata
//! only and never enter the numbers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pump::CLASS_NAMES;
use super::{DomainDescriptor, Surface};
use crate::tasks::{DomainDataset, LabeledExample};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub domain_column: String,
    pub unit_column: String,
    pub surface_column: String,
    pub session_column: String,
    pub label_column: String,
    pub bin_prefix: String,
    pub bins: usize,
    /// Label vocabulary; the position of a name is its class id.
    pub labels: Vec<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            domain_column: "domain".into(),
            unit_column: "unit".into(),
            surface_column: "surface".into(),
            session_column: "session".into(),
            label_column: "label".into(),
            bin_prefix: "bin_".into(),
            bins: 256,
            labels: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl CsvSchema {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec![
            self.domain_column.clone(),
            self.unit_column.clone(),
            self.surface_column.clone(),
            self.session_column.clone(),
            self.label_column.clone(),
        ];
        h.extend((0..self.bins).map(|i| format!("{}{i}", self.bin_prefix)));
        h
    }
}

struct Columns {
    domain: usize,
    unit: usize,
    surface: usize,
    session: usize,
    label: usize,
    bins: Vec<usize>,
}

fn locate(header: &csv::StringRecord, schema: &CsvSchema, path: &Path) -> Result<Columns> {
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(path, Some(0), format!("missing column {name:?}")))
    };
    Ok(Columns {
        domain: find(&schema.domain_column)?,
        unit: find(&schema.unit_column)?,
        surface: find(&schema.surface_column)?,
        session: find(&schema.session_column)?,
        label: find(&schema.label_column)?,
        bins: (0..schema.bins)
            .map(|i| find(&format!("{}{i}", schema.bin_prefix)))
            .collect::<Result<_>>()?,
    })
}

fn parse_descriptor(unit: &str, surface: &str, session: &str) -> Option<DomainDescriptor> {
    let unit = unit.strip_prefix('P').unwrap_or(unit).parse().ok()?;
    Some(DomainDescriptor::Pump {
        unit,
        surface: Surface::parse(surface)?,
        session: session.parse().ok()?,
    })
}

/// Loads one domain. Every row must carry exactly the header's field count
/// and the same domain fields.
pub fn load_csv_spectra(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<DomainDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let cols = locate(&header, schema, path)?;

    let mut domain: Option<(String, DomainDescriptor)> = None;
    let mut examples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let offset = record.position().map(|p| p.byte());
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != header.len() {
            return Err(Error::format(
                path,
                offset,
                format!(
                    "line {line}: {} fields, header has {}",
                    record.len(),
                    header.len()
                ),
            ));
        }
        let id = &record[cols.domain];
        let descriptor = parse_descriptor(
            &record[cols.unit],
            &record[cols.surface],
            &record[cols.session],
        )
        .ok_or_else(|| {
            Error::format(path, offset, format!("line {line}: invalid domain fields"))
        })?;
        match &domain {
            None => domain = Some((id.to_string(), descriptor)),
            Some((d, desc)) if d == id && *desc == descriptor => {}
            Some((d, _)) => {
                return Err(Error::format(
                    path,
                    offset,
                    format!("line {line}: domain {id:?} differs from {d:?}"),
                ))
            }
        }
        let name = &record[cols.label];
        let label = schema
            .labels
            .iter()
            .position(|l| l == name)
            .ok_or_else(|| {
                Error::Label(format!(
                    "{}: line {line}: unknown label {name:?}",
                    path.display()
                ))
            })?;
        let features = cols
            .bins
            .iter()
            .map(|&c| {
                record[c].trim().parse::<f64>().map_err(|_| {
                    Error::format(
                        path,
                        offset,
                        format!("line {line}: bad amplitude {:?}", &record[c]),
                    )
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        examples.push(LabeledExample::new(features, label));
    }
    let (id, descriptor) = domain.ok_or(Error::EmptyDataset)?;
    DomainDataset::new(id, descriptor, schema.labels.len(), examples)
}

/// Writes one domain in the layout read by [`load_csv_spectra`]. Values are
/// written in shortest round-trip form, so a reload is exact.
pub fn write_csv_spectra(
    path: impl AsRef<Path>,
    domain: &DomainDataset,
    schema: &CsvSchema,
) -> Result<()> {
    let path = path.as_ref();
    let DomainDescriptor::Pump {
        unit,
        surface,
        session,
    } = domain.descriptor()
    else {
        return Err(Error::Config(format!(
            "{} is not a pump domain",
            domain.domain_id()
        )));
    };
    if domain.class_count() > schema.labels.len() {
        return Err(Error::Label(format!(
            "{} classes but the schema names {}",
            domain.class_count(),
            schema.labels.len()
        )));
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer
        .write_record(schema.header())
        .map_err(|e| csv_error(path, e))?;
    for ex in domain.examples() {
        if ex.features.len() != schema.bins {
            return Err(Error::Shape(format!(
                "{} bins, schema expects {}",
                ex.features.len(),
                schema.bins
            )));
        }
        let mut row = vec![
            domain.domain_id().to_string(),
            format!("P{unit}"),
            surface.name().to_string(),
            session.to_string(),
            schema.labels[ex.label].clone(),
        ];
        row.extend(ex.features.iter().map(|v| v.to_string()));
        writer.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map(|p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, offset, format!("{other:?}")),
    }
}
