//! Accuracy, the ID/OOD/ID-test standard-learning protocol, one-class
//! meta-testing and result tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{downsample_balanced, DomainSplit};
use crate::diffcore::engine::{logits_with, loss_fixed, loss_gradient_and_statistics};
use crate::diffcore::{DatasetLoss, GradientVector, NormStatistics, Objective, ParameterVector};
use crate::meta::{adam_step, inner_adapt, HyperParams, TrainState};
use crate::models::{argmax_first, init_params, ModelSpec};
use crate::tasks::{build_meta_test_task, DomainDataset, LabeledExample};
use crate::{seeded_rng, Error, Result};

/// Which evaluation produced a report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
    #[serde(rename = "ID-test")]
    IdTest,
    #[serde(rename = "meta-test")]
    MetaTest,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Id => "ID",
            Protocol::Ood => "OOD",
            Protocol::IdTest => "ID-test",
            Protocol::MetaTest => "meta-test",
        })
    }
}

/// Per-domain accuracies and their arithmetic mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_domain: BTreeMap<String, f64>,
    pub aggregate: f64,
    pub protocol: Protocol,
}

impl MetricsReport {
    pub fn new(protocol: Protocol, per_domain: BTreeMap<String, f64>) -> Result<Self> {
        if per_domain.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some((id, a)) = per_domain.iter().find(|(_, a)| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Numeric(format!("{id}: accuracy {a} outside [0, 1]")));
        }
        let aggregate = per_domain.values().sum::<f64>() / per_domain.len() as f64;
        Ok(Self {
            per_domain,
            aggregate,
            protocol,
        })
    }

    /// Domain-wise mean of reports over seeds; all reports must cover the
    /// same domains under the same protocol.
    pub fn mean_over_seeds(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports.first().ok_or(Error::EmptyDataset)?;
        for r in &reports[1..] {
            if r.protocol != first.protocol || !r.per_domain.keys().eq(first.per_domain.keys()) {
                return Err(Error::Config(
                    "reports to average cover different domains or protocols".into(),
                ));
            }
        }
        let n = reports.len() as f64;
        let per_domain = first
            .per_domain
            .keys()
            .map(|id| {
                let sum: f64 = reports.iter().map(|r| r.per_domain[id]).sum();
                (id.clone(), sum / n)
            })
            .collect();
        Self::new(first.protocol, per_domain)
    }
}

/// Fraction of examples whose predicted class matches the label, with the
/// whole set evaluated as one batch. Ties go to the lowest class index.
pub fn accuracy(
    spec: &ModelSpec,
    params: &ParameterVector,
    data: &[LabeledExample],
) -> Result<f64> {
    accuracy_with(spec, params, data, None)
}

/// [`accuracy`] with batch-norm normalized by fixed `stats` when given.
pub fn accuracy_with(
    spec: &ModelSpec,
    params: &ParameterVector,
    data: &[LabeledExample],
    stats: Option<&NormStatistics>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch: Vec<&[f64]> = data.iter().map(|e| &e.features[..]).collect();
    let logits = logits_with(spec, params, &batch, stats)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let correct = logits
        .chunks(spec.class_count)
        .zip(data)
        .filter(|(row, e)| argmax_first(row) == e.label)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Example-weighted accuracy over consecutive batches of at most `batch`
/// examples.
pub fn accuracy_batched(
    spec: &ModelSpec,
    params: &ParameterVector,
    data: &[LabeledExample],
    batch: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    accuracy_batched_with(spec, params, data, batch, None)
}

/// [`accuracy_batched`] with optional fixed batch-norm statistics.
pub fn accuracy_batched_with(
    spec: &ModelSpec,
    params: &ParameterVector,
    data: &[LabeledExample],
    batch: usize,
    stats: Option<&NormStatistics>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch = batch.max(1);
    let mut correct = 0.0;
    for chunk in data.chunks(batch) {
        correct += accuracy_with(spec, params, chunk, stats)? * chunk.len() as f64;
    }
    Ok(correct / data.len() as f64)
}

fn loss_batched(
    spec: &ModelSpec,
    params: &ParameterVector,
    data: &[LabeledExample],
    batch: usize,
    stats: &NormStatistics,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.chunks(batch.max(1)) {
        let loss = if stats.layers.is_empty() {
            DatasetLoss::new(spec, chunk).loss(params)?.loss
        } else {
            loss_fixed(spec, params.values(), chunk, stats)?
        };
        total += loss * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Weight of the newest batch in the running batch-norm statistics of
/// [`train_supervised`].
pub const NORM_MOMENTUM: f64 = 0.1;

/// Settings of the plain supervised baseline that the hyperparameter table
/// does not cover.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Minibatch size of supervised training.
    pub batch_size: usize,
    /// Share of pooled data used for training.
    pub train_fraction: f64,
    /// Share of pooled data used for validation; the rest is the test set.
    pub val_fraction: f64,
    /// Gradient steps; validation every `eval_interval` steps with the
    /// patience of `HyperParams`.
    pub max_steps: usize,
    /// Examples per evaluation batch.
    pub eval_batch: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            train_fraction: 0.7,
            val_fraction: 0.15,
            max_steps: 3000,
            eval_batch: 1000,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.eval_batch > 0
            && self.train_fraction > 0.0
            && self.val_fraction > 0.0
            && self.train_fraction + self.val_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid protocol settings {self:?}")))
        }
    }
}

/// Position of an example in the domain list: `(domain, example)`.
pub type ExampleRef = (usize, usize);

/// Shuffled partition of pooled examples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PooledSplit {
    pub train: Vec<ExampleRef>,
    pub val: Vec<ExampleRef>,
    pub test: Vec<ExampleRef>,
}

impl PooledSplit {
    /// Pools every example of `domains[i]` for `i` in `which`, shuffles and
    /// cuts by `fractions`; with `with_test == false` the test share joins
    /// training and validation proportionally.
    pub fn new(
        domains: &[DomainDataset],
        which: &[usize],
        cfg: &ProtocolConfig,
        with_test: bool,
        seed: u64,
    ) -> Self {
        let mut all: Vec<ExampleRef> = which
            .iter()
            .flat_map(|&d| (0..domains[d].len()).map(move |i| (d, i)))
            .collect();
        all.shuffle(&mut seeded_rng(seed));
        let n = all.len();
        let (n_train, n_val) = if with_test {
            let t = (cfg.train_fraction * n as f64).round() as usize;
            let v = (cfg.val_fraction * n as f64).round() as usize;
            (t, v.min(n - t))
        } else {
            let share = cfg.train_fraction / (cfg.train_fraction + cfg.val_fraction);
            let t = (share * n as f64).round() as usize;
            (t, n - t)
        };
        let test = all.split_off(n_train + n_val);
        let val = all.split_off(n_train);
        Self {
            train: all,
            val,
            test,
        }
    }

    /// Fails if any example appears in more than one part.
    pub fn audit(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(*r) {
                return Err(Error::Spec(format!(
                    "example {r:?} appears in more than one pooled partition"
                )));
            }
        }
        Ok(())
    }
}

fn gather(domains: &[DomainDataset], refs: &[ExampleRef]) -> Vec<LabeledExample> {
    refs.iter()
        .map(|&(d, i)| domains[d].examples()[i].clone())
        .collect()
}

/// Result of [`train_supervised`].
#[derive(Clone, Debug)]
pub struct SupervisedOutcome {
    pub params: ParameterVector,
    /// Running batch-norm statistics matching `params`; empty without
    /// batch-norm layers.
    pub statistics: NormStatistics,
    /// `(step, validation loss)` at every validation point.
    pub history: Vec<(usize, f64)>,
    pub best_step: usize,
    pub stopped_early: bool,
}

/// Minibatch Adam on the cross-entropy of `train` with early stopping on the
/// loss over `val`; returns the best validation checkpoint.
pub fn train_supervised(
    spec: &ModelSpec,
    hp: &HyperParams,
    cfg: &ProtocolConfig,
    train: &[LabeledExample],
    val: &[LabeledExample],
    seed: u64,
) -> Result<SupervisedOutcome> {
    hp.validate()?;
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = seeded_rng(seed);
    let mut state = TrainState::new(init_params(spec, seed));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut running = NormStatistics::default();
    let mut best = (
        loss_batched(spec, &state.params, val, cfg.eval_batch, &running)?,
        0,
    );
    let mut best_params = (state.params.clone(), running.clone());
    let mut history = vec![(0, best.0)];
    let mut stopped_early = false;
    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let (_, grad, batch_stats) =
            loss_gradient_and_statistics(spec, state.params.values(), &batch)?;
        let grad = GradientVector::new(state.params.layout().clone(), grad)?;
        running.update(&batch_stats, NORM_MOMENTUM);
        state = adam_step(state, &grad, hp)?;
        if step % hp.eval_interval == 0 || step == cfg.max_steps {
            let loss = loss_batched(spec, &state.params, val, cfg.eval_batch, &running)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "validation loss {loss} at step {step}"
                )));
            }
            history.push((step, loss));
            if loss < best.0 {
                best = (loss, step);
                best_params = (state.params.clone(), running.clone());
            } else if step - best.1 >= hp.early_stop_patience * hp.eval_interval {
                stopped_early = true;
                break;
            }
        }
    }
    let (params, statistics) = best_params;
    Ok(SupervisedOutcome {
        params,
        statistics,
        history,
        best_step: best.1,
        stopped_early,
    })
}

/// The three reports of the standard-learning protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardLearningReports {
    pub id: MetricsReport,
    pub ood: MetricsReport,
    pub id_test: MetricsReport,
}

fn resolve(domains: &[DomainDataset], ids: &[&String]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| {
            domains
                .iter()
                .position(|d| d.domain_id() == id.as_str())
                .ok_or_else(|| Error::Config(format!("domain {id} is not loaded")))
        })
        .collect()
}

/// Trains plain classifiers three ways: on pooled source data (ID test
/// accuracy, and OOD mean accuracy over each balanced target domain) and on
/// pooled target data (ID-test accuracy). Every domain is down-sampled to
/// balanced classes first. Models are scored with their running batch-norm
/// statistics.
pub fn run_standard_learning_protocol(
    spec: &ModelSpec,
    hp: &HyperParams,
    cfg: &ProtocolConfig,
    split: &DomainSplit,
    domains: &[DomainDataset],
    seed: u64,
) -> Result<StandardLearningReports> {
    split.validate()?;
    let source = resolve(domains, &split.source().collect::<Vec<_>>())?;
    let target = resolve(domains, &split.test.iter().collect::<Vec<_>>())?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Config(
            "the protocol needs source and target domains".into(),
        ));
    }
    let balanced: Vec<DomainDataset> = domains
        .iter()
        .enumerate()
        .map(|(i, d)| downsample_balanced(d, seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;

    let id_split = PooledSplit::new(&balanced, &source, cfg, true, seed ^ 0x1d);
    id_split.audit()?;
    let id_model = train_supervised(
        spec,
        hp,
        cfg,
        &gather(&balanced, &id_split.train),
        &gather(&balanced, &id_split.val),
        seed,
    )?;
    let id_acc = accuracy_batched_with(
        spec,
        &id_model.params,
        &gather(&balanced, &id_split.test),
        cfg.eval_batch,
        Some(&id_model.statistics),
    )?;

    let ood_split = PooledSplit::new(&balanced, &source, cfg, false, seed ^ 0x00d);
    ood_split.audit()?;
    let ood_model = train_supervised(
        spec,
        hp,
        cfg,
        &gather(&balanced, &ood_split.train),
        &gather(&balanced, &ood_split.val),
        seed.wrapping_add(1),
    )?;
    let mut ood = BTreeMap::new();
    for &t in &target {
        let d = &balanced[t];
        ood.insert(
            d.domain_id().to_string(),
            accuracy_batched_with(
                spec,
                &ood_model.params,
                d.examples(),
                cfg.eval_batch,
                Some(&ood_model.statistics),
            )?,
        );
    }

    let tt_split = PooledSplit::new(&balanced, &target, cfg, true, seed ^ 0x1d7e57);
    tt_split.audit()?;
    let tt_model = train_supervised(
        spec,
        hp,
        cfg,
        &gather(&balanced, &tt_split.train),
        &gather(&balanced, &tt_split.val),
        seed.wrapping_add(2),
    )?;
    let tt_acc = accuracy_batched_with(
        spec,
        &tt_model.params,
        &gather(&balanced, &tt_split.test),
        cfg.eval_batch,
        Some(&tt_model.statistics),
    )?;

    Ok(StandardLearningReports {
        id: MetricsReport::new(Protocol::Id, [("source".to_string(), id_acc)].into())?,
        ood: MetricsReport::new(Protocol::Ood, ood)?,
        id_test: MetricsReport::new(Protocol::IdTest, [("target".to_string(), tt_acc)].into())?,
    })
}

/// Sampled supports averaged per target domain by [`meta_test`].
pub const META_TEST_SUPPORTS: usize = 5;

fn domain_seed(seed: u64, domain_id: &str) -> u64 {
    // FNV-1a over the id keeps each domain's stream independent of the
    // other domains in the list.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in domain_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

/// One-class meta-testing: per target domain, adapt `k` inner steps of size
/// `alpha` from `params` on `shots` normal-class examples and score the
/// balanced remainder, averaged over `supports` sampled supports.
#[allow(clippy::too_many_arguments)]
pub fn meta_test_with(
    spec: &ModelSpec,
    params: &ParameterVector,
    targets: &[DomainDataset],
    normal_class: usize,
    shots: usize,
    alpha: f64,
    k: usize,
    supports: usize,
    seed: u64,
) -> Result<MetricsReport> {
    if targets.is_empty() {
        return Err(Error::Config("no target domains to evaluate".into()));
    }
    if supports == 0 {
        return Err(Error::Config(
            "at least one support per domain is needed".into(),
        ));
    }
    let per_domain = targets
        .par_iter()
        .map(|d| {
            let mut rng = seeded_rng(domain_seed(seed, d.domain_id()));
            let mut sum = 0.0;
            for _ in 0..supports {
                let task = build_meta_test_task(d, normal_class, shots, &mut rng)?;
                let phi = if task.support.is_empty() || alpha == 0.0 || k == 0 {
                    params.clone()
                } else {
                    inner_adapt(spec, params, &task.support, alpha, k)?
                };
                sum += accuracy(spec, &phi, &task.query)?;
            }
            Ok((d.domain_id().to_string(), sum / supports as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut map = BTreeMap::new();
    for (id, acc) in per_domain {
        if map.insert(id.clone(), acc).is_some() {
            return Err(Error::Config(format!("target domain {id} listed twice")));
        }
    }
    MetricsReport::new(Protocol::MetaTest, map)
}

/// [`meta_test_with`] using the training-time `alpha`, `k` and
/// [`META_TEST_SUPPORTS`].
pub fn meta_test(
    spec: &ModelSpec,
    params: &ParameterVector,
    targets: &[DomainDataset],
    normal_class: usize,
    shots: usize,
    hp: &HyperParams,
    seed: u64,
) -> Result<MetricsReport> {
    meta_test_with(
        spec,
        params,
        targets,
        normal_class,
        shots,
        hp.inner_lr,
        hp.inner_steps,
        META_TEST_SUPPORTS,
        seed,
    )
}

/// Output format of [`emit_results_table`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Text,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TableFormat::Csv),
            "text" | "txt" => Ok(TableFormat::Text),
            other => Err(Error::Config(format!("unsupported table format {other:?}"))),
        }
    }
}

/// One table cell: the aggregate of `report` at `(row, column)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TableEntry {
    pub row: String,
    pub column: String,
    pub report: MetricsReport,
}

impl TableEntry {
    pub fn new(row: impl Into<String>, column: impl Into<String>, report: MetricsReport) -> Self {
        Self {
            row: row.into(),
            column: column.into(),
            report,
        }
    }
}

/// A rectangular table of accuracies in percent; missing cells are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    pub row_header: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

/// Label of the appended mean row.
pub const AVERAGE_ROW: &str = "Average";

impl ResultsTable {
    /// Rows and columns in first-appearance order; with more than one row a
    /// column-wise mean row is appended.
    pub fn from_entries(row_header: &str, entries: &[TableEntry]) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut columns: Vec<String> = Vec::new();
        let mut row_names: Vec<String> = Vec::new();
        for e in entries {
            if !columns.contains(&e.column) {
                columns.push(e.column.clone());
            }
            if !row_names.contains(&e.row) {
                row_names.push(e.row.clone());
            }
        }
        let mut rows: Vec<(String, Vec<Option<f64>>)> = row_names
            .iter()
            .map(|r| (r.clone(), vec![None; columns.len()]))
            .collect();
        for e in entries {
            let r = row_names.iter().position(|x| *x == e.row).expect("row");
            let c = columns.iter().position(|x| *x == e.column).expect("column");
            if rows[r].1[c].is_some() {
                return Err(Error::Config(format!(
                    "duplicate cell ({}, {})",
                    e.row, e.column
                )));
            }
            rows[r].1[c] = Some(100.0 * e.report.aggregate);
        }
        if rows.len() > 1 {
            let mean = (0..columns.len())
                .map(|c| {
                    let vals: Vec<f64> = rows.iter().filter_map(|r| r.1[c]).collect();
                    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
                })
                .collect();
            rows.push((AVERAGE_ROW.to_string(), mean));
        }
        Ok(Self {
            row_header: row_header.to_string(),
            columns,
            rows,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![self.row_header.clone()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (name, cells) in &self.rows {
            let mut rec = vec![name.clone()];
            rec.extend(
                cells
                    .iter()
                    .map(|c| c.map(|v| v.to_string()).unwrap_or_default()),
            );
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn to_text(&self) -> String {
        let cell = |c: &Option<f64>| c.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
        let mut grid: Vec<Vec<String>> = Vec::with_capacity(self.rows.len() + 1);
        let mut header = vec![self.row_header.clone()];
        header.extend(self.columns.iter().cloned());
        grid.push(header);
        for (name, cells) in &self.rows {
            let mut line = vec![name.clone()];
            line.extend(cells.iter().map(cell));
            grid.push(line);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, line) in grid.iter().enumerate() {
            let parts: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, &w))| {
                    if c == 0 {
                        format!("{s:<w$}")
                    } else {
                        format!("{s:>w$}")
                    }
                })
                .collect();
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out
    }

    /// Parses a table written by [`Self::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let path = std::path::Path::new("<results table>");
        let header = r
            .headers()
            .map_err(|e| Error::format(path, None, e.to_string()))?
            .clone();
        let mut it = header.iter();
        let row_header = it
            .next()
            .ok_or_else(|| Error::format(path, None, "empty header"))?
            .to_string();
        let columns: Vec<String> = it.map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| {
                let offset = e.position().map(|p| p.byte());
                Error::format(path, offset, e.to_string())
            })?;
            let offset = rec.position().map(|p| p.byte());
            let name = rec.get(0).unwrap_or_default().to_string();
            let cells = rec
                .iter()
                .skip(1)
                .map(|s| {
                    if s.is_empty() {
                        Ok(None)
                    } else {
                        s.parse::<f64>()
                            .map(Some)
                            .map_err(|e| Error::format(path, offset, format!("{s:?}: {e}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push((name, cells));
        }
        Ok(Self {
            row_header,
            columns,
            rows,
        })
    }
}

/// Renders `entries` as a CSV (full precision) or aligned text (two
/// decimals) table of accuracies in percent.
pub fn emit_results_table(entries: &[TableEntry], format: &str) -> Result<String> {
    let format: TableFormat = format.parse()?;
    let table = ResultsTable::from_entries("row", entries)?;
    Ok(match format {
        TableFormat::Csv => table.to_csv(),
        TableFormat::Text => table.to_text(),
    })
}
