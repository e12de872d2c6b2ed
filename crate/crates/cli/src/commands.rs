//! The five subcommands and the on-disk layout they share.
//!
//! ```text
//! <out>/data/manifest.json            prepared domains
//! <out>/data/domains/<id>.bin
//! <out>/runs/<run>/seed-<s>/          checkpoint.bin, history.csv,
//!                                     alignment.csv, manifest.json
//! <out>/results/                      table.csv, table.txt, seed-<s>.csv,
//!                                     summary.json
//! <out>/analysis/<run>/seed-<s>/      residuals.csv, alignment.csv,
//!                                     summary.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ocda_core::analysis::{
    alignment_csv, gradient_alignment, residual_csv, residual_scaling, AnalysisSummary,
};
use ocda_core::data::{
    build_rainbow_domains_with, generate_pump_domains, leave_one_unit_out, load_csv_spectra,
    load_idx, read_domain, split_domains, write_domain, DomainDescriptor, DomainSplit,
    SpectrumConfig,
};
use ocda_core::eval::{
    meta_test_with, run_standard_learning_protocol, train_supervised, MetricsReport, PooledSplit,
    ResultsTable, TableEntry,
};
use ocda_core::meta::{sample_task, train_from, Strategy, TrainState};
use ocda_core::models::init_params;
use ocda_core::tasks::DomainDataset;
use ocda_core::{seeded_rng, Error};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::config::{DatasetConfig, ExperimentConfig, Method, ResolvedConfig, SplitConfig};

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, contents).map_err(io(path))?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s
}

/// A loaded configuration with its resolved form and hash.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub resolved: ResolvedConfig,
    pub hash: String,
    pub out: PathBuf,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>) -> Result<Self> {
        let resolved = config.resolve()?;
        let hash = resolved.hash();
        let out = out.unwrap_or_else(|| config.output.clone());
        Ok(Self {
            config,
            resolved,
            hash,
            out,
        })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn run_name(&self) -> String {
        match self.resolved.normal_class {
            Some(n) => format!("{}-class{n}", self.resolved.method.name()),
            None => self.resolved.method.name().to_string(),
        }
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.out
            .join("runs")
            .join(self.run_name())
            .join(format!("seed-{seed}"))
    }

    pub fn results_dir(&self) -> PathBuf {
        self.out.join("results")
    }

    pub fn analysis_dir(&self, seed: u64) -> PathBuf {
        self.out
            .join("analysis")
            .join(self.run_name())
            .join(format!("seed-{seed}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub domain_id: String,
    pub descriptor: DomainDescriptor,
    pub file: String,
    pub examples: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub dataset_hash: String,
    pub class_count: usize,
    pub domains: Vec<DomainEntry>,
}

fn materialize(dataset: &DatasetConfig) -> Result<Vec<DomainDataset>> {
    Ok(match dataset {
        DatasetConfig::Rainbow {
            mnist_dir,
            per_class,
            seed,
        } => {
            let mut examples = load_idx(
                mnist_dir.join("train-images-idx3-ubyte"),
                mnist_dir.join("train-labels-idx1-ubyte"),
            )?;
            examples.extend(load_idx(
                mnist_dir.join("t10k-images-idx3-ubyte"),
                mnist_dir.join("t10k-labels-idx1-ubyte"),
            )?);
            build_rainbow_domains_with(&examples, *seed, *per_class)?
        }
        DatasetConfig::SyntheticPump {
            domains,
            per_class,
            seed,
            spectrum,
        } => generate_pump_domains(
            &spectrum.clone().unwrap_or_else(SpectrumConfig::default),
            *domains,
            *per_class,
            *seed,
        )?,
        DatasetConfig::Csv { files, schema } => {
            let schema = schema.clone().unwrap_or_default();
            files
                .iter()
                .map(|f| load_csv_spectra(f, &schema))
                .collect::<ocda_core::Result<_>>()?
        }
    })
}

/// Writes every domain and the manifest; returns the manifest's hash.
pub fn prepare(exp: &Experiment) -> Result<String> {
    let domains = materialize(&exp.resolved.dataset)?;
    let dir = exp.data_dir();
    let domain_dir = dir.join("domains");
    fs::create_dir_all(&domain_dir).map_err(io(&domain_dir))?;
    let mut entries = Vec::with_capacity(domains.len());
    for d in &domains {
        let file = format!("{}.bin", d.domain_id());
        let path = domain_dir.join(&file);
        write_domain(&path, d)?;
        let bytes = fs::read(&path).map_err(io(&path))?;
        entries.push(DomainEntry {
            domain_id: d.domain_id().to_string(),
            descriptor: d.descriptor().clone(),
            file: format!("domains/{file}"),
            examples: d.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = DataManifest {
        dataset_hash: exp.resolved.dataset_hash(),
        class_count: exp.resolved.dataset.class_count(),
        domains: entries,
    };
    let text = to_json(&manifest);
    write_file(&dir.join("manifest.json"), &text)?;
    Ok(sha256_hex(text.as_bytes()))
}

/// Prepared domains in manifest order, with integrity checks.
pub fn load_prepared(exp: &Experiment) -> Result<(DataManifest, String, Vec<DomainDataset>)> {
    let dir = exp.data_dir();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|_| {
        config_error(format!(
            "prepared data not found at {}; run `prepare` first",
            path.display()
        ))
    })?;
    let manifest: DataManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        offset: None,
        message: e.to_string(),
    })?;
    if manifest.dataset_hash != exp.resolved.dataset_hash() {
        return Err(config_error(
            "prepared data was built from a different dataset block; rerun `prepare`",
        ));
    }
    let mut domains = Vec::with_capacity(manifest.domains.len());
    for e in &manifest.domains {
        let p = dir.join(&e.file);
        let bytes = fs::read(&p).map_err(io(&p))?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(Error::Format {
                path: p,
                offset: None,
                message: "content hash differs from the manifest".into(),
            }
            .into());
        }
        domains.push(read_domain(&p)?);
    }
    Ok((manifest, sha256_hex(text.as_bytes()), domains))
}

pub fn resolve_split(split: &SplitConfig, domains: &[DomainDataset]) -> Result<DomainSplit> {
    let ids: Vec<String> = domains.iter().map(|d| d.domain_id().to_string()).collect();
    let split = match split {
        SplitConfig::Counts {
            train,
            validation,
            test,
            seed,
        } => split_domains(&ids, (*train, *validation, *test), *seed)?,
        SplitConfig::Explicit {
            train,
            validation,
            test,
        } => {
            let s = DomainSplit::explicit(train.clone(), validation.clone(), test.clone())?;
            if let Some(missing) = s.all().find(|id| !ids.contains(id)) {
                return Err(config_error(format!(
                    "split names unknown domain {missing}"
                )));
            }
            s
        }
        SplitConfig::LeaveOneUnitOut {
            unit,
            source_surface,
        } => {
            let descriptors: Vec<&DomainDescriptor> =
                domains.iter().map(|d| d.descriptor()).collect();
            leave_one_unit_out(&descriptors, *unit, *source_surface)?
        }
    };
    Ok(split)
}

fn pick(domains: &[DomainDataset], ids: &[String]) -> Vec<DomainDataset> {
    ids.iter()
        .filter_map(|id| domains.iter().find(|d| d.domain_id() == id))
        .cloned()
        .collect()
}

/// Per-run provenance written next to each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub data_manifest_hash: String,
    pub config: ResolvedConfig,
    pub split: DomainSplit,
    pub iterations: usize,
    pub best_iteration: usize,
    pub stopped_early: bool,
}

fn with_provenance(csv: &str, hash: &str, seed: u64) -> String {
    let mut out = String::with_capacity(csv.len() * 2);
    for (i, line) in csv.lines().enumerate() {
        out.push_str(line);
        if i == 0 {
            out.push_str(",config_hash,seed\n");
        } else {
            out.push_str(&format!(",{hash},{seed}\n"));
        }
    }
    out
}

/// Trains one model per seed and writes its artifacts; returns the run
/// directories.
pub fn train(exp: &Experiment, seeds: &[u64]) -> Result<Vec<PathBuf>> {
    let (_, data_hash, domains) = load_prepared(exp)?;
    let split = resolve_split(&exp.resolved.split, &domains)?;
    let train_domains = pick(&domains, &split.train);
    let val_domains = pick(&domains, &split.validation);
    let r = &exp.resolved;
    let mut dirs = Vec::new();
    for &seed in seeds {
        let (params, state, history_csv, alignment, iterations, best, stopped, norm_statistics) =
            match r.method {
                Method::Maml | Method::OcdaMaml => {
                    let strategy = if r.method == Method::Maml {
                        Strategy::Standard
                    } else {
                        Strategy::Ocda
                    };
                    let out = train_from(
                        &r.model,
                        &r.hyper,
                        init_params(&r.model, seed),
                        &train_domains,
                        &val_domains,
                        strategy,
                        r.normal_class,
                        seed,
                    )
                    .with_context(|| format!("training seed {seed}"))?;
                    (
                        out.params,
                        out.state.clone(),
                        out.history.to_csv(),
                        Some(out.history.alignment_csv()),
                        out.state.iteration,
                        out.history.best_iteration,
                        out.history.stopped_early,
                        None,
                    )
                }
                Method::StandardLearning => {
                    let all: Vec<DomainDataset> =
                        train_domains.iter().chain(&val_domains).cloned().collect();
                    let idx: Vec<usize> = (0..all.len()).collect();
                    let pooled = PooledSplit::new(&all, &idx, &r.protocol, false, seed);
                    pooled.audit()?;
                    let take = |refs: &[(usize, usize)]| -> Vec<_> {
                        refs.iter()
                            .map(|&(d, i)| all[d].examples()[i].clone())
                            .collect()
                    };
                    let out = train_supervised(
                        &r.model,
                        &r.hyper,
                        &r.protocol,
                        &take(&pooled.train),
                        &take(&pooled.val),
                        seed,
                    )
                    .with_context(|| format!("training seed {seed}"))?;
                    let mut csv = String::from("step,val_loss\n");
                    for (s, l) in &out.history {
                        csv.push_str(&format!("{s},{l}\n"));
                    }
                    let last = out.history.last().map_or(0, |h| h.0);
                    (
                        out.params.clone(),
                        TrainState::new(out.params),
                        csv,
                        None,
                        last,
                        out.best_step,
                        out.stopped_early,
                        Some(out.statistics),
                    )
                }
            };
        if !params.is_finite() {
            return Err(Error::Numeric(format!("seed {seed}: non-finite parameters")).into());
        }
        let dir = exp.run_dir(seed);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let ckpt = Checkpoint {
            header: CheckpointHeader {
                method: r.method,
                normal_class: r.normal_class,
                seed,
                config_hash: exp.hash.clone(),
                architecture_hash: r.model.architecture_hash(),
                model: r.model.clone(),
                layout: r.model.layout(),
                hyper: r.hyper.clone(),
                iteration: iterations,
                best_iteration: best,
                norm_statistics,
            },
            params,
            state,
        };
        ckpt.write(&dir.join("checkpoint.bin"))?;
        write_file(
            &dir.join("history.csv"),
            with_provenance(&history_csv, &exp.hash, seed),
        )?;
        if let Some(a) = alignment {
            write_file(
                &dir.join("alignment.csv"),
                with_provenance(&a, &exp.hash, seed),
            )?;
        }
        let manifest = RunManifest {
            config_hash: exp.hash.clone(),
            seed,
            data_manifest_hash: data_hash.clone(),
            config: r.clone(),
            split: split.clone(),
            iterations,
            best_iteration: best,
            stopped_early: stopped,
        };
        write_file(&dir.join("manifest.json"), to_json(&manifest))?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Checkpoint files named directly, or found one level below a run
/// directory (`seed-*/checkpoint.bin`).
pub fn find_checkpoints(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for p in paths {
        if p.is_file() {
            found.push(p.clone());
        } else if p.join("checkpoint.bin").is_file() {
            found.push(p.join("checkpoint.bin"));
        } else if p.is_dir() {
            let mut inner: Vec<PathBuf> = fs::read_dir(p)
                .map_err(io(p))?
                .filter_map(|e| e.ok().map(|e| e.path().join("checkpoint.bin")))
                .filter(|c| c.is_file())
                .collect();
            inner.sort();
            found.extend(inner);
        }
    }
    if found.is_empty() {
        return Err(config_error("no checkpoints found; run `train` first"));
    }
    Ok(found)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluatedCheckpoint {
    pub path: String,
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    pub row: String,
    pub column: String,
    pub reports: Vec<MetricsReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultsSummary {
    pub config_hash: String,
    pub data_manifest_hash: String,
    pub seeds: Vec<u64>,
    pub target_domains: Vec<String>,
    pub checkpoints: Vec<EvaluatedCheckpoint>,
    /// Seed means, keyed by `row/column`.
    pub means: BTreeMap<String, MetricsReport>,
}

fn row_label(exp: &Experiment, normal: Option<usize>) -> String {
    match (&exp.resolved.split, normal) {
        (SplitConfig::LeaveOneUnitOut { unit, .. }, _) => format!("P{unit}"),
        (_, Some(n)) => n.to_string(),
        (_, None) => "all".into(),
    }
}

fn seed_table(entries: &[TableEntry]) -> Result<String> {
    Ok(ResultsTable::from_entries("row", entries)?.to_csv())
}

/// Meta-tests every checkpoint (or runs the standard-learning protocol) on
/// the target domains and writes seed-mean tables.
pub fn evaluate(exp: &Experiment, checkpoint_paths: &[PathBuf]) -> Result<ResultsSummary> {
    let (_, data_hash, domains) = load_prepared(exp)?;
    let split = resolve_split(&exp.resolved.split, &domains)?;
    let targets = pick(&domains, &split.test);
    if targets.is_empty() {
        return Err(config_error("the split has no target domains"));
    }
    let r = &exp.resolved;
    let default_dir = exp.out.join("runs").join(exp.run_name());
    let paths = if checkpoint_paths.is_empty() {
        find_checkpoints(&[default_dir])?
    } else {
        find_checkpoints(checkpoint_paths)?
    };
    let arch = r.model.architecture_hash();
    let mut evaluated = Vec::new();
    for path in &paths {
        let ckpt = Checkpoint::read(path)?;
        let h = &ckpt.header;
        if h.architecture_hash != arch {
            return Err(config_error(format!(
                "{}: architecture hash {} does not match the configured model {arch}",
                path.display(),
                h.architecture_hash
            )));
        }
        let (row, reports) = match h.method {
            Method::StandardLearning => {
                let rep = run_standard_learning_protocol(
                    &r.model,
                    &h.hyper,
                    &r.protocol,
                    &split,
                    &domains,
                    h.seed,
                )?;
                (row_label(exp, None), vec![rep.id, rep.ood, rep.id_test])
            }
            Method::Maml | Method::OcdaMaml => {
                let normal = h.normal_class.or(r.normal_class).ok_or_else(|| {
                    config_error("one-class meta-testing needs method.normal_class")
                })?;
                let rep = meta_test_with(
                    &r.model,
                    &ckpt.params,
                    &targets,
                    normal,
                    r.meta_test_shots(),
                    r.meta_test_alpha(),
                    r.meta_test_steps(),
                    r.evaluation.supports,
                    h.seed,
                )?;
                (row_label(exp, Some(normal)), vec![rep])
            }
        };
        evaluated.push(EvaluatedCheckpoint {
            path: path.display().to_string(),
            method: h.method,
            seed: h.seed,
            config_hash: h.config_hash.clone(),
            row,
            column: h.method.label().to_string(),
            reports,
        });
    }

    // Group cells across seeds.
    let mut groups: BTreeMap<(String, String, usize), Vec<MetricsReport>> = BTreeMap::new();
    let mut order: Vec<(String, String, usize)> = Vec::new();
    for e in &evaluated {
        for (i, rep) in e.reports.iter().enumerate() {
            let key = (e.row.clone(), e.column.clone(), i);
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(rep.clone());
        }
    }
    let mut entries = Vec::new();
    let mut means = BTreeMap::new();
    for key in &order {
        let mean = MetricsReport::mean_over_seeds(&groups[key])?;
        let (row, column) = cell_names(key, &mean);
        means.insert(format!("{row}/{column}"), mean.clone());
        entries.push(TableEntry::new(row, column, mean));
    }
    let table = ResultsTable::from_entries("row", &entries)?;
    let dir = exp.results_dir();
    write_file(&dir.join("table.csv"), table.to_csv())?;
    write_file(&dir.join("table.txt"), table.to_text())?;

    let mut seeds: Vec<u64> = evaluated.iter().map(|e| e.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    for &seed in &seeds {
        let per_seed: Vec<TableEntry> = evaluated
            .iter()
            .filter(|e| e.seed == seed)
            .flat_map(|e| {
                e.reports.iter().enumerate().map(|(i, rep)| {
                    let (row, column) = cell_names(&(e.row.clone(), e.column.clone(), i), rep);
                    TableEntry::new(row, column, rep.clone())
                })
            })
            .collect();
        write_file(
            &dir.join(format!("seed-{seed}.csv")),
            seed_table(&per_seed)?,
        )?;
    }
    let summary = ResultsSummary {
        config_hash: exp.hash.clone(),
        data_manifest_hash: data_hash,
        seeds,
        target_domains: split.test.clone(),
        checkpoints: evaluated,
        means,
    };
    write_file(&dir.join("summary.json"), to_json(&summary))?;
    Ok(summary)
}

/// Standard-learning reports become rows ID / OOD / ID-test.
fn cell_names(key: &(String, String, usize), rep: &MetricsReport) -> (String, String) {
    use ocda_core::eval::Protocol;
    match rep.protocol {
        Protocol::MetaTest => (key.0.clone(), key.1.clone()),
        p => (p.to_string(), key.1.clone()),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint: Option<String>,
    pub task_domains: Vec<String>,
    pub summary: AnalysisSummary,
}

/// Taylor residual scaling on the first sampled validation task and
/// gradient alignment over all of them, at a checkpoint's parameters (or
/// the seed's initialization when `checkpoint` is `None`).
pub fn analyze(exp: &Experiment, checkpoint: Option<&Path>, seed: u64) -> Result<AnalysisReport> {
    let (_, _, domains) = load_prepared(exp)?;
    let split = resolve_split(&exp.resolved.split, &domains)?;
    let r = &exp.resolved;
    let (params, seed) = match checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::read(p)?;
            if ckpt.header.architecture_hash != r.model.architecture_hash() {
                return Err(config_error(format!(
                    "{}: checkpoint does not match the configured model",
                    p.display()
                )));
            }
            (ckpt.params, ckpt.header.seed)
        }
        None => (init_params(&r.model, seed), seed),
    };
    let mut pool = pick(&domains, &split.validation);
    if pool.is_empty() {
        pool = pick(&domains, &split.train);
    }
    if pool.is_empty() {
        return Err(config_error(
            "the split has no validation or training domains",
        ));
    }
    let strategy = if r.method == Method::OcdaMaml {
        Strategy::Ocda
    } else {
        Strategy::Standard
    };
    let mut rng = seeded_rng(seed ^ 0xa7a1_7515);
    let mut tasks = Vec::new();
    let mut task_domains = Vec::new();
    for d in &pool {
        for _ in 0..r.analysis.tasks_per_domain.max(1) {
            tasks.push(sample_task(
                d,
                strategy,
                r.normal_class,
                r.hyper.shots,
                &mut rng,
            )?);
            task_domains.push(d.domain_id().to_string());
        }
    }
    let residuals = residual_scaling(&r.model, &params, &tasks[0], &r.analysis.alphas)?;
    let alignments = tasks
        .iter()
        .map(|t| gradient_alignment(&r.model, &params, t))
        .collect::<ocda_core::Result<Vec<_>>>()?;
    let summary = AnalysisSummary::new(residuals, alignments);
    let dir = exp.analysis_dir(seed);
    write_file(
        &dir.join("residuals.csv"),
        with_provenance(&residual_csv(&summary.residuals), &exp.hash, seed),
    )?;
    write_file(
        &dir.join("alignment.csv"),
        with_provenance(&alignment_csv(&summary.alignments), &exp.hash, seed),
    )?;
    let report = AnalysisReport {
        config_hash: exp.hash.clone(),
        seed,
        checkpoint: checkpoint.map(|p| p.display().to_string()),
        task_domains,
        summary,
    };
    write_file(&dir.join("summary.json"), to_json(&report))?;
    Ok(report)
}

/// Renders the evaluated table as aligned text.
pub fn report(exp: &Experiment) -> Result<String> {
    let path = exp.results_dir().join("table.csv");
    let text = fs::read_to_string(&path).map_err(|_| {
        config_error(format!(
            "{} not found; run `evaluate` first",
            path.display()
        ))
    })?;
    let table = ResultsTable::from_csv(&text)?;
    let mut out = format!("config {}\n", exp.hash);
    out.push_str(&table.to_text());
    write_file(&exp.results_dir().join("report.txt"), &out)?;
    Ok(out)
}
