//! Dataset ingestion, synthetic tasks, experiment matrices and reports.

pub mod manifest;
pub mod matrix;
pub mod report;
pub mod synth;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adaptation::{run_stream, LabeledImage, StreamConfig};
use crate::backbone::{BackendConfig, CallbackBackend, DualEncoder, ToyBackend};
use crate::context::ContextStore;
use crate::error::{Error, Result};
use crate::prompts::ClassVocabulary;
pub use manifest::{load_manifest, DatasetManifest, ManifestRecord, Split};
pub use report::{ReportFormat, RunReport};
pub use synth::{generate_synthetic, SyntheticTask, SyntheticTaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Toy,
    /// The toy weights routed through the callback adapter.
    Adapter,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(BackendKind::Toy),
            "adapter" => Ok(BackendKind::Adapter),
            other => Err(Error::Config(format!("unknown backend `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Manifests { test: PathBuf, labeled: PathBuf },
    Synthetic(SyntheticTaskSpec),
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub backend_config: BackendConfig,
    pub data: DataSource,
    pub pool_seed: u64,
    pub stream: StreamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Toy,
            backend_config: BackendConfig::default(),
            data: DataSource::Synthetic(SyntheticTaskSpec::default()),
            pool_seed: 0,
            stream: StreamConfig {
                adaptation: Default::default(),
                prompt: Default::default(),
                context: Default::default(),
            },
        }
    }
}

/// Loaded class list and both splits.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub class_names: Vec<String>,
    pub labeled: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl TaskData {
    pub fn load<B: DualEncoder>(source: &DataSource, backend: &B) -> Result<Self> {
        match source {
            DataSource::Synthetic(spec) => Ok(generate_synthetic(backend, spec)?.into()),
            DataSource::Manifests { test, labeled } => {
                let labeled = load_manifest(labeled, Split::LabeledPool)?;
                let test = load_manifest(test, Split::Test)?;
                let mut class_names = labeled.class_list.clone();
                for c in &test.class_list {
                    if !class_names.contains(c) {
                        class_names.push(c.clone());
                    }
                }
                let cfg = backend.config();
                Ok(Self {
                    labeled: labeled.load_images(&class_names, cfg)?,
                    test: test.load_images(&class_names, cfg)?,
                    class_names,
                })
            }
        }
    }
}

impl From<SyntheticTask> for TaskData {
    fn from(t: SyntheticTask) -> Self {
        Self {
            class_names: t.class_names,
            labeled: t.labeled,
            test: t.test,
        }
    }
}

/// Run one stream on already-loaded data.
pub fn run_on<B: DualEncoder>(
    backend: &B,
    config: &RunConfig,
    data: &TaskData,
) -> Result<RunReport> {
    let digest_before = backend.weight_digest();
    let vocab = ClassVocabulary::new(data.class_names.clone(), backend)?;
    let labels: Vec<usize> = data.labeled.iter().map(|l| l.class).collect();
    let store = ContextStore::new(labels, &data.class_names, config.pool_seed)?;
    let outcome = run_stream(
        backend,
        &vocab,
        &data.test,
        &data.labeled,
        &store,
        &config.stream,
    )?;
    let digest_after = backend.weight_digest();
    let pool = store
        .pool
        .entries
        .iter()
        .map(|&i| data.labeled[i].image.id.clone())
        .collect();
    Ok(RunReport::new(
        config.clone(),
        data.class_names.clone(),
        pool,
        outcome,
        digest_before,
        digest_after,
    ))
}

/// Build the configured backend and hand it to `f`.
pub fn with_backend<T>(
    kind: BackendKind,
    config: &BackendConfig,
    f: impl FnOnce(&dyn BackendRunner) -> Result<T>,
) -> Result<T> {
    let toy = ToyBackend::new(config.clone())?;
    match kind {
        BackendKind::Toy => f(&toy),
        BackendKind::Adapter => f(&CallbackBackend::wrapping(Arc::new(toy))),
    }
}

/// Object-safe view of a backend for the harness entry points.
pub trait BackendRunner: Sync {
    fn load(&self, source: &DataSource) -> Result<TaskData>;
    fn run(&self, config: &RunConfig, data: &TaskData) -> Result<RunReport>;
}

impl<B: DualEncoder> BackendRunner for B {
    fn load(&self, source: &DataSource) -> Result<TaskData> {
        TaskData::load(source, self)
    }

    fn run(&self, config: &RunConfig, data: &TaskData) -> Result<RunReport> {
        run_on(self, config, data)
    }
}

/// Load data and run one stream from a config.
pub fn run(config: &RunConfig) -> Result<RunReport> {
    with_backend(config.backend, &config.backend_config, |b| {
        let data = b.load(&config.data)?;
        b.run(config, &data)
    })
}

/// Re-run a report from its config echo.
pub fn reproduce(report: &RunReport) -> Result<RunReport> {
    run(&report.body.config)
}
