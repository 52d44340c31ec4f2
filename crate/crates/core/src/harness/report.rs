//! Run reports: JSON per run, one CSV row per run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunConfig;
use crate::adaptation::{SampleRecord, StreamOutcome};
use crate::error::{Error, Result};
use crate::objective::ForwardCounter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub pool: u64,
    pub adaptation: u64,
    pub prompt: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBody {
    pub config: RunConfig,
    pub seeds: Seeds,
    pub class_names: Vec<String>,
    /// Candidate pool as labeled-sample ids.
    pub pool: Vec<String>,
    pub correct: usize,
    pub total: usize,
    pub accuracy: Option<f64>,
    pub failures: usize,
    pub forward: ForwardCounter,
    pub weight_digest_before: String,
    pub weight_digest_after: String,
    pub records: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// SHA-256 over the canonical JSON of `body`.
    pub digest: String,
    #[serde(flatten)]
    pub body: ReportBody,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

/// Four-decimal presentation of `correct / total`; empty when undefined.
pub fn display_accuracy(correct: usize, total: usize) -> String {
    if total == 0 {
        String::new()
    } else {
        format!("{:.4}", correct as f64 / total as f64)
    }
}

fn body_digest(body: &ReportBody) -> String {
    let bytes = serde_json::to_vec(body).expect("report serializes");
    hex::encode(Sha256::digest(&bytes))
}

impl RunReport {
    pub fn new(
        config: RunConfig,
        class_names: Vec<String>,
        pool: Vec<String>,
        outcome: StreamOutcome,
        weight_digest_before: String,
        weight_digest_after: String,
    ) -> Self {
        let seeds = Seeds {
            pool: config.pool_seed,
            adaptation: config.stream.adaptation.seed,
            prompt: config.stream.prompt.seed,
        };
        let failures = outcome
            .records
            .iter()
            .filter(|r| r.failure.is_some())
            .count();
        let body = ReportBody {
            config,
            seeds,
            class_names,
            pool,
            correct: outcome.correct,
            total: outcome.total,
            accuracy: outcome.accuracy,
            failures,
            forward: outcome.counter,
            weight_digest_before,
            weight_digest_after,
            records: outcome.records,
        };
        Self {
            digest: body_digest(&body),
            body,
        }
    }

    /// True when the stored digest matches the body.
    pub fn verify(&self) -> bool {
        body_digest(&self.body) == self.digest
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

pub const CSV_HEADER: [&str; 17] = [
    "name",
    "mode",
    "objective",
    "variant",
    "label_mode",
    "strategy",
    "n_context",
    "lambda",
    "lr",
    "seed",
    "pool_seed",
    "correct",
    "total",
    "accuracy",
    "failures",
    "vision_calls",
    "digest",
];

pub fn csv_row(name: &str, r: &RunReport) -> Vec<String> {
    let b = &r.body;
    let s = &b.config.stream;
    vec![
        name.to_string(),
        s.adaptation.mode.name().to_string(),
        s.adaptation.objective.name().to_string(),
        s.prompt.variant.name().to_string(),
        s.context.label_mode.name().to_string(),
        format!("{:?}", s.context.strategy).to_lowercase(),
        s.context.n_context.to_string(),
        s.adaptation.lambda.to_string(),
        s.adaptation.lr.to_string(),
        s.adaptation.seed.to_string(),
        b.config.pool_seed.to_string(),
        b.correct.to_string(),
        b.total.to_string(),
        display_accuracy(b.correct, b.total),
        b.failures.to_string(),
        b.forward.vision.to_string(),
        r.digest.clone(),
    ]
}

/// CSV text with a header and one row per named report.
pub fn csv_table(reports: &[(String, RunReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(wrap)?;
    for (name, r) in reports {
        w.write_record(csv_row(name, r)).map_err(wrap)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Write reports under `dir`: `<name>.json` each, or a single `summary.csv`.
pub fn emit_report(
    reports: &[(String, RunReport)],
    format: ReportFormat,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::Config("no reports to emit".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match format {
        ReportFormat::Json => reports
            .iter()
            .map(|(name, r)| {
                let path = dir.join(format!("{name}.json"));
                r.write_json(&path)?;
                Ok(path)
            })
            .collect(),
        ReportFormat::Csv => {
            let path = dir.join("summary.csv");
            std::fs::write(&path, csv_table(reports)?).map_err(|e| Error::io(&path, e))?;
            Ok(vec![path])
        }
    }
}
