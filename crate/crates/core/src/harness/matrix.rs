//! Ablation matrices over one base configuration.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{csv_row, CSV_HEADER};
use super::{with_backend, RunConfig, RunReport, TaskData};
use crate::adaptation::AdaptMode;
use crate::context::{example_count_grid, LabelMode, StrategyKind};
use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::prompts::PromptVariant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixAxis {
    NContext(Vec<usize>),
    LabelModes {
        modes: Vec<LabelMode>,
        seeds: Vec<u64>,
    },
    Strategies {
        strategies: Vec<StrategyKind>,
        seeds: Vec<u64>,
    },
    Variants(Vec<PromptVariant>),
    Components(Vec<Objective>),
    Modes(Vec<AdaptMode>),
}

impl MatrixAxis {
    pub fn name(&self) -> &'static str {
        match self {
            MatrixAxis::NContext(_) => "n_context",
            MatrixAxis::LabelModes { .. } => "label_mode",
            MatrixAxis::Strategies { .. } => "strategy",
            MatrixAxis::Variants(_) => "variant",
            MatrixAxis::Components(_) => "objective",
            MatrixAxis::Modes(_) => "mode",
        }
    }

    /// The full grid of every axis with `n_seeds` seeds where seeds apply.
    pub fn all(n_seeds: u64) -> Vec<MatrixAxis> {
        let seeds: Vec<u64> = (0..n_seeds).collect();
        vec![
            MatrixAxis::Components(vec![
                Objective::SupervisedOnly,
                Objective::EntropyOnly,
                Objective::ContextAware,
            ]),
            MatrixAxis::Modes(AdaptMode::IN_CONTEXT_GRID.to_vec()),
            MatrixAxis::NContext(example_count_grid()),
            MatrixAxis::LabelModes {
                modes: LabelMode::ALL.to_vec(),
                seeds: seeds.clone(),
            },
            MatrixAxis::Strategies {
                strategies: vec![StrategyKind::Random, StrategyKind::Definition],
                seeds,
            },
            MatrixAxis::Variants(PromptVariant::TABLE.to_vec()),
        ]
    }

    pub fn from_name(name: &str, n_seeds: u64) -> Result<MatrixAxis> {
        MatrixAxis::all(n_seeds)
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown matrix axis `{name}`")))
    }

    pub fn cells(&self, base: &RunConfig) -> Vec<MatrixCell> {
        let axis = self.name();
        let cell = |key: String, f: &dyn Fn(&mut RunConfig)| {
            let mut config = base.clone();
            f(&mut config);
            MatrixCell { axis, key, config }
        };
        let seeded = |c: &mut RunConfig, seed: u64| {
            c.stream.adaptation.seed = seed;
            c.pool_seed = seed;
        };
        match self {
            MatrixAxis::NContext(ns) => ns
                .iter()
                .map(|&n| {
                    cell(format!("n_context={n}"), &|c| {
                        c.stream.context.n_context = n
                    })
                })
                .collect(),
            MatrixAxis::LabelModes { modes, seeds } => modes
                .iter()
                .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
                .map(|(m, s)| {
                    cell(format!("label_mode={},seed={s}", m.name()), &|c| {
                        c.stream.context.label_mode = m;
                        c.stream.context.ablation = m.needs_test_label();
                        seeded(c, s);
                    })
                })
                .collect(),
            MatrixAxis::Strategies { strategies, seeds } => strategies
                .iter()
                .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
                .map(|(k, s)| {
                    cell(
                        format!("strategy={},seed={s}", format!("{k:?}").to_lowercase()),
                        &|c| {
                            c.stream.context.strategy = k;
                            seeded(c, s);
                        },
                    )
                })
                .collect(),
            MatrixAxis::Variants(vs) => vs
                .iter()
                .map(|&v| {
                    cell(format!("variant={}", v.name()), &|c| {
                        c.stream.prompt.variant = v
                    })
                })
                .collect(),
            MatrixAxis::Components(os) => os
                .iter()
                .map(|&o| {
                    cell(
                        format!("objective={}", o.name().replace('/', "").replace(' ', "-")),
                        &|c| c.stream.adaptation.objective = o,
                    )
                })
                .collect(),
            MatrixAxis::Modes(ms) => ms
                .iter()
                .map(|&m| {
                    cell(format!("mode={}", m.name()), &|c| {
                        c.stream.adaptation.mode = m
                    })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MatrixCell {
    pub axis: &'static str,
    pub key: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub axis: &'static str,
    pub key: String,
    pub outcome: std::result::Result<RunReport, String>,
}

/// Mean label-mode accuracies over seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelOrdering {
    pub oracle: f64,
    pub gold: f64,
    pub random: f64,
}

impl LabelOrdering {
    pub fn holds(&self) -> bool {
        self.oracle >= self.gold && self.gold >= self.random
    }
}

#[derive(Debug, Clone)]
pub struct MatrixOutcome {
    pub cells: Vec<CellResult>,
    pub ordering: Option<LabelOrdering>,
    pub warnings: Vec<String>,
}

fn mean_accuracy(cells: &[CellResult], mode: LabelMode) -> Option<f64> {
    let accs: Vec<f64> = cells
        .iter()
        .filter(|c| c.axis == "label_mode")
        .filter_map(|c| c.outcome.as_ref().ok())
        .filter(|r| r.body.config.stream.context.label_mode == mode)
        .filter_map(|r| r.body.accuracy)
        .collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Run every cell of every axis. Cells run in parallel on the current rayon
/// pool; a failed cell is recorded and the rest continue.
pub fn run_matrix(base: &RunConfig, axes: &[MatrixAxis]) -> Result<MatrixOutcome> {
    let cells: Vec<MatrixCell> = axes.iter().flat_map(|a| a.cells(base)).collect();
    let results = with_backend(base.backend, &base.backend_config, |backend| {
        let data: TaskData = backend.load(&base.data)?;
        Ok(cells
            .par_iter()
            .map(|cell| CellResult {
                axis: cell.axis,
                key: cell.key.clone(),
                outcome: backend.run(&cell.config, &data).map_err(|e| e.to_string()),
            })
            .collect::<Vec<_>>())
    })?;

    let mut warnings = Vec::new();
    for c in &results {
        if let Err(e) = &c.outcome {
            warnings.push(format!("cell {} failed: {e}", c.key));
        }
    }
    let ordering = match (
        mean_accuracy(&results, LabelMode::Oracle),
        mean_accuracy(&results, LabelMode::Gold),
        mean_accuracy(&results, LabelMode::Random),
    ) {
        (Some(oracle), Some(gold), Some(random)) => Some(LabelOrdering {
            oracle,
            gold,
            random,
        }),
        _ => None,
    };
    if let Some(o) = ordering.filter(|o| !o.holds()) {
        let msg = format!(
            "label-mode ordering oracle >= gold >= random violated: oracle {:.4}, gold {:.4}, random {:.4}",
            o.oracle, o.gold, o.random
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(MatrixOutcome {
        cells: results,
        ordering,
        warnings,
    })
}

impl MatrixOutcome {
    pub fn reports(&self) -> impl Iterator<Item = (&str, &RunReport)> {
        self.cells
            .iter()
            .filter_map(|c| c.outcome.as_ref().ok().map(|r| (c.key.as_str(), r)))
    }

    /// Summary keyed by cell; failed cells carry only their error.
    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let wrap = |e: csv::Error| Error::Config(format!("csv: {e}"));
        let mut header = vec!["axis"];
        header.extend(CSV_HEADER);
        header.push("error");
        w.write_record(&header).map_err(wrap)?;
        for c in &self.cells {
            let mut row = vec![c.axis.to_string()];
            match &c.outcome {
                Ok(r) => {
                    row.extend(csv_row(&c.key, r));
                    row.push(String::new());
                }
                Err(e) => {
                    row.push(c.key.clone());
                    row.extend(std::iter::repeat_n(String::new(), CSV_HEADER.len() - 1));
                    row.push(e.clone());
                }
            }
            w.write_record(&row).map_err(wrap)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// `summary.csv` plus one JSON report per successful cell.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for (key, r) in self.reports() {
            let path = dir.join(format!("{key}.json"));
            r.write_json(&path)?;
            paths.push(path);
        }
        let summary = dir.join("summary.csv");
        std::fs::write(&summary, self.summary_csv()?).map_err(|e| Error::io(&summary, e))?;
        paths.push(summary);
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_cell_counts() {
        let base = RunConfig::default();
        let counts: Vec<(&str, usize)> = MatrixAxis::all(5)
            .iter()
            .map(|a| (a.name(), a.cells(&base).len()))
            .collect();
        assert_eq!(
            counts,
            vec![
                ("objective", 3),
                ("mode", 4),
                ("n_context", 10),
                ("label_mode", 30),
                ("strategy", 10),
                ("variant", 5),
            ]
        );
    }

    #[test]
    fn ablation_flag_only_on_test_label_modes() {
        let base = RunConfig::default();
        for cell in MatrixAxis::from_name("label_mode", 1).unwrap().cells(&base) {
            let ctx = cell.config.stream.context;
            assert_eq!(
                ctx.ablation,
                matches!(ctx.label_mode, LabelMode::Same | LabelMode::Oracle),
                "{}",
                cell.key
            );
        }
    }

    #[test]
    fn failed_cells_do_not_stop_the_matrix() {
        let mut base = RunConfig::default();
        if let super::super::DataSource::Synthetic(spec) = &mut base.data {
            spec.n_classes = 3;
            spec.samples_per_class = 8;
            spec.noise_scale = 0.9;
        }
        base.stream.context.n_context = 2;
        let out = run_matrix(&base, &[MatrixAxis::NContext(vec![1, 3, 5])]).unwrap();
        assert_eq!(out.cells.len(), 3);
        assert!(out.cells[0].outcome.is_ok() && out.cells[1].outcome.is_ok());
        assert!(out.cells[2].outcome.is_err());
        assert_eq!(out.warnings.len(), 1);
        let csv = out.summary_csv().unwrap();
        assert_eq!(csv.lines().count(), 4);
    }
}
