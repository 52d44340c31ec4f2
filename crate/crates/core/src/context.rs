//! Candidate pool construction, in-context set selection and label modes.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled representative per class, as indices into the labeled split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub entries: Vec<usize>,
    pub seed: u64,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Draw a uniformly random representative of every class.
///
/// `labels[i]` is the class of labeled record `i`.
pub fn build_pool(labels: &[usize], class_names: &[String], seed: u64) -> Result<CandidatePool> {
    let mut by_class = vec![Vec::new(); class_names.len()];
    for (record, &class) in labels.iter().enumerate() {
        let slot = by_class.get_mut(class).ok_or(Error::Index {
            what: "class list",
            index: class,
            len: class_names.len(),
        })?;
        slot.push(record);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(class_names.len());
    for (class, records) in by_class.iter().enumerate() {
        if records.is_empty() {
            return Err(Error::Config(format!(
                "class `{}` has no labeled samples for the candidate pool",
                class_names[class]
            )));
        }
        entries.push(records[rng.random_range(0..records.len())]);
    }
    Ok(CandidatePool { entries, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    /// Fresh draw for every test sample.
    Random,
    /// One draw shared by the whole stream.
    Definition,
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(StrategyKind::Random),
            "definition" => Ok(StrategyKind::Definition),
            other => Err(Error::Config(format!(
                "unknown selection strategy `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    Gold,
    Random,
    Same,
    Oracle,
    /// Labels stripped; the supervised term is skipped.
    None,
    NoExamples,
}

impl LabelMode {
    pub const ALL: [LabelMode; 6] = [
        LabelMode::NoExamples,
        LabelMode::None,
        LabelMode::Random,
        LabelMode::Same,
        LabelMode::Gold,
        LabelMode::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LabelMode::Gold => "gold",
            LabelMode::Random => "random",
            LabelMode::Same => "same",
            LabelMode::Oracle => "oracle",
            LabelMode::None => "none",
            LabelMode::NoExamples => "no-examples",
        }
    }

    /// Modes that read the test label and so only belong in ablation runs.
    pub fn needs_test_label(self) -> bool {
        matches!(self, LabelMode::Same | LabelMode::Oracle)
    }
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LabelMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown label mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEntry {
    /// Index into the labeled split.
    pub record: usize,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSet {
    pub pairs: Vec<ContextEntry>,
    pub strategy: StrategyKind,
    pub label_mode: LabelMode,
}

/// Selection state for one stream.
#[derive(Debug, Clone)]
pub struct SelectionStrategy {
    pub kind: StrategyKind,
    fixed: Option<ContextSet>,
}

impl SelectionStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self { kind, fixed: None }
    }

    pub fn fixed_set(&self) -> Option<&ContextSet> {
        self.fixed.as_ref()
    }
}

/// Labeled split metadata plus the pool drawn from it.
#[derive(Debug, Clone)]
pub struct ContextStore {
    labels: Vec<usize>,
    by_class: Vec<Vec<usize>>,
    pub pool: CandidatePool,
    n_classes: usize,
}

impl ContextStore {
    pub fn new(labels: Vec<usize>, class_names: &[String], pool_seed: u64) -> Result<Self> {
        let pool = build_pool(&labels, class_names, pool_seed)?;
        let mut by_class = vec![Vec::new(); class_names.len()];
        for (record, &class) in labels.iter().enumerate() {
            by_class[class].push(record);
        }
        Ok(Self {
            labels,
            by_class,
            pool,
            n_classes: class_names.len(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn label_of(&self, record: usize) -> usize {
        self.labels[record]
    }

    /// Without-replacement draw of `n` pool entries, or the stream's fixed set.
    pub fn sample_context<R: Rng>(
        &self,
        n: usize,
        strategy: &mut SelectionStrategy,
        rng: &mut R,
    ) -> Result<ContextSet> {
        let k = self.pool.len();
        if n > k {
            return Err(Error::Config(format!(
                "requested {n} in-context examples but the candidate pool holds {k}"
            )));
        }
        if let (StrategyKind::Definition, Some(fixed)) = (strategy.kind, &strategy.fixed) {
            return Ok(fixed.clone());
        }
        let pairs = index::sample(rng, k, n)
            .into_iter()
            .map(|i| {
                let record = self.pool.entries[i];
                ContextEntry {
                    record,
                    label: Some(self.labels[record]),
                }
            })
            .collect();
        let set = ContextSet {
            pairs,
            strategy: strategy.kind,
            label_mode: LabelMode::Gold,
        };
        if strategy.kind == StrategyKind::Definition {
            strategy.fixed = Some(set.clone());
        }
        Ok(set)
    }

    /// Substitute labels (or examples) according to an ablation mode.
    pub fn apply_label_mode<R: Rng>(
        &self,
        set: ContextSet,
        mode: LabelMode,
        test_gold: Option<usize>,
        rng: &mut R,
    ) -> Result<ContextSet> {
        let gold_required = || {
            test_gold.ok_or_else(|| {
                Error::Config(format!(
                    "label mode `{}` requires the test label",
                    mode.name()
                ))
            })
        };
        let mut pairs = set.pairs;
        match mode {
            LabelMode::Gold => {}
            LabelMode::Random => {
                for p in &mut pairs {
                    p.label = Some(rng.random_range(0..self.n_classes));
                }
            }
            LabelMode::Same => {
                let g = gold_required()?;
                for p in &mut pairs {
                    p.label = Some(g);
                }
            }
            LabelMode::Oracle => {
                let g = gold_required()?;
                let candidates = &self.by_class[g];
                let take = pairs.len().min(candidates.len());
                pairs = index::sample(rng, candidates.len(), take)
                    .into_iter()
                    .map(|i| ContextEntry {
                        record: candidates[i],
                        label: Some(g),
                    })
                    .collect();
            }
            LabelMode::None => {
                for p in &mut pairs {
                    p.label = None;
                }
            }
            LabelMode::NoExamples => pairs.clear(),
        }
        Ok(ContextSet {
            pairs,
            strategy: set.strategy,
            label_mode: mode,
        })
    }
}

/// The example-count sweep grid, odd counts from 1 to 19.
pub fn example_count_grid() -> Vec<usize> {
    (1..=19).step_by(2).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    /// 10 classes × 20 samples, class-major.
    fn labels() -> Vec<usize> {
        (0..10).flat_map(|c| std::iter::repeat_n(c, 20)).collect()
    }

    #[test]
    fn pool_has_one_entry_per_class() {
        let pool = build_pool(&labels(), &names(10), 3).unwrap();
        assert_eq!(pool.len(), 10);
        for (class, &record) in pool.entries.iter().enumerate() {
            assert_eq!(record / 20, class);
        }
        assert_eq!(pool, build_pool(&labels(), &names(10), 3).unwrap());
    }

    #[test]
    fn empty_class_is_named() {
        let labels = vec![0, 0, 2];
        let err = build_pool(&labels, &names(3), 0).unwrap_err();
        assert!(err.to_string().contains("`c1`"), "{err}");
    }

    #[test]
    fn pool_representative_is_uniform() {
        // Monte Carlo over 10k seeds; each of 20 candidates at 1/20 within 3 sigma
        let trials = 10_000;
        let mut counts = [0usize; 20];
        for seed in 0..trials {
            let pool = build_pool(&labels(), &names(10), seed).unwrap();
            counts[pool.entries[4] - 80] += 1;
        }
        let p = 1.0 / 20.0;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!(
                (c as f64 - trials as f64 * p).abs() <= 3.0 * sigma,
                "{counts:?}"
            );
        }
    }

    #[test]
    fn random_draws_are_without_replacement() {
        let store = ContextStore::new(labels(), &names(10), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut strategy = SelectionStrategy::new(StrategyKind::Random);
        for _ in 0..200 {
            let set = store.sample_context(5, &mut strategy, &mut rng).unwrap();
            let ids: HashSet<_> = set.pairs.iter().map(|p| p.record).collect();
            assert_eq!(ids.len(), 5);
        }
        assert!(store.sample_context(11, &mut strategy, &mut rng).is_err());
    }

    #[test]
    fn inclusion_probability_is_n_over_k() {
        let store = ContextStore::new(labels(), &names(10), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut strategy = SelectionStrategy::new(StrategyKind::Random);
        let trials = 20_000;
        let target = store.pool.entries[7];
        let hits = (0..trials)
            .filter(|_| {
                store
                    .sample_context(5, &mut strategy, &mut rng)
                    .unwrap()
                    .pairs
                    .iter()
                    .any(|p| p.record == target)
            })
            .count();
        let sigma = (trials as f64 * 0.25).sqrt();
        assert!(
            (hits as f64 - 0.5 * trials as f64).abs() < 3.0 * sigma,
            "{hits}"
        );
    }

    #[test]
    fn definition_strategy_reuses_its_set() {
        let store = ContextStore::new(labels(), &names(10), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut strategy = SelectionStrategy::new(StrategyKind::Definition);
        let first = store.sample_context(5, &mut strategy, &mut rng).unwrap();
        for _ in 0..100 {
            assert_eq!(
                store.sample_context(5, &mut strategy, &mut rng).unwrap(),
                first
            );
        }
    }

    #[test]
    fn random_strategy_varies() {
        let store = ContextStore::new(labels(), &names(10), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut strategy = SelectionStrategy::new(StrategyKind::Random);
        let sets: HashSet<Vec<usize>> = (0..100)
            .map(|_| {
                let mut ids: Vec<_> = store
                    .sample_context(5, &mut strategy, &mut rng)
                    .unwrap()
                    .pairs
                    .iter()
                    .map(|p| p.record)
                    .collect();
                ids.sort();
                ids
            })
            .collect();
        assert!(sets.len() >= 2);
    }

    #[test]
    fn label_modes() {
        let store = ContextStore::new(labels(), &names(10), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut strategy = SelectionStrategy::new(StrategyKind::Random);
        let set = store.sample_context(5, &mut strategy, &mut rng).unwrap();

        let gold = store
            .apply_label_mode(set.clone(), LabelMode::Gold, None, &mut rng)
            .unwrap();
        assert_eq!(gold.pairs, set.pairs);

        let same = store
            .apply_label_mode(set.clone(), LabelMode::Same, Some(3), &mut rng)
            .unwrap();
        assert!(same.pairs.iter().all(|p| p.label == Some(3)));
        assert_eq!(
            same.pairs.iter().map(|p| p.record).collect::<Vec<_>>(),
            set.pairs.iter().map(|p| p.record).collect::<Vec<_>>()
        );

        let oracle = store
            .apply_label_mode(set.clone(), LabelMode::Oracle, Some(6), &mut rng)
            .unwrap();
        assert_eq!(oracle.pairs.len(), 5);
        assert!(oracle
            .pairs
            .iter()
            .all(|p| p.label == Some(6) && store.label_of(p.record) == 6));

        let none = store
            .apply_label_mode(set.clone(), LabelMode::None, None, &mut rng)
            .unwrap();
        assert!(none.pairs.iter().all(|p| p.label.is_none()));
        assert_eq!(none.pairs.len(), 5);

        let empty = store
            .apply_label_mode(set.clone(), LabelMode::NoExamples, None, &mut rng)
            .unwrap();
        assert!(empty.pairs.is_empty());

        assert!(store
            .apply_label_mode(set.clone(), LabelMode::Same, None, &mut rng)
            .is_err());
        assert!(store
            .apply_label_mode(set, LabelMode::Oracle, None, &mut rng)
            .is_err());
    }

    #[test]
    fn random_labels_agree_with_gold_at_chance() {
        let store = ContextStore::new(labels(), &names(10), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut strategy = SelectionStrategy::new(StrategyKind::Random);
        let trials = 4000;
        let mut agree = 0usize;
        for _ in 0..trials {
            let set = store.sample_context(5, &mut strategy, &mut rng).unwrap();
            let relabeled = store
                .apply_label_mode(set.clone(), LabelMode::Random, None, &mut rng)
                .unwrap();
            agree += set
                .pairs
                .iter()
                .zip(&relabeled.pairs)
                .filter(|(a, b)| a.label == b.label)
                .count();
        }
        let mean = agree as f64 / trials as f64;
        assert!((mean - 0.5).abs() < 0.05, "{mean}");
    }

    #[test]
    fn sweep_grid() {
        assert_eq!(
            example_count_grid(),
            vec![1, 3, 5, 7, 9, 11, 13, 15, 17, 19]
        );
    }
}
