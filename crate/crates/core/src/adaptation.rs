//! Per-sample online adaptation loop.
//!
//! For every test sample: reset prompts, draw context, take the optimizer
//! steps dictated by the mode, predict, record. The token net and its
//! optimizer state carry over to the next sample; everything else resets.

use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{DualEncoder, Embedding, ImageSample};
use crate::context::{ContextSet, ContextStore, LabelMode, SelectionStrategy, StrategyKind};
use crate::error::{Error, Result};
use crate::objective::{
    class_embeddings, class_probabilities_with, combined_loss, ClassProbabilities, ContextPair,
    ForwardCounter, LiveSet, LossBreakdown, LossInputs, Objective, PromptGrads,
};
use crate::optim::{AdamState, AdamWConfig};
use crate::prompts::{ClassVocabulary, PromptConfig, PromptState, VisualPrompt};
use crate::token_net::TokenNetParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// No optimization; predict under the initial prompts.
    ZeroShot,
    VisualOnly,
    /// Text prompt only; the visual prompt is present but frozen.
    TextOnly,
    /// One joint step on every prompt parameter.
    Concurrent,
    /// Visual phase, then text phase.
    Cyclic,
}

impl AdaptMode {
    pub const IN_CONTEXT_GRID: [AdaptMode; 4] = [
        AdaptMode::VisualOnly,
        AdaptMode::TextOnly,
        AdaptMode::Concurrent,
        AdaptMode::Cyclic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdaptMode::ZeroShot => "zero-shot",
            AdaptMode::VisualOnly => "visual-only",
            AdaptMode::TextOnly => "text-only",
            AdaptMode::Concurrent => "concurrent",
            AdaptMode::Cyclic => "cyclic",
        }
    }
}

impl std::str::FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            AdaptMode::ZeroShot,
            AdaptMode::VisualOnly,
            AdaptMode::TextOnly,
            AdaptMode::Concurrent,
            AdaptMode::Cyclic,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown adaptation mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Visual prompt and token net; text prompt frozen.
    Visual,
    /// Text prompt; visual prompt and token net frozen.
    Text,
    Joint,
}

impl Phase {
    fn live(self) -> LiveSet {
        match self {
            Phase::Visual => LiveSet {
                visual: true,
                theta: true,
                text: false,
            },
            Phase::Text => LiveSet {
                visual: false,
                theta: false,
                text: true,
            },
            Phase::Joint => LiveSet::ALL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub mode: AdaptMode,
    pub objective: Objective,
    pub lambda: f64,
    pub lr: f64,
    pub visual_steps: usize,
    pub cycle_steps: usize,
    pub optimizer: AdamWConfig,
    /// Seeds the token net and the stream's context draws.
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            mode: AdaptMode::Cyclic,
            objective: Objective::ContextAware,
            lambda: 0.4,
            lr: 5e-3,
            visual_steps: 1,
            cycle_steps: 2,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if self.mode == AdaptMode::Cyclic && self.cycle_steps != 2 {
            return Err(Error::Config(format!(
                "cyclic mode runs exactly two phases, got cycle_steps = {}",
                self.cycle_steps
            )));
        }
        if self.mode == AdaptMode::VisualOnly && self.visual_steps == 0 {
            return Err(Error::Config(
                "visual-only mode needs at least one step".into(),
            ));
        }
        Ok(())
    }

    /// Optimizer phases run for one test sample.
    pub fn schedule(&self) -> Vec<Phase> {
        match self.mode {
            AdaptMode::ZeroShot => vec![],
            AdaptMode::VisualOnly => vec![Phase::Visual; self.visual_steps],
            AdaptMode::TextOnly => vec![Phase::Text],
            AdaptMode::Concurrent => vec![Phase::Joint],
            AdaptMode::Cyclic => vec![Phase::Visual, Phase::Text],
        }
    }
}

/// Class-embedding cache keyed by backend, vocabulary and text prompt bits.
#[derive(Debug, Default)]
pub struct ClassCache {
    map: HashMap<String, Vec<Embedding>>,
    dir: Option<PathBuf>,
    pub hits: u64,
    pub misses: u64,
}

impl ClassCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            ..Self::default()
        }
    }

    /// Honors `INCPL_CACHE_DIR`.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os("INCPL_CACHE_DIR").map(PathBuf::from))
    }

    fn key(backend_digest: &str, vocab: &ClassVocabulary, prompts: &PromptState) -> String {
        let mut h = Sha256::new();
        h.update(backend_digest.as_bytes());
        for name in &vocab.names {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
        }
        for v in prompts.text.tokens.iter() {
            h.update(v.to_le_bytes());
        }
        h.update((prompts.text.tokens.ncols() as u64).to_le_bytes());
        hex::encode(h.finalize())
    }

    fn get(&mut self, key: &str) -> Option<Vec<Embedding>> {
        if let Some(hit) = self.map.get(key) {
            return Some(hit.clone());
        }
        let path = self.dir.as_ref()?.join(format!("{key}.json"));
        let text = std::fs::read_to_string(path).ok()?;
        let rows: Vec<Vec<f64>> = serde_json::from_str(&text).ok()?;
        let embs: Vec<Embedding> = rows
            .into_iter()
            .map(|r| Embedding {
                vec: Array1::from(r),
            })
            .collect();
        self.map.insert(key.to_string(), embs.clone());
        Some(embs)
    }

    fn put(&mut self, key: String, embs: &[Embedding]) {
        if let Some(dir) = &self.dir {
            let rows: Vec<Vec<f64>> = embs.iter().map(|e| e.vec.to_vec()).collect();
            let written = std::fs::create_dir_all(dir).and_then(|_| {
                std::fs::write(
                    dir.join(format!("{key}.json")),
                    serde_json::to_string(&rows).unwrap_or_default(),
                )
            });
            if let Err(e) = written {
                log::warn!(
                    "class-embedding cache write failed in {}: {e}",
                    dir.display()
                );
            }
        }
        self.map.insert(key, embs.to_vec());
    }
}

#[derive(Debug, Default, Clone)]
struct PromptOptim {
    visual: AdamState,
    text: AdamState,
}

/// Mutable state of one stream.
pub struct AdaptationState {
    pub prompts: PromptState,
    pub theta: TokenNetParams,
    theta_opt: AdamState,
    prompt_opt: PromptOptim,
    pub step_counter: u64,
    pub counter: ForwardCounter,
    pub cache: ClassCache,
    backend_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_index: usize,
    pub probs: ClassProbabilities,
    pub loss_trace: Vec<LossBreakdown>,
}

fn flat_theta(t: &TokenNetParams) -> Vec<f64> {
    t.weight.iter().chain(t.bias.iter()).copied().collect()
}

fn unflatten_theta(t: &mut TokenNetParams, flat: &[f64]) {
    let nw = t.weight.len();
    for (dst, src) in t.weight.iter_mut().zip(&flat[..nw]) {
        *dst = *src;
    }
    for (dst, src) in t.bias.iter_mut().zip(&flat[nw..]) {
        *dst = *src;
    }
}

fn adam_update(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    cfg: &AdamWConfig,
) {
    state.step(params, grads, lr, cfg);
}

impl AdaptationState {
    pub fn new<B: DualEncoder>(backend: &B, prompt: &PromptConfig, seed: u64) -> Result<Self> {
        let cfg = backend.config();
        Ok(Self {
            prompts: PromptState::new(prompt, backend)?,
            theta: TokenNetParams::init(cfg.d_l, cfg.d_v, seed)?,
            theta_opt: AdamState::default(),
            prompt_opt: PromptOptim::default(),
            step_counter: 0,
            counter: ForwardCounter::default(),
            cache: ClassCache::from_env(),
            backend_digest: backend.weight_digest(),
        })
    }

    /// Restore per-sample prompts and their optimizer moments.
    pub fn reset_sample(&mut self) {
        self.prompts.reset();
        self.prompt_opt = PromptOptim::default();
    }

    fn inputs<'a, B: DualEncoder>(
        &'a self,
        backend: &'a B,
        vocab: &'a ClassVocabulary,
    ) -> LossInputs<'a, B> {
        LossInputs {
            backend,
            prompts: &self.prompts,
            theta: &self.theta,
            vocab,
        }
    }

    /// One optimizer step on the parameters live in `phase`.
    pub fn step<B: DualEncoder>(
        &mut self,
        phase: Phase,
        test: &ImageSample,
        context: &[ContextPair<'_>],
        vocab: &ClassVocabulary,
        backend: &B,
        config: &AdaptationConfig,
    ) -> Result<LossBreakdown> {
        let live = phase.live();
        let mut counter = self.counter;
        let eval = combined_loss(
            test,
            context,
            &self.inputs(backend, vocab),
            config.objective,
            config.lambda,
            live,
            &mut counter,
        )?;
        self.counter = counter;
        let key = ClassCache::key(&self.backend_digest, vocab, &self.prompts);
        self.cache.map.insert(key, eval.class_embeddings);
        self.apply(eval.grads, config)?;
        self.step_counter += 1;
        Ok(eval.breakdown)
    }

    fn apply(&mut self, grads: PromptGrads, config: &AdaptationConfig) -> Result<()> {
        let (lr, opt) = (config.lr, &config.optimizer);
        let all_finite = |a: Option<&[f64]>| a.is_none_or(|a| a.iter().all(|v| v.is_finite()));
        let theta_ok = grads
            .theta
            .as_ref()
            .is_none_or(|g| g.weight.iter().chain(g.bias.iter()).all(|v| v.is_finite()));
        let ok = theta_ok
            && all_finite(grads.visual.as_ref().and_then(|g| g.as_slice()))
            && all_finite(grads.pixels.as_ref().and_then(|g| g.as_slice()))
            && all_finite(grads.text.as_ref().and_then(|g| g.as_slice()));
        if !ok {
            return Err(Error::numerical("prompt update", "non-finite gradient"));
        }
        match &mut self.prompts.visual {
            VisualPrompt::Tokens { offset, .. } => {
                if let Some(g) = &grads.visual {
                    let g = g.as_standard_layout();
                    let slice = offset.as_slice_mut().expect("owned standard layout");
                    adam_update(
                        &mut self.prompt_opt.visual,
                        slice,
                        g.as_slice().expect("standard layout"),
                        lr,
                        opt,
                    );
                }
            }
            VisualPrompt::Pixels(p) => {
                if let Some(g) = &grads.pixels {
                    let g = g.as_standard_layout();
                    let slice = p.values.as_slice_mut().expect("owned standard layout");
                    adam_update(
                        &mut self.prompt_opt.visual,
                        slice,
                        g.as_slice().expect("standard layout"),
                        lr,
                        opt,
                    );
                }
            }
            VisualPrompt::None => {}
        }
        if let Some(g) = &grads.theta {
            let mut flat = flat_theta(&self.theta);
            let gflat: Vec<f64> = g.weight.iter().chain(g.bias.iter()).copied().collect();
            self.theta_opt.step(&mut flat, &gflat, lr, opt);
            unflatten_theta(&mut self.theta, &flat);
        }
        if let Some(g) = &grads.text {
            let g = g.as_standard_layout();
            let slice = self
                .prompts
                .text
                .tokens
                .as_slice_mut()
                .expect("owned standard layout");
            adam_update(
                &mut self.prompt_opt.text,
                slice,
                g.as_slice().expect("standard layout"),
                lr,
                opt,
            );
        }
        Ok(())
    }

    pub fn adapt_visual<B: DualEncoder>(
        &mut self,
        test: &ImageSample,
        context: &[ContextPair<'_>],
        vocab: &ClassVocabulary,
        backend: &B,
        config: &AdaptationConfig,
    ) -> Result<Vec<LossBreakdown>> {
        (0..config.visual_steps.max(1))
            .map(|_| self.step(Phase::Visual, test, context, vocab, backend, config))
            .collect()
    }

    pub fn adapt_text<B: DualEncoder>(
        &mut self,
        test: &ImageSample,
        context: &[ContextPair<'_>],
        vocab: &ClassVocabulary,
        backend: &B,
        config: &AdaptationConfig,
    ) -> Result<LossBreakdown> {
        self.step(Phase::Text, test, context, vocab, backend, config)
    }

    /// Class embeddings for the current text prompt, served from the cache when possible.
    pub fn class_embeddings<B: DualEncoder>(
        &mut self,
        vocab: &ClassVocabulary,
        backend: &B,
    ) -> Result<Vec<Embedding>> {
        let key = ClassCache::key(&self.backend_digest, vocab, &self.prompts);
        if let Some(hit) = self.cache.get(&key) {
            self.cache.hits += 1;
            self.counter.text_batches += 1;
            return Ok(hit);
        }
        self.cache.misses += 1;
        let mut counter = self.counter;
        let embs = class_embeddings(&self.inputs(backend, vocab), &mut counter)?;
        self.counter = counter;
        self.cache.put(key, &embs);
        Ok(embs)
    }

    pub fn predict<B: DualEncoder>(
        &mut self,
        test: &ImageSample,
        vocab: &ClassVocabulary,
        backend: &B,
    ) -> Result<Prediction> {
        let classes = self.class_embeddings(vocab, backend)?;
        let mut counter = self.counter;
        let probs =
            class_probabilities_with(test, &self.inputs(backend, vocab), &classes, &mut counter)?;
        self.counter = counter;
        Ok(Prediction {
            class_index: probs.argmax(),
            probs,
            loss_trace: vec![],
        })
    }

    /// Adapt on one sample and predict. On failure the token net and its
    /// optimizer roll back and the unadapted prediction is returned with the error.
    pub fn process<B: DualEncoder>(
        &mut self,
        test: &ImageSample,
        context: &[ContextPair<'_>],
        vocab: &ClassVocabulary,
        backend: &B,
        config: &AdaptationConfig,
    ) -> Result<(Prediction, Vec<Phase>, Option<Error>)> {
        self.reset_sample();
        let theta_snapshot = (self.theta.clone(), self.theta_opt.clone());
        let schedule = config.schedule();
        let mut trace = Vec::with_capacity(schedule.len());
        let mut failure = None;
        for &phase in &schedule {
            match self.step(phase, test, context, vocab, backend, config) {
                Ok(b) => trace.push(b),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        let mut prediction = match failure {
            None => match self.predict(test, vocab, backend) {
                Ok(p) => p,
                Err(e) => {
                    failure = Some(e);
                    self.fallback(theta_snapshot, test, vocab, backend)?
                }
            },
            Some(_) => self.fallback(theta_snapshot, test, vocab, backend)?,
        };
        prediction.loss_trace = trace;
        Ok((prediction, schedule, failure))
    }

    fn fallback<B: DualEncoder>(
        &mut self,
        snapshot: (TokenNetParams, AdamState),
        test: &ImageSample,
        vocab: &ClassVocabulary,
        backend: &B,
    ) -> Result<Prediction> {
        (self.theta, self.theta_opt) = snapshot;
        self.reset_sample();
        self.predict(test, vocab, backend)
    }
}

/// A test or labeled image with its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: ImageSample,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub n_context: usize,
    pub strategy: StrategyKind,
    pub label_mode: LabelMode,
    /// Permits label modes that read the test label.
    pub ablation: bool,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            n_context: 5,
            strategy: StrategyKind::Random,
            label_mode: LabelMode::Gold,
            ablation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub gold: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
    pub loss_trace: Vec<LossBreakdown>,
    pub phases: Vec<Phase>,
    pub context_ids: Vec<String>,
    pub context_labels: Vec<Option<usize>>,
    pub forward: ForwardCounter,
    pub theta_digest: String,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamOutcome {
    pub records: Vec<SampleRecord>,
    pub correct: usize,
    pub total: usize,
    pub accuracy: Option<f64>,
    pub counter: ForwardCounter,
}

/// Everything that configures one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub adaptation: AdaptationConfig,
    pub prompt: PromptConfig,
    pub context: ContextConfig,
}

impl StreamConfig {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        self.adaptation.validate()?;
        let ctx = &self.context;
        if ctx.label_mode.needs_test_label() && !ctx.ablation {
            return Err(Error::Config(format!(
                "label mode `{}` reads the test label and requires --ablation",
                ctx.label_mode.name()
            )));
        }
        if ctx.n_context > pool_size {
            return Err(Error::Config(format!(
                "requested {} in-context examples but the candidate pool holds {pool_size}",
                ctx.n_context
            )));
        }
        Ok(())
    }
}

/// Run the online protocol over `test` in order.
pub fn run_stream<B: DualEncoder>(
    backend: &B,
    vocab: &ClassVocabulary,
    test: &[LabeledImage],
    labeled: &[LabeledImage],
    store: &ContextStore,
    config: &StreamConfig,
) -> Result<StreamOutcome> {
    config.validate(store.pool.len())?;
    let mut state = AdaptationState::new(backend, &config.prompt, config.adaptation.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.adaptation.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut strategy = SelectionStrategy::new(config.context.strategy);
    let wants_context = config.adaptation.mode != AdaptMode::ZeroShot;

    let mut records = Vec::with_capacity(test.len());
    let mut correct = 0;
    for sample in test {
        let before = state.counter;
        let set = if wants_context {
            let drawn = if config.context.label_mode == LabelMode::NoExamples {
                ContextSet {
                    pairs: vec![],
                    strategy: strategy.kind,
                    label_mode: LabelMode::Gold,
                }
            } else {
                store.sample_context(config.context.n_context, &mut strategy, &mut rng)?
            };
            store.apply_label_mode(
                drawn,
                config.context.label_mode,
                Some(sample.class),
                &mut rng,
            )?
        } else {
            ContextSet {
                pairs: vec![],
                strategy: strategy.kind,
                label_mode: LabelMode::NoExamples,
            }
        };
        let pairs: Vec<ContextPair<'_>> = set
            .pairs
            .iter()
            .map(|p| ContextPair {
                image: &labeled[p.record].image,
                label: p.label,
            })
            .collect();
        let (prediction, phases, failure) =
            state.process(&sample.image, &pairs, vocab, backend, &config.adaptation)?;
        if let Some(e) = &failure {
            log::warn!(
                "sample {} fell back to the unadapted prediction: {e}",
                sample.image.id
            );
        }
        if prediction.class_index == sample.class {
            correct += 1;
        }
        records.push(SampleRecord {
            id: sample.image.id.clone(),
            gold: sample.class,
            predicted: prediction.class_index,
            probs: prediction.probs.probs.clone(),
            loss_trace: prediction.loss_trace,
            phases,
            context_ids: set
                .pairs
                .iter()
                .map(|p| labeled[p.record].image.id.clone())
                .collect(),
            context_labels: set.pairs.iter().map(|p| p.label).collect(),
            forward: state.counter - before,
            theta_digest: state.theta.digest(),
            failure: failure.map(|e| e.to_string()),
        });
    }
    let total = records.len();
    Ok(StreamOutcome {
        records,
        correct,
        total,
        accuracy: (total > 0).then(|| correct as f64 / total as f64),
        counter: state.counter,
    })
}
