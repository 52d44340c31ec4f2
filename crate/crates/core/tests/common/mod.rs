//! Shared fixtures and the finite-difference gradient oracle.
#![allow(dead_code)]

use incpl::backbone::{BackendConfig, DualEncoder, ImageSample, ToyBackend};
use incpl::objective::{
    combined_loss, ContextPair, ForwardCounter, LiveSet, LossInputs, Objective,
};
use incpl::prompts::{ClassVocabulary, PromptConfig, PromptState, PromptVariant, VisualPrompt};
use incpl::token_net::TokenNetParams;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor so that coordinates with vanishing gradient are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_image(id: &str, shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> ImageSample {
    ImageSample::new(
        id,
        Array3::from_shape_simple_fn(shape, || rng.random_range(0.1..0.9)),
    )
}

/// Tiny setup: 3 classes, a test image and two labeled context images.
pub struct GradFixture {
    pub backend: ToyBackend,
    pub vocab: ClassVocabulary,
    pub prompts: PromptState,
    pub theta: TokenNetParams,
    pub test: ImageSample,
    pub context: Vec<ImageSample>,
}

impl GradFixture {
    pub fn new(variant: PromptVariant, seed: u64) -> Self {
        let cfg = BackendConfig::tiny();
        let backend = ToyBackend::new(cfg.clone()).unwrap();
        let vocab = ClassVocabulary::new(
            vec!["rose".into(), "tulip".into(), "sun flower".into()],
            &backend,
        )
        .unwrap();
        let prompt_cfg = PromptConfig {
            variant,
            seed,
            ..PromptConfig::default()
        };
        let mut prompts = PromptState::new(&prompt_cfg, &backend).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // move away from the reset point so every parameter block is generic
        prompts
            .text
            .tokens
            .mapv_inplace(|v| v + rng.random_range(-0.01..0.01));
        match &mut prompts.visual {
            VisualPrompt::Tokens { offset, .. } => {
                offset.mapv_inplace(|v| v + rng.random_range(-0.3..0.3))
            }
            VisualPrompt::Pixels(p) => {
                // stay clear of the clamp kinks
                let mask = p.mask.clone();
                p.values.zip_mut_with(&mask, |v, &m| {
                    if m {
                        *v = rng.random_range(-0.05..0.05)
                    }
                })
            }
            VisualPrompt::None => {}
        }
        let theta = TokenNetParams::init(cfg.d_l, cfg.d_v, seed).unwrap();
        let shape = (cfg.c_img, cfg.h, cfg.w);
        let test = random_image("test", shape, &mut rng);
        let context = (0..2)
            .map(|i| random_image(&format!("ctx{i}"), shape, &mut rng))
            .collect();
        Self {
            backend,
            vocab,
            prompts,
            theta,
            test,
            context,
        }
    }

    fn pairs(&self) -> Vec<ContextPair<'_>> {
        self.context
            .iter()
            .enumerate()
            .map(|(i, image)| ContextPair {
                image,
                label: Some(i % self.vocab.len()),
            })
            .collect()
    }

    pub fn loss(
        &self,
        prompts: &PromptState,
        theta: &TokenNetParams,
        objective: Objective,
        lambda: f64,
    ) -> f64 {
        let inputs = LossInputs {
            backend: &self.backend,
            prompts,
            theta,
            vocab: &self.vocab,
        };
        let mut counter = ForwardCounter::default();
        combined_loss(
            &self.test,
            &self.pairs(),
            &inputs,
            objective,
            lambda,
            LiveSet::NONE,
            &mut counter,
        )
        .unwrap()
        .breakdown
        .total
    }
}

/// Largest relative error over every coordinate of every live parameter block.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub coordinates: usize,
}

impl GradReport {
    fn push(&mut self, analytic: f64, numeric: f64) {
        self.max_rel_err = self.max_rel_err.max(rel_err(analytic, numeric));
        self.coordinates += 1;
    }
}

pub fn check_gradients(f: &GradFixture, objective: Objective, lambda: f64) -> GradReport {
    let inputs = LossInputs {
        backend: &f.backend,
        prompts: &f.prompts,
        theta: &f.theta,
        vocab: &f.vocab,
    };
    let mut counter = ForwardCounter::default();
    let eval = combined_loss(
        &f.test,
        &f.pairs(),
        &inputs,
        objective,
        lambda,
        LiveSet::ALL,
        &mut counter,
    )
    .unwrap();
    let g = eval.grads;
    let mut report = GradReport::default();
    let central = |plus: f64, minus: f64| (plus - minus) / (2.0 * FD_STEP);

    // text prompt
    if let Some(gt) = &g.text {
        for idx in 0..gt.len() {
            let (r, c) = (idx / gt.ncols(), idx % gt.ncols());
            let mut p = f.prompts.clone();
            p.text.tokens[[r, c]] += FD_STEP;
            let plus = f.loss(&p, &f.theta, objective, lambda);
            p.text.tokens[[r, c]] -= 2.0 * FD_STEP;
            let minus = f.loss(&p, &f.theta, objective, lambda);
            report.push(gt[[r, c]], central(plus, minus));
        }
    }
    // visual prompt rows (the per-sample offset)
    if let Some(gv) = &g.visual {
        for r in 0..gv.nrows() {
            for c in 0..gv.ncols() {
                let bump = |delta: f64| {
                    let mut p = f.prompts.clone();
                    if let VisualPrompt::Tokens { offset, .. } = &mut p.visual {
                        offset[[r, c]] += delta;
                    }
                    f.loss(&p, &f.theta, objective, lambda)
                };
                report.push(gv[[r, c]], central(bump(FD_STEP), bump(-FD_STEP)));
            }
        }
    }
    // pixel prompt, inside its region only
    if let (Some(gp), VisualPrompt::Pixels(pp)) = (&g.pixels, &f.prompts.visual) {
        for (idx, &m) in pp.mask.indexed_iter() {
            if !m {
                continue;
            }
            let bump = |delta: f64| {
                let mut p = f.prompts.clone();
                if let VisualPrompt::Pixels(px) = &mut p.visual {
                    px.values[idx] += delta;
                }
                f.loss(&p, &f.theta, objective, lambda)
            };
            report.push(gp[idx], central(bump(FD_STEP), bump(-FD_STEP)));
        }
    }
    // token net
    if let Some(gth) = &g.theta {
        for r in 0..gth.weight.nrows() {
            for c in 0..gth.weight.ncols() {
                let bump = |delta: f64| {
                    let mut t = f.theta.clone();
                    t.weight[[r, c]] += delta;
                    f.loss(&f.prompts, &t, objective, lambda)
                };
                report.push(gth.weight[[r, c]], central(bump(FD_STEP), bump(-FD_STEP)));
            }
        }
        for i in 0..gth.bias.len() {
            let bump = |delta: f64| {
                let mut t = f.theta.clone();
                t.bias[i] += delta;
                f.loss(&f.prompts, &t, objective, lambda)
            };
            report.push(gth.bias[i], central(bump(FD_STEP), bump(-FD_STEP)));
        }
    }
    report
}

pub fn tiny_backend() -> ToyBackend {
    ToyBackend::new(BackendConfig::tiny()).unwrap()
}

pub fn digest_of<B: DualEncoder>(b: &B) -> String {
    b.weight_digest()
}
