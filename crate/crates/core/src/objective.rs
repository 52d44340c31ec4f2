//! Context-aware test-time loss.
//!
//! Class scores are temperature-scaled cosine similarities between the
//! prompted image embedding and each prompted class-name embedding. The
//! unlabeled test sample contributes its Shannon entropy; each labeled
//! in-context example contributes `λ · cross-entropy`. All images in one
//! evaluation share a single resolved visual prompt.

use ndarray::{s, Array1, Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::backbone::{DualEncoder, Embedding, ImageSample};
use crate::error::{Error, Result};
use crate::prompts::{
    build_text_input, build_visual_input, ClassVocabulary, PromptState, VisualPrompt,
};
use crate::token_net::{TokenNetGrad, TokenNetParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ClassProbabilities {
    /// Numerically stable softmax.
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs = exps.into_iter().map(|e| e / sum).collect();
        Self { logits, probs }
    }

    fn log_probs(&self) -> Vec<f64> {
        let max = self
            .logits
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + self
                .logits
                .iter()
                .map(|z| (z - max).exp())
                .sum::<f64>()
                .ln();
        self.logits.iter().map(|z| z - lse).collect()
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `-Σ p log p` in nats.
pub fn entropy_loss(p: &ClassProbabilities) -> f64 {
    let logp = p.log_probs();
    let h = -p.probs.iter().zip(&logp).map(|(p, lp)| p * lp).sum::<f64>();
    h.max(0.0)
}

/// `-log p_gold`.
pub fn supervised_loss(p: &ClassProbabilities, gold: usize) -> Result<f64> {
    if gold >= p.len() {
        return Err(Error::Index {
            what: "class probabilities",
            index: gold,
            len: p.len(),
        });
    }
    Ok(-p.log_probs()[gold])
}

/// Which terms of the loss are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Entropy on the test sample only (no supervised term).
    EntropyOnly,
    /// Supervised term on in-context examples only.
    SupervisedOnly,
    /// Both terms.
    ContextAware,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::EntropyOnly => "w/o S-obj",
            Objective::SupervisedOnly => "w/o U-obj",
            Objective::ContextAware => "CU-obj",
        }
    }

    fn entropy(self) -> bool {
        !matches!(self, Objective::SupervisedOnly)
    }

    fn supervised(self) -> bool {
        !matches!(self, Objective::EntropyOnly)
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy-only" | "w/o-s-obj" => Ok(Objective::EntropyOnly),
            "supervised-only" | "w/o-u-obj" => Ok(Objective::SupervisedOnly),
            "context-aware" | "cu-obj" => Ok(Objective::ContextAware),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub entropy_term: f64,
    pub supervised_terms: Vec<f64>,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(entropy_term: f64, supervised_terms: Vec<f64>, lambda: f64) -> Self {
        let total = entropy_term + lambda * supervised_terms.iter().sum::<f64>();
        Self {
            entropy_term,
            supervised_terms,
            lambda,
            total,
        }
    }
}

/// Parameters that receive gradients in one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LiveSet {
    pub visual: bool,
    pub theta: bool,
    pub text: bool,
}

impl LiveSet {
    pub const NONE: LiveSet = LiveSet {
        visual: false,
        theta: false,
        text: false,
    };
    pub const ALL: LiveSet = LiveSet {
        visual: true,
        theta: true,
        text: true,
    };

    fn any(self) -> bool {
        self.visual || self.theta || self.text
    }
}

/// Gradients on the live parameters; `None` for frozen or absent ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptGrads {
    /// On the visual prompt rows as fed to the image encoder.
    pub visual: Option<Array2<f64>>,
    pub pixels: Option<Array3<f64>>,
    pub theta: Option<TokenNetGrad>,
    pub text: Option<Array2<f64>>,
}

impl PromptGrads {
    pub fn scale(&mut self, factor: f64) {
        if let Some(g) = &mut self.visual {
            *g *= factor;
        }
        if let Some(g) = &mut self.pixels {
            *g *= factor;
        }
        if let Some(g) = &mut self.theta {
            g.weight *= factor;
            g.bias *= factor;
        }
        if let Some(g) = &mut self.text {
            *g *= factor;
        }
    }
}

/// Encoder invocation counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardCounter {
    pub vision: u64,
    /// Individual class-name encodings actually computed.
    pub text: u64,
    /// Requests for a full set of class embeddings (cached or not).
    pub text_batches: u64,
}

impl std::ops::Sub for ForwardCounter {
    type Output = ForwardCounter;

    fn sub(self, rhs: Self) -> Self {
        ForwardCounter {
            vision: self.vision - rhs.vision,
            text: self.text - rhs.text,
            text_batches: self.text_batches - rhs.text_batches,
        }
    }
}

/// One labeled (or label-stripped) in-context pair.
#[derive(Debug, Clone, Copy)]
pub struct ContextPair<'a> {
    pub image: &'a ImageSample,
    pub label: Option<usize>,
}

/// Everything needed to score images under the current prompts.
pub struct LossInputs<'a, B: DualEncoder> {
    pub backend: &'a B,
    pub prompts: &'a PromptState,
    pub theta: &'a TokenNetParams,
    pub vocab: &'a ClassVocabulary,
}

pub struct Evaluation {
    pub breakdown: LossBreakdown,
    pub test_probs: ClassProbabilities,
    pub grads: PromptGrads,
    /// Class embeddings under the prompts used for this evaluation.
    pub class_embeddings: Vec<Embedding>,
    /// Address of the visual prompt tensor seen by each image-encoder call.
    pub prompt_ids: Vec<usize>,
}

fn unit(emb: &Embedding, sample: &str) -> Result<(Array1<f64>, f64)> {
    let norm = emb.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::numerical(sample, format!("embedding norm {norm}")));
    }
    Ok((&emb.vec / norm, norm))
}

/// Gradient through `x / |x|`.
fn unit_backward(xhat: &Array1<f64>, norm: f64, d_xhat: ArrayView1<f64>) -> Array1<f64> {
    (&d_xhat - &(xhat * xhat.dot(&d_xhat))) / norm
}

struct TextSide<T> {
    units: Vec<(Array1<f64>, f64)>,
    tapes: Vec<T>,
    embeddings: Vec<Embedding>,
}

fn encode_classes<B: DualEncoder>(
    inputs: &LossInputs<'_, B>,
    counter: &mut ForwardCounter,
) -> Result<TextSide<B::TextTape>> {
    let mut side = TextSide {
        units: Vec::with_capacity(inputs.vocab.len()),
        tapes: Vec::with_capacity(inputs.vocab.len()),
        embeddings: Vec::with_capacity(inputs.vocab.len()),
    };
    counter.text_batches += 1;
    for c in 0..inputs.vocab.len() {
        let seq = build_text_input(
            inputs.prompts.text.tokens.view(),
            c,
            inputs.vocab,
            inputs.backend,
        )?;
        let (emb, tape) = inputs.backend.encode_text(seq.view())?;
        counter.text += 1;
        side.units.push(unit(&emb, &inputs.vocab.names[c])?);
        side.tapes.push(tape);
        side.embeddings.push(emb);
    }
    Ok(side)
}

/// Encode class names under the current text prompt.
pub fn class_embeddings<B: DualEncoder>(
    inputs: &LossInputs<'_, B>,
    counter: &mut ForwardCounter,
) -> Result<Vec<Embedding>> {
    Ok(encode_classes(inputs, counter)?.embeddings)
}

fn scores(
    image_unit: &Array1<f64>,
    class_units: &[(Array1<f64>, f64)],
    temperature: f64,
) -> ClassProbabilities {
    let logits = class_units
        .iter()
        .map(|(t, _)| temperature * image_unit.dot(t))
        .collect();
    ClassProbabilities::from_logits(logits)
}

fn prompted_image(prompts: &PromptState, image: &ImageSample) -> Result<ImageSample> {
    match prompts.visual.pixel() {
        Some(pixel) => pixel.apply(image),
        None => Ok(image.clone()),
    }
}

/// Class probabilities for one image, given precomputed class embeddings.
pub fn class_probabilities_with<B: DualEncoder>(
    image: &ImageSample,
    inputs: &LossInputs<'_, B>,
    class_embeddings: &[Embedding],
    counter: &mut ForwardCounter,
) -> Result<ClassProbabilities> {
    let backend = inputs.backend;
    let resolved = inputs
        .prompts
        .visual
        .resolve(inputs.theta, backend.config().d_v)?;
    let shown = prompted_image(inputs.prompts, image)?;
    let patches = backend.patchify(&shown)?;
    let seq = build_visual_input(&inputs.prompts.visual, resolved.view(), &patches)?;
    let (emb, _) = backend.encode_image(seq.view())?;
    counter.vision += 1;
    let (u, _) = unit(&emb, &image.id)?;
    let class_units = class_embeddings
        .iter()
        .zip(&inputs.vocab.names)
        .map(|(e, name)| unit(e, name))
        .collect::<Result<Vec<_>>>()?;
    let probs = scores(&u, &class_units, backend.config().temperature);
    check_finite(&probs, &image.id)?;
    Ok(probs)
}

/// Class probabilities for one image under the current prompts.
pub fn class_probabilities<B: DualEncoder>(
    image: &ImageSample,
    inputs: &LossInputs<'_, B>,
    counter: &mut ForwardCounter,
) -> Result<ClassProbabilities> {
    let classes = class_embeddings(inputs, counter)?;
    class_probabilities_with(image, inputs, &classes, counter)
}

fn check_finite(p: &ClassProbabilities, id: &str) -> Result<()> {
    if p.probs.iter().chain(&p.logits).any(|v| !v.is_finite()) {
        return Err(Error::numerical(id, "non-finite class scores"));
    }
    Ok(())
}

/// Combined loss over the test sample and its context, with gradients for
/// the parameters in `live`.
pub fn combined_loss<B: DualEncoder>(
    test: &ImageSample,
    context: &[ContextPair<'_>],
    inputs: &LossInputs<'_, B>,
    objective: Objective,
    lambda: f64,
    live: LiveSet,
    counter: &mut ForwardCounter,
) -> Result<Evaluation> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let backend = inputs.backend;
    let cfg = backend.config();
    let tau = cfg.temperature;
    let n_classes = inputs.vocab.len();
    let visual = &inputs.prompts.visual;
    let resolved = visual.resolve(inputs.theta, cfg.d_v)?;
    let n_prompt = resolved.nrows();
    let wants_image_grad = live.visual || live.theta;
    let pixel_live = live.visual && visual.pixel().is_some();

    let text = encode_classes(inputs, counter)?;
    let mut d_class_units: Vec<Array1<f64>> = vec![Array1::zeros(backend.joint_width()); n_classes];
    let mut d_visual = Array2::<f64>::zeros((n_prompt, cfg.d_v));
    let mut d_pixels = visual.pixel().map(|p| Array3::<f64>::zeros(p.values.dim()));
    let mut prompt_ids = Vec::with_capacity(context.len() + 1);

    let mut entropy_term = 0.0;
    let mut supervised_terms = Vec::new();
    let mut test_probs = None;

    let labeled = context
        .iter()
        .filter_map(|pair| pair.label.map(|l| (pair.image, Some(l))));
    let batch = std::iter::once((test, None)).chain(labeled);
    for (image, label) in batch {
        if let Some(gold) = label {
            if gold >= n_classes {
                return Err(Error::Index {
                    what: "context label",
                    index: gold,
                    len: n_classes,
                });
            }
        }
        let shown = prompted_image(inputs.prompts, image)?;
        let patches = backend.patchify(&shown)?;
        let seq = build_visual_input(visual, resolved.view(), &patches)?;
        let (emb, tape) = backend.encode_image(seq.view())?;
        counter.vision += 1;
        prompt_ids.push(resolved.as_ptr() as usize);
        let (u, u_norm) = unit(&emb, &image.id)?;
        let probs = scores(&u, &text.units, tau);
        check_finite(&probs, &image.id)?;

        // dL/dlogits for this image's term
        let d_logits: Option<Vec<f64>> = match label {
            None => {
                let out = if objective.entropy() {
                    entropy_term = entropy_loss(&probs);
                    let logp = probs.log_probs();
                    Some(
                        probs
                            .probs
                            .iter()
                            .zip(&logp)
                            .map(|(p, lp)| -p * (lp + entropy_term))
                            .collect(),
                    )
                } else {
                    None
                };
                test_probs = Some(probs.clone());
                out
            }
            Some(gold) => {
                if !objective.supervised() {
                    continue;
                }
                supervised_terms.push(supervised_loss(&probs, gold)?);
                Some(
                    probs
                        .probs
                        .iter()
                        .enumerate()
                        .map(|(c, p)| lambda * (p - if c == gold { 1.0 } else { 0.0 }))
                        .collect(),
                )
            }
        };
        let Some(d_logits) = d_logits else { continue };
        if !live.any() && !pixel_live {
            continue;
        }
        let mut d_u = Array1::<f64>::zeros(u.len());
        for (c, dz) in d_logits.iter().enumerate() {
            let t = &text.units[c].0;
            d_u.scaled_add(tau * dz, t);
            if live.text {
                d_class_units[c].scaled_add(tau * dz, &u);
            }
        }
        if wants_image_grad || pixel_live {
            let d_emb = unit_backward(&u, u_norm, d_u.view());
            let d_seq = backend.backward_image(&tape, d_emb.view());
            if n_prompt > 0 {
                d_visual += &d_seq.slice(s![..n_prompt, ..]);
            }
            if let (Some(acc), Some(pixel)) = (&mut d_pixels, visual.pixel()) {
                if pixel_live {
                    let d_patch = d_seq.slice(s![n_prompt + 1.., ..]);
                    let d_img = backend.patchify_backward(d_patch)?;
                    *acc += &pixel.backward(image, &d_img);
                }
            }
        }
    }

    let breakdown = LossBreakdown::new(entropy_term, supervised_terms, lambda);
    if !breakdown.total.is_finite() {
        return Err(Error::numerical(
            &test.id,
            format!("loss is {}", breakdown.total),
        ));
    }

    let mut grads = PromptGrads::default();
    if live.text && !inputs.prompts.text.is_empty() {
        let n_p = inputs.prompts.text.len();
        let mut d_text = Array2::<f64>::zeros((n_p, cfg.d_l));
        for (c, d_unit) in d_class_units.iter().enumerate() {
            let (t_hat, t_norm) = &text.units[c];
            let d_emb = unit_backward(t_hat, *t_norm, d_unit.view());
            let d_seq = backend.backward_text(&text.tapes[c], d_emb.view());
            d_text += &d_seq.slice(s![1..1 + n_p, ..]);
        }
        grads.text = Some(d_text);
    }
    if let VisualPrompt::Tokens { source, .. } = visual {
        if live.theta {
            if let Some(src) = source {
                let (g, _) = inputs.theta.backward(src.view(), d_visual.view());
                grads.theta = Some(g);
            }
        }
        if live.visual {
            grads.visual = Some(d_visual);
        }
    }
    if pixel_live {
        grads.pixels = d_pixels;
    }

    Ok(Evaluation {
        breakdown,
        test_probs: test_probs.expect("test sample is always scored"),
        grads,
        class_embeddings: text.embeddings,
        prompt_ids,
    })
}

/// Sum of the supervised terms, i.e. `∂ total / ∂ λ`.
pub fn lambda_sensitivity(breakdown: &LossBreakdown) -> f64 {
    breakdown.supervised_terms.iter().sum()
}
