//! Prompt construction, initialization and per-sample reset.
//!
//! The visual prompt fed to the image encoder is
//! `translate(source, θ) + offset`, where `source` is a snapshot of the
//! text-side initialization taken at reset and `offset` is the learnable
//! per-sample context. At reset the offset is zero, so the visual prompt
//! is exactly the translated text prompt.

use ndarray::{s, Array2, Array3, ArrayView2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{assemble_image_input, DualEncoder, ImageSample, PatchTokens};
use crate::error::{Error, Result};
use crate::token_net::TokenNetParams;

pub const DEFAULT_TEMPLATE: &str = "a photo of a";

/// How the visual prompt is constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptVariant {
    /// Translated from the text template (the method).
    LanguageAware,
    /// Translated from random context vectors instead of the template.
    GenericLanguage,
    /// Randomly initialized prepended tokens, no translator.
    TokenRandom,
    /// Learnable pixel square in the top-left corner.
    Patched,
    /// Learnable pixel border frame.
    Padded,
    /// No visual prompt at all.
    Unprompted,
}

impl PromptVariant {
    pub const TABLE: [PromptVariant; 5] = [
        PromptVariant::Patched,
        PromptVariant::Padded,
        PromptVariant::TokenRandom,
        PromptVariant::GenericLanguage,
        PromptVariant::LanguageAware,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptVariant::LanguageAware => "language-aware",
            PromptVariant::GenericLanguage => "generic-language",
            PromptVariant::TokenRandom => "token-random",
            PromptVariant::Patched => "patched",
            PromptVariant::Padded => "padded",
            PromptVariant::Unprompted => "unprompted",
        }
    }

    pub fn uses_translator(self) -> bool {
        matches!(
            self,
            PromptVariant::LanguageAware | PromptVariant::GenericLanguage
        )
    }

    pub fn is_pixel(self) -> bool {
        matches!(self, PromptVariant::Patched | PromptVariant::Padded)
    }
}

impl std::str::FromStr for PromptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            PromptVariant::LanguageAware,
            PromptVariant::GenericLanguage,
            PromptVariant::TokenRandom,
            PromptVariant::Patched,
            PromptVariant::Padded,
            PromptVariant::Unprompted,
        ]
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown prompt variant `{s}`")))
    }
}

/// Geometry of the pixel-space prompts, in pixels. `None` picks the default
/// (an eighth of the shorter side for the square, a sixteenth for the frame).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelGeometry {
    pub patch_side: Option<usize>,
    pub pad_width: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub template: String,
    pub variant: PromptVariant,
    #[serde(default)]
    pub geometry: PixelGeometry,
    /// Seeds the random initializations of the generic and token-random variants.
    pub seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            template: DEFAULT_TEMPLATE.to_string(),
            variant: PromptVariant::LanguageAware,
            geometry: PixelGeometry::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextPrompt {
    pub tokens: Array2<f64>,
    pub source_text: String,
    init: Array2<f64>,
}

impl TextPrompt {
    pub fn new<B: DualEncoder>(source_text: &str, backend: &B) -> Self {
        let init = backend.word_tokens(source_text);
        Self {
            tokens: init.clone(),
            source_text: source_text.to_string(),
            init,
        }
    }

    pub fn initial(&self) -> &Array2<f64> {
        &self.init
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelKind {
    Patched,
    Padded,
}

/// A learnable additive image perturbation restricted to a fixed region.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPrompt {
    pub kind: PixelKind,
    pub mask: Array3<bool>,
    pub values: Array3<f64>,
}

impl PixelPrompt {
    pub fn new(
        kind: PixelKind,
        shape: (usize, usize, usize),
        geometry: PixelGeometry,
    ) -> Result<Self> {
        let (c, h, w) = shape;
        let side = h.min(w);
        let mut mask = Array3::from_elem((c, h, w), false);
        match kind {
            PixelKind::Patched => {
                let p = geometry.patch_side.unwrap_or((side / 8).max(1));
                if p == 0 || p > h || p > w {
                    return Err(Error::Config(format!(
                        "patched prompt side {p} exceeds {h}x{w} image"
                    )));
                }
                mask.slice_mut(s![.., ..p, ..p]).fill(true);
            }
            PixelKind::Padded => {
                let p = geometry.pad_width.unwrap_or((side / 16).max(1));
                if p == 0 || 2 * p > h || 2 * p > w {
                    return Err(Error::Config(format!(
                        "padded prompt width {p} exceeds {h}x{w} image"
                    )));
                }
                mask.fill(true);
                mask.slice_mut(s![.., p..h - p, p..w - p]).fill(false);
            }
        }
        Ok(Self {
            kind,
            mask,
            values: Array3::zeros((c, h, w)),
        })
    }

    /// Pixels covered by the prompt in one channel.
    pub fn region_size(&self) -> usize {
        self.mask
            .slice(s![0, .., ..])
            .iter()
            .filter(|&&m| m)
            .count()
    }

    pub fn reset(&mut self) {
        self.values.fill(0.0);
    }

    /// `clamp(x + δ, 0, 1)` inside the region.
    pub fn apply(&self, image: &ImageSample) -> Result<ImageSample> {
        if image.pixels.dim() != self.mask.dim() {
            return Err(Error::shape(
                "pixel prompt",
                format!("{:?}", self.mask.dim()),
                format!("{:?}", image.pixels.dim()),
            ));
        }
        let mut pixels = image.pixels.clone();
        Zip::from(&mut pixels)
            .and(&self.mask)
            .and(&self.values)
            .for_each(|p, &m, &v| {
                if m {
                    *p = (*p + v).clamp(0.0, 1.0);
                }
            });
        Ok(ImageSample::new(image.id.clone(), pixels))
    }

    /// Gradient on `δ` given the gradient on the prompted image.
    pub fn backward(&self, image: &ImageSample, grad_pixels: &Array3<f64>) -> Array3<f64> {
        let mut out = Array3::zeros(self.values.dim());
        Zip::from(&mut out)
            .and(&self.mask)
            .and(&self.values)
            .and(&image.pixels)
            .and(grad_pixels)
            .for_each(|o, &m, &v, &x, &g| {
                let y = x + v;
                if m && y > 0.0 && y < 1.0 {
                    *o = g;
                }
            });
        out
    }
}

/// The learnable visual side.
#[derive(Debug, Clone, PartialEq)]
pub enum VisualPrompt {
    Tokens {
        variant: PromptVariant,
        /// Translator input frozen at reset; `None` for token-random.
        source: Option<Array2<f64>>,
        offset: Array2<f64>,
        offset_init: Array2<f64>,
    },
    Pixels(PixelPrompt),
    None,
}

impl VisualPrompt {
    pub fn variant(&self) -> PromptVariant {
        match self {
            VisualPrompt::Tokens { variant, .. } => *variant,
            VisualPrompt::Pixels(p) => match p.kind {
                PixelKind::Patched => PromptVariant::Patched,
                PixelKind::Padded => PromptVariant::Padded,
            },
            VisualPrompt::None => PromptVariant::Unprompted,
        }
    }

    /// The token rows prepended to the image sequence (`n_p × d_v`).
    pub fn resolve(&self, theta: &TokenNetParams, d_v: usize) -> Result<Array2<f64>> {
        match self {
            VisualPrompt::Tokens {
                source: Some(src),
                offset,
                ..
            } => Ok(theta.translate(src.view())? + offset),
            VisualPrompt::Tokens {
                source: None,
                offset,
                ..
            } => Ok(offset.clone()),
            VisualPrompt::Pixels(_) | VisualPrompt::None => Ok(Array2::zeros((0, d_v))),
        }
    }

    pub fn pixel(&self) -> Option<&PixelPrompt> {
        match self {
            VisualPrompt::Pixels(p) => Some(p),
            _ => None,
        }
    }
}

/// The learnable pair `(P_t, P_v)` for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState {
    pub text: TextPrompt,
    pub visual: VisualPrompt,
}

impl PromptState {
    pub fn new<B: DualEncoder>(config: &PromptConfig, backend: &B) -> Result<Self> {
        let cfg = backend.config();
        let text = TextPrompt::new(&config.template, backend);
        let n_p = text.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut random = |rows: usize, cols: usize| {
            Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng))
        };
        let visual = match config.variant {
            PromptVariant::LanguageAware => VisualPrompt::Tokens {
                variant: config.variant,
                source: Some(text.initial().clone()),
                offset: Array2::zeros((n_p, cfg.d_v)),
                offset_init: Array2::zeros((n_p, cfg.d_v)),
            },
            PromptVariant::GenericLanguage => VisualPrompt::Tokens {
                variant: config.variant,
                source: Some(random(n_p, cfg.d_l)),
                offset: Array2::zeros((n_p, cfg.d_v)),
                offset_init: Array2::zeros((n_p, cfg.d_v)),
            },
            PromptVariant::TokenRandom => {
                let init = random(n_p, cfg.d_v);
                VisualPrompt::Tokens {
                    variant: config.variant,
                    source: None,
                    offset: init.clone(),
                    offset_init: init,
                }
            }
            PromptVariant::Patched => VisualPrompt::Pixels(PixelPrompt::new(
                PixelKind::Patched,
                (cfg.c_img, cfg.h, cfg.w),
                config.geometry,
            )?),
            PromptVariant::Padded => VisualPrompt::Pixels(PixelPrompt::new(
                PixelKind::Padded,
                (cfg.c_img, cfg.h, cfg.w),
                config.geometry,
            )?),
            PromptVariant::Unprompted => VisualPrompt::None,
        };
        Ok(Self { text, visual })
    }

    /// Restore the per-sample initialization. The translator is untouched.
    pub fn reset(&mut self) {
        self.text.tokens.assign(&self.text.init);
        match &mut self.visual {
            VisualPrompt::Tokens {
                offset,
                offset_init,
                ..
            } => offset.assign(offset_init),
            VisualPrompt::Pixels(p) => p.reset(),
            VisualPrompt::None => {}
        }
    }
}

/// Ordered class names and their frozen word-token runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVocabulary {
    pub names: Vec<String>,
    pub token_runs: Vec<Array2<f64>>,
}

impl ClassVocabulary {
    pub fn new<B: DualEncoder>(names: Vec<String>, backend: &B) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("class vocabulary is empty".into()));
        }
        let token_runs = names
            .iter()
            .map(|name| {
                let run = backend.word_tokens(name);
                if run.nrows() == 0 {
                    Err(Error::Config(format!("class name `{name}` has no tokens")))
                } else {
                    Ok(run)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { names, token_runs })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// `[sos, P_t..., class tokens..., eos]`.
pub fn build_text_input<B: DualEncoder>(
    prompt: ArrayView2<f64>,
    class_index: usize,
    vocab: &ClassVocabulary,
    backend: &B,
) -> Result<Array2<f64>> {
    let class = vocab.token_runs.get(class_index).ok_or(Error::Index {
        what: "class vocabulary",
        index: class_index,
        len: vocab.len(),
    })?;
    if class.nrows() == 0 {
        return Err(Error::Config(format!(
            "class `{}` has an empty token sequence",
            vocab.names[class_index]
        )));
    }
    let (sos, eos) = backend.delimiters();
    let d = sos.len();
    if prompt.ncols() != d && prompt.nrows() > 0 {
        return Err(Error::shape("text prompt", d, prompt.ncols()));
    }
    let n_p = prompt.nrows();
    let len = 2 + n_p + class.nrows();
    let mut seq = Array2::zeros((len, d));
    seq.row_mut(0).assign(&sos);
    if n_p > 0 {
        seq.slice_mut(s![1..1 + n_p, ..]).assign(&prompt);
    }
    seq.slice_mut(s![1 + n_p..len - 1, ..]).assign(class);
    seq.row_mut(len - 1).assign(&eos);
    Ok(seq)
}

/// `[P_v..., cls, patches...]`; pixel-space prompts are rejected.
pub fn build_visual_input(
    prompt: &VisualPrompt,
    resolved: ArrayView2<f64>,
    patches: &PatchTokens,
) -> Result<Array2<f64>> {
    if let VisualPrompt::Pixels(_) = prompt {
        if resolved.nrows() > 0 {
            return Err(Error::Config(
                "pixel-space prompt cannot supply prompt tokens".into(),
            ));
        }
    }
    if resolved.nrows() > 0 && resolved.ncols() != patches.cls.len() {
        return Err(Error::shape(
            "visual prompt",
            patches.cls.len(),
            resolved.ncols(),
        ));
    }
    Ok(assemble_image_input(resolved, patches))
}

/// Validate that a prompt is token-based before prepending it.
pub fn require_token_prompt(prompt: &VisualPrompt) -> Result<()> {
    match prompt {
        VisualPrompt::Pixels(_) => Err(Error::Config(
            "token prompt required, got a pixel-space prompt".into(),
        )),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackendConfig, ToyBackend};

    fn backend() -> ToyBackend {
        ToyBackend::new(BackendConfig::default()).unwrap()
    }

    fn vocab(b: &ToyBackend, names: &[&str]) -> ClassVocabulary {
        ClassVocabulary::new(names.iter().map(|s| s.to_string()).collect(), b).unwrap()
    }

    #[test]
    fn text_input_order_and_length() {
        let b = backend();
        let v = vocab(&b, &["sun flower", "rose"]);
        let prompt = TextPrompt::new(DEFAULT_TEMPLATE, &b);
        assert_eq!(prompt.len(), 4);
        let seq = build_text_input(prompt.tokens.view(), 0, &v, &b).unwrap();
        assert_eq!(seq.nrows(), 8);
        let (sos, eos) = b.delimiters();
        assert_eq!(seq.row(0), sos);
        assert_eq!(seq.row(7), eos);
        assert_eq!(seq.slice(s![1..5, ..]), prompt.tokens);
        assert_eq!(seq.slice(s![5..7, ..]), v.token_runs[0]);
    }

    #[test]
    fn duplicate_names_give_identical_sequences() {
        let b = backend();
        let v = vocab(&b, &["tulip", "tulip"]);
        let p = TextPrompt::new(DEFAULT_TEMPLATE, &b);
        assert_eq!(
            build_text_input(p.tokens.view(), 0, &v, &b).unwrap(),
            build_text_input(p.tokens.view(), 1, &v, &b).unwrap()
        );
    }

    #[test]
    fn text_input_index_out_of_range() {
        let b = backend();
        let v = vocab(&b, &["tulip"]);
        let p = TextPrompt::new(DEFAULT_TEMPLATE, &b);
        assert!(matches!(
            build_text_input(p.tokens.view(), 1, &v, &b),
            Err(Error::Index {
                index: 1,
                len: 1,
                ..
            })
        ));
    }

    #[test]
    fn flower_sized_vocabulary() {
        let b = backend();
        let names: Vec<String> = (0..102).map(|i| format!("flower {i}")).collect();
        let v = ClassVocabulary::new(names, &b).unwrap();
        let p = TextPrompt::new(DEFAULT_TEMPLATE, &b);
        let seqs: Vec<_> = (0..v.len())
            .map(|c| build_text_input(p.tokens.view(), c, &v, &b).unwrap())
            .collect();
        assert_eq!(seqs.len(), 102);
    }

    #[test]
    fn empty_class_name_is_rejected() {
        let b = backend();
        assert!(ClassVocabulary::new(vec!["  ".into()], &b).is_err());
        assert!(ClassVocabulary::new(vec![], &b).is_err());
    }

    #[test]
    fn visual_input_lengths_and_order() {
        let b = backend();
        let img = ImageSample::new("x", Array3::from_elem((3, 32, 32), 0.5));
        let pt = b.patchify(&img).unwrap();
        let prompt = Array2::from_shape_fn((4, 16), |(i, j)| (10 * i + j) as f64);
        let state = VisualPrompt::None;
        let seq = build_visual_input(&state, prompt.view(), &pt).unwrap();
        assert_eq!(seq.nrows(), 21);
        assert_eq!(seq.slice(s![..4, ..]), prompt);
        assert_eq!(seq.row(4), pt.cls);
        let empty = build_visual_input(&state, Array2::zeros((0, 16)).view(), &pt).unwrap();
        assert_eq!(empty.nrows(), 17);
        assert_eq!(
            empty,
            assemble_image_input(Array2::zeros((0, 16)).view(), &pt)
        );
    }

    #[test]
    fn pixel_prompt_rejected_as_token_prompt() {
        let p = VisualPrompt::Pixels(
            PixelPrompt::new(PixelKind::Padded, (3, 32, 32), PixelGeometry::default()).unwrap(),
        );
        assert!(require_token_prompt(&p).is_err());
        assert!(require_token_prompt(&VisualPrompt::None).is_ok());
    }

    #[test]
    fn pixel_prompt_geometry() {
        let padded =
            PixelPrompt::new(PixelKind::Padded, (3, 32, 32), PixelGeometry::default()).unwrap();
        assert_eq!(padded.region_size(), 32 * 32 - 28 * 28);
        let patched =
            PixelPrompt::new(PixelKind::Patched, (3, 32, 32), PixelGeometry::default()).unwrap();
        assert_eq!(patched.region_size(), 16);
        assert!(patched.mask[[0, 0, 0]] && !patched.mask[[0, 4, 4]]);
        let too_big = PixelGeometry {
            patch_side: Some(40),
            pad_width: Some(17),
        };
        assert!(PixelPrompt::new(PixelKind::Patched, (3, 32, 32), too_big).is_err());
        assert!(PixelPrompt::new(PixelKind::Padded, (3, 32, 32), too_big).is_err());
    }

    #[test]
    fn pixel_prompt_application() {
        let img = ImageSample::new("x", Array3::from_elem((3, 32, 32), 1.0));
        let mut p =
            PixelPrompt::new(PixelKind::Padded, (3, 32, 32), PixelGeometry::default()).unwrap();
        assert_eq!(p.apply(&img).unwrap(), img);
        p.values.fill(10.0);
        let out = p.apply(&img).unwrap();
        assert!(out.pixels.iter().all(|&v| v == 1.0));
        p.values.fill(-0.25);
        let out = p.apply(&img).unwrap();
        assert_eq!(out.pixels[[0, 0, 0]], 0.75);
        assert_eq!(out.pixels[[0, 10, 10]], 1.0);
    }

    #[test]
    fn reset_restores_initialization() {
        let b = backend();
        let theta = TokenNetParams::init(16, 16, 1).unwrap();
        let mut state = PromptState::new(&PromptConfig::default(), &b).unwrap();
        let first = state.visual.resolve(&theta, 16).unwrap();
        let p_t0 = state.text.tokens.clone();
        state.text.tokens.mapv_inplace(|v| v + 0.3);
        if let VisualPrompt::Tokens { offset, .. } = &mut state.visual {
            offset.fill(0.7);
        }
        state.reset();
        assert_eq!(state.text.tokens, p_t0);
        let again = state.visual.resolve(&theta, 16).unwrap();
        assert_eq!(again, first);
        assert_eq!(again, theta.translate(state.text.tokens.view()).unwrap());
    }

    #[test]
    fn token_random_shares_shapes_with_language_aware() {
        let b = backend();
        let theta = TokenNetParams::init(16, 16, 1).unwrap();
        let lang = PromptState::new(&PromptConfig::default(), &b).unwrap();
        let rand_cfg = PromptConfig {
            variant: PromptVariant::TokenRandom,
            ..PromptConfig::default()
        };
        let rnd = PromptState::new(&rand_cfg, &b).unwrap();
        let a = lang.visual.resolve(&theta, 16).unwrap();
        let c = rnd.visual.resolve(&theta, 16).unwrap();
        assert_eq!(a.dim(), c.dim());
        assert_ne!(a, c);
    }

    #[test]
    fn empty_template_has_no_prompt_rows() {
        let b = backend();
        let cfg = PromptConfig {
            template: String::new(),
            ..PromptConfig::default()
        };
        let s = PromptState::new(&cfg, &b).unwrap();
        let theta = TokenNetParams::init(16, 16, 0).unwrap();
        assert_eq!(s.text.len(), 0);
        assert_eq!(s.visual.resolve(&theta, 16).unwrap().nrows(), 0);
    }
}
