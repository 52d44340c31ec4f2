//! Frozen dual-encoder abstraction.
//!
//! A backend exposes an image branch and a text branch that both land in a
//! shared joint embedding space. Weights are never updated; only the
//! gradients with respect to the *inputs* (prompt tokens, pixels) are
//! exposed, through the tape returned by each forward call.

mod adapter;
mod config;
mod toy;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use sha2::{Digest, Sha256};

pub use adapter::{CallbackBackend, CallbackHooks, ForwardFn, VjpFn};
pub use config::BackendConfig;
pub use toy::ToyBackend;

use crate::error::{Error, Result};

/// A single image, channel-major (`C × H × W`), values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Array3<f64>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: Array3<f64>) -> Self {
        Self {
            id: id.into(),
            pixels,
        }
    }

    pub(crate) fn check(&self, config: &BackendConfig) -> Result<()> {
        let expected = (config.c_img, config.h, config.w);
        if self.pixels.dim() != expected {
            return Err(Error::shape(
                "image",
                format!("{:?}", expected),
                format!("{:?}", self.pixels.dim()),
            ));
        }
        if self.pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(&self.id, "non-finite pixel value"));
        }
        Ok(())
    }
}

/// Output of the frozen patch projection: one class token and `M` patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokens {
    pub cls: Array1<f64>,
    pub patches: Array2<f64>,
}

impl PatchTokens {
    pub fn len(&self) -> usize {
        1 + self.patches.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A vector in the joint image/text space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vec: Array1<f64>,
}

impl Embedding {
    pub fn norm(&self) -> f64 {
        self.vec.dot(&self.vec).sqrt()
    }

    pub fn width(&self) -> usize {
        self.vec.len()
    }
}

/// The frozen model `Φ`: deterministic, weight-frozen, differentiable in its inputs.
///
/// Every forward call returns a tape; the matching `backward_*` call turns an
/// upstream gradient on the output embedding into a gradient on the input
/// token rows. Backends never hand out gradients for their own weights.
pub trait DualEncoder: Send + Sync {
    type ImageTape;
    type TextTape;

    fn config(&self) -> &BackendConfig;

    /// Width shared by image and text embeddings.
    fn joint_width(&self) -> usize;

    /// Project an image into `cls` + `M` patch tokens.
    fn patchify(&self, image: &ImageSample) -> Result<PatchTokens>;

    /// Pull a gradient on the `M` patch tokens back to pixel space.
    fn patchify_backward(&self, grad_patches: ArrayView2<f64>) -> Result<Array3<f64>>;

    /// Frozen word embeddings for whitespace-separated text (one row per word).
    fn word_tokens(&self, text: &str) -> Array2<f64>;

    /// Frozen start and end-of-sequence token embeddings.
    fn delimiters(&self) -> (ArrayView1<'_, f64>, ArrayView1<'_, f64>);

    /// Encode `[prompt..., cls, patch_1..patch_M]`.
    fn encode_image(&self, tokens: ArrayView2<f64>) -> Result<(Embedding, Self::ImageTape)>;

    fn backward_image(&self, tape: &Self::ImageTape, upstream: ArrayView1<f64>) -> Array2<f64>;

    /// Encode `[sos, prompt..., class words..., eos]`.
    fn encode_text(&self, tokens: ArrayView2<f64>) -> Result<(Embedding, Self::TextTape)>;

    fn backward_text(&self, tape: &Self::TextTape, upstream: ArrayView1<f64>) -> Array2<f64>;

    /// Canonical lowercase-hex hash over every frozen parameter.
    fn weight_digest(&self) -> String;
}

/// Lowercase-hex SHA-256 over the little-endian bytes of a sequence of floats.
pub fn digest_f64<'a>(chunks: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut hasher = Sha256::new();
    for chunk in chunks {
        hasher.update((chunk.len() as u64).to_le_bytes());
        for v in chunk {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// Stack prompt rows before the class token and patches.
pub fn assemble_image_input(prompt: ArrayView2<f64>, patches: &PatchTokens) -> Array2<f64> {
    let d = patches.cls.len();
    let n_prompt = prompt.nrows();
    let mut seq = Array2::zeros((n_prompt + patches.len(), d));
    if n_prompt > 0 {
        seq.slice_mut(ndarray::s![..n_prompt, ..]).assign(&prompt);
    }
    seq.row_mut(n_prompt).assign(&patches.cls);
    seq.slice_mut(ndarray::s![n_prompt + 1.., ..])
        .assign(&patches.patches);
    seq
}
