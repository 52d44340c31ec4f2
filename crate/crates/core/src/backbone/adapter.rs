//! Plug an externally hosted encoder (e.g. a pretrained CLIP running in
//! another runtime) into the adaptation loop through plain callbacks.
//!
//! The host supplies patch tokens, word embeddings, forward embeddings and a
//! vector-Jacobian callback per branch. Tapes only remember the input rows,
//! so the gradient callback is free to recompute its own forward pass.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};

use super::{BackendConfig, DualEncoder, Embedding, ImageSample, PatchTokens, ToyBackend};
use crate::error::{Error, Result};

/// Forward callback: input token rows to an embedding.
pub type ForwardFn = Box<dyn Fn(ArrayView2<f64>) -> Result<Array1<f64>> + Send + Sync>;
/// Vector-Jacobian callback: input rows and an upstream gradient to a gradient on the rows.
pub type VjpFn = Box<dyn Fn(ArrayView2<f64>, ArrayView1<f64>) -> Array2<f64> + Send + Sync>;

#[allow(clippy::type_complexity)]
pub struct CallbackHooks {
    pub patchify: Box<dyn Fn(&ImageSample) -> Result<PatchTokens> + Send + Sync>,
    /// Optional; pixel-space prompts need it.
    pub patchify_backward:
        Option<Box<dyn Fn(ArrayView2<f64>) -> Result<Array3<f64>> + Send + Sync>>,
    pub word_tokens: Box<dyn Fn(&str) -> Array2<f64> + Send + Sync>,
    pub encode_image: ForwardFn,
    pub image_vjp: VjpFn,
    pub encode_text: ForwardFn,
    pub text_vjp: VjpFn,
    pub weight_digest: Box<dyn Fn() -> String + Send + Sync>,
}

pub struct CallbackBackend {
    config: BackendConfig,
    joint_width: usize,
    sos: Array1<f64>,
    eos: Array1<f64>,
    hooks: CallbackHooks,
}

#[derive(Debug)]
pub struct InputTape(Array2<f64>);

impl CallbackBackend {
    pub fn new(
        config: BackendConfig,
        joint_width: usize,
        sos: Array1<f64>,
        eos: Array1<f64>,
        hooks: CallbackHooks,
    ) -> Result<Self> {
        config.validate()?;
        if sos.len() != config.d_l || eos.len() != config.d_l {
            return Err(Error::shape(
                "delimiter tokens",
                config.d_l,
                sos.len().max(eos.len()),
            ));
        }
        Ok(Self {
            config,
            joint_width,
            sos,
            eos,
            hooks,
        })
    }

    /// Route every call through callbacks backed by a toy encoder.
    pub fn wrapping(toy: Arc<ToyBackend>) -> Self {
        let (sos, eos) = toy.delimiters();
        let (sos, eos) = (sos.to_owned(), eos.to_owned());
        let config = toy.config().clone();
        let joint_width = toy.joint_width();
        let t = |toy: &Arc<ToyBackend>| Arc::clone(toy);
        let (a, b, c, d, e, f, g, h) = (
            t(&toy),
            t(&toy),
            t(&toy),
            t(&toy),
            t(&toy),
            t(&toy),
            t(&toy),
            t(&toy),
        );
        let hooks = CallbackHooks {
            patchify: Box::new(move |img| a.patchify(img)),
            patchify_backward: Some(Box::new(move |grad| b.patchify_backward(grad))),
            word_tokens: Box::new(move |text| c.word_tokens(text)),
            encode_image: Box::new(move |x| d.encode_image(x).map(|(emb, _)| emb.vec)),
            image_vjp: Box::new(move |x, up| {
                let (_, tape) = e.encode_image(x).expect("input validated on forward");
                e.backward_image(&tape, up)
            }),
            encode_text: Box::new(move |x| f.encode_text(x).map(|(emb, _)| emb.vec)),
            text_vjp: Box::new(move |x, up| {
                let (_, tape) = g.encode_text(x).expect("input validated on forward");
                g.backward_text(&tape, up)
            }),
            weight_digest: Box::new(move || h.weight_digest()),
        };
        Self {
            config,
            joint_width,
            sos,
            eos,
            hooks,
        }
    }

    fn check_embedding(&self, vec: Array1<f64>) -> Result<Embedding> {
        if vec.len() != self.joint_width {
            return Err(Error::shape(
                "adapter embedding",
                self.joint_width,
                vec.len(),
            ));
        }
        Ok(Embedding { vec })
    }
}

impl DualEncoder for CallbackBackend {
    type ImageTape = InputTape;
    type TextTape = InputTape;

    fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn joint_width(&self) -> usize {
        self.joint_width
    }

    fn patchify(&self, image: &ImageSample) -> Result<PatchTokens> {
        image.check(&self.config)?;
        let tokens = (self.hooks.patchify)(image)?;
        if tokens.patches.dim() != (self.config.m, self.config.d_v)
            || tokens.cls.len() != self.config.d_v
        {
            return Err(Error::shape(
                "adapter patch tokens",
                format!("({}, {})", self.config.m, self.config.d_v),
                format!("{:?}", tokens.patches.dim()),
            ));
        }
        Ok(tokens)
    }

    fn patchify_backward(&self, grad_patches: ArrayView2<f64>) -> Result<Array3<f64>> {
        match &self.hooks.patchify_backward {
            Some(hook) => hook(grad_patches),
            None => Err(Error::Unsupported("pixel gradients")),
        }
    }

    fn word_tokens(&self, text: &str) -> Array2<f64> {
        (self.hooks.word_tokens)(text)
    }

    fn delimiters(&self) -> (ArrayView1<'_, f64>, ArrayView1<'_, f64>) {
        (self.sos.view(), self.eos.view())
    }

    fn encode_image(&self, tokens: ArrayView2<f64>) -> Result<(Embedding, InputTape)> {
        let emb = self.check_embedding((self.hooks.encode_image)(tokens)?)?;
        Ok((emb, InputTape(tokens.to_owned())))
    }

    fn backward_image(&self, tape: &InputTape, upstream: ArrayView1<f64>) -> Array2<f64> {
        (self.hooks.image_vjp)(tape.0.view(), upstream)
    }

    fn encode_text(&self, tokens: ArrayView2<f64>) -> Result<(Embedding, InputTape)> {
        let emb = self.check_embedding((self.hooks.encode_text)(tokens)?)?;
        Ok((emb, InputTape(tokens.to_owned())))
    }

    fn backward_text(&self, tape: &InputTape, upstream: ArrayView1<f64>) -> Array2<f64> {
        (self.hooks.text_vjp)(tape.0.view(), upstream)
    }

    fn weight_digest(&self) -> String {
        (self.hooks.weight_digest)()
    }
}
