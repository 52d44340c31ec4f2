//! Seeded random dual encoder: a pre-norm transformer per branch.
//!
//! Both branches share one block implementation. The image branch adds a
//! learned positional table to the class and patch rows only, so prepended
//! prompt rows carry no position. The text branch is causal and pools the
//! final (end-of-sequence) row; the image branch pools the class row.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BackendConfig, DualEncoder, Embedding, ImageSample, PatchTokens};
use crate::error::{Error, Result};

/// Rows in the text positional table.
pub const TEXT_CONTEXT: usize = 32;
/// Size of the hashed word-embedding table.
pub const VOCAB_SIZE: usize = 1024;
const LN_EPS: f64 = 1e-5;
const MLP_RATIO: usize = 4;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

struct ParamRng(ChaCha8Rng);

impl ParamRng {
    fn matrix(&mut self, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut self.0))
    }

    fn vector(&mut self, len: usize, std: f64) -> Array1<f64> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Array1::from_shape_simple_fn(len, || dist.sample(&mut self.0))
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gain: Array1<f64>,
    bias: Array1<f64>,
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    fn new(d: usize, rng: &mut ParamRng) -> Self {
        Self {
            gain: rng.vector(d, 0.1).mapv(|v| 1.0 + v),
            bias: rng.vector(d, 0.05),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
        let mut xhat = x - &mean.view().insert_axis(Axis(1));
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        xhat *= &rstd.view().insert_axis(Axis(1));
        let y = &xhat * &self.gain + &self.bias;
        (y, LnCache { xhat, rstd })
    }

    fn backward(&self, cache: &LnCache, dy: &Array2<f64>) -> Array2<f64> {
        let d = dy.ncols() as f64;
        let dxhat = dy * &self.gain;
        let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
        let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
        let mut dx = dxhat - &mean_dxhat.insert_axis(Axis(1));
        dx -= &(&cache.xhat * &mean_dxhat_xhat.insert_axis(Axis(1)));
        dx * cache.rstd.view().insert_axis(Axis(1))
    }

    fn params(&self) -> [&[f64]; 2] {
        [slice(&self.gain), slice(&self.bias)]
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    wq: Array2<f64>,
    bq: Array1<f64>,
    wk: Array2<f64>,
    bk: Array1<f64>,
    wv: Array2<f64>,
    bv: Array1<f64>,
    wo: Array2<f64>,
    bo: Array1<f64>,
    ln2: LayerNorm,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

struct BlockTape {
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    ln2: LnCache,
    pre: Array2<f64>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

impl Block {
    fn new(d: usize, rng: &mut ParamRng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let hidden = MLP_RATIO * d;
        Self {
            ln1: LayerNorm::new(d, rng),
            wq: rng.matrix(d, d, std),
            bq: rng.vector(d, 0.02),
            wk: rng.matrix(d, d, std),
            bk: rng.vector(d, 0.02),
            wv: rng.matrix(d, d, std),
            bv: rng.vector(d, 0.02),
            wo: rng.matrix(d, d, std),
            bo: rng.vector(d, 0.02),
            ln2: LayerNorm::new(d, rng),
            w1: rng.matrix(d, hidden, std),
            b1: rng.vector(hidden, 0.02),
            w2: rng.matrix(hidden, d, 1.0 / (hidden as f64).sqrt()),
            b2: rng.vector(d, 0.02),
        }
    }

    fn forward(&self, x: &Array2<f64>, causal: bool) -> (Array2<f64>, BlockTape) {
        let d = x.ncols() as f64;
        let (h1, ln1) = self.ln1.forward(x);
        let q = h1.dot(&self.wq) + &self.bq;
        let k = h1.dot(&self.wk) + &self.bk;
        let v = h1.dot(&self.wv) + &self.bv;
        let mut scores = q.dot(&k.t()) / d.sqrt();
        if causal {
            let n = scores.nrows();
            for i in 0..n {
                for j in (i + 1)..n {
                    scores[[i, j]] = f64::NEG_INFINITY;
                }
            }
        }
        let attn = softmax_rows(&scores);
        let o = attn.dot(&v);
        let x_mid = x + &(o.dot(&self.wo) + &self.bo);
        let (h2, ln2) = self.ln2.forward(&x_mid);
        let pre = h2.dot(&self.w1) + &self.b1;
        let act = pre.mapv(gelu);
        let out = &x_mid + &(act.dot(&self.w2) + &self.b2);
        let tape = BlockTape {
            ln1,
            q,
            k,
            v,
            attn,
            ln2,
            pre,
        };
        (out, tape)
    }

    fn backward(&self, tape: &BlockTape, d_out: &Array2<f64>) -> Array2<f64> {
        let d = d_out.ncols() as f64;
        // mlp branch
        let d_act = d_out.dot(&self.w2.t());
        let mut d_pre = d_act;
        Zip::from(&mut d_pre)
            .and(&tape.pre)
            .for_each(|g, &p| *g *= gelu_grad(p));
        let d_h2 = d_pre.dot(&self.w1.t());
        let d_mid = d_out + &self.ln2.backward(&tape.ln2, &d_h2);

        // attention branch
        let d_o = d_mid.dot(&self.wo.t());
        let d_attn = d_o.dot(&tape.v.t());
        let d_v = tape.attn.t().dot(&d_o);
        let row_dot = (&d_attn * &tape.attn).sum_axis(Axis(1));
        let d_scores = (&d_attn - &row_dot.insert_axis(Axis(1))) * &tape.attn / d.sqrt();
        let d_q = d_scores.dot(&tape.k);
        let d_k = d_scores.t().dot(&tape.q);
        let d_h1 = d_q.dot(&self.wq.t()) + d_k.dot(&self.wk.t()) + d_v.dot(&self.wv.t());
        d_mid + self.ln1.backward(&tape.ln1, &d_h1)
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(16);
        out.extend(self.ln1.params());
        for (w, b) in [
            (&self.wq, &self.bq),
            (&self.wk, &self.bk),
            (&self.wv, &self.bv),
            (&self.wo, &self.bo),
        ] {
            out.push(slice(w));
            out.push(slice(b));
        }
        out.extend(self.ln2.params());
        out.push(slice(&self.w1));
        out.push(slice(&self.b1));
        out.push(slice(&self.w2));
        out.push(slice(&self.b2));
        out
    }
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

#[derive(Debug, Clone)]
struct Encoder {
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    proj: Array2<f64>,
    causal: bool,
}

/// Forward record of one encoder pass.
pub struct EncoderTape {
    blocks: Vec<BlockTape>,
    pooled: usize,
    rows: usize,
    ln_post: LnCache,
}

impl std::fmt::Debug for EncoderTape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderTape")
            .field("rows", &self.rows)
            .field("pooled", &self.pooled)
            .finish_non_exhaustive()
    }
}

impl Encoder {
    fn new(d: usize, joint: usize, n_layers: usize, causal: bool, rng: &mut ParamRng) -> Self {
        let blocks = (0..n_layers).map(|_| Block::new(d, rng)).collect();
        Self {
            blocks,
            ln_post: LayerNorm::new(d, rng),
            proj: rng.matrix(d, joint, 1.0 / (d as f64).sqrt()),
            causal,
        }
    }

    fn forward(&self, mut x: Array2<f64>, pooled: usize) -> (Embedding, EncoderTape) {
        let rows = x.nrows();
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, tape) = block.forward(&x, self.causal);
            tapes.push(tape);
            x = next;
        }
        let pooled_row = x.slice(s![pooled..pooled + 1, ..]).to_owned();
        let (normed, ln_post) = self.ln_post.forward(&pooled_row);
        let vec = normed.row(0).dot(&self.proj);
        let tape = EncoderTape {
            blocks: tapes,
            pooled,
            rows,
            ln_post,
        };
        (Embedding { vec }, tape)
    }

    fn backward(&self, tape: &EncoderTape, upstream: ArrayView1<f64>) -> Array2<f64> {
        let d = self.proj.nrows();
        let d_normed = self.proj.dot(&upstream).insert_axis(Axis(0));
        let d_pooled = self.ln_post.backward(&tape.ln_post, &d_normed);
        let mut grad = Array2::zeros((tape.rows, d));
        grad.row_mut(tape.pooled).assign(&d_pooled.row(0));
        for (block, btape) in self.blocks.iter().zip(&tape.blocks).rev() {
            grad = block.backward(btape, &grad);
        }
        grad
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.blocks.iter().flat_map(Block::params).collect();
        out.extend(self.ln_post.params());
        out.push(slice(&self.proj));
        out
    }
}

/// Word-embedding scale, matching that of common pretrained text towers.
const TOKEN_STD: f64 = 0.02;

/// The desk-scale frozen backend.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    config: BackendConfig,
    patch_proj: Array2<f64>,
    patch_bias: Array1<f64>,
    cls: Array1<f64>,
    image_pos: Array2<f64>,
    vision: Encoder,
    words: Array2<f64>,
    sos: Array1<f64>,
    eos: Array1<f64>,
    text_pos: Array2<f64>,
    text: Encoder,
}

impl ToyBackend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ParamRng(ChaCha8Rng::seed_from_u64(config.seed));
        let (d_v, d_l, m) = (config.d_v, config.d_l, config.m);
        let joint = d_v;
        let patch_dim = config.patch_dim();
        let patch_proj = rng.matrix(patch_dim, d_v, 1.0 / (patch_dim as f64).sqrt());
        let patch_bias = rng.vector(d_v, 0.1);
        let cls = rng.vector(d_v, 1.0);
        let image_pos = rng.matrix(m + 1, d_v, 0.5);
        let vision = Encoder::new(d_v, joint, config.n_layers, false, &mut rng);
        let words = rng.matrix(VOCAB_SIZE, d_l, TOKEN_STD);
        let sos = rng.vector(d_l, TOKEN_STD);
        let eos = rng.vector(d_l, TOKEN_STD);
        let text_pos = rng.matrix(TEXT_CONTEXT, d_l, TOKEN_STD / 2.0);
        let text = Encoder::new(d_l, joint, config.n_layers, true, &mut rng);
        Ok(Self {
            config,
            patch_proj,
            patch_bias,
            cls,
            image_pos,
            vision,
            words,
            sos,
            eos,
            text_pos,
            text,
        })
    }

    /// Row of the hashed word table a word maps to.
    pub fn word_index(word: &str) -> usize {
        // FNV-1a
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in word.to_lowercase().bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
        (hash % VOCAB_SIZE as u64) as usize
    }

    fn check_width(
        &self,
        tokens: &ArrayView2<f64>,
        width: usize,
        what: &'static str,
    ) -> Result<()> {
        if tokens.ncols() != width {
            return Err(Error::shape(
                what,
                format!("token width {width}"),
                format!("token width {}", tokens.ncols()),
            ));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(what, "non-finite input token"));
        }
        Ok(())
    }
}

impl DualEncoder for ToyBackend {
    type ImageTape = EncoderTape;
    type TextTape = EncoderTape;

    fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn joint_width(&self) -> usize {
        self.vision.proj.ncols()
    }

    fn patchify(&self, image: &ImageSample) -> Result<PatchTokens> {
        image.check(&self.config)?;
        let g = self.config.grid();
        let (ph, pw) = self.config.patch_size();
        let mut flat = Array2::zeros((self.config.m, self.config.patch_dim()));
        for gy in 0..g {
            for gx in 0..g {
                let block =
                    image
                        .pixels
                        .slice(s![.., gy * ph..(gy + 1) * ph, gx * pw..(gx + 1) * pw]);
                let mut row = flat.row_mut(gy * g + gx);
                for (dst, src) in row.iter_mut().zip(block.iter()) {
                    *dst = *src;
                }
            }
        }
        let patches = flat.dot(&self.patch_proj) + &self.patch_bias;
        Ok(PatchTokens {
            cls: self.cls.clone(),
            patches,
        })
    }

    fn patchify_backward(&self, grad_patches: ArrayView2<f64>) -> Result<Array3<f64>> {
        let cfg = &self.config;
        if grad_patches.dim() != (cfg.m, cfg.d_v) {
            return Err(Error::shape(
                "patch gradient",
                format!("({}, {})", cfg.m, cfg.d_v),
                format!("{:?}", grad_patches.dim()),
            ));
        }
        let flat = grad_patches.dot(&self.patch_proj.t());
        let g = cfg.grid();
        let (ph, pw) = cfg.patch_size();
        let mut pixels = Array3::zeros((cfg.c_img, cfg.h, cfg.w));
        for gy in 0..g {
            for gx in 0..g {
                let mut block =
                    pixels.slice_mut(s![.., gy * ph..(gy + 1) * ph, gx * pw..(gx + 1) * pw]);
                for (dst, src) in block.iter_mut().zip(flat.row(gy * g + gx).iter()) {
                    *dst = *src;
                }
            }
        }
        Ok(pixels)
    }

    fn word_tokens(&self, text: &str) -> Array2<f64> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let mut out = Array2::zeros((words.len(), self.config.d_l));
        for (mut row, word) in out.rows_mut().into_iter().zip(words) {
            row.assign(&self.words.row(Self::word_index(word)));
        }
        out
    }

    fn delimiters(&self) -> (ArrayView1<'_, f64>, ArrayView1<'_, f64>) {
        (self.sos.view(), self.eos.view())
    }

    fn encode_image(&self, tokens: ArrayView2<f64>) -> Result<(Embedding, EncoderTape)> {
        self.check_width(&tokens, self.config.d_v, "image tokens")?;
        let fixed = self.config.m + 1;
        if tokens.nrows() < fixed {
            return Err(Error::shape(
                "image sequence",
                format!("at least {fixed} rows"),
                tokens.nrows(),
            ));
        }
        let n_prompt = tokens.nrows() - fixed;
        let mut x = tokens.to_owned();
        {
            let mut tail = x.slice_mut(s![n_prompt.., ..]);
            tail += &self.image_pos;
        }
        Ok(self.vision.forward(x, n_prompt))
    }

    fn backward_image(&self, tape: &EncoderTape, upstream: ArrayView1<f64>) -> Array2<f64> {
        // positional add is an identity for the gradient
        self.vision.backward(tape, upstream)
    }

    fn encode_text(&self, tokens: ArrayView2<f64>) -> Result<(Embedding, EncoderTape)> {
        self.check_width(&tokens, self.config.d_l, "text tokens")?;
        let n = tokens.nrows();
        if n < 3 {
            return Err(Error::shape(
                "text sequence",
                "at least sos, one class token, eos",
                n,
            ));
        }
        if n > TEXT_CONTEXT {
            return Err(Error::shape(
                "text sequence",
                format!("at most {TEXT_CONTEXT} rows"),
                n,
            ));
        }
        let x = &tokens + &self.text_pos.slice(s![..n, ..]);
        Ok(self.text.forward(x, n - 1))
    }

    fn backward_text(&self, tape: &EncoderTape, upstream: ArrayView1<f64>) -> Array2<f64> {
        self.text.backward(tape, upstream)
    }

    fn weight_digest(&self) -> String {
        let mut chunks: Vec<&[f64]> = vec![
            slice(&self.patch_proj),
            slice(&self.patch_bias),
            slice(&self.cls),
            slice(&self.image_pos),
        ];
        chunks.extend(self.vision.params());
        chunks.push(slice(&self.words));
        chunks.push(slice(&self.sos));
        chunks.push(slice(&self.eos));
        chunks.push(slice(&self.text_pos));
        chunks.extend(self.text.params());
        let temp = [self.config.temperature];
        chunks.push(&temp);
        super::digest_f64(chunks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::assemble_image_input;

    fn backend() -> ToyBackend {
        ToyBackend::new(BackendConfig::default()).unwrap()
    }

    fn image(cfg: &BackendConfig, seed: u64) -> ImageSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = rand_distr::Uniform::new(0.0, 1.0).unwrap();
        let px = Array3::from_shape_simple_fn((cfg.c_img, cfg.h, cfg.w), || dist.sample(&mut rng));
        ImageSample::new(format!("img{seed}"), px)
    }

    #[test]
    fn patch_count_and_width() {
        let b = backend();
        let tokens = b.patchify(&image(b.config(), 1)).unwrap();
        assert_eq!(tokens.patches.dim(), (16, 16));
        assert_eq!(tokens.cls.len(), 16);
        assert_eq!(tokens.len(), 17);
    }

    #[test]
    fn patchify_is_deterministic() {
        let b = backend();
        let img = image(b.config(), 2);
        assert_eq!(b.patchify(&img).unwrap(), b.patchify(&img).unwrap());
    }

    #[test]
    fn zero_image_yields_bias_pathway() {
        let cfg = BackendConfig::default();
        let a = ToyBackend::new(cfg.clone()).unwrap();
        let b = ToyBackend::new(cfg.clone()).unwrap();
        let zero = ImageSample::new("zero", Array3::zeros((3, 32, 32)));
        let ta = a.patchify(&zero).unwrap();
        for row in ta.patches.rows() {
            assert_eq!(row, a.patch_bias.view());
        }
        let flat = |t: &PatchTokens| super::super::digest_f64([slice(&t.patches)]);
        assert_eq!(flat(&ta), flat(&b.patchify(&zero).unwrap()));
    }

    #[test]
    fn shape_mismatch_names_dimensions() {
        let b = backend();
        let bad = ImageSample::new("bad", Array3::zeros((3, 16, 16)));
        let msg = b.patchify(&bad).unwrap_err().to_string();
        assert!(
            msg.contains("(3, 32, 32)") && msg.contains("(3, 16, 16)"),
            "{msg}"
        );
    }

    #[test]
    fn prompt_length_arithmetic() {
        let b = backend();
        let tokens = b.patchify(&image(b.config(), 3)).unwrap();
        let prompt = Array2::from_elem((4, 16), 0.1);
        let seq = assemble_image_input(prompt.view(), &tokens);
        assert_eq!(seq.nrows(), 21);
        let (emb, _) = b.encode_image(seq.view()).unwrap();
        assert_eq!(emb.width(), b.joint_width());
    }

    #[test]
    fn permuting_patches_changes_output() {
        let b = backend();
        let tokens = b.patchify(&image(b.config(), 4)).unwrap();
        let seq = assemble_image_input(Array2::zeros((0, 16)).view(), &tokens);
        let mut swapped = seq.clone();
        let (r1, r2) = (3, 9);
        let tmp = swapped.row(r1).to_owned();
        let other = swapped.row(r2).to_owned();
        swapped.row_mut(r1).assign(&other);
        swapped.row_mut(r2).assign(&tmp);
        let (a, _) = b.encode_image(seq.view()).unwrap();
        let (c, _) = b.encode_image(swapped.view()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_prompt_is_unprompted() {
        let b = backend();
        let tokens = b.patchify(&image(b.config(), 5)).unwrap();
        let seq = assemble_image_input(Array2::zeros((0, 16)).view(), &tokens);
        assert_eq!(seq.nrows(), 17);
        assert!(b.encode_image(seq.view()).is_ok());
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let b = backend();
        let err = b.encode_image(Array2::zeros((17, 8)).view()).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        let err = b.encode_text(Array2::zeros((5, 4)).view()).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn joint_widths_match() {
        let b = ToyBackend::new(BackendConfig {
            d_v: 12,
            d_l: 20,
            ..BackendConfig::default()
        })
        .unwrap();
        let tokens = b.patchify(&image(b.config(), 6)).unwrap();
        let seq = assemble_image_input(Array2::zeros((0, 12)).view(), &tokens);
        let (img, _) = b.encode_image(seq.view()).unwrap();
        let (txt, _) = b
            .encode_text(Array2::from_elem((4, 20), 0.3).view())
            .unwrap();
        assert_eq!(img.width(), txt.width());
    }

    #[test]
    fn same_seed_same_digest() {
        assert_eq!(backend().weight_digest(), backend().weight_digest());
        let other = ToyBackend::new(BackendConfig {
            seed: 1,
            ..BackendConfig::default()
        })
        .unwrap();
        assert_ne!(backend().weight_digest(), other.weight_digest());
        assert_eq!(backend().weight_digest().len(), 64);
    }

    /// Directional check of the two input vjps against central differences.
    #[test]
    fn input_gradients_match_finite_differences() {
        let b = ToyBackend::new(BackendConfig::tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let seq = Array2::from_shape_simple_fn((7, 8), || dist.sample(&mut rng));
        let probe = Array1::from_shape_simple_fn(8, || dist.sample(&mut rng));
        let f_img = |x: &Array2<f64>| b.encode_image(x.view()).unwrap().0.vec.dot(&probe);
        let f_txt = |x: &Array2<f64>| b.encode_text(x.view()).unwrap().0.vec.dot(&probe);
        let (_, tape) = b.encode_image(seq.view()).unwrap();
        let g_img = b.backward_image(&tape, probe.view());
        let (_, tape) = b.encode_text(seq.view()).unwrap();
        let g_txt = b.backward_text(&tape, probe.view());
        let h = 1e-5;
        for (f, g) in [
            (&f_img as &dyn Fn(&Array2<f64>) -> f64, &g_img),
            (&f_txt, &g_txt),
        ] {
            for idx in [(0, 0), (2, 5), (4, 1), (6, 7)] {
                let mut plus = seq.clone();
                plus[idx] += h;
                let mut minus = seq.clone();
                minus[idx] -= h;
                let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
                assert!(
                    (numeric - g[idx]).abs() < 1e-7 * (1.0 + numeric.abs()),
                    "{idx:?}: {numeric} vs {}",
                    g[idx]
                );
            }
        }
    }

    #[test]
    fn causal_text_ignores_future_rows_before_pool() {
        // with a causal mask, gradient flows into every row because the pooled row is last
        let b = ToyBackend::new(BackendConfig::tiny()).unwrap();
        let seq = Array2::from_elem((5, 8), 0.2)
            + &Array2::from_shape_fn((5, 8), |(i, j)| (i * 8 + j) as f64 * 0.01);
        let (_, tape) = b.encode_text(seq.view()).unwrap();
        let g = b.backward_text(&tape, Array1::ones(8).view());
        for row in g.rows() {
            assert!(row.iter().any(|v| *v != 0.0));
        }
    }
}
