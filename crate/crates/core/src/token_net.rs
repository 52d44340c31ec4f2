//! Language-to-vision token translator.
//!
//! A single affine layer maps text prompt tokens (width `d_l`) onto visual
//! prompt tokens (width `d_v`), row by row. Its parameters persist across
//! the whole evaluation stream.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::digest_f64;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TokenNetParams {
    /// `d_v × d_l`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub seed: u64,
}

/// Gradients for a [`TokenNetParams`], same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenNetGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl TokenNetParams {
    /// Zero-mean Gaussian weights with std `1/sqrt(d_l)`, zero bias.
    pub fn init(d_l: usize, d_v: usize, seed: u64) -> Result<Self> {
        if d_l == 0 || d_v == 0 {
            return Err(Error::Config(format!(
                "token net dimensions must be positive (d_l={d_l}, d_v={d_v})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0 / (d_l as f64).sqrt()).expect("finite std");
        Ok(Self {
            weight: Array2::from_shape_simple_fn((d_v, d_l), || dist.sample(&mut rng)),
            bias: Array1::zeros(d_v),
            seed,
        })
    }

    pub fn d_v(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_l(&self) -> usize {
        self.weight.ncols()
    }

    /// `P_v[k] = W · P_t[k] + b` for every row `k`.
    pub fn translate(&self, text_tokens: ArrayView2<f64>) -> Result<Array2<f64>> {
        if text_tokens.ncols() != self.d_l() {
            return Err(Error::shape(
                "token net input",
                self.d_l(),
                text_tokens.ncols(),
            ));
        }
        Ok(text_tokens.dot(&self.weight.t()) + &self.bias)
    }

    /// Pull `dL/dP_v` back to the parameters and to the source tokens.
    pub fn backward(
        &self,
        text_tokens: ArrayView2<f64>,
        grad_out: ArrayView2<f64>,
    ) -> (TokenNetGrad, Array2<f64>) {
        let grad = TokenNetGrad {
            weight: grad_out.t().dot(&text_tokens),
            bias: grad_out.sum_axis(Axis(0)),
        };
        (grad, grad_out.dot(&self.weight))
    }

    pub fn digest(&self) -> String {
        digest_f64([
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ])
    }

    /// Two header lines (`d_v d_l`, `seed`), then `d_v` weight rows and one bias row.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{} {}", self.d_v(), self.d_l()).unwrap();
        writeln!(out, "{}", self.seed).unwrap();
        for row in self.weight.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
        let line: Vec<String> = self.bias.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Parse {
            path: "<token net>".into(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| err(0, format!("missing {what}")))
        };
        let (ln, dims) = next("dimension header")?;
        let dims: Vec<usize> = dims
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(ln + 1, format!("bad dimensions: {e}")))?;
        let [d_v, d_l] = dims[..] else {
            return Err(err(ln + 1, "expected `d_v d_l`".into()));
        };
        let (ln, seed) = next("seed header")?;
        let seed = seed
            .trim()
            .parse()
            .map_err(|e| err(ln + 1, format!("bad seed: {e}")))?;
        let mut parse_row = |what: &str, len: usize| -> Result<Vec<f64>> {
            let (ln, line) = next(what)?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(ln + 1, format!("bad value: {e}")))?;
            if row.len() != len {
                return Err(err(
                    ln + 1,
                    format!("expected {len} values, found {}", row.len()),
                ));
            }
            Ok(row)
        };
        let mut weight = Vec::with_capacity(d_v * d_l);
        for _ in 0..d_v {
            weight.extend(parse_row("weight row", d_l)?);
        }
        let bias = parse_row("bias row", d_v)?;
        Ok(Self {
            weight: Array2::from_shape_vec((d_v, d_l), weight).expect("row count checked"),
            bias: Array1::from(bias),
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
