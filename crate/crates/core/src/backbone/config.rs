use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and seed of a backend.
///
/// The plain-text form is one `key = value` pair per line, `#` starts a
/// comment. Keys are `d_v d_l M C_img H W n_layers temperature seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub d_v: usize,
    pub d_l: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "C_img")]
    pub c_img: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub n_layers: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            d_v: 16,
            d_l: 16,
            m: 16,
            c_img: 3,
            h: 32,
            w: 32,
            n_layers: 2,
            temperature: 100.0,
            seed: 0,
        }
    }
}

impl BackendConfig {
    /// The small configuration used for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            d_v: 8,
            d_l: 8,
            m: 4,
            c_img: 3,
            h: 8,
            w: 8,
            n_layers: 2,
            temperature: 100.0,
            seed: 0,
        }
    }

    /// Side of the square patch grid.
    pub fn grid(&self) -> usize {
        (self.m as f64).sqrt().round() as usize
    }

    /// Patch height and width in pixels.
    pub fn patch_size(&self) -> (usize, usize) {
        let g = self.grid();
        (self.h / g, self.w / g)
    }

    pub fn patch_dim(&self) -> usize {
        let (ph, pw) = self.patch_size();
        self.c_img * ph * pw
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_v == 0 || self.d_l == 0 {
            return fail(format!(
                "embedding widths must be positive (d_v={}, d_l={})",
                self.d_v, self.d_l
            ));
        }
        if self.m == 0 {
            return fail("M must be at least 1".into());
        }
        if self.c_img == 0 || self.h == 0 || self.w == 0 {
            return fail("image dimensions must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        let g = self.grid();
        if g * g != self.m {
            return fail(format!("M={} is not a square patch grid", self.m));
        }
        if !self.h.is_multiple_of(g) || !self.w.is_multiple_of(g) {
            return fail(format!(
                "{}x{} image does not divide into a {g}x{g} patch grid",
                self.h, self.w
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse().map_err(|e| match e {
            Error::Parse { line, reason, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                reason,
            },
            other => other,
        })
    }
}

impl FromStr for BackendConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = BackendConfig::default();
        let parse_err = |line: usize, reason: String| Error::Parse {
            path: "<backend config>".into(),
            line,
            reason,
        };
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                parse_err(line_no, format!("expected `key = value`, got `{line}`"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad =
                |e: &dyn fmt::Display| parse_err(line_no, format!("bad value for {key}: {e}"));
            match key {
                "d_v" => cfg.d_v = value.parse().map_err(|e| bad(&e))?,
                "d_l" => cfg.d_l = value.parse().map_err(|e| bad(&e))?,
                "M" => cfg.m = value.parse().map_err(|e| bad(&e))?,
                "C_img" => cfg.c_img = value.parse().map_err(|e| bad(&e))?,
                "H" => cfg.h = value.parse().map_err(|e| bad(&e))?,
                "W" => cfg.w = value.parse().map_err(|e| bad(&e))?,
                "n_layers" => cfg.n_layers = value.parse().map_err(|e| bad(&e))?,
                "temperature" => cfg.temperature = value.parse().map_err(|e| bad(&e))?,
                "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
                other => return Err(parse_err(line_no, format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for BackendConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "d_v = {}", self.d_v)?;
        writeln!(f, "d_l = {}", self.d_l)?;
        writeln!(f, "M = {}", self.m)?;
        writeln!(f, "C_img = {}", self.c_img)?;
        writeln!(f, "H = {}", self.h)?;
        writeln!(f, "W = {}", self.w)?;
        writeln!(f, "n_layers = {}", self.n_layers)?;
        writeln!(f, "temperature = {}", self.temperature)?;
        writeln!(f, "seed = {}", self.seed)
    }
}
