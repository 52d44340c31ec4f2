//! JSON-lines dataset manifests and PNG loading.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::adaptation::LabeledImage;
use crate::backbone::{BackendConfig, ImageSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Test,
    LabeledPool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Unique class names in first-appearance order.
    pub class_list: Vec<String>,
    pub split: Split,
    /// Relative record paths resolve against this directory.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn parse(text: &str, origin: &Path, split: Split) -> Result<Self> {
        let mut records = Vec::new();
        let mut class_list: Vec<String> = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            if !seen.insert(record.path.clone()) {
                log::warn!(
                    "{}: line {}: duplicate path `{}`",
                    origin.display(),
                    i + 1,
                    record.path
                );
            }
            if !class_list.contains(&record.class) {
                class_list.push(record.class.clone());
            }
            records.push(record);
        }
        let root = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            records,
            class_list,
            split,
            root,
        })
    }

    pub fn load(path: &Path, split: Split) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path, split)
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Decode every image, mapping classes through `classes`.
    pub fn load_images(
        &self,
        classes: &[String],
        config: &BackendConfig,
    ) -> Result<Vec<LabeledImage>> {
        self.records
            .iter()
            .map(|r| {
                let class = classes.iter().position(|c| c == &r.class).ok_or_else(|| {
                    Error::Config(format!("unknown class `{}` for `{}`", r.class, r.path))
                })?;
                let image = load_png(&self.resolve(r), &r.path, config)?;
                Ok(LabeledImage { image, class })
            })
            .collect()
    }
}

pub fn load_manifest(path: &Path, split: Split) -> Result<DatasetManifest> {
    DatasetManifest::load(path, split)
}

/// Decode an image file into `[0, 1]` channel-major pixels.
pub fn load_png(path: &Path, id: &str, config: &BackendConfig) -> Result<ImageSample> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (h, w) != (config.h, config.w) {
        return Err(Error::shape(
            "image file",
            format!("{}x{}", config.h, config.w),
            format!("{h}x{w} ({})", path.display()),
        ));
    }
    let pixels = match config.c_img {
        1 => {
            let g = img.to_luma8();
            Array3::from_shape_fn((1, h, w), |(_, y, x)| {
                g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
            })
        }
        3 => {
            let rgb = img.to_rgb8();
            Array3::from_shape_fn((3, h, w), |(c, y, x)| {
                rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
            })
        }
        c => {
            return Err(Error::Config(format!(
                "images with {c} channels are not supported"
            )))
        }
    };
    Ok(ImageSample::new(id, pixels))
}

/// Write `[0, 1]` pixels as an 8-bit PNG.
pub fn save_png(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    let (c, h, w) = pixels.dim();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let result = match c {
        1 => image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([q(pixels[[0, y as usize, x as usize]])])
        })
        .save(path),
        3 => image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([
                q(pixels[[0, y, x]]),
                q(pixels[[1, y, x]]),
                q(pixels[[2, y, x]]),
            ])
        })
        .save(path),
        c => {
            return Err(Error::Config(format!(
                "images with {c} channels are not supported"
            )))
        }
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
