//! Dataset ingestion, augmentation, and normalization.
//!
//! Input layout: `<data_root>/<domain_name>/*.{png,jpg,jpeg,bmp}`; domain
//! folder names must match the registry. Images decode to 8-bit RGB
//! (grayscale sources are channel-replicated) and are mapped linearly to
//! `[-1, 1]`.

pub mod mnist;
pub mod toy;

use std::path::{Path, PathBuf};

use image::{imageops, imageops::FilterType, RgbImage};
use ndarray::prelude::*;
use rand::Rng;

use crate::error::{Error, Result};

const SUPPORTED_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// Augmentation recipe: resize the shorter side to `jitter`, random-crop to
/// `crop`, mirror with probability `mirror_prob`, then normalize.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentSpec {
    pub crop: usize,
    pub jitter: usize,
    pub mirror_prob: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        // 143 -> 128 gives roughly 12% scale jitter, the 286 -> 256 convention
        // scaled down.
        Self { crop: 128, jitter: 143, mirror_prob: 0.5 }
    }
}

impl AugmentSpec {
    pub fn for_crop(crop: usize) -> Self {
        Self { crop, jitter: (crop * 143 + 64) / 128, mirror_prob: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.jitter < self.crop {
            return Err(Error::Config(format!(
                "jitter size {} must be >= crop size {}",
                self.jitter, self.crop
            )));
        }
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return Err(Error::Config("mirror_prob must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One domain's image files, optionally decoded up front.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub domain_index: usize,
    pub files: Vec<PathBuf>,
    images: Option<Vec<RgbImage>>,
}

impl DomainDataset {
    /// An in-memory dataset with no backing files (toy corpora, probes).
    pub fn from_images(domain_index: usize, images: Vec<RgbImage>) -> Self {
        Self { domain_index, files: Vec::new(), images: Some(images) }
    }

    pub fn len(&self) -> usize {
        match &self.images {
            Some(images) => images.len(),
            None => self.files.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Decode image `i` (from the cache when present).
    pub fn image(&self, i: usize) -> Result<RgbImage> {
        if let Some(images) = &self.images {
            return Ok(images[i].clone());
        }
        Ok(image::open(&self.files[i])?.to_rgb8())
    }

    /// Decode every file into memory, dropping undecodable ones with a
    /// warning. Errors if nothing survives.
    pub fn load_cache(&mut self) -> Result<()> {
        let mut images = Vec::with_capacity(self.files.len());
        let mut kept = Vec::with_capacity(self.files.len());
        for path in &self.files {
            match image::open(path) {
                Ok(img) => {
                    images.push(img.to_rgb8());
                    kept.push(path.clone());
                }
                Err(e) => log::warn!("skipping undecodable file {}: {}", path.display(), e),
            }
        }
        if images.is_empty() {
            return Err(Error::Data(format!(
                "no decodable images among {} files for domain {}",
                self.files.len(),
                self.domain_index
            )));
        }
        self.files = kept;
        self.images = Some(images);
        Ok(())
    }
}

/// Scan a domain folder into a sorted, extension-filtered file list.
pub fn scan_domain_folder(path: &Path, domain_index: usize) -> Result<DomainDataset> {
    if !path.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", path.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| SUPPORTED_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no supported image files in {}",
            path.display()
        )));
    }
    Ok(DomainDataset { domain_index, files, images: None })
}

/// Map 8-bit RGB to a `(3, h, w)` tensor in `[-1, 1]`.
pub fn normalize_rgb(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    out
}

/// Map a `(3, h, w)` tensor in `[-1, 1]` back to 8-bit RGB. Exact inverse of
/// [`normalize_rgb`] for inputs that came from 8-bit values.
pub fn denormalize_rgb(t: &ArrayView3<f32>) -> RgbImage {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    assert_eq!(c, 3);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                to_u8(t[[0, y, x]]),
                to_u8(t[[1, y, x]]),
                to_u8(t[[2, y, x]]),
            ]);
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img
}

fn to_u8(v: f32) -> u8 {
    (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8
}

/// Apply the augmentation recipe to one decoded image.
pub fn augment(img: &RgbImage, spec: &AugmentSpec, rng: &mut impl Rng) -> Result<Array3<f32>> {
    spec.validate()?;
    let (w, h) = img.dimensions();
    let shorter = w.min(h);
    if shorter == 0 {
        return Err(Error::Data("empty image".into()));
    }
    let scale = spec.jitter as f64 / shorter as f64;
    let (nw, nh) = (
        ((w as f64 * scale).round() as u32).max(spec.jitter as u32),
        ((h as f64 * scale).round() as u32).max(spec.jitter as u32),
    );
    let resized = if (nw, nh) == (w, h) {
        img.clone()
    } else {
        imageops::resize(img, nw, nh, FilterType::Triangle)
    };
    let crop = spec.crop as u32;
    if resized.width() < crop || resized.height() < crop {
        return Err(Error::Data(format!(
            "image {}x{} smaller than crop {} after resize",
            resized.width(),
            resized.height(),
            crop
        )));
    }
    let max_x = resized.width() - crop;
    let max_y = resized.height() - crop;
    let x0 = if max_x == 0 { 0 } else { rng.gen_range(0..=max_x) };
    let y0 = if max_y == 0 { 0 } else { rng.gen_range(0..=max_y) };
    let mut cropped = imageops::crop_imm(&resized, x0, y0, crop, crop).to_image();
    if rng.gen_bool(spec.mirror_prob) {
        cropped = imageops::flip_horizontal(&cropped);
    }
    Ok(normalize_rgb(&cropped))
}

/// Assemble an augmented batch `(n, 3, crop, crop)` from dataset indices.
pub fn load_batch(
    dataset: &DomainDataset,
    indices: &[usize],
    spec: &AugmentSpec,
    rng: &mut impl Rng,
) -> Result<Array4<f32>> {
    let mut out = Array4::<f32>::zeros((indices.len(), 3, spec.crop, spec.crop));
    for (bi, &i) in indices.iter().enumerate() {
        let img = dataset.image(i)?;
        let t = augment(&img, spec, rng)?;
        out.index_axis_mut(Axis(0), bi).assign(&t);
    }
    Ok(out)
}

/// Center-crop both dimensions down to the nearest multiple of `unit`.
/// Errors if the image is smaller than `unit` in either dimension.
pub fn center_crop_to_multiple(img: &RgbImage, unit: u32) -> Result<RgbImage> {
    let (w, h) = img.dimensions();
    let (cw, ch) = (w - w % unit, h - h % unit);
    if cw == 0 || ch == 0 {
        return Err(Error::Data(format!(
            "image {}x{} smaller than the required multiple of {}",
            w, h, unit
        )));
    }
    if (cw, ch) == (w, h) {
        return Ok(img.clone());
    }
    Ok(imageops::crop_imm(img, (w - cw) / 2, (h - ch) / 2, cw, ch).to_image())
}
