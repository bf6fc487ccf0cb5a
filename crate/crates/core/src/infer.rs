//! Post-training inference utilities: checkpoint loading, file-level
//! translation with provenance sidecars, fully convolutional high-resolution
//! inference, and sample grids.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::checkpoint::{self, Manifest};
use crate::data;
use crate::domain::LabelVector;
use crate::error::{Error, Result};
use crate::font;
use crate::networks::{self, Decoder, DecoderConfig, Mcd, McdConfig};

/// A CerfGAN checkpoint restored into networks, with its manifest and the
/// blob digest used as the checkpoint id.
pub struct LoadedModel {
    pub manifest: Manifest,
    pub mcd: Mcd,
    pub decoder: Decoder,
    pub checkpoint_path: PathBuf,
    pub checkpoint_id: String,
}

impl LoadedModel {
    pub fn target_index(&self, name: &str) -> Result<usize> {
        self.manifest.domains.iter().position(|d| d == name).ok_or_else(|| {
            Error::Domain(format!(
                "unknown domain '{}' (checkpoint domains: {})",
                name,
                self.manifest.domains.join(", ")
            ))
        })
    }
}

/// Rebuild the networks described by a checkpoint manifest and load the blob.
pub fn load_cerfgan_checkpoint(path: &Path) -> Result<LoadedModel> {
    let manifest = checkpoint::load_manifest(path)?;
    if manifest.model != "cerfgan" {
        return Err(Error::Checkpoint(format!(
            "expected a cerfgan checkpoint, found model '{}'",
            manifest.model
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut mcd = Mcd::new(
        McdConfig {
            in_channels: 3,
            base_channels: manifest.base_channels,
            depth: manifest.depth,
            n_domains: manifest.n_domains(),
            with_norm: manifest.loss_mode != "wgan-gp",
        },
        &mut rng,
    );
    let mut decoder = Decoder::new(
        DecoderConfig {
            out_channels: 3,
            base_channels: manifest.base_channels,
            depth: manifest.depth,
            skip_depth: manifest.skip_depth,
        },
        &mut rng,
    );
    let blob_path = path.with_extension("bin");
    let blob = checkpoint::read_blob(&blob_path)?;
    checkpoint::apply_tensors(&mut mcd, &blob)?;
    checkpoint::apply_tensors(&mut decoder, &blob)?;
    let checkpoint_id = checkpoint::blob_digest(&blob_path)?;
    Ok(LoadedModel { manifest, mcd, decoder, checkpoint_path: blob_path, checkpoint_id })
}

/// Translate one decoded image (any size whose dimensions are multiples of
/// the model's stride) in a single fully convolutional pass.
pub fn translate_image(model: &LoadedModel, img: &RgbImage, target: usize) -> Result<RgbImage> {
    let t = data::normalize_rgb(img);
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let x = t.into_shape((1, c, h, w)).expect("contiguous").to_owned();
    let label = LabelVector::one_hot(target, model.manifest.n_domains())?;
    let y = networks::translate(&model.mcd, &model.decoder, &x, &label)?;
    Ok(data::denormalize_rgb(&y.index_axis(Axis(0), 0)))
}

/// High-resolution path: requires both dimensions to be exact multiples of
/// the model stride (no cropping), then runs the same single-pass translation.
/// For inputs at the training resolution this is bit-identical to the
/// standard path.
pub fn translate_highres(model: &LoadedModel, img: &RgbImage, target: usize) -> Result<RgbImage> {
    let unit = 1u32 << model.manifest.depth;
    if img.width() % unit != 0 || img.height() % unit != 0 {
        return Err(Error::Shape(format!(
            "high-resolution input {}x{} must be a multiple of {} in both dimensions",
            img.width(),
            img.height(),
            unit
        )));
    }
    translate_image(model, img, target)
}

/// Translate files to a target domain; writes one PNG plus one plain-text
/// provenance sidecar per input. Deterministic: rerunning produces
/// byte-identical outputs.
pub fn translate_files(
    model: &LoadedModel,
    inputs: &[PathBuf],
    target_name: &str,
    out_dir: &Path,
    highres: bool,
) -> Result<Vec<PathBuf>> {
    if inputs.is_empty() {
        return Err(Error::Data("no input files given".into()));
    }
    let target = model.target_index(target_name)?;
    std::fs::create_dir_all(out_dir)?;
    let unit = 1u32 << model.manifest.depth;
    let mut written = Vec::new();
    for input in inputs {
        let img = image::open(input)
            .map_err(|e| Error::Data(format!("cannot decode {}: {}", input.display(), e)))?
            .to_rgb8();
        let out_img = if highres {
            translate_highres(model, &img, target)?
        } else {
            let cropped = data::center_crop_to_multiple(&img, unit)?;
            translate_image(model, &cropped, target)?
        };
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        let out_path = out_dir.join(format!("{}_to_{}.png", stem, target_name));
        out_img.save(&out_path)?;
        let sidecar = out_dir.join(format!("{}_to_{}.txt", stem, target_name));
        let meta = format!(
            "checkpoint: {}\ncheckpoint_id: {}\nstep: {}\ntarget_domain: {}\ntarget_index: {}\nsource: {}\nmode: {}\n",
            model.checkpoint_path.display(),
            model.checkpoint_id,
            model.manifest.step,
            target_name,
            target,
            input.display(),
            if highres { "highres" } else { "standard" },
        );
        std::fs::write(&sidecar, meta)?;
        written.push(out_path);
    }
    Ok(written)
}

const CAPTION_H: u32 = 12;

/// Compose a grid of equally sized cells with a caption strip naming each
/// column. Row-major cells; every row must have `captions.len()` entries.
pub fn compose_grid(cells: &[Vec<RgbImage>], captions: &[String]) -> Result<RgbImage> {
    if cells.is_empty() || captions.is_empty() {
        return Err(Error::Config("grid needs at least one row and one column".into()));
    }
    let cols = captions.len();
    let (cw, ch) = cells[0][0].dimensions();
    for row in cells {
        if row.len() != cols {
            return Err(Error::Config(format!(
                "grid row has {} cells, expected {}",
                row.len(),
                cols
            )));
        }
        for cell in row {
            if cell.dimensions() != (cw, ch) {
                return Err(Error::Config("grid cells must share one size".into()));
            }
        }
    }
    let pad = 2u32;
    let width = cols as u32 * (cw + pad) + pad;
    let height = CAPTION_H + cells.len() as u32 * (ch + pad) + pad;
    let mut canvas = RgbImage::from_pixel(width, height, Rgb([235, 235, 235]));
    for (ci, caption) in captions.iter().enumerate() {
        let x = pad + ci as u32 * (cw + pad);
        let tw = font::text_width(caption, 1).min(cw);
        let _ = tw;
        font::draw_text(&mut canvas, x as i64, 2, caption, 1, Rgb([10, 10, 10]));
    }
    for (ri, row) in cells.iter().enumerate() {
        for (ci, cell) in row.iter().enumerate() {
            let x0 = pad + ci as u32 * (cw + pad);
            let y0 = CAPTION_H + pad + ri as u32 * (ch + pad);
            for (x, y, p) in cell.enumerate_pixels() {
                canvas.put_pixel(x0 + x, y0 + y, *p);
            }
        }
    }
    Ok(canvas)
}

/// Render the translation grid: rows are sources, columns are the input
/// followed by each target domain's output.
pub fn sample_grid(
    model: &LoadedModel,
    sources: &[RgbImage],
    target_names: &[String],
) -> Result<RgbImage> {
    if sources.is_empty() {
        return Err(Error::Config("sample grid needs at least one source image".into()));
    }
    if target_names.is_empty() {
        return Err(Error::Config("sample grid needs at least one target domain".into()));
    }
    let mut captions = vec!["input".to_string()];
    captions.extend(target_names.iter().cloned());
    let mut cells = Vec::with_capacity(sources.len());
    for src in sources {
        let mut row = vec![src.clone()];
        for name in target_names {
            let target = model.target_index(name)?;
            row.push(translate_image(model, src, target)?);
        }
        cells.push(row);
    }
    compose_grid(&cells, &captions)
}
