//! IDX-format digit datasets (the MNIST file format), plus a procedural
//! generator that renders a digit corpus in the same format.
//!
//! The reader accepts the standard big-endian IDX files
//! (`train-images-idx3-ubyte` etc.); no network access is performed. The
//! generator renders stroke-based digit glyphs under random affine jitter so
//! the conditional-generation ablation can run in environments without the
//! original corpus.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::prelude::*;
use rand::Rng;

use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// A labeled 8-bit image set in memory.
#[derive(Debug, Clone)]
pub struct IdxDataset {
    pub rows: usize,
    pub cols: usize,
    /// `len * rows * cols` bytes, row-major per image.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl IdxDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let sz = self.rows * self.cols;
        &self.images[i * sz..(i + 1) * sz]
    }

    /// Flattened batch normalized to `[-1, 1]`, shape `(n, rows*cols)`.
    pub fn flat_batch(&self, indices: &[usize]) -> Array2<f32> {
        let sz = self.rows * self.cols;
        let mut out = Array2::<f32>::zeros((indices.len(), sz));
        for (bi, &i) in indices.iter().enumerate() {
            for (j, &v) in self.image(i).iter().enumerate() {
                out[[bi, j]] = v as f32 / 127.5 - 1.0;
            }
        }
        out
    }

    /// Batch as `(n, 1, rows, cols)` images in `[-1, 1]`.
    pub fn image_batch(&self, indices: &[usize]) -> Array4<f32> {
        let flat = self.flat_batch(indices);
        flat.into_shape((indices.len(), 1, self.rows, self.cols))
            .expect("contiguous")
            .to_owned()
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Read an IDX image/label file pair.
pub fn read_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<IdxDataset> {
    let mut f = std::fs::File::open(images_path)
        .map_err(|e| Error::Data(format!("cannot open {}: {}", images_path.display(), e)))?;
    if read_u32(&mut f)? != IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "{} is not an IDX image file (bad magic)",
            images_path.display()
        )));
    }
    let n = read_u32(&mut f)? as usize;
    let rows = read_u32(&mut f)? as usize;
    let cols = read_u32(&mut f)? as usize;
    let mut images = vec![0u8; n * rows * cols];
    f.read_exact(&mut images)?;

    let mut f = std::fs::File::open(labels_path)
        .map_err(|e| Error::Data(format!("cannot open {}: {}", labels_path.display(), e)))?;
    if read_u32(&mut f)? != LABELS_MAGIC {
        return Err(Error::Data(format!(
            "{} is not an IDX label file (bad magic)",
            labels_path.display()
        )));
    }
    let nl = read_u32(&mut f)? as usize;
    if nl != n {
        return Err(Error::Data(format!("{} labels for {} images", nl, n)));
    }
    let mut labels = vec![0u8; n];
    f.read_exact(&mut labels)?;
    Ok(IdxDataset { rows, cols, images, labels })
}

/// Write an image/label pair in IDX format.
pub fn write_idx_dataset(ds: &IdxDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(images_path)?;
    f.write_all(&IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(ds.len() as u32).to_be_bytes())?;
    f.write_all(&(ds.rows as u32).to_be_bytes())?;
    f.write_all(&(ds.cols as u32).to_be_bytes())?;
    f.write_all(&ds.images)?;
    let mut f = std::fs::File::create(labels_path)?;
    f.write_all(&LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(ds.len() as u32).to_be_bytes())?;
    f.write_all(&ds.labels)?;
    Ok(())
}

/// Load `train-*` and `t10k-*` IDX files from a directory.
pub fn load_idx_dir(dir: &Path) -> Result<(IdxDataset, IdxDataset)> {
    let train = read_idx_dataset(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = read_idx_dataset(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

/// Write a generated corpus under the standard file names.
pub fn write_idx_dir(dir: &Path, train: &IdxDataset, test: &IdxDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_idx_dataset(
        train,
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    write_idx_dataset(
        test,
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Procedural digit rendering
// ---------------------------------------------------------------------------

type Polyline = &'static [(f32, f32)];

/// Stroke paths per digit in a unit box (x right, y down).
fn glyph(digit: u8) -> &'static [Polyline] {
    const D0: &[Polyline] = &[&[
        (0.50, 0.06),
        (0.80, 0.20),
        (0.82, 0.78),
        (0.50, 0.94),
        (0.20, 0.78),
        (0.18, 0.20),
        (0.50, 0.06),
    ]];
    const D1: &[Polyline] = &[&[(0.32, 0.22), (0.55, 0.06), (0.55, 0.94)]];
    const D2: &[Polyline] = &[&[
        (0.18, 0.26),
        (0.32, 0.08),
        (0.68, 0.08),
        (0.82, 0.26),
        (0.80, 0.42),
        (0.18, 0.94),
        (0.84, 0.94),
    ]];
    const D3: &[Polyline] = &[
        &[(0.20, 0.10), (0.74, 0.10), (0.82, 0.26), (0.50, 0.46)],
        &[(0.50, 0.46), (0.84, 0.62), (0.80, 0.86), (0.22, 0.92)],
    ];
    const D4: &[Polyline] = &[&[(0.70, 0.94), (0.70, 0.06), (0.16, 0.64), (0.88, 0.64)]];
    const D5: &[Polyline] = &[&[
        (0.80, 0.08),
        (0.22, 0.08),
        (0.20, 0.44),
        (0.62, 0.42),
        (0.82, 0.58),
        (0.82, 0.76),
        (0.62, 0.92),
        (0.20, 0.90),
    ]];
    const D6: &[Polyline] = &[&[
        (0.70, 0.08),
        (0.34, 0.36),
        (0.20, 0.62),
        (0.24, 0.82),
        (0.48, 0.94),
        (0.72, 0.82),
        (0.76, 0.64),
        (0.56, 0.50),
        (0.28, 0.58),
    ]];
    const D7: &[Polyline] = &[&[(0.16, 0.08), (0.84, 0.08), (0.42, 0.94)]];
    const D8: &[Polyline] = &[
        &[
            (0.50, 0.08),
            (0.74, 0.18),
            (0.72, 0.38),
            (0.50, 0.48),
            (0.28, 0.38),
            (0.26, 0.18),
            (0.50, 0.08),
        ],
        &[
            (0.50, 0.48),
            (0.78, 0.60),
            (0.78, 0.84),
            (0.50, 0.94),
            (0.22, 0.84),
            (0.22, 0.60),
            (0.50, 0.48),
        ],
    ];
    const D9: &[Polyline] = &[
        &[
            (0.76, 0.34),
            (0.66, 0.14),
            (0.42, 0.08),
            (0.22, 0.24),
            (0.26, 0.44),
            (0.50, 0.54),
            (0.76, 0.44),
            (0.76, 0.34),
        ],
        &[(0.76, 0.34), (0.70, 0.94)],
    ];
    match digit {
        0 => D0,
        1 => D1,
        2 => D2,
        3 => D3,
        4 => D4,
        5 => D5,
        6 => D6,
        7 => D7,
        8 => D8,
        9 => D9,
        _ => panic!("digit out of range"),
    }
}

fn dist_to_segment(px: f32, py: f32, ax: f32, ay: f32, bx: f32, by: f32) -> f32 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Render one 28x28 digit with random scale, shift, rotation, slant, stroke
/// width, and brightness.
pub fn render_digit(digit: u8, rng: &mut impl Rng) -> [u8; 784] {
    let scale = rng.gen_range(15.0f32..21.0);
    let cx = 14.0 + rng.gen_range(-2.0f32..2.0);
    let cy = 14.0 + rng.gen_range(-2.0f32..2.0);
    let angle = rng.gen_range(-0.18f32..0.18);
    let slant = rng.gen_range(-0.25f32..0.25);
    let thickness = rng.gen_range(1.0f32..1.9);
    let peak = rng.gen_range(190.0f32..255.0);
    let (sin, cos) = angle.sin_cos();

    // Transform glyph coordinates into image space.
    let tf = |x: f32, y: f32| -> (f32, f32) {
        let (gx, gy) = (x - 0.5 + slant * (0.5 - y), y - 0.5);
        let (rx, ry) = (cos * gx - sin * gy, sin * gx + cos * gy);
        (cx + scale * rx, cy + scale * ry)
    };
    let mut segments: Vec<(f32, f32, f32, f32)> = Vec::new();
    for line in glyph(digit) {
        for w in line.windows(2) {
            let (a, b) = (tf(w[0].0, w[0].1), tf(w[1].0, w[1].1));
            segments.push((a.0, a.1, b.0, b.1));
        }
    }
    let mut out = [0u8; 784];
    for y in 0..28 {
        for x in 0..28 {
            let (px, py) = (x as f32, y as f32);
            let mut d = f32::MAX;
            for &(ax, ay, bx, by) in &segments {
                d = d.min(dist_to_segment(px, py, ax, ay, bx, by));
            }
            let cover = ((thickness - d) / 0.9 + 0.5).clamp(0.0, 1.0);
            let noise = rng.gen_range(-8.0f32..8.0);
            out[y * 28 + x] = ((peak * cover + noise).round()).clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Generate a labeled digit corpus: classes cycle 0..=9 and the order is
/// shuffled, so class counts are balanced to within one.
pub fn generate_digit_corpus(n: usize, rng: &mut impl Rng) -> IdxDataset {
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    for i in (1..labels.len()).rev() {
        let j = rng.gen_range(0..=i);
        labels.swap(i, j);
    }
    let mut images = Vec::with_capacity(n * 784);
    for &l in &labels {
        images.extend_from_slice(&render_digit(l, rng));
    }
    IdxDataset { rows: 28, cols: 28, images, labels }
}
