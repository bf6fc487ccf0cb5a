//! Procedurally generated two-domain translation corpora for desk-scale
//! verification.
//!
//! Both kinds produce domains that are paired by construction — the map
//! A -> B is a deterministic bijection on pixels — but the pairing is never
//! exposed to training. Matching file stems across the two folders let
//! evaluation recover ground-truth targets, so a perfect translator achieves
//! an evaluation L1 of exactly 0.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    /// Random colored squares on black; domain B is the per-channel color
    /// inversion (255 - v) of domain A.
    ColorInversion,
    /// Random shapes drawn as outlines (domain A) versus filled (domain B),
    /// same geometry and color.
    ShapeFill,
}

impl ToyKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "color-inversion" => Ok(Self::ColorInversion),
            "shape-fill" => Ok(Self::ShapeFill),
            other => Err(Error::Config(format!(
                "unknown toy dataset kind '{}' (expected color-inversion or shape-fill)",
                other
            ))),
        }
    }

    /// Folder names for the two domains, in index order.
    pub fn domain_names(&self) -> (&'static str, &'static str) {
        match self {
            Self::ColorInversion => ("plain", "inverted"),
            Self::ShapeFill => ("outline", "filled"),
        }
    }
}

/// Generate `n` paired images per domain at `size` x `size`.
pub fn make_toy_translation_dataset(
    kind: ToyKind,
    n: usize,
    size: u32,
    rng: &mut impl Rng,
) -> Result<Vec<(RgbImage, RgbImage)>> {
    if n < 16 {
        return Err(Error::Config(format!("toy dataset needs n >= 16, got {}", n)));
    }
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        pairs.push(match kind {
            ToyKind::ColorInversion => color_inversion_pair(size, rng),
            ToyKind::ShapeFill => shape_fill_pair(size, rng),
        });
    }
    Ok(pairs)
}

/// Write the generated pairs into `<out>/<domain_a>/img_<i>.png` and
/// `<out>/<domain_b>/img_<i>.png`.
pub fn write_toy_dataset(
    kind: ToyKind,
    pairs: &[(RgbImage, RgbImage)],
    out: &Path,
) -> Result<()> {
    let (name_a, name_b) = kind.domain_names();
    let dir_a = out.join(name_a);
    let dir_b = out.join(name_b);
    std::fs::create_dir_all(&dir_a)?;
    std::fs::create_dir_all(&dir_b)?;
    for (i, (a, b)) in pairs.iter().enumerate() {
        a.save(dir_a.join(format!("img_{:05}.png", i)))?;
        b.save(dir_b.join(format!("img_{:05}.png", i)))?;
    }
    Ok(())
}

fn random_color(rng: &mut impl Rng) -> Rgb<u8> {
    Rgb([rng.gen_range(64..=255), rng.gen_range(64..=255), rng.gen_range(64..=255)])
}

fn color_inversion_pair(size: u32, rng: &mut impl Rng) -> (RgbImage, RgbImage) {
    let mut a = RgbImage::from_pixel(size, size, Rgb([0, 0, 0]));
    let squares = rng.gen_range(1..=3);
    for _ in 0..squares {
        let side = rng.gen_range(size / 8..=size / 3).max(2);
        let x0 = rng.gen_range(0..size - side);
        let y0 = rng.gen_range(0..size - side);
        let color = random_color(rng);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                a.put_pixel(x, y, color);
            }
        }
    }
    let b = invert_image(&a);
    (a, b)
}

/// Per-channel inversion, the ground-truth A -> B map.
pub fn invert_image(img: &RgbImage) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        p.0 = [255 - p.0[0], 255 - p.0[1], 255 - p.0[2]];
    }
    out
}

fn shape_fill_pair(size: u32, rng: &mut impl Rng) -> (RgbImage, RgbImage) {
    let mut outline = RgbImage::from_pixel(size, size, Rgb([0, 0, 0]));
    let mut filled = outline.clone();
    let shapes = rng.gen_range(1..=2);
    for _ in 0..shapes {
        let color = random_color(rng);
        if rng.gen_bool(0.5) {
            // Rectangle.
            let w = rng.gen_range(size / 6..=size / 2).max(4);
            let h = rng.gen_range(size / 6..=size / 2).max(4);
            let x0 = rng.gen_range(0..size - w);
            let y0 = rng.gen_range(0..size - h);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    filled.put_pixel(x, y, color);
                    let border = x < x0 + 2 || x >= x0 + w - 2 || y < y0 + 2 || y >= y0 + h - 2;
                    if border {
                        outline.put_pixel(x, y, color);
                    }
                }
            }
        } else {
            // Circle.
            let r = rng.gen_range(size as i64 / 8..=size as i64 / 4).max(3);
            let cx = rng.gen_range(r..size as i64 - r);
            let cy = rng.gen_range(r..size as i64 - r);
            for y in (cy - r)..=(cy + r) {
                for x in (cx - r)..=(cx + r) {
                    let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    if d2 <= r * r {
                        filled.put_pixel(x as u32, y as u32, color);
                        if d2 >= (r - 2) * (r - 2) {
                            outline.put_pixel(x as u32, y as u32, color);
                        }
                    }
                }
            }
        }
    }
    (outline, filled)
}
