//! Checkpoints: a binary parameter blob plus a plain-text manifest.
//!
//! The manifest is human-readable `key: value` lines (diffable); the blob is
//! a little-endian tensor archive keyed by the visit-order tensor names.
//! Domain names are persisted in index order so label semantics survive
//! reloads.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Slot, Visit};

const BLOB_MAGIC: &[u8; 8] = b"CERFCKPT";
const FORMAT_VERSION: u32 = 1;

/// Plain-text companion of a checkpoint blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    /// Model family, e.g. `cerfgan`, `stargan`, `stargan-mcd`, `cgan-mcd`.
    pub model: String,
    pub step: u64,
    pub domains: Vec<String>,
    pub resolution: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub skip_depth: usize,
    pub loss_mode: String,
    pub adv_mode: String,
}

impl Manifest {
    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("format_version: {}\n", self.format_version));
        s.push_str(&format!("model: {}\n", self.model));
        s.push_str(&format!("step: {}\n", self.step));
        s.push_str(&format!("n_domains: {}\n", self.domains.len()));
        s.push_str(&format!("domains: {}\n", self.domains.join(",")));
        s.push_str(&format!("resolution: {}\n", self.resolution));
        s.push_str(&format!("depth: {}\n", self.depth));
        s.push_str(&format!("base_channels: {}\n", self.base_channels));
        s.push_str(&format!("skip_depth: {}\n", self.skip_depth));
        s.push_str(&format!("loss_mode: {}\n", self.loss_mode));
        s.push_str(&format!("adv_mode: {}\n", self.adv_mode));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once(':').ok_or_else(|| {
                Error::Checkpoint(format!("manifest line {} is not 'key: value'", lineno + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<String> {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("manifest missing key '{}'", k)))
        };
        let parse = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("manifest key '{}' is not a number", k)))
        };
        let domains: Vec<String> = get("domains")?
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        let n: usize = parse("n_domains")?;
        if domains.len() != n {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} domains but n_domains is {}",
                domains.len(),
                n
            )));
        }
        Ok(Self {
            format_version: parse("format_version")? as u32,
            model: get("model")?,
            step: parse("step")? as u64,
            domains,
            resolution: parse("resolution")?,
            depth: parse("depth")?,
            base_channels: parse("base_channels")?,
            skip_depth: parse("skip_depth")?,
            loss_mode: get("loss_mode")?,
            adv_mode: get("adv_mode")?,
        })
    }
}

/// Collect every tensor (parameters and buffers) of the networks, in order.
fn collect_tensors(nets: &mut [&mut dyn Visit]) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    for net in nets.iter_mut() {
        net.visit(&mut |name, slot| {
            let v = match slot {
                Slot::Param { v, .. } => v,
                Slot::Buffer { v } => v,
            };
            out.push((name.to_string(), v.shape().to_vec(), v.iter().copied().collect()));
        });
    }
    out
}

/// Write `<stem>.bin` and `<stem>.manifest`; returns the blob path.
pub fn save(stem: &Path, manifest: &Manifest, nets: &mut [&mut dyn Visit]) -> Result<PathBuf> {
    if let Some(parent) = stem.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tensors = collect_tensors(nets);
    let blob_path = stem.with_extension("bin");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&blob_path)?);
    f.write_all(BLOB_MAGIC)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in &tensors {
        let nb = name.as_bytes();
        f.write_all(&(nb.len() as u16).to_le_bytes())?;
        f.write_all(nb)?;
        f.write_all(&(shape.len() as u8).to_le_bytes())?;
        for &d in shape {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    std::fs::write(stem.with_extension("manifest"), manifest.to_text())?;
    Ok(blob_path)
}

/// Read a blob into a name -> tensor map.
pub fn read_blob(path: &Path) -> Result<BTreeMap<String, ArrayD<f32>>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != BLOB_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint blob", path.display())));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported blob version {}", version)));
    }
    f.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        f.read_exact(&mut u16buf)?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?;
        let mut u8buf = [0u8; 1];
        f.read_exact(&mut u8buf)?;
        let ndim = u8buf[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            f.read_exact(&mut u32buf)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        for v in data.iter_mut() {
            f.read_exact(&mut u32buf)?;
            *v = f32::from_le_bytes(u32buf);
        }
        map.insert(name, ArrayD::from_shape_vec(IxDyn(&shape), data).expect("shape matches"));
    }
    Ok(map)
}

/// Assign tensors from a blob map into a network by name. Every network
/// tensor must be present with a matching shape; leftover blob entries that
/// belong to the network's prefix are an error.
pub fn apply_tensors(net: &mut dyn Visit, map: &BTreeMap<String, ArrayD<f32>>) -> Result<()> {
    let mut missing = Vec::new();
    let mut used = 0usize;
    net.visit(&mut |name, slot| {
        let mut v = match slot {
            Slot::Param { v, .. } => v,
            Slot::Buffer { v } => v,
        };
        match map.get(name) {
            Some(t) if t.shape() == v.shape() => {
                v.assign(t);
                used += 1;
            }
            Some(t) => missing.push(format!(
                "{}: shape {:?} in blob, {:?} in model",
                name,
                t.shape(),
                v.shape()
            )),
            None => missing.push(format!("{}: absent from blob", name)),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint does not match the model: {}",
            missing.join("; ")
        )));
    }
    Ok(())
}

/// SHA-256 of a checkpoint blob, hex-encoded; used as the checkpoint id in
/// provenance sidecars.
pub fn blob_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{:02x}", b)).collect())
}

/// Load the manifest next to a blob path (either may be given).
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let manifest_path = path.with_extension("manifest");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Checkpoint(format!("cannot read {}: {}", manifest_path.display(), e))
    })?;
    Manifest::from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{Decoder, DecoderConfig, Mcd, McdConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn manifest() -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            model: "cerfgan".into(),
            step: 42,
            domains: vec!["plain".into(), "inverted".into()],
            resolution: 16,
            depth: 3,
            base_channels: 8,
            skip_depth: 2,
            loss_mode: "standard".into(),
            adv_mode: "non-saturating".into(),
        }
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = manifest();
        let back = Manifest::from_text(&m.to_text()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn save_load_round_trip_restores_translation() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let cfg =
            McdConfig { in_channels: 3, base_channels: 8, depth: 3, n_domains: 2, with_norm: true };
        let mut mcd = Mcd::new(cfg.clone(), &mut rng);
        let mut dec = Decoder::new(
            DecoderConfig { out_channels: 3, base_channels: 8, depth: 3, skip_depth: 2 },
            &mut rng,
        );
        let x = crate::nn::gaussian((1, 3, 16, 16), 0.5, &mut rng);
        let label = crate::domain::LabelVector::one_hot(1, 2).unwrap();
        let before = crate::networks::translate(&mcd, &dec, &x, &label).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("checkpoint_000042");
        save(&stem, &manifest(), &mut [&mut mcd, &mut dec]).unwrap();

        let mut rng2 = ChaCha12Rng::seed_from_u64(999);
        let mut mcd2 = Mcd::new(cfg, &mut rng2);
        let mut dec2 = Decoder::new(
            DecoderConfig { out_channels: 3, base_channels: 8, depth: 3, skip_depth: 2 },
            &mut rng2,
        );
        let blob = read_blob(&stem.with_extension("bin")).unwrap();
        apply_tensors(&mut mcd2, &blob).unwrap();
        apply_tensors(&mut dec2, &blob).unwrap();
        let after = crate::networks::translate(&mcd2, &dec2, &x, &label).unwrap();
        assert_eq!(before, after, "restored weights reproduce translation bit-exactly");

        let m = load_manifest(&stem).unwrap();
        assert_eq!(m.step, 42);
        assert_eq!(m.domains, vec!["plain".to_string(), "inverted".to_string()]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut mcd = Mcd::new(
            McdConfig { in_channels: 3, base_channels: 8, depth: 3, n_domains: 2, with_norm: true },
            &mut rng,
        );
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        save(&stem, &manifest(), &mut [&mut mcd]).unwrap();
        let blob = read_blob(&stem.with_extension("bin")).unwrap();
        let mut other = Mcd::new(
            McdConfig { in_channels: 3, base_channels: 8, depth: 3, n_domains: 3, with_norm: true },
            &mut rng,
        );
        assert!(apply_tensors(&mut other, &blob).is_err());
    }
}
