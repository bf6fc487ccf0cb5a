//! Domains, labels, and the label-block padding that conditions the decoder.
//!
//! A [`DomainRegistry`] fixes the ordered set of image domains and the
//! unordered pairs allowed as translation tasks. Labels are one-hot (single
//! domain) or multi-hot (attribute-style) vectors over the registry, and a
//! [`LabelBlock`] is a label vector zero-padded to the encoder bottleneck
//! shape so it can be channel-concatenated with the bottleneck features.
//!
//! All types are immutable after construction and safe to share across
//! threads.

use ndarray::prelude::*;

use crate::error::{Error, Result};

/// Ordered set of named image domains plus the allowed translation pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainRegistry {
    names: Vec<String>,
    pairs: Vec<(usize, usize)>,
}

impl DomainRegistry {
    /// Build a registry from ordered names and unordered index pairs.
    /// Indices are assigned by listed order. Duplicate or empty names,
    /// out-of-range indices, and self-pairs are rejected; duplicate pairs
    /// collapse to one.
    pub fn new(names: Vec<String>, pairs: Vec<(usize, usize)>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Domain(format!(
                "need at least 2 domains, got {}",
                names.len()
            )));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Domain(format!("domain {} has an empty name", i)));
            }
            if names[..i].contains(name) {
                return Err(Error::Domain(format!("duplicate domain name '{}'", name)));
            }
        }
        if pairs.is_empty() {
            return Err(Error::Domain("at least one translation pair required".into()));
        }
        let n = names.len();
        let mut norm: Vec<(usize, usize)> = Vec::with_capacity(pairs.len());
        for &(a, b) in &pairs {
            if a >= n || b >= n {
                return Err(Error::Domain(format!(
                    "pair ({},{}) references an unknown domain (N={})",
                    a, b, n
                )));
            }
            if a == b {
                return Err(Error::Domain(format!("self-pair ({},{}) is not a translation task", a, b)));
            }
            let p = (a.min(b), a.max(b));
            if !norm.contains(&p) {
                norm.push(p);
            }
        }
        norm.sort_unstable();
        Ok(Self { names, pairs: norm })
    }

    pub fn n(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    /// Normalized (low, high) unordered pairs, sorted.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                Error::Domain(format!(
                    "unknown domain '{}' (registered: {})",
                    name,
                    self.names.join(", ")
                ))
            })
    }

    /// All directed tasks (target, source) induced by the unordered pairs.
    pub fn directed_tasks(&self) -> Vec<(usize, usize)> {
        let mut tasks = Vec::with_capacity(self.pairs.len() * 2);
        for &(a, b) in &self.pairs {
            tasks.push((a, b));
            tasks.push((b, a));
        }
        tasks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    SingleLabel,
    MultiLabel,
}

/// Length-N {0,1} label vector. Single-label vectors have exactly one bit set;
/// multi-label vectors have at least one.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector {
    values: Vec<f32>,
    mode: LabelMode,
}

impl LabelVector {
    pub fn new(values: Vec<f32>, mode: LabelMode) -> Result<Self> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain("label entries must be 0 or 1".into()));
        }
        let ones = values.iter().filter(|&&v| v == 1.0).count();
        match mode {
            LabelMode::SingleLabel if ones != 1 => {
                return Err(Error::Domain(format!(
                    "single-label vector must have exactly one 1, found {}",
                    ones
                )))
            }
            LabelMode::MultiLabel if ones == 0 => {
                return Err(Error::Domain("multi-label vector must have at least one 1".into()))
            }
            _ => {}
        }
        Ok(Self { values, mode })
    }

    /// One-hot label for domain `i` out of `n`.
    pub fn one_hot(i: usize, n: usize) -> Result<Self> {
        if i >= n {
            return Err(Error::Domain(format!("domain index {} out of range (N={})", i, n)));
        }
        let mut values = vec![0.0; n];
        values[i] = 1.0;
        Ok(Self { values, mode: LabelMode::SingleLabel })
    }

    /// Multi-hot label with the given attribute indices set.
    pub fn multi_hot(indices: &[usize], n: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Domain("multi-label vector must have at least one 1".into()));
        }
        let mut values = vec![0.0; n];
        for &i in indices {
            if i >= n {
                return Err(Error::Domain(format!("domain index {} out of range (N={})", i, n)));
            }
            values[i] = 1.0;
        }
        Ok(Self { values, mode: LabelMode::MultiLabel })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    /// Indices with the bit set.
    pub fn selected(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Index of the single set bit (single-label mode).
    pub fn argmax(&self) -> usize {
        self.values
            .iter()
            .position(|&v| v == 1.0)
            .expect("label vector invariant guarantees a set bit")
    }
}

/// A label vector zero-padded and reshaped to the encoder bottleneck shape
/// `(channels, height, width)` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBlock {
    values: Array3<f32>,
}

impl LabelBlock {
    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2])
    }

    /// Read back the first `n` flattened entries as a label prefix.
    pub fn prefix(&self, n: usize) -> Vec<f32> {
        self.values.iter().take(n).copied().collect()
    }
}

/// Zero-pad `label` to `bottleneck_shape` elements and reshape row-major.
/// The flattened block is the label values followed by zeros.
pub fn pad_label_to_block(
    label: &LabelVector,
    bottleneck_shape: (usize, usize, usize),
) -> Result<LabelBlock> {
    let (c, h, w) = bottleneck_shape;
    let total = c * h * w;
    if label.len() > total {
        return Err(Error::Domain(format!(
            "label length {} exceeds flattened bottleneck size {}",
            label.len(),
            total
        )));
    }
    let mut flat = vec![0.0f32; total];
    flat[..label.len()].copy_from_slice(label.values());
    let values = Array3::from_shape_vec((c, h, w), flat).expect("shape matches length");
    Ok(LabelBlock { values })
}

/// Tile a label block across a batch: `(c,h,w)` -> `(b,c,h,w)`.
pub fn tile_label_block(block: &LabelBlock, batch: usize) -> Array4<f32> {
    let (c, h, w) = block.shape();
    let mut out = Array4::<f32>::zeros((batch, c, h, w));
    for mut img in out.axis_iter_mut(Axis(0)) {
        img.assign(block.values());
    }
    out
}
