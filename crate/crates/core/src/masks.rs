//! Learnable binary DMD masks.
//!
//! Each of the `N` masks is a small element (default 4×4) of real logits,
//! binarised by a straight-through threshold and tiled periodically over
//! the DMD plane.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

pub const DEFAULT_MASK_COUNT: usize = 3;
pub const DEFAULT_ELEMENT: (usize, usize) = (4, 4);

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    logits: Tensor,
}

impl MaskSet {
    /// Logits drawn i.i.d. from `U[-0.5, 0.5]`.
    pub fn init(n: usize, element: (usize, usize), seed: u64) -> Result<Self> {
        if n == 0 || element.0 == 0 || element.1 == 0 {
            return Err(Error::invalid("mask count and element extents must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn(&[n, element.0, element.1], |_| rng.gen_range(-0.5..=0.5));
        Ok(Self { logits })
    }

    pub fn from_logits(logits: Tensor) -> Result<Self> {
        if logits.ndim() != 3 {
            return Err(Error::shape("MaskSet", format!("logits must be [N, fy, fx], got {:?}", logits.shape())));
        }
        Ok(Self { logits })
    }

    /// Binary elements as logits far from the threshold.
    pub fn from_binary(elements: &Tensor) -> Result<Self> {
        ensure_binary(elements)?;
        Self::from_logits(elements.map("from_binary", |v| if v == 1.0 { 1.0 } else { -1.0 })?)
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn set_logits(&mut self, logits: Tensor) -> Result<()> {
        if logits.shape() != self.logits.shape() {
            return Err(Error::shape("set_logits", format!("{:?} vs {:?}", logits.shape(), self.logits.shape())));
        }
        self.logits = logits;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn element_shape(&self) -> (usize, usize) {
        (self.logits.shape()[1], self.logits.shape()[2])
    }

    /// `{0, 1}` elements `[N, fy, fx]`: 1 where `sigmoid(logit) >= 0.5`.
    pub fn binary_elements(&self) -> Tensor {
        Tensor::from_parts(
            self.logits.shape().to_vec(),
            self.logits.data().iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Binary masks tiled over a `P × Q` plane, `[N, P, Q]`.
    pub fn expand(&self, dmd: (usize, usize)) -> Result<Tensor> {
        tile_binary(&self.binary_elements(), dmd)
    }

    /// Writes the expanded masks as a `PCIT` tensor of `{0, 1}`.
    pub fn save(&self, path: impl AsRef<Path>, dmd: (usize, usize)) -> Result<()> {
        self.expand(dmd)?.save(path)
    }

    /// Writes mask `m` expanded to `dmd` as PBM.
    pub fn save_pbm(&self, path: impl AsRef<Path>, m: usize, dmd: (usize, usize)) -> Result<()> {
        io::write_pbm(path, &self.expand(dmd)?.index_first(m)?)
    }
}

/// Differentiable masks on a tape: straight-through binarisation of the
/// logits followed by periodic tiling to `dmd`.
pub fn expand_var<'t>(logits: Var<'t>, dmd: (usize, usize)) -> Result<Var<'t>> {
    logits.binarize_st()?.tile(dmd.0, dmd.1)
}

fn ensure_binary(t: &Tensor) -> Result<()> {
    if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("mask values must be 0 or 1"));
    }
    Ok(())
}

fn tile_binary(elements: &Tensor, dmd: (usize, usize)) -> Result<Tensor> {
    let s = elements.shape();
    if s.len() != 3 || dmd.0 == 0 || dmd.1 == 0 {
        return Err(Error::shape("expand", format!("{s:?} -> {dmd:?}")));
    }
    let (n, fy, fx) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(n * dmd.0 * dmd.1);
    for m in 0..n {
        for y in 0..dmd.0 {
            for x in 0..dmd.1 {
                out.push(elements.data()[(m * fy + y % fy) * fx + x % fx]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, dmd.0, dmd.1], out))
}

/// Loads `{0, 1}` masks from a `PCIT` tensor (`[N, P, Q]` or `[P, Q]`) or a
/// single PBM image, returning `[N, P, Q]`.
pub fn load_masks(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let t = if bytes.starts_with(b"P4") {
        io::decode_pbm(&bytes)?
    } else {
        Tensor::from_bytes(&bytes)?
    };
    ensure_binary(&t)?;
    match t.ndim() {
        2 => {
            let s = t.shape().to_vec();
            t.reshape(&[1, s[0], s[1]])
        }
        3 => Ok(t),
        _ => Err(Error::shape("load_masks", format!("{:?}", t.shape()))),
    }
}

/// Crops `[N, P, Q]` masks to a window.
pub fn crop_masks(masks: &Tensor, origin: (usize, usize), size: (usize, usize)) -> Result<Tensor> {
    let s = masks.shape();
    if s.len() != 3 || origin.0 + size.0 > s[1] || origin.1 + size.1 > s[2] || size.0 == 0 || size.1 == 0 {
        return Err(Error::shape("crop_masks", format!("{s:?} at {origin:?} size {size:?}")));
    }
    let mut out = Vec::with_capacity(s[0] * size.0 * size.1);
    for m in 0..s[0] {
        for y in origin.0..origin.0 + size.0 {
            let base = (m * s[1] + y) * s[2];
            out.extend_from_slice(&masks.data()[base + origin.1..base + origin.1 + size.1]);
        }
    }
    Ok(Tensor::from_parts(vec![s[0], size.0, size.1], out))
}

/// Measured values over unknowns: `N · p · q / (P · Q)`.
pub fn sampling_rate(n_masks: usize, detector: (usize, usize), dmd: (usize, usize)) -> f64 {
    (n_masks * detector.0 * detector.1) as f64 / (dmd.0 * dmd.1) as f64
}
