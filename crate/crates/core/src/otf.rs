//! Optical transfer function: the sparse linear map from DMD-plane intensity
//! to detector pixels, plus synthesis, geometric perturbation, calibration
//! and per-region extraction.
//!
//! Images are flattened row-major throughout: DMD pixel `(y, x)` is column
//! `y·Q + x`, detector pixel `(r, c)` is row `r·q + c`.
//!
//! `PCIO` container (little-endian): magic `PCIO`, version `u32` = 1,
//! detector extents `p, q` and DMD extents `P, Q` as `u64`, then `p·q + 1`
//! row offsets (`u64`), `nnz` column indices (`u64`) and `nnz` values
//! (`f64`), where `nnz` is the last row offset.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::LinearOperator;
use crate::error::{Error, Result};
use crate::tensor::{ByteReader, Tensor};

pub const OTF_MAGIC: &[u8; 4] = b"PCIO";
pub const OTF_VERSION: u32 = 1;

/// Row-compressed nonnegative `(p·q) × (P·Q)` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOtf {
    detector: (usize, usize),
    dmd: (usize, usize),
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    support_radius: usize,
}

impl SparseOtf {
    /// Validates and assembles a row-compressed OTF.
    pub fn new(
        detector: (usize, usize),
        dmd: (usize, usize),
        offsets: Vec<usize>,
        cols: Vec<usize>,
        vals: Vec<f64>,
    ) -> Result<Self> {
        let rows = detector.0 * detector.1;
        let n_cols = dmd.0 * dmd.1;
        if rows == 0 || n_cols == 0 {
            return Err(Error::invalid("OTF extents must be positive"));
        }
        if offsets.len() != rows + 1 || offsets[0] != 0 {
            return Err(Error::invalid(format!(
                "expected {} row offsets starting at 0",
                rows + 1
            )));
        }
        if offsets.windows(2).any(|w| w[0] > w[1]) || offsets[rows] != cols.len() {
            return Err(Error::invalid("row offsets must be non-decreasing and end at nnz"));
        }
        if cols.len() != vals.len() {
            return Err(Error::invalid("column and value arrays differ in length"));
        }
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("OTF values must be finite and nonnegative"));
        }
        for r in 0..rows {
            let c = &cols[offsets[r]..offsets[r + 1]];
            if c.windows(2).any(|w| w[0] >= w[1]) || c.last().is_some_and(|&x| x >= n_cols) {
                return Err(Error::invalid(format!(
                    "row {r}: column indices must be strictly increasing and below {n_cols}"
                )));
            }
        }
        let mut otf = Self {
            detector,
            dmd,
            offsets,
            cols,
            vals,
            support_radius: 0,
        };
        otf.support_radius = (0..rows)
            .map(|r| otf.row_radius(r))
            .max()
            .unwrap_or(0);
        Ok(otf)
    }

    /// Assembles from per-row `(column, value)` lists; zeros are dropped.
    pub fn from_rows(
        detector: (usize, usize),
        dmd: (usize, usize),
        rows: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self> {
        let mut offsets = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                if v != 0.0 {
                    cols.push(c);
                    vals.push(v);
                }
            }
            offsets.push(cols.len());
        }
        Self::new(detector, dmd, offsets, cols, vals)
    }

    fn row_radius(&self, r: usize) -> usize {
        let c = &self.cols[self.offsets[r]..self.offsets[r + 1]];
        if c.is_empty() {
            return 0;
        }
        let q = self.dmd.1;
        let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
        for &col in c {
            let (y, x) = (col / q, col % q);
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
        (y1 - y0 + 1).max(x1 - x0 + 1).div_ceil(2)
    }

    pub fn detector_shape(&self) -> (usize, usize) {
        self.detector
    }

    pub fn dmd_shape(&self) -> (usize, usize) {
        self.dmd
    }

    pub fn n_rows(&self) -> usize {
        self.detector.0 * self.detector.1
    }

    pub fn n_cols(&self) -> usize {
        self.dmd.0 * self.dmd.1
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Half-extent (rounded up) of the largest row bounding box.
    pub fn support_radius(&self) -> usize {
        self.support_radius
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let range = self.offsets[r]..self.offsets[r + 1];
        (&self.cols[range.clone()], &self.vals[range])
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows()).map(|r| self.row(r).1.iter().sum()).collect()
    }

    pub fn apply(&self, image: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows()];
        self.apply_into(image, &mut out);
        out
    }

    pub fn apply_adjoint(&self, detector: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols()];
        self.apply_adjoint_into(detector, &mut out);
        out
    }

    /// Row-major dense `(p·q) × (P·Q)` copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.n_cols();
        let mut dense = vec![0.0; self.n_rows() * n];
        for r in 0..self.n_rows() {
            let (c, v) = self.row(r);
            for (&ci, &vi) in c.iter().zip(v) {
                dense[r * n + ci] = vi;
            }
        }
        dense
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.vals.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `‖self − other‖_F / ‖other‖_F`.
    pub fn relative_error(&self, other: &SparseOtf) -> Result<f64> {
        if self.detector != other.detector || self.dmd != other.dmd {
            return Err(Error::shape("relative_error", "OTF extents differ"));
        }
        let mut diff = 0.0;
        for r in 0..self.n_rows() {
            let mut acc = std::collections::BTreeMap::new();
            let (c, v) = self.row(r);
            for (&ci, &vi) in c.iter().zip(v) {
                *acc.entry(ci).or_insert(0.0) += vi;
            }
            let (c, v) = other.row(r);
            for (&ci, &vi) in c.iter().zip(v) {
                *acc.entry(ci).or_insert(0.0) -= vi;
            }
            diff += acc.values().map(|d| d * d).sum::<f64>();
        }
        Ok(diff.sqrt() / other.frobenius_norm())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(OTF_MAGIC);
        out.extend_from_slice(&OTF_VERSION.to_le_bytes());
        for d in [self.detector.0, self.detector.1, self.dmd.0, self.dmd.1] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &o in &self.offsets {
            out.extend_from_slice(&(o as u64).to_le_bytes());
        }
        for &c in &self.cols {
            out.extend_from_slice(&(c as u64).to_le_bytes());
        }
        for &v in &self.vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "PCIO");
        if r.take(4)? != OTF_MAGIC {
            return Err(Error::format("PCIO", "bad magic"));
        }
        let version = r.u32()?;
        if version != OTF_VERSION {
            return Err(Error::format("PCIO", format!("unsupported version {version}")));
        }
        let mut ext = [0usize; 4];
        for e in &mut ext {
            *e = r.u64()? as usize;
        }
        let rows = ext[0]
            .checked_mul(ext[1])
            .filter(|&n| n > 0 && (n + 1) * 8 <= r.remaining())
            .ok_or_else(|| Error::format("PCIO", "implausible detector extents"))?;
        let offsets = (0..=rows)
            .map(|_| r.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let nnz = offsets[rows];
        if r.remaining() != nnz * 16 {
            return Err(Error::format("PCIO", "payload length does not match nnz"));
        }
        let cols = (0..nnz)
            .map(|_| r.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let vals = (0..nnz).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Self::new((ext[0], ext[1]), (ext[2], ext[3]), offsets, cols, vals)
            .map_err(|e| Error::format("PCIO", e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl LinearOperator for SparseOtf {
    fn input_len(&self) -> usize {
        self.n_cols()
    }

    fn output_len(&self) -> usize {
        self.n_rows()
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate().take(self.n_rows()) {
            let (c, v) = self.row(r);
            *out = c.iter().zip(v).map(|(&ci, &vi)| vi * x[ci]).sum();
        }
    }

    fn apply_adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        x.iter_mut().for_each(|v| *v = 0.0);
        for (r, &yr) in y.iter().enumerate().take(self.n_rows()) {
            let (c, v) = self.row(r);
            for (&ci, &vi) in c.iter().zip(v) {
                x[ci] += vi * yr;
            }
        }
    }
}

/// Each detector pixel integrates its own disjoint `fy × fx` DMD block.
pub fn make_ideal_otf(dmd: (usize, usize), factor: (usize, usize)) -> Result<SparseOtf> {
    let (fy, fx) = factor;
    if fy == 0 || fx == 0 || dmd.0 == 0 || dmd.1 == 0 || dmd.0 % fy != 0 || dmd.1 % fx != 0 {
        return Err(Error::invalid(format!(
            "DMD {}x{} is not divisible by factor {fy}x{fx}",
            dmd.0, dmd.1
        )));
    }
    let det = (dmd.0 / fy, dmd.1 / fx);
    let rows = (0..det.0 * det.1)
        .map(|i| {
            let (r, c) = (i / det.1, i % det.1);
            let mut row = Vec::with_capacity(fy * fx);
            for y in r * fy..(r + 1) * fy {
                for x in c * fx..(c + 1) * fx {
                    row.push((y * dmd.1 + x, 1.0));
                }
            }
            row
        })
        .collect();
    SparseOtf::from_rows(det, dmd, rows)
}

/// Geometric misalignment between DMD and detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OtfPerturbation {
    /// `(dy, dx)` in DMD pixels.
    pub shift: (f64, f64),
    /// Radians, about the DMD centre.
    pub rotation: f64,
    /// Magnification about the DMD centre.
    pub scale: f64,
    /// Gaussian blur standard deviation in DMD pixels.
    pub blur_sigma: f64,
    /// Relative std-dev of the per-detector-pixel gain.
    pub gain_jitter: f64,
}

impl Default for OtfPerturbation {
    fn default() -> Self {
        Self {
            shift: (0.0, 0.0),
            rotation: 0.0,
            scale: 1.0,
            blur_sigma: 0.0,
            gain_jitter: 0.0,
        }
    }
}

impl OtfPerturbation {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.shift.0,
            self.shift.1,
            self.rotation,
            self.scale,
            self.blur_sigma,
            self.gain_jitter,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.scale <= 0.0 || self.blur_sigma < 0.0 || self.gain_jitter < 0.0 {
            return Err(Error::invalid(format!("invalid OTF perturbation {self:?}")));
        }
        Ok(())
    }

    /// Maps a DMD point of the perturbed plane back to the base plane.
    fn inverse_map(&self, dmd: (usize, usize), y: f64, x: f64) -> (f64, f64) {
        let cy = (dmd.0 as f64 - 1.0) / 2.0;
        let cx = (dmd.1 as f64 - 1.0) / 2.0;
        let (dy, dx) = (y - self.shift.0 - cy, x - self.shift.1 - cx);
        let (s, c) = self.rotation.sin_cos();
        // R(-θ)·d / scale
        let ry = (c * dy - s * dx) / self.scale;
        let rx = (s * dy + c * dx) / self.scale;
        (cy + ry, cx + rx)
    }

    fn forward_map(&self, dmd: (usize, usize), y: f64, x: f64) -> (f64, f64) {
        let cy = (dmd.0 as f64 - 1.0) / 2.0;
        let cx = (dmd.1 as f64 - 1.0) / 2.0;
        let (dy, dx) = (y - cy, x - cx);
        let (s, c) = self.rotation.sin_cos();
        (
            cy + self.scale * (c * dy + s * dx) + self.shift.0,
            cx + self.scale * (-s * dy + c * dx) + self.shift.1,
        )
    }
}

/// 1-D Gaussian taps for offsets `-R..=R`, `R = floor(3σ)`, normalised.
pub(crate) fn gaussian_taps(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).floor() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Dense window of one OTF row.
struct Window {
    y0: i64,
    x0: i64,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Window {
    fn get(&self, y: i64, x: i64) -> f64 {
        let (ly, lx) = (y - self.y0, x - self.x0);
        if ly < 0 || lx < 0 || ly >= self.h as i64 || lx >= self.w as i64 {
            0.0
        } else {
            self.data[ly as usize * self.w + lx as usize]
        }
    }

    fn bilinear(&self, y: f64, x: f64) -> f64 {
        let (fy, fx) = (y.floor(), x.floor());
        let (ty, tx) = (y - fy, x - fx);
        let (iy, ix) = (fy as i64, fx as i64);
        let mut v = 0.0;
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                let w = wy * wx;
                if w != 0.0 {
                    v += w * self.get(iy + dy, ix + dx);
                }
            }
        }
        v
    }
}

/// Resamples every row under the affine map, blurs, renormalises to the base
/// row sum and applies a per-row gain `max(0, 1 + jitter·z)`.
///
/// Returns the perturbed OTF and the gain factor applied to each row.
pub fn perturb_otf(
    base: &SparseOtf,
    pert: &OtfPerturbation,
    seed: u64,
) -> Result<(SparseOtf, Vec<f64>)> {
    pert.validate()?;
    let (pp, qq) = base.dmd;
    let taps = gaussian_taps(pert.blur_sigma);
    let blur_r = (taps.len() / 2) as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gains: Vec<f64> = (0..base.n_rows())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (1.0 + pert.gain_jitter * z).max(0.0)
        })
        .collect();

    let mut rows = Vec::with_capacity(base.n_rows());
    for r in 0..base.n_rows() {
        let (c, v) = base.row(r);
        let base_sum: f64 = v.iter().sum();
        if c.is_empty() {
            rows.push(Vec::new());
            continue;
        }
        let (mut y0, mut y1, mut x0, mut x1) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
        for &ci in c {
            let (y, x) = ((ci / qq) as i64, (ci % qq) as i64);
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
        let (h, w) = ((y1 - y0 + 1) as usize, (x1 - x0 + 1) as usize);
        let mut src = Window {
            y0,
            x0,
            h,
            w,
            data: vec![0.0; h * w],
        };
        for (&ci, &vi) in c.iter().zip(v) {
            let (y, x) = ((ci / qq) as i64, (ci % qq) as i64);
            src.data[((y - y0) as usize) * w + (x - x0) as usize] = vi;
        }

        // Bounding box of the mapped support, padded for interpolation and blur.
        let (mut oy0, mut oy1, mut ox0, mut ox1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for (cy, cx) in [(y0, x0), (y0, x1), (y1, x0), (y1, x1)] {
            let (my, mx) = pert.forward_map(base.dmd, cy as f64, cx as f64);
            oy0 = oy0.min(my);
            oy1 = oy1.max(my);
            ox0 = ox0.min(mx);
            ox1 = ox1.max(mx);
        }
        let pad = 1 + pert.scale.ceil() as i64;
        let ry0 = (oy0.floor() as i64 - pad).max(0);
        let ry1 = (oy1.ceil() as i64 + pad).min(pp as i64 - 1);
        let rx0 = (ox0.floor() as i64 - pad).max(0);
        let rx1 = (ox1.ceil() as i64 + pad).min(qq as i64 - 1);
        if ry0 > ry1 || rx0 > rx1 {
            return Err(Error::EmptyRow { row: r });
        }
        let (rh, rw) = ((ry1 - ry0 + 1) as usize, (rx1 - rx0 + 1) as usize);
        let mut resampled = Window {
            y0: ry0,
            x0: rx0,
            h: rh,
            w: rw,
            data: vec![0.0; rh * rw],
        };
        for ly in 0..rh {
            for lx in 0..rw {
                let (sy, sx) =
                    pert.inverse_map(base.dmd, (ry0 + ly as i64) as f64, (rx0 + lx as i64) as f64);
                resampled.data[ly * rw + lx] = src.bilinear(sy, sx);
            }
        }

        let blurred = if blur_r == 0 {
            resampled
        } else {
            let by0 = (ry0 - blur_r).max(0);
            let by1 = (ry1 + blur_r).min(pp as i64 - 1);
            let bx0 = (rx0 - blur_r).max(0);
            let bx1 = (rx1 + blur_r).min(qq as i64 - 1);
            let (bh, bw) = ((by1 - by0 + 1) as usize, (bx1 - bx0 + 1) as usize);
            // horizontal pass
            let mut tmp = vec![0.0; rh * bw];
            for ly in 0..rh {
                for bx in 0..bw {
                    let x = bx0 + bx as i64;
                    tmp[ly * bw + bx] = taps
                        .iter()
                        .enumerate()
                        .map(|(t, &k)| k * resampled.get(ry0 + ly as i64, x - (t as i64 - blur_r)))
                        .sum();
                }
            }
            let tmp = Window {
                y0: ry0,
                x0: bx0,
                h: rh,
                w: bw,
                data: tmp,
            };
            let mut out = vec![0.0; bh * bw];
            for by in 0..bh {
                for bx in 0..bw {
                    let y = by0 + by as i64;
                    out[by * bw + bx] = taps
                        .iter()
                        .enumerate()
                        .map(|(t, &k)| k * tmp.get(y - (t as i64 - blur_r), bx0 + bx as i64))
                        .sum();
                }
            }
            Window {
                y0: by0,
                x0: bx0,
                h: bh,
                w: bw,
                data: out,
            }
        };

        let mut entries: Vec<(usize, f64)> = Vec::new();
        for ly in 0..blurred.h {
            for lx in 0..blurred.w {
                let val = blurred.data[ly * blurred.w + lx];
                if val > 0.0 {
                    let y = (blurred.y0 + ly as i64) as usize;
                    let x = (blurred.x0 + lx as i64) as usize;
                    entries.push((y * qq + x, val));
                }
            }
        }
        let new_sum: f64 = entries.iter().map(|e| e.1).sum();
        if new_sum <= 0.0 {
            return Err(Error::EmptyRow { row: r });
        }
        let norm = base_sum / new_sum;
        for e in &mut entries {
            e.1 = e.1 * norm * gains[r];
        }
        rows.push(entries);
    }
    Ok((SparseOtf::from_rows(base.detector, base.dmd, rows)?, gains))
}

/// Ideal block of each detector pixel dilated by `dilation`, clipped to the DMD.
pub fn default_windows(
    dmd: (usize, usize),
    factor: (usize, usize),
    dilation: usize,
) -> Result<Vec<Vec<usize>>> {
    let ideal = make_ideal_otf(dmd, factor)?;
    let det = ideal.detector_shape();
    Ok((0..ideal.n_rows())
        .map(|i| {
            let (r, c) = (i / det.1, i % det.1);
            let y0 = (r * factor.0).saturating_sub(dilation);
            let y1 = ((r + 1) * factor.0 + dilation).min(dmd.0);
            let x0 = (c * factor.1).saturating_sub(dilation);
            let x1 = ((c + 1) * factor.1 + dilation).min(dmd.1);
            (y0..y1)
                .flat_map(|y| (x0..x1).map(move |x| y * dmd.1 + x))
                .collect()
        })
        .collect())
}

/// `1e-6 · mean(mask²) · |window|`.
pub fn default_ridge(cal_masks: &Tensor, window_len: usize) -> f64 {
    let msq = cal_masks.data().iter().map(|v| v * v).sum::<f64>() / cal_masks.numel() as f64;
    1e-6 * msq * window_len as f64
}

/// Independent uniform binary patterns `[n, P, Q]` for calibration.
pub fn random_binary_masks(n: usize, dmd: (usize, usize), seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, dmd.0, dmd.1], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
}

#[derive(Clone, Debug)]
pub struct Calibration {
    pub otf: SparseOtf,
    /// Per-row root-mean-square residual after clamping negatives.
    pub residual: Vec<f64>,
}

/// Per-row ridge least squares restricted to a candidate window.
///
/// `cal_masks` is `[N, P, Q]`, `frames` is `[N, p, q]`. For each detector
/// row `i`, solves `min_c Σ_m (y_{m,i} − c·M_m[window_i])² + ridge·‖c‖²` and
/// clamps negative coefficients to zero.
pub fn calibrate_otf(
    cal_masks: &Tensor,
    frames: &Tensor,
    windows: &[Vec<usize>],
    ridge: f64,
) -> Result<Calibration> {
    let (ms, fs) = (cal_masks.shape(), frames.shape());
    if ms.len() != 3 || fs.len() != 3 || ms[0] != fs[0] {
        return Err(Error::shape("calibrate_otf", format!("masks {ms:?} vs frames {fs:?}")));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::invalid("ridge must be a finite nonnegative number"));
    }
    let (n, dmd, det) = (ms[0], (ms[1], ms[2]), (fs[1], fs[2]));
    let rows = det.0 * det.1;
    let n_cols = dmd.0 * dmd.1;
    if windows.len() != rows {
        return Err(Error::shape(
            "calibrate_otf",
            format!("{} windows for {rows} detector pixels", windows.len()),
        ));
    }
    let md = cal_masks.data();
    let fd = frames.data();
    let mut out_rows = Vec::with_capacity(rows);
    let mut residual = Vec::with_capacity(rows);
    for (i, window) in windows.iter().enumerate() {
        if window.is_empty() {
            return Err(Error::EmptyWindow { row: i });
        }
        if window.iter().any(|&c| c >= n_cols) {
            return Err(Error::invalid(format!("window of row {i} leaves the DMD")));
        }
        let k = window.len();
        let a = DMatrix::from_fn(n, k, |m, j| md[m * n_cols + window[j]]);
        let y = DVector::from_fn(n, |m, _| fd[m * rows + i]);
        let mut gram = a.transpose() * &a;
        for j in 0..k {
            gram[(j, j)] += ridge;
        }
        let rhs = a.transpose() * &y;
        let chol = gram.cholesky().ok_or(Error::Singular { row: i })?;
        let mut coef = chol.solve(&rhs);
        coef.iter_mut().for_each(|c| *c = c.max(0.0));
        let resid = (&a * &coef - &y).norm() / (n as f64).sqrt();
        residual.push(resid);
        out_rows.push(
            window
                .iter()
                .zip(coef.iter())
                .map(|(&c, &v)| (c, v))
                .collect(),
        );
    }
    Ok(Calibration {
        otf: SparseOtf::from_rows(det, dmd, out_rows)?,
        residual,
    })
}

/// A rectangular region of the DMD and the detector pixels that view it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub origin: (usize, usize),
    pub size: (usize, usize),
    pub detector_origin: (usize, usize),
    pub detector_size: (usize, usize),
}

impl RegionSpec {
    /// A region at the origin of a plane viewed with an exact integer factor.
    pub fn whole(dmd: (usize, usize), factor: (usize, usize)) -> Result<Self> {
        if factor.0 == 0 || factor.1 == 0 || dmd.0 % factor.0 != 0 || dmd.1 % factor.1 != 0 {
            return Err(Error::invalid("DMD extents not divisible by factor"));
        }
        Ok(Self {
            origin: (0, 0),
            size: dmd,
            detector_origin: (0, 0),
            detector_size: (dmd.0 / factor.0, dmd.1 / factor.1),
        })
    }

    /// Under-sampling factor `(size / detector_size)` when integral.
    pub fn factor(&self) -> Result<(usize, usize)> {
        let (s, d) = (self.size, self.detector_size);
        if d.0 == 0 || d.1 == 0 || s.0 % d.0 != 0 || s.1 % d.1 != 0 {
            return Err(Error::invalid(format!(
                "region {}x{} over detector {}x{} is not an integral factor",
                s.0, s.1, d.0, d.1
            )));
        }
        Ok((s.0 / d.0, s.1 / d.1))
    }
}

/// Tiles `fov` into a row-major grid of `region_size` regions.
pub fn split_fov(fov: &RegionSpec, region_size: (usize, usize)) -> Result<Vec<RegionSpec>> {
    let (fy, fx) = fov.factor()?;
    let (rh, rw) = region_size;
    if rh == 0 || rw == 0 || fov.size.0 % rh != 0 || fov.size.1 % rw != 0 {
        return Err(Error::invalid(format!(
            "regions of {rh}x{rw} do not tile the {}x{} field of view",
            fov.size.0, fov.size.1
        )));
    }
    if rh % fy != 0 || rw % fx != 0 {
        return Err(Error::invalid("region size not divisible by the under-sampling factor"));
    }
    let mut out = Vec::new();
    for gy in 0..fov.size.0 / rh {
        for gx in 0..fov.size.1 / rw {
            out.push(RegionSpec {
                origin: (fov.origin.0 + gy * rh, fov.origin.1 + gx * rw),
                size: region_size,
                detector_origin: (
                    fov.detector_origin.0 + gy * rh / fy,
                    fov.detector_origin.1 + gx * rw / fx,
                ),
                detector_size: (rh / fy, rw / fx),
            });
        }
    }
    Ok(out)
}

/// Restricts `full` to a region's detector rows and DMD columns.
///
/// Mass falling outside the region's DMD window is dropped; the returned
/// vector holds each row's dropped fraction.
pub fn extract_region(full: &SparseOtf, r: &RegionSpec) -> Result<(SparseOtf, Vec<f64>)> {
    let inside = |o: (usize, usize), s: (usize, usize), bound: (usize, usize)| {
        o.0 + s.0 <= bound.0 && o.1 + s.1 <= bound.1 && s.0 > 0 && s.1 > 0
    };
    if !inside(r.origin, r.size, full.dmd) || !inside(r.detector_origin, r.detector_size, full.detector) {
        return Err(Error::invalid(format!("region {r:?} lies outside the field of view")));
    }
    let qq = full.dmd.1;
    let mut rows = Vec::with_capacity(r.detector_size.0 * r.detector_size.1);
    let mut leakage = Vec::with_capacity(rows.capacity());
    for dr in 0..r.detector_size.0 {
        for dc in 0..r.detector_size.1 {
            let gi = (r.detector_origin.0 + dr) * full.detector.1 + r.detector_origin.1 + dc;
            let (c, v) = full.row(gi);
            let total: f64 = v.iter().sum();
            let mut kept = Vec::new();
            let mut dropped = 0.0;
            for (&ci, &vi) in c.iter().zip(v) {
                let (y, x) = (ci / qq, ci % qq);
                let in_region = y >= r.origin.0
                    && y < r.origin.0 + r.size.0
                    && x >= r.origin.1
                    && x < r.origin.1 + r.size.1;
                if in_region {
                    kept.push(((y - r.origin.0) * r.size.1 + (x - r.origin.1), vi));
                } else {
                    dropped += vi;
                }
            }
            leakage.push(if total > 0.0 { dropped / total } else { 0.0 });
            rows.push(kept);
        }
    }
    Ok((SparseOtf::from_rows(r.detector_size, r.size, rows)?, leakage))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn dense_matvec(otf: &SparseOtf, x: &[f64]) -> Vec<f64> {
        let d = otf.to_dense();
        let n = otf.n_cols();
        (0..otf.n_rows())
            .map(|r| (0..n).map(|c| d[r * n + c] * x[c]).sum())
            .collect()
    }

    #[test]
    fn ideal_otf_examples() {
        let otf = make_ideal_otf((4, 4), (2, 2)).unwrap();
        assert_eq!(otf.n_rows(), 4);
        let mut seen = vec![0; 16];
        for r in 0..4 {
            let (c, v) = otf.row(r);
            assert_eq!(c.len(), 4);
            assert!(v.iter().all(|&x| x == 1.0));
            c.iter().for_each(|&ci| seen[ci] += 1);
        }
        assert!(seen.iter().all(|&s| s == 1));
        assert_eq!(otf.apply(&[1.0; 16]), vec![4.0; 4]);
        assert!(make_ideal_otf((5, 4), (2, 2)).is_err());
        // 128x128 at exact (4,4) gives a 32x32 detector, not 48x48
        let big = make_ideal_otf((128, 128), (4, 4)).unwrap();
        assert_eq!(big.detector_shape(), (32, 32));
    }

    #[test]
    fn sparse_apply_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (dmd, f) in [((8, 8), (2, 2)), ((12, 8), (4, 2))] {
            let base = make_ideal_otf(dmd, f).unwrap();
            let pert = OtfPerturbation {
                shift: (0.3, -0.7),
                rotation: 0.05,
                scale: 1.1,
                blur_sigma: 0.6,
                gain_jitter: 0.1,
            };
            let (otf, _) = perturb_otf(&base, &pert, 3).unwrap();
            let x: Vec<f64> = (0..otf.n_cols()).map(|_| rng.gen_range(0.0..1.0)).collect();
            for (a, b) in otf.apply(&x).iter().zip(dense_matvec(&otf, &x)) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn adjoint_identity() {
        let base = make_ideal_otf((8, 12), (4, 4)).unwrap();
        let (otf, _) = perturb_otf(
            &base,
            &OtfPerturbation {
                shift: (1.0, 0.5),
                blur_sigma: 0.5,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..otf.n_cols()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..otf.n_rows()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = otf.apply(&x).iter().zip(&u).map(|(a, b)| a * b).sum();
        let rhs: f64 = otf.apply_adjoint(&u).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn identity_perturbation_is_identity() {
        let base = make_ideal_otf((16, 12), (4, 4)).unwrap();
        let (out, gains) = perturb_otf(&base, &OtfPerturbation::default(), 5).unwrap();
        assert_eq!(out, base);
        assert!(gains.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn gain_jitter_scales_rows_only() {
        let base = make_ideal_otf((8, 8), (2, 2)).unwrap();
        let pert = OtfPerturbation {
            gain_jitter: 0.2,
            ..Default::default()
        };
        let (out, gains) = perturb_otf(&base, &pert, 11).unwrap();
        let (again, _) = perturb_otf(&base, &pert, 11).unwrap();
        assert_eq!(out, again);
        for r in 0..base.n_rows() {
            assert_eq!(out.row(r).0, base.row(r).0);
            let sum: f64 = out.row(r).1.iter().sum();
            assert!((sum - 4.0 * gains[r]).abs() < 1e-12);
        }
        assert!(gains.iter().any(|&g| g != 1.0));
    }

    /// Dense brute-force resampler: full-plane bilinear warp, full 2-D
    /// truncated Gaussian, renormalisation.
    fn dense_perturb(base: &SparseOtf, pert: &OtfPerturbation) -> Vec<Vec<f64>> {
        let (pp, qq) = base.dmd_shape();
        let dense = base.to_dense();
        let n = pp * qq;
        let sample = |row: &[f64], y: f64, x: f64| -> f64 {
            let (y0, x0) = (y.floor(), x.floor());
            let (ty, tx) = (y - y0, x - x0);
            let mut v = 0.0;
            for (dy, wy) in [(0.0, 1.0 - ty), (1.0, ty)] {
                for (dx, wx) in [(0.0, 1.0 - tx), (1.0, tx)] {
                    let (yy, xx) = (y0 + dy, x0 + dx);
                    if yy >= 0.0 && xx >= 0.0 && (yy as usize) < pp && (xx as usize) < qq {
                        v += wy * wx * row[yy as usize * qq + xx as usize];
                    }
                }
            }
            v
        };
        let cy = (pp as f64 - 1.0) / 2.0;
        let cx = (qq as f64 - 1.0) / 2.0;
        let sigma = pert.blur_sigma;
        let rad = (3.0 * sigma).floor() as i64;
        (0..base.n_rows())
            .map(|r| {
                let row = &dense[r * n..(r + 1) * n];
                let warped: Vec<f64> = (0..n)
                    .map(|p| {
                        let (y, x) = ((p / qq) as f64, (p % qq) as f64);
                        let (dy, dx) = (y - pert.shift.0 - cy, x - pert.shift.1 - cx);
                        let (s, c) = pert.rotation.sin_cos();
                        let sy = cy + (c * dy - s * dx) / pert.scale;
                        let sx = cx + (s * dy + c * dx) / pert.scale;
                        sample(row, sy, sx)
                    })
                    .collect();
                let blurred: Vec<f64> = if rad == 0 {
                    warped
                } else {
                    let mut wsum = 0.0;
                    let mut kern = Vec::new();
                    for dy in -rad..=rad {
                        for dx in -rad..=rad {
                            let w = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
                            kern.push((dy, dx, w));
                            wsum += w;
                        }
                    }
                    (0..n)
                        .map(|p| {
                            let (y, x) = ((p / qq) as i64, (p % qq) as i64);
                            kern.iter()
                                .map(|&(dy, dx, w)| {
                                    let (yy, xx) = (y - dy, x - dx);
                                    if yy >= 0 && xx >= 0 && (yy as usize) < pp && (xx as usize) < qq {
                                        w / wsum * warped[yy as usize * qq + xx as usize]
                                    } else {
                                        0.0
                                    }
                                })
                                .sum()
                        })
                        .collect()
                };
                let total: f64 = blurred.iter().sum();
                let want: f64 = row.iter().sum();
                blurred.iter().map(|v| v * want / total).collect()
            })
            .collect()
    }

    #[test]
    fn half_pixel_shift_matches_dense_resampler() {
        let base = make_ideal_otf((8, 8), (2, 2)).unwrap();
        let pert = OtfPerturbation {
            shift: (0.5, 0.0),
            ..Default::default()
        };
        let (out, _) = perturb_otf(&base, &pert, 0).unwrap();
        let oracle = dense_perturb(&base, &pert);
        let dense = out.to_dense();
        for r in 0..out.n_rows() {
            for c in 0..64 {
                assert!((dense[r * 64 + c] - oracle[r][c]).abs() < 1e-12, "row {r} col {c}");
            }
        }
        // interior row: mass splits 3:1 between its own block and the one below
        let r = 5; // detector (1,1): DMD rows 2..4, cols 2..4
        let own: f64 = [2, 3].iter().flat_map(|&y| [2, 3].map(|x| dense[r * 64 + y * 8 + x])).sum();
        let below: f64 = [4, 5].iter().flat_map(|&y| [2, 3].map(|x| dense[r * 64 + y * 8 + x])).sum();
        assert!((own - 3.0).abs() < 1e-12 && (below - 1.0).abs() < 1e-12);
    }

    #[test]
    fn general_perturbation_matches_dense_resampler() {
        let base = make_ideal_otf((12, 12), (4, 4)).unwrap();
        let pert = OtfPerturbation {
            shift: (1.0, -0.25),
            rotation: 0.1,
            scale: 1.15,
            blur_sigma: 0.5,
            gain_jitter: 0.0,
        };
        let (out, _) = perturb_otf(&base, &pert, 0).unwrap();
        let oracle = dense_perturb(&base, &pert);
        let dense = out.to_dense();
        for r in 0..out.n_rows() {
            for c in 0..144 {
                assert!((dense[r * 144 + c] - oracle[r][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perturbation_preserves_row_sums() {
        let base = make_ideal_otf((16, 16), (4, 4)).unwrap();
        let pert = OtfPerturbation {
            shift: (0.7, 0.2),
            rotation: 0.03,
            scale: 0.9,
            blur_sigma: 0.8,
            gain_jitter: 0.0,
        };
        let (out, _) = perturb_otf(&base, &pert, 0).unwrap();
        for (a, b) in out.row_sums().iter().zip(base.row_sums()) {
            assert!((a - b).abs() <= 1e-9 * b);
        }
        assert!(out.support_radius() >= base.support_radius());
        assert!(perturb_otf(&base, &OtfPerturbation { scale: 0.0, ..Default::default() }, 0).is_err());
    }

    fn measure_dense(otf: &SparseOtf, masks: &Tensor) -> Tensor {
        let (n, pp, qq) = (masks.shape()[0], masks.shape()[1], masks.shape()[2]);
        let (p, q) = otf.detector_shape();
        let mut out = Vec::new();
        for m in 0..n {
            out.extend(otf.apply(&masks.data()[m * pp * qq..(m + 1) * pp * qq]));
        }
        Tensor::new(vec![n, p, q], out).unwrap()
    }

    #[test]
    fn calibration_recovers_noiseless_otf() {
        let dmd = (16, 16);
        let base = make_ideal_otf(dmd, (4, 4)).unwrap();
        let (truth, _) = perturb_otf(
            &base,
            &OtfPerturbation {
                shift: (1.0, 0.5),
                blur_sigma: 0.5,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let windows = default_windows(dmd, (4, 4), 4).unwrap();
        let wmax = windows.iter().map(Vec::len).max().unwrap();
        let masks = random_binary_masks(3 * wmax, dmd, 7);
        let frames = measure_dense(&truth, &masks);
        let cal = calibrate_otf(&masks, &frames, &windows, 1e-9).unwrap();
        assert!(cal.otf.relative_error(&truth).unwrap() < 1e-6);
    }

    #[test]
    fn calibration_edge_cases() {
        let dmd = (8, 8);
        let windows = default_windows(dmd, (4, 4), 4).unwrap();
        let masks = random_binary_masks(10, dmd, 1);
        let zeros = Tensor::zeros(&[10, 2, 2]);
        let cal = calibrate_otf(&masks, &zeros, &windows, default_ridge(&masks, 64)).unwrap();
        assert_eq!(cal.otf.nnz(), 0);
        // 10 masks for 64 unknowns without ridge is singular
        assert!(matches!(
            calibrate_otf(&masks, &zeros, &windows, 0.0),
            Err(Error::Singular { .. })
        ));
        let mut bad = windows.clone();
        bad[2].clear();
        assert!(matches!(
            calibrate_otf(&masks, &zeros, &bad, 1e-3),
            Err(Error::EmptyWindow { row: 2 })
        ));
    }

    #[test]
    fn fov_split_and_extract() {
        let fov = RegionSpec::whole((256, 256), (4, 4)).unwrap();
        let regions = split_fov(&fov, (128, 128)).unwrap();
        assert_eq!(regions.len(), 4);
        assert_eq!(regions[3].origin, (128, 128));
        assert_eq!(regions[3].detector_origin, (32, 32));
        assert!(split_fov(&fov, (100, 128)).is_err());

        let small = RegionSpec::whole((16, 16), (4, 4)).unwrap();
        let full = make_ideal_otf((16, 16), (4, 4)).unwrap();
        for r in split_fov(&small, (8, 8)).unwrap() {
            let (sub, leak) = extract_region(&full, &r).unwrap();
            assert_eq!(sub, make_ideal_otf((8, 8), (4, 4)).unwrap());
            assert!(leak.iter().all(|&l| l == 0.0));
        }
        let outside = RegionSpec {
            origin: (12, 12),
            ..split_fov(&small, (8, 8)).unwrap()[0]
        };
        assert!(extract_region(&full, &outside).is_err());
    }

    #[test]
    fn shifted_extract_reports_dropped_mass() {
        let small = RegionSpec::whole((16, 16), (4, 4)).unwrap();
        let base = make_ideal_otf((16, 16), (4, 4)).unwrap();
        let (full, _) = perturb_otf(
            &base,
            &OtfPerturbation {
                shift: (1.0, 0.0),
                blur_sigma: 0.5,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let dense = full.to_dense();
        for r in split_fov(&small, (8, 8)).unwrap() {
            let (_, leak) = extract_region(&full, &r).unwrap();
            let mut i = 0;
            for dr in 0..2 {
                for dc in 0..2 {
                    let gi = (r.detector_origin.0 + dr) * 4 + r.detector_origin.1 + dc;
                    let row = &dense[gi * 256..(gi + 1) * 256];
                    let mut dropped = 0.0;
                    for (c, &v) in row.iter().enumerate() {
                        let (y, x) = (c / 16, c % 16);
                        let inside = (r.origin.0..r.origin.0 + 8).contains(&y)
                            && (r.origin.1..r.origin.1 + 8).contains(&x);
                        if !inside {
                            dropped += v;
                        }
                    }
                    let total: f64 = row.iter().sum();
                    assert!((leak[i] - dropped / total).abs() < 1e-12);
                    i += 1;
                }
            }
            assert!(leak.iter().any(|&l| l > 0.0));
        }
    }

    #[test]
    fn pcio_round_trip_and_malformed() {
        let base = make_ideal_otf((8, 8), (2, 2)).unwrap();
        let (otf, _) = perturb_otf(
            &base,
            &OtfPerturbation {
                shift: (0.3, 0.1),
                blur_sigma: 0.7,
                gain_jitter: 0.05,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let bytes = otf.to_bytes();
        let back = SparseOtf::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, otf);
        assert!(SparseOtf::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(SparseOtf::from_bytes(&bad).is_err());
    }

    #[test]
    fn constructor_validates() {
        assert!(SparseOtf::new((1, 1), (1, 2), vec![0, 2], vec![1, 0], vec![1.0, 1.0]).is_err());
        assert!(SparseOtf::new((1, 1), (1, 2), vec![0, 1], vec![0], vec![-1.0]).is_err());
        assert!(SparseOtf::new((1, 1), (1, 2), vec![0, 1], vec![2], vec![1.0]).is_err());
    }
}
