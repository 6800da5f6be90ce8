//! Image quality metrics: PSNR, SSIM and stripe-group resolvability.
//!
//! Inputs are images in `[0, 1]`, scaled to `n`-bit integers' range
//! `L = 2ⁿ − 1` before evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BITS: u32 = 16;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
pub const RESOLVED_CONTRAST: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsnrConvention {
    /// `10·log10(L² / Σ(Y − X)²)`
    AsPrinted,
    /// `10·log10(L² / mean((Y − X)²))`
    #[default]
    MseNormalized,
}

impl PsnrConvention {
    pub fn name(self) -> &'static str {
        match self {
            PsnrConvention::AsPrinted => "as_printed",
            PsnrConvention::MseNormalized => "mse_normalized",
        }
    }
}

fn dims(img: &Tensor) -> Result<(usize, usize)> {
    match *img.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        ref s => Err(Error::shape("metric", format!("expected [H, W], got {s:?}"))),
    }
}

fn same_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (da, db) = (dims(a)?, dims(b)?);
    if da != db {
        return Err(Error::shape("metric", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(da)
}

fn peak(bits: u32) -> Result<f64> {
    if bits == 0 || bits > 32 {
        return Err(Error::invalid(format!("bit depth {bits} out of range")));
    }
    Ok(((1u64 << bits) - 1) as f64)
}

pub fn psnr(estimate: &Tensor, reference: &Tensor, bits: u32, convention: PsnrConvention) -> Result<f64> {
    same_dims(estimate, reference)?;
    let l = peak(bits)?;
    let sse: f64 = estimate
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (l * a - l * b).powi(2))
        .sum();
    let err = match convention {
        PsnrConvention::AsPrinted => sse,
        PsnrConvention::MseNormalized => sse / estimate.numel() as f64,
    };
    if err == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (l * l / err).log10()).min(PSNR_CAP))
}

/// Half-sample symmetric reflection of `i` into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}

/// Mean SSIM over 8×8 uniform windows at every pixel, edges reflected.
pub fn ssim(estimate: &Tensor, reference: &Tensor, bits: u32) -> Result<f64> {
    let (h, w) = same_dims(estimate, reference)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let l = peak(bits)?;
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let x: Vec<f64> = estimate.data().iter().map(|v| v * l).collect();
    let y: Vec<f64> = reference.data().iter().map(|v| v * l).collect();
    let lo = -(SSIM_WINDOW as isize / 2 - 1);
    let hi = SSIM_WINDOW as isize / 2;
    let count = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    for i in 0..h as isize {
        for j in 0..w as isize {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in lo..=hi {
                let r = reflect(i + di, h) * w;
                for dj in lo..=hi {
                    let k = r + reflect(j + dj, w);
                    let (a, b) = (x[k], y[k]);
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / count, sy / count);
            let vx = sxx / count - mx * mx;
            let vy = syy / count - my * my;
            let cov = sxy / count - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (h * w) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StripeOrientation {
    /// Bars run vertically; intensity varies along x.
    Vertical,
    /// Bars run horizontally; intensity varies along y.
    Horizontal,
}

/// One group of a resolution chart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StripeGroup {
    pub period: usize,
    pub orientation: StripeOrientation,
    pub origin: (usize, usize),
    pub size: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupResolvability {
    pub group: StripeGroup,
    pub contrast: f64,
    pub resolved: bool,
}

/// Michelson contrast `(max − min)/(max + min)` of the group's mean profile
/// across the bars; resolved above 0.2.
pub fn stripe_resolvability(img: &Tensor, groups: &[StripeGroup]) -> Result<Vec<GroupResolvability>> {
    let (h, w) = dims(img)?;
    groups
        .iter()
        .map(|g| {
            let (y0, x0) = g.origin;
            let (gh, gw) = g.size;
            if gh == 0 || gw == 0 || y0 + gh > h || x0 + gw > w {
                return Err(Error::invalid(format!("stripe group {g:?} outside {h}x{w} image")));
            }
            let at = |y: usize, x: usize| img.data()[y * w + x];
            let profile: Vec<f64> = match g.orientation {
                StripeOrientation::Vertical => (x0..x0 + gw)
                    .map(|x| (y0..y0 + gh).map(|y| at(y, x)).sum::<f64>() / gh as f64)
                    .collect(),
                StripeOrientation::Horizontal => (y0..y0 + gh)
                    .map(|y| (x0..x0 + gw).map(|x| at(y, x)).sum::<f64>() / gw as f64)
                    .collect(),
            };
            let max = profile.iter().cloned().fold(f64::MIN, f64::max);
            let min = profile.iter().cloned().fold(f64::MAX, f64::min);
            let contrast = if max + min > 0.0 { (max - min) / (max + min) } else { 0.0 };
            Ok(GroupResolvability {
                group: *g,
                contrast,
                resolved: contrast > RESOLVED_CONTRAST,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image_id: String,
    pub method: String,
    pub sigma: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub convention: PsnrConvention,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("image_id,method,sigma,psnr,ssim,convention\n");
    for r in rows {
        out += &format!(
            "{},{},{},{:.6},{:.6},{}\n",
            r.image_id,
            r.method,
            r.sigma,
            r.psnr,
            r.ssim,
            r.convention.name()
        );
    }
    out
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, seed: u64) -> Tensor {
        let mut s = seed | 1;
        Tensor::from_fn(&[h, w], |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::zeros(&[2, 2]);
        let mut d = vec![0.0; 4];
        d[0] = 1.0;
        let b = Tensor::new(vec![2, 2], d).unwrap();
        // one pixel off by full scale: as-printed 0 dB, normalised 10·log10(4)
        assert!(psnr(&b, &a, 8, PsnrConvention::AsPrinted).unwrap().abs() < 1e-12);
        let n = psnr(&b, &a, 8, PsnrConvention::MseNormalized).unwrap();
        assert!((n - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert_eq!(psnr(&a, &a, 16, PsnrConvention::MseNormalized).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &Tensor::zeros(&[2, 3]), 16, PsnrConvention::AsPrinted).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = img(12, 10, 3);
        assert_eq!(ssim(&a, &a, 16).unwrap(), 1.0);
        assert!(ssim(&img(7, 10, 1), &img(7, 10, 2), 16).is_err());
        let inverted = a.map("inv", |v| 1.0 - v).unwrap();
        assert!(ssim(&a, &inverted, 16).unwrap() < 0.0);
    }

    #[test]
    fn reflection_indices() {
        assert_eq!(reflect(-1, 5), 0);
        assert_eq!(reflect(-3, 5), 2);
        assert_eq!(reflect(5, 5), 4);
        assert_eq!(reflect(6, 5), 3);
    }

    #[test]
    fn stripe_contrast() {
        let w = 8;
        let bars = Tensor::from_fn(&[4, w], |i| if (i % w) % 2 == 0 { 1.0 } else { 0.0 });
        let g = StripeGroup {
            period: 2,
            orientation: StripeOrientation::Vertical,
            origin: (0, 0),
            size: (4, w),
        };
        let r = stripe_resolvability(&bars, &[g]).unwrap();
        assert_eq!(r[0].contrast, 1.0);
        assert!(r[0].resolved);
        let flat = Tensor::full(&[4, w], 0.5);
        let r = stripe_resolvability(&flat, &[g]).unwrap();
        assert_eq!(r[0].contrast, 0.0);
        assert!(!r[0].resolved);
        let h = StripeGroup { orientation: StripeOrientation::Horizontal, ..g };
        assert_eq!(stripe_resolvability(&bars, &[h]).unwrap()[0].contrast, 0.0);
    }

    #[test]
    fn csv_layout() {
        let rows = [MetricRow {
            image_id: "img3".into(),
            method: "gi".into(),
            sigma: 0.3,
            psnr: 20.5,
            ssim: 0.25,
            convention: PsnrConvention::MseNormalized,
        }];
        assert_eq!(
            metrics_csv(&rows),
            "image_id,method,sigma,psnr,ssim,convention\nimg3,gi,0.3,20.500000,0.250000,mse_normalized\n"
        );
    }

    proptest! {
        #[test]
        fn psnr_conventions_differ_by_pixel_count(h in 1usize..10, w in 1usize..10, s1 in any::<u64>(), s2 in any::<u64>()) {
            let (a, b) = (img(h, w, s1), img(h, w, s2));
            let p = psnr(&a, &b, 16, PsnrConvention::AsPrinted).unwrap();
            let n = psnr(&a, &b, 16, PsnrConvention::MseNormalized).unwrap();
            prop_assume!(n < PSNR_CAP);
            prop_assert!((n - p - 10.0 * ((h * w) as f64).log10()).abs() < 1e-9);
            prop_assert_eq!(p, psnr(&b, &a, 16, PsnrConvention::AsPrinted).unwrap());
        }

        #[test]
        fn ssim_bounded_and_symmetric(h in 8usize..14, w in 8usize..14, s1 in any::<u64>(), s2 in any::<u64>()) {
            let (a, b) = (img(h, w, s1), img(h, w, s2));
            let s = ssim(&a, &b, 16).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((s - ssim(&b, &a, 16).unwrap()).abs() < 1e-12);
        }
    }
}
