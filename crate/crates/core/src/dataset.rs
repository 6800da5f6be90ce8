//! Procedural grayscale training images and the stripe resolution chart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{StripeGroup, StripeOrientation};
use crate::tensor::Tensor;

pub const CHART_PERIODS: [usize; 5] = [2, 3, 4, 6, 8];
/// Chart cell size; the chart is laid out for 4×4 under-sampling.
const CELL: usize = 4;

/// `(period, orientation, cell row, cell column, length in cells)` for a
/// 32×32 chart.
const CHART_LAYOUT: [(usize, StripeOrientation, usize, usize, usize); 10] = [
    (8, StripeOrientation::Vertical, 0, 0, 4),
    (6, StripeOrientation::Vertical, 0, 4, 3),
    (4, StripeOrientation::Vertical, 1, 0, 2),
    (3, StripeOrientation::Vertical, 1, 2, 3),
    (2, StripeOrientation::Vertical, 1, 5, 2),
    (8, StripeOrientation::Horizontal, 2, 0, 4),
    (6, StripeOrientation::Horizontal, 2, 1, 3),
    (3, StripeOrientation::Horizontal, 2, 2, 3),
    (4, StripeOrientation::Horizontal, 2, 3, 2),
    (2, StripeOrientation::Horizontal, 2, 4, 2),
];

/// Stripe groups of the resolution chart for an `s × s` image, `s` a
/// multiple of 32.
///
/// Each group is three pixels thick across its bars and cell-aligned along
/// them, so that every 4×4 cell it touches also holds one background line.
/// Lengths scale with `s / 32`.
pub fn chart_groups(s: usize) -> Result<Vec<StripeGroup>> {
    if s < 32 || s % 32 != 0 {
        return Err(Error::invalid(format!("resolution chart needs a multiple of 32, got {s}")));
    }
    let k = s / 32;
    Ok(CHART_LAYOUT
        .iter()
        .map(|&(period, orientation, cy, cx, len)| {
            let (y, x) = (cy * CELL * k, cx * CELL * k);
            let (origin, size) = match orientation {
                StripeOrientation::Vertical => ((y + 1, x), (CELL - 1, len * CELL * k)),
                StripeOrientation::Horizontal => ((y, x + 1), (len * CELL * k, CELL - 1)),
            };
            StripeGroup {
                period,
                orientation,
                origin,
                size,
            }
        })
        .collect())
}

/// Dark bars (`floor(p/2)` wide) on a white background.
pub fn resolution_chart(s: usize) -> Result<Tensor> {
    let groups = chart_groups(s)?;
    let mut img = vec![1.0; s * s];
    for g in &groups {
        for y in g.origin.0..g.origin.0 + g.size.0 {
            for x in g.origin.1..g.origin.1 + g.size.1 {
                let t = match g.orientation {
                    StripeOrientation::Vertical => x - g.origin.1,
                    StripeOrientation::Horizontal => y - g.origin.0,
                };
                if t % g.period < g.period / 2 {
                    img[y * s + x] = 0.0;
                }
            }
        }
    }
    Tensor::new(vec![s, s], img)
}

fn paint_rect(img: &mut [f64], w: usize, r: (usize, usize, usize, usize), v: f64) {
    let (y0, x0, y1, x1) = r;
    for y in y0..y1 {
        img[y * w + x0..y * w + x1].iter_mut().for_each(|p| *p = v);
    }
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![rng.gen_range(0.0..0.4); h * w];
    let shapes = rng.gen_range(2..=6);
    for _ in 0..shapes {
        let v: f64 = rng.gen_range(0.0..1.0);
        let ry = rng.gen_range(2..=h / 2);
        let rx = rng.gen_range(2..=w / 2);
        let y0 = rng.gen_range(0..h - ry);
        let x0 = rng.gen_range(0..w - rx);
        match rng.gen_range(0..4) {
            0 => paint_rect(&mut img, w, (y0, x0, y0 + ry, x0 + rx), v),
            1 => {
                let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
                let rad = rng.gen_range(2.0..(h.min(w) as f64 / 3.0));
                for y in 0..h {
                    for x in 0..w {
                        let d = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                        if d < rad * rad {
                            img[y * w + x] = v;
                        }
                    }
                }
            }
            2 => {
                let period = rng.gen_range(2..=8);
                let vertical = rng.gen_bool(0.5);
                let lo: f64 = rng.gen_range(0.0..0.5);
                for y in y0..y0 + ry {
                    for x in x0..x0 + rx {
                        let t = if vertical { x - x0 } else { y - y0 };
                        img[y * w + x] = if t % period < period / 2 { lo } else { v.max(lo + 0.3).min(1.0) };
                    }
                }
            }
            _ => {
                // glyph: a random 3×5 bitmap at integer scale
                let scale = rng.gen_range(1..=3);
                let (gh, gw) = (5 * scale, 3 * scale);
                if gh >= h || gw >= w {
                    continue;
                }
                let (gy, gx) = (rng.gen_range(0..h - gh), rng.gen_range(0..w - gw));
                let bits: u16 = rng.gen();
                for by in 0..5 {
                    for bx in 0..3 {
                        if bits >> (by * 3 + bx) & 1 == 1 {
                            let (y, x) = (gy + by * scale, gx + bx * scale);
                            paint_rect(&mut img, w, (y, x, y + scale, x + scale), v);
                        }
                    }
                }
            }
        }
    }
    img
}

/// `n` procedural images of `size`; the last one is the resolution chart.
pub fn make_synthetic_dataset(n: usize, size: (usize, usize), seed: u64) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::invalid("dataset needs at least one image"));
    }
    let (h, w) = size;
    if h < 8 || w < 8 {
        return Err(Error::invalid(format!("images must be at least 8x8, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n - 1 {
        out.push(Tensor::new(vec![h, w], random_image(h, w, &mut rng))?);
    }
    out.push(if h == w && h % 32 == 0 {
        resolution_chart(h)?
    } else {
        Tensor::new(vec![h, w], random_image(h, w, &mut rng))?
    });
    Ok(out)
}

/// Contiguous train / validation / test index ranges in proportions
/// 80 / 15 / 5 (rounded down, remainder to training).
pub fn split_indices(n: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
    let test = n * 5 / 100;
    let val = n * 15 / 100;
    let train = n - test - val;
    (0..train, train..train + val, train + val..n)
}

/// Each detector pixel's mean over its `fy × fx` block, repeated back over
/// the block.
pub fn box_down_nearest_up(img: &Tensor, factor: (usize, usize)) -> Result<Tensor> {
    let (h, w) = match *img.shape() {
        [h, w] => (h, w),
        ref s => return Err(Error::shape("box_down_nearest_up", format!("{s:?}"))),
    };
    let (fy, fx) = factor;
    if fy == 0 || fx == 0 || h % fy != 0 || w % fx != 0 {
        return Err(Error::invalid("image extents not divisible by factor"));
    }
    let mut out = vec![0.0; h * w];
    for by in 0..h / fy {
        for bx in 0..w / fx {
            let mut s = 0.0;
            for y in by * fy..(by + 1) * fy {
                for x in bx * fx..(bx + 1) * fx {
                    s += img.data()[y * w + x];
                }
            }
            let m = s / (fy * fx) as f64;
            for y in by * fy..(by + 1) * fy {
                out[y * w + bx * fx..y * w + (bx + 1) * fx].iter_mut().for_each(|p| *p = m);
            }
        }
    }
    Tensor::new(vec![h, w], out)
}
