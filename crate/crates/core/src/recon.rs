//! Classical reconstructions: ghost imaging (GI) and total-variation (TV)
//! regularised inversion.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{LinearOperator, Var};
use crate::error::{Error, Result};
use crate::forward::{MeasurementSet, PciOperator};
use crate::otf::SparseOtf;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GiVariant {
    /// `(1/(p·q)) Σ_m M_m ⊙ Cᵀ y_m`
    #[default]
    Uncentered,
    /// Same with `y_m` replaced by `y_m − mean_m(y)`.
    Centered,
}

/// Ghost-imaging estimate `[P, Q]` from `[N, p, q]` frames.
pub fn gi_reconstruct(
    otf: &SparseOtf,
    masks: &Tensor,
    frames: &Tensor,
    variant: GiVariant,
) -> Result<Tensor> {
    let (pp, qq) = otf.dmd_shape();
    let (p, q) = otf.detector_shape();
    let (ms, fs) = (masks.shape(), frames.shape());
    if ms.len() != 3 || ms[1..] != [pp, qq] || fs.len() != 3 || fs[1..] != [p, q] || ms[0] != fs[0] {
        return Err(Error::shape("gi_reconstruct", format!("masks {ms:?}, frames {fs:?}")));
    }
    let n = ms[0];
    let rows = p * q;
    let mut y = frames.data().to_vec();
    if variant == GiVariant::Centered {
        if n < 2 {
            return Err(Error::invalid("centred GI needs at least two masks"));
        }
        for i in 0..rows {
            let mean = (0..n).map(|m| y[m * rows + i]).sum::<f64>() / n as f64;
            (0..n).for_each(|m| y[m * rows + i] -= mean);
        }
    }
    let op = PciOperator::new(Rc::new(otf.clone()), masks.clone())?;
    let mut x = vec![0.0; pp * qq];
    op.apply_adjoint_into(&y, &mut x);
    let inv = 1.0 / rows as f64;
    x.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(vec![pp, qq], x)
}

pub fn gi_from_set(otf: &SparseOtf, masks: &Tensor, set: &MeasurementSet, variant: GiVariant) -> Result<Tensor> {
    gi_reconstruct(otf, masks, &set.frames, variant)
}

/// Uncentred GI on a tape: `masks` `[N, P, Q]`, `y` `[B, N, p·q]` to `[B, P, Q]`.
pub fn gi_var<'t>(otf: &Rc<SparseOtf>, masks: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    let (ms, ys) = (masks.shape(), y.shape());
    if ms.len() != 3 || ys.len() != 3 || ys[1] != ms[0] {
        return Err(Error::shape("gi_var", format!("masks {ms:?}, y {ys:?}")));
    }
    let (b, n, pp, qq) = (ys[0], ms[0], ms[1], ms[2]);
    let op: Rc<dyn LinearOperator> = otf.clone();
    let back = y.linear(op, true)?.reshape(&[b, n, pp, qq])?;
    let m = masks.reshape(&[1, n, pp, qq])?.expand(&[b, n, pp, qq])?;
    back.mul(m)?.sum_axis(1)?.mul_scalar(1.0 / otf.n_rows() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TvConfig {
    pub lambda: f64,
    pub max_iters: usize,
    /// Initial step; `None` uses `1 / ‖A‖²`.
    pub step_size: Option<f64>,
    /// Stops once the relative objective decrease falls below this.
    pub tol: f64,
    /// Dual iterations of the inner TV proximal solver.
    pub inner_iters: usize,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            max_iters: 300,
            step_size: None,
            tol: 1e-7,
            inner_iters: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvRecord {
    pub iteration: usize,
    pub objective: f64,
    pub step_size: f64,
}

#[derive(Clone, Debug)]
pub struct TvResult {
    pub image: Tensor,
    pub history: Vec<TvRecord>,
    pub converged: bool,
}

impl TvResult {
    pub fn write_history_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("iteration,objective,step_size\n");
        for r in &self.history {
            out += &format!("{},{:e},{:e}\n", r.iteration, r.objective, r.step_size);
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Isotropic total variation with forward differences and a reflective
/// (zero-gradient) boundary.
pub fn tv_iso(x: &[f64], h: usize, w: usize) -> f64 {
    let mut tv = 0.0;
    for i in 0..h {
        for j in 0..w {
            let v = x[i * w + j];
            let dy = if i + 1 < h { x[(i + 1) * w + j] - v } else { 0.0 };
            let dx = if j + 1 < w { x[i * w + j + 1] - v } else { 0.0 };
            tv += (dx * dx + dy * dy).sqrt();
        }
    }
    tv
}

/// `argmin_x ½‖x − b‖² + alpha·TV(x)` subject to `x ∈ [0, 1]`, by fast
/// gradient projection on the dual.
pub fn tv_prox(b: &[f64], h: usize, w: usize, alpha: f64, iters: usize) -> Vec<f64> {
    let clip = |v: f64| v.clamp(0.0, 1.0);
    if alpha <= 0.0 {
        return b.iter().map(|&v| clip(v)).collect();
    }
    let n = h * w;
    // dual fields on vertical (p) and horizontal (q) differences; the last
    // row of p and last column of q stay zero
    let (mut p, mut q) = (vec![0.0; n], vec![0.0; n]);
    let (mut r, mut s) = (p.clone(), q.clone());
    let mut t: f64 = 1.0;
    let mut x = vec![0.0; n];

    // L(p, q)_{ij} = p_ij + q_ij − p_{i−1,j} − q_{i,j−1}
    let lin = |p: &[f64], q: &[f64], out: &mut [f64]| {
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                let mut v = p[k] + q[k];
                if i > 0 {
                    v -= p[k - w];
                }
                if j > 0 {
                    v -= q[k - 1];
                }
                out[k] = v;
            }
        }
    };

    for _ in 0..iters {
        lin(&r, &s, &mut x);
        x.iter_mut().zip(b).for_each(|(xv, &bv)| *xv = clip(bv - alpha * *xv));
        let (p_old, q_old) = (p.clone(), q.clone());
        let step = 1.0 / (8.0 * alpha);
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                let gp = if i + 1 < h { r[k] + step * (x[k] - x[k + w]) } else { 0.0 };
                let gq = if j + 1 < w { s[k] + step * (x[k] - x[k + 1]) } else { 0.0 };
                let norm = (gp * gp + gq * gq).sqrt().max(1.0);
                p[k] = gp / norm;
                q[k] = gq / norm;
            }
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let mom = (t - 1.0) / t_next;
        for k in 0..n {
            r[k] = p[k] + mom * (p[k] - p_old[k]);
            s[k] = q[k] + mom * (q[k] - q_old[k]);
        }
        t = t_next;
    }
    lin(&p, &q, &mut x);
    x.iter_mut().zip(b).for_each(|(xv, &bv)| *xv = clip(bv - alpha * *xv));
    x
}

fn objective(op: &PciOperator, x: &[f64], y: &[f64], lambda: f64, h: usize, w: usize, resid: &mut [f64]) -> f64 {
    op.apply_into(x, resid);
    resid.iter_mut().zip(y).for_each(|(r, &yv)| *r -= yv);
    0.5 * resid.iter().map(|r| r * r).sum::<f64>() + lambda * tv_iso(x, h, w)
}

/// Monotone proximal-gradient TV reconstruction with backtracking.
///
/// Only steps that lower the objective are accepted, so the recorded
/// history is non-increasing; the best iterate is returned.
pub fn tv_reconstruct(
    otf: &SparseOtf,
    masks: &Tensor,
    frames: &Tensor,
    cfg: &TvConfig,
) -> Result<TvResult> {
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) || !(cfg.tol >= 0.0) {
        return Err(Error::invalid("TV lambda and tol must be nonnegative"));
    }
    let op = PciOperator::new(Rc::new(otf.clone()), masks.clone())?;
    if frames.numel() != op.output_len() {
        return Err(Error::shape("tv_reconstruct", format!("frames {:?}", frames.shape())));
    }
    let (h, w) = otf.dmd_shape();
    let y = frames.data();
    let mut step = match cfg.step_size {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(Error::invalid(format!("step size must be positive, got {s}"))),
        None => {
            let l = op.lipschitz(50);
            if l == 0.0 { 1.0 } else { 1.0 / l }
        }
    };
    let mut x = vec![0.5; h * w];
    let mut resid = vec![0.0; op.output_len()];
    let mut grad = vec![0.0; h * w];
    let mut f = objective(&op, &x, y, cfg.lambda, h, w, &mut resid);
    let mut history = vec![TvRecord { iteration: 0, objective: f, step_size: step }];
    let mut converged = false;
    let min_step = step * 1e-12;

    for it in 1..=cfg.max_iters {
        objective(&op, &x, y, 0.0, h, w, &mut resid);
        op.apply_adjoint_into(&resid, &mut grad);
        let accepted = loop {
            let z: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
            let cand = tv_prox(&z, h, w, step * cfg.lambda, cfg.inner_iters);
            let fc = objective(&op, &cand, y, cfg.lambda, h, w, &mut resid);
            if fc < f {
                break Some((cand, fc));
            }
            step *= 0.5;
            if step < min_step {
                break None;
            }
        };
        let Some((cand, fc)) = accepted else {
            converged = true;
            break;
        };
        let rel = (f - fc) / f.abs().max(f64::MIN_POSITIVE);
        x = cand;
        f = fc;
        history.push(TvRecord { iteration: it, objective: f, step_size: step });
        if rel < cfg.tol {
            converged = true;
            break;
        }
        // let the step grow again after a successful iteration
        step *= 1.5;
    }
    Ok(TvResult {
        image: Tensor::new(vec![h, w], x)?,
        history,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::forward::{pci_measure, NoiseConfig};
    use crate::masks::MaskSet;
    use crate::metrics::{psnr, PsnrConvention};
    use crate::otf::{make_ideal_otf, perturb_otf, OtfPerturbation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    fn phantom(n: usize) -> Tensor {
        Tensor::from_fn(&[n, n], |i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            let c = n as f64 / 2.0;
            if (y - c).powi(2) + (x - c).powi(2) < (n as f64 / 4.0).powi(2) {
                0.9
            } else if y < n as f64 / 4.0 && x > n as f64 / 2.0 {
                0.6
            } else {
                0.1
            }
        })
    }

    #[test]
    fn identity_gi_example() {
        let otf = make_ideal_otf((6, 6), (1, 1)).unwrap();
        let masks = Tensor::full(&[1, 6, 6], 1.0);
        let x = random(&[6, 6], 1);
        let frames = x.reshape(&[1, 6, 6]).unwrap();
        let gi = gi_reconstruct(&otf, &masks, &frames, GiVariant::Uncentered).unwrap();
        for (a, b) in gi.data().iter().zip(x.data()) {
            assert!((a - b / 36.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gi_is_linear_in_y() {
        let otf = make_ideal_otf((8, 8), (2, 2)).unwrap();
        let masks = MaskSet::init(3, (4, 4), 4).unwrap().expand((8, 8)).unwrap();
        let (y1, y2) = (random(&[3, 4, 4], 1), random(&[3, 4, 4], 2));
        let comb = Tensor::from_fn(&[3, 4, 4], |i| 2.0 * y1.data()[i] - 0.5 * y2.data()[i]);
        for v in [GiVariant::Uncentered, GiVariant::Centered] {
            let g1 = gi_reconstruct(&otf, &masks, &y1, v).unwrap();
            let g2 = gi_reconstruct(&otf, &masks, &y2, v).unwrap();
            let gc = gi_reconstruct(&otf, &masks, &comb, v).unwrap();
            for i in 0..64 {
                let want = 2.0 * g1.data()[i] - 0.5 * g2.data()[i];
                assert!((gc.data()[i] - want).abs() < 1e-12);
            }
        }
        let one = Tensor::full(&[1, 8, 8], 1.0);
        assert!(gi_reconstruct(&otf, &one, &Tensor::zeros(&[1, 4, 4]), GiVariant::Centered).is_err());
    }

    #[test]
    fn tape_gi_matches_direct() {
        let otf = make_ideal_otf((8, 8), (2, 2)).unwrap();
        let masks = MaskSet::init(3, (4, 4), 4).unwrap().expand((8, 8)).unwrap();
        let y = random(&[2, 3, 16], 5);
        let tape = Tape::new();
        let g = gi_var(&Rc::new(otf.clone()), tape.constant(masks.clone()), tape.constant(y.clone())).unwrap();
        for b in 0..2 {
            let frames = y.index_first(b).unwrap().reshape(&[3, 4, 4]).unwrap();
            let direct = gi_reconstruct(&otf, &masks, &frames, GiVariant::Uncentered).unwrap();
            for (a, d) in g.value().data()[b * 64..(b + 1) * 64].iter().zip(direct.data()) {
                assert!((a - d).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn system_adjoint_identity() {
        let base = make_ideal_otf((12, 12), (4, 4)).unwrap();
        let (otf, _) = perturb_otf(&base, &OtfPerturbation { shift: (0.6, -0.3), blur_sigma: 0.5, ..Default::default() }, 0).unwrap();
        let masks = MaskSet::init(3, (4, 4), 2).unwrap().expand((12, 12)).unwrap();
        let op = PciOperator::new(Rc::new(otf), masks).unwrap();
        let x = random(&[144], 3);
        let u = random(&[op.output_len()], 4);
        let mut ax = vec![0.0; op.output_len()];
        op.apply_into(x.data(), &mut ax);
        let mut atu = vec![0.0; 144];
        op.apply_adjoint_into(u.data(), &mut atu);
        let lhs: f64 = ax.iter().zip(u.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = atu.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs());
    }

    #[test]
    fn tv_of_constant_and_step() {
        assert_eq!(tv_iso(&[0.3; 9], 3, 3), 0.0);
        // single vertical edge between columns 0 and 1 of a 2x2 image
        assert!((tv_iso(&[0.0, 1.0, 0.0, 1.0], 2, 2) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn prox_reduces_prox_objective() {
        let b = random(&[100], 7);
        let alpha = 0.1;
        let x = tv_prox(b.data(), 10, 10, alpha, 100);
        let obj = |x: &[f64]| {
            0.5 * x.iter().zip(b.data()).map(|(a, c)| (a - c).powi(2)).sum::<f64>() + alpha * tv_iso(x, 10, 10)
        };
        assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
        let fx = obj(&x);
        assert!(fx < obj(b.data()));
        // small random perturbations inside the box do not improve it
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let y: Vec<f64> = x.iter().map(|v| (v + rng.gen_range(-1e-3..1e-3)).clamp(0.0, 1.0)).collect();
            assert!(obj(&y) >= fx - 1e-4);
        }
    }

    #[test]
    fn lambda_zero_identity_recovers() {
        let otf = make_ideal_otf((8, 8), (1, 1)).unwrap();
        let masks = Tensor::full(&[1, 8, 8], 1.0);
        let x = random(&[8, 8], 3);
        let frames = x.reshape(&[1, 8, 8]).unwrap();
        let cfg = TvConfig { lambda: 0.0, ..Default::default() };
        let r = tv_reconstruct(&otf, &masks, &frames, &cfg).unwrap();
        for (a, b) in r.image.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn history_is_monotone_and_tv_beats_gi() {
        let n = 32;
        let otf = make_ideal_otf((n, n), (4, 4)).unwrap();
        let masks = MaskSet::init(3, (4, 4), 11).unwrap().expand((n, n)).unwrap();
        let x = phantom(n);
        let ms = pci_measure(&otf, &masks, &x, &NoiseConfig::noiseless()).unwrap();
        let gi = gi_reconstruct(&otf, &masks, &ms.frames, GiVariant::Uncentered).unwrap();
        let gi_psnr = psnr(&gi, &x, 16, PsnrConvention::MseNormalized).unwrap();
        let mut best: f64 = 0.0;
        for lambda in [0.01, 0.1, 1.0] {
            let r = tv_reconstruct(&otf, &masks, &ms.frames, &TvConfig { lambda, ..Default::default() }).unwrap();
            assert!(r.history.windows(2).all(|w| w[1].objective <= w[0].objective));
            best = best.max(psnr(&r.image, &x, 16, PsnrConvention::MseNormalized).unwrap());
        }
        assert!(best > gi_psnr, "TV {best} dB vs GI {gi_psnr} dB");
    }

    #[test]
    fn history_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let r = TvResult {
            image: Tensor::zeros(&[1, 1]),
            history: vec![TvRecord { iteration: 0, objective: 2.5, step_size: 0.5 }],
            converged: false,
        };
        let p = dir.path().join("h.csv");
        r.write_history_csv(&p).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "iteration,objective,step_size\n0,2.5e0,5e-1\n");
    }
}
