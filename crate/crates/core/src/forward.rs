//! The photon-counting imaging forward model: masked DMD modulation, OTF
//! integration onto the detector and scaled Gaussian noise.

use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{LinearOperator, Var};
use crate::error::{Error, Result};
use crate::otf::{RegionSpec, SparseOtf};
use crate::tensor::Tensor;

/// How `sigma` turns into the noise standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseConvention {
    /// `sigma² · mean(y)`
    #[default]
    Squared,
    /// `sigma · mean(y)`
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
    #[serde(default)]
    pub convention: NoiseConvention,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            sigma: 0.0,
            convention: NoiseConvention::Squared,
            seed: 0,
        }
    }

    pub fn new(sigma: f64, seed: u64) -> Self {
        Self {
            sigma,
            convention: NoiseConvention::Squared,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("noise sigma must be finite and >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

pub fn noise_scale(sigma: f64, mean_y: f64, convention: NoiseConvention) -> f64 {
    match convention {
        NoiseConvention::Squared => sigma * sigma * mean_y,
        NoiseConvention::Linear => sigma * mean_y,
    }
}

/// Mixes several integers into one seed (splitmix64 finaliser chain).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Noise for one measurement set `[N, p·q]` of clean values.
///
/// Mask `m` draws from its own stream of a generator seeded with `seed`, so
/// the noise on one mask does not depend on how many masks precede it.
pub fn noise_for(clean: &[f64], n_masks: usize, cfg: &NoiseConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let per = clean.len() / n_masks;
    let mean = clean.iter().sum::<f64>() / clean.len() as f64;
    let scale = noise_scale(cfg.sigma, mean, cfg.convention);
    let mut out = Vec::with_capacity(clean.len());
    for m in 0..n_masks {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(m as u64);
        out.extend((0..per).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        }));
    }
    Ok(out)
}

/// Detector frames of one scene under every mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    /// `[N, p, q]`
    pub frames: Tensor,
    pub noise: NoiseConfig,
    pub region: Option<RegionSpec>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    sigma: f64,
    convention: NoiseConvention,
    seed: u64,
    region: Option<RegionSpec>,
}

impl MeasurementSet {
    pub fn n_masks(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn detector_shape(&self) -> (usize, usize) {
        (self.frames.shape()[1], self.frames.shape()[2])
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the frames as `PCIT` and the noise parameters and region to
    /// `<path>.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.frames.save(path)?;
        let side = Sidecar {
            sigma: self.noise.sigma,
            convention: self.noise.convention,
            seed: self.noise.seed,
            region: self.region,
        };
        let sp = Self::sidecar_path(path);
        std::fs::write(&sp, serde_json::to_string_pretty(&side)? + "\n").map_err(|e| Error::io(sp, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let frames = Tensor::load(path)?;
        if frames.ndim() != 3 {
            return Err(Error::shape("MeasurementSet", format!("frames must be [N, p, q], got {:?}", frames.shape())));
        }
        let sp = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: Sidecar = serde_json::from_str(&text)?;
        Ok(Self {
            frames,
            noise: NoiseConfig {
                sigma: side.sigma,
                convention: side.convention,
                seed: side.seed,
            },
            region: side.region,
        })
    }
}

fn check_masks(otf: &SparseOtf, masks: &Tensor) -> Result<usize> {
    let s = masks.shape();
    let (pp, qq) = otf.dmd_shape();
    if s.len() != 3 || s[1] != pp || s[2] != qq {
        return Err(Error::shape("masks", format!("{s:?} against DMD {pp}x{qq}")));
    }
    Ok(s[0])
}

/// Stacked system `x ↦ [C(M_1 ⊙ x); …; C(M_N ⊙ x)]`.
pub struct PciOperator {
    otf: Rc<SparseOtf>,
    masks: Tensor,
}

impl PciOperator {
    pub fn new(otf: Rc<SparseOtf>, masks: Tensor) -> Result<Self> {
        check_masks(&otf, &masks)?;
        Ok(Self { otf, masks })
    }

    pub fn n_masks(&self) -> usize {
        self.masks.shape()[0]
    }

    /// Largest eigenvalue of `AᵀA` by power iteration.
    pub fn lipschitz(&self, iters: usize) -> f64 {
        let n = self.input_len();
        let mut x = vec![1.0 / (n as f64).sqrt(); n];
        let mut y = vec![0.0; self.output_len()];
        let mut z = vec![0.0; n];
        let mut lambda = 0.0;
        for _ in 0..iters {
            self.apply_into(&x, &mut y);
            self.apply_adjoint_into(&y, &mut z);
            lambda = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if lambda == 0.0 {
                return 0.0;
            }
            x.iter_mut().zip(&z).for_each(|(a, &b)| *a = b / lambda);
        }
        lambda
    }
}

impl LinearOperator for PciOperator {
    fn input_len(&self) -> usize {
        self.otf.n_cols()
    }

    fn output_len(&self) -> usize {
        self.n_masks() * self.otf.n_rows()
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let (n, rows) = (self.otf.n_cols(), self.otf.n_rows());
        let mut mod_x = vec![0.0; n];
        for (m, ym) in y.chunks_exact_mut(rows).enumerate() {
            let mask = &self.masks.data()[m * n..(m + 1) * n];
            mod_x.iter_mut().zip(mask.iter().zip(x)).for_each(|(o, (a, b))| *o = a * b);
            self.otf.apply_into(&mod_x, ym);
        }
    }

    fn apply_adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        let (n, rows) = (self.otf.n_cols(), self.otf.n_rows());
        let mut back = vec![0.0; n];
        x.iter_mut().for_each(|v| *v = 0.0);
        for (m, ym) in y.chunks_exact(rows).enumerate() {
            let mask = &self.masks.data()[m * n..(m + 1) * n];
            self.otf.apply_adjoint_into(ym, &mut back);
            x.iter_mut().zip(mask.iter().zip(&back)).for_each(|(o, (a, b))| *o += a * b);
        }
    }
}

/// Clean and noisy detector frames of `image` (`[P, Q]`) under each mask.
pub fn pci_measure(
    otf: &SparseOtf,
    masks: &Tensor,
    image: &Tensor,
    noise: &NoiseConfig,
) -> Result<MeasurementSet> {
    let n = check_masks(otf, masks)?;
    let (pp, qq) = otf.dmd_shape();
    if image.shape() != [pp, qq] {
        return Err(Error::shape("pci_measure", format!("image {:?} against DMD {pp}x{qq}", image.shape())));
    }
    let (p, q) = otf.detector_shape();
    let op = PciOperator::new(Rc::new(otf.clone()), masks.clone())?;
    let mut y = vec![0.0; op.output_len()];
    op.apply_into(image.data(), &mut y);
    if noise.sigma > 0.0 {
        let eps = noise_for(&y, n, noise)?;
        y.iter_mut().zip(eps).for_each(|(a, e)| *a += e);
    } else {
        noise.validate()?;
    }
    Ok(MeasurementSet {
        frames: Tensor::new(vec![n, p, q], y)?,
        noise: *noise,
        region: None,
    })
}

/// Clean measurements on a tape.
///
/// `masks` is `[N, P, Q]`, `images` is `[B, P, Q]`; the result is
/// `[B, N, p·q]`.
pub fn measure_var<'t>(otf: &Rc<SparseOtf>, masks: Var<'t>, images: Var<'t>) -> Result<Var<'t>> {
    let (ms, is) = (masks.shape(), images.shape());
    if ms.len() != 3 || is.len() != 3 || ms[1..] != is[1..] {
        return Err(Error::shape("measure_var", format!("masks {ms:?}, images {is:?}")));
    }
    let (b, n, pp, qq) = (is[0], ms[0], ms[1], ms[2]);
    let full = [b, n, pp, qq];
    let x = images.reshape(&[b, 1, pp, qq])?.expand(&full)?;
    let m = masks.reshape(&[1, n, pp, qq])?.expand(&full)?;
    let op: Rc<dyn LinearOperator> = otf.clone();
    x.mul(m)?.reshape(&[b, n, pp * qq])?.linear(op, false)
}

/// Adds independent noise to each measurement set in a `[B, N, p·q]` batch,
/// image `b` using seed `seeds[b]`.
pub fn add_noise_batch(clean: &Tensor, sigma: f64, convention: NoiseConvention, seeds: &[u64]) -> Result<Tensor> {
    let s = clean.shape();
    if s.len() != 3 || seeds.len() != s[0] {
        return Err(Error::shape("add_noise_batch", format!("{s:?} with {} seeds", seeds.len())));
    }
    let per = s[1] * s[2];
    let mut out = clean.data().to_vec();
    if sigma > 0.0 {
        for (b, &seed) in seeds.iter().enumerate() {
            let chunk = &mut out[b * per..(b + 1) * per];
            let eps = noise_for(chunk, s[1], &NoiseConfig { sigma, convention, seed })?;
            chunk.iter_mut().zip(eps).for_each(|(a, e)| *a += e);
        }
    }
    Tensor::new(s.to_vec(), out)
}
