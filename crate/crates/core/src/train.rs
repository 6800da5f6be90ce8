//! Joint training of mask logits and U-Net parameters through the simulated
//! measurement and the GI initialiser.

use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::forward::{add_noise_batch, derive_seed, measure_var, NoiseConvention};
use crate::masks::{expand_var, MaskSet, DEFAULT_ELEMENT, DEFAULT_MASK_COUNT};
use crate::metrics::{psnr, ssim, PsnrConvention, DEFAULT_BITS};
use crate::network::{UNetConfig, UNetParams};
use crate::optim::Adam;
use crate::otf::{RegionSpec, SparseOtf};
use crate::recon::gi_var;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub sigma: f64,
    pub convention: NoiseConvention,
    pub seed: u64,
    pub region: Option<RegionSpec>,
    pub unet: UNetConfig,
    pub n_masks: usize,
    pub mask_element: (usize, usize),
    /// Optimise the mask logits jointly with the network.
    pub train_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0002,
            batch_size: 15,
            epochs: 30,
            sigma: 0.3,
            convention: NoiseConvention::Squared,
            seed: 0,
            region: None,
            unet: UNetConfig::default(),
            n_masks: DEFAULT_MASK_COUNT,
            mask_element: DEFAULT_ELEMENT,
            train_masks: true,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and nonnegative"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epoch count must be positive"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("noise sigma must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Wall-clock training time in seconds.
    pub t1: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_psnr,val_ssim\n");
        for e in &self.epochs {
            out += &format!("{},{:e},{:.6},{:.6}\n", e.epoch, e.train_loss, e.val_psnr, e.val_ssim);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub masks: MaskSet,
    pub params: UNetParams,
    pub report: TrainReport,
}

/// Network output `[B, 1, P, Q]` for a batch of images `[B, P, Q]` and the
/// measurement noise drawn with `seeds`.
#[allow(clippy::too_many_arguments)]
pub fn pipeline_forward<'t>(
    otf: &Rc<SparseOtf>,
    masks: Var<'t>,
    params: &UNetParams,
    bound: &crate::network::BoundParams<'t>,
    images: Var<'t>,
    sigma: f64,
    convention: NoiseConvention,
    seeds: &[u64],
) -> Result<Var<'t>> {
    let tape = images.tape();
    let clean = measure_var(otf, masks, images)?;
    let y = if sigma > 0.0 {
        let noisy = add_noise_batch(&clean.value(), sigma, convention, seeds)?;
        let noise = Tensor::new(
            noisy.shape().to_vec(),
            noisy.data().iter().zip(clean.value().data()).map(|(a, b)| a - b).collect(),
        )?;
        clean.add(tape.constant(noise))?
    } else {
        clean
    };
    let gi = gi_var(otf, masks, y)?;
    let s = gi.shape();
    params.forward(bound, gi.reshape(&[s[0], 1, s[1], s[2]])?)
}

/// Mean over the batch of `‖out − X‖²`.
pub fn batch_loss<'t>(out: Var<'t>, targets: Var<'t>) -> Result<Var<'t>> {
    let b = targets.shape()[0] as f64;
    let s = out.shape();
    out.reshape(&[s[0], s[2], s[3]])?.sub(targets)?.square()?.sum()?.div_scalar(b)
}

/// Reconstructs each image through the full pipeline with fixed masks and
/// parameters, returning the network outputs.
pub fn reconstruct_batch(
    otf: &Rc<SparseOtf>,
    masks: &MaskSet,
    params: &UNetParams,
    images: &[Tensor],
    sigma: f64,
    convention: NoiseConvention,
    seeds: &[u64],
) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let dmd = otf.dmd_shape();
    let m = tape.constant(masks.expand(dmd)?);
    let bound = params.bind(&tape, |_| false);
    let x = tape.constant(Tensor::stack(images)?);
    let out = pipeline_forward(otf, m, params, &bound, x, sigma, convention, seeds)?;
    let v = out.value();
    (0..images.len())
        .map(|b| v.index_first(b)?.reshape(&[dmd.0, dmd.1]))
        .collect()
}

fn evaluate(
    otf: &Rc<SparseOtf>,
    masks: &MaskSet,
    params: &UNetParams,
    val: &[Tensor],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for (chunk_idx, chunk) in val.chunks(cfg.batch_size).enumerate() {
        let seeds: Vec<u64> = (0..chunk.len())
            .map(|i| derive_seed(&[cfg.seed, 0x5641_4c, (chunk_idx * cfg.batch_size + i) as u64]))
            .collect();
        let outs = reconstruct_batch(otf, masks, params, chunk, cfg.sigma, cfg.convention, &seeds)?;
        for (o, x) in outs.iter().zip(chunk) {
            p += psnr(o, x, DEFAULT_BITS, PsnrConvention::MseNormalized)?;
            s += ssim(o, x, DEFAULT_BITS).unwrap_or(f64::NAN);
        }
    }
    Ok((p / val.len() as f64, s / val.len() as f64))
}

/// One optimisation step on `batch`; returns the batch loss.
#[allow(clippy::too_many_arguments)]
fn train_step(
    otf: &Rc<SparseOtf>,
    masks: &mut MaskSet,
    params: &mut UNetParams,
    opt: &mut Adam,
    batch: &[Tensor],
    seeds: &[u64],
    cfg: &TrainConfig,
) -> Result<f64> {
    let tape = Tape::new();
    let logits = if cfg.train_masks {
        tape.param(masks.logits().clone())
    } else {
        tape.constant(masks.logits().clone())
    };
    let m = expand_var(logits, otf.dmd_shape())?;
    let bound = params.bind(&tape, |_| true);
    let x = tape.constant(Tensor::stack(batch)?);
    let out = pipeline_forward(otf, m, params, &bound, x, cfg.sigma, cfg.convention, seeds)?;
    let loss = batch_loss(out, x)?;
    let value = loss.value().data()[0];
    let grads = tape.backward(loss)?;

    let mut grad_list = Vec::with_capacity(2 * params.layers.len() + 1);
    grad_list.push(grads.wrt(logits));
    for (w, b) in bound.weights.iter().zip(&bound.biases) {
        grad_list.push(grads.wrt(*w));
        grad_list.push(grads.wrt(*b));
    }
    let mut new_logits = masks.logits().clone();
    {
        let mut targets: Vec<&mut Tensor> = vec![&mut new_logits];
        for l in params.layers.iter_mut() {
            targets.push(&mut l.weight);
            targets.push(&mut l.bias);
        }
        opt.step(&mut targets, &grad_list)?;
    }
    if cfg.train_masks {
        masks.set_logits(new_logits)?;
    }
    Ok(value)
}

fn optimiser_for(masks: &MaskSet, params: &UNetParams, lr: f64) -> Adam {
    let mut shapes: Vec<&Tensor> = vec![masks.logits()];
    for l in &params.layers {
        shapes.push(&l.weight);
        shapes.push(&l.bias);
    }
    Adam::new(lr, &shapes)
}

/// Trains from freshly initialised masks and network.
pub fn train(train_set: &[Tensor], val_set: &[Tensor], otf: &SparseOtf, cfg: &TrainConfig) -> Result<Trained> {
    let masks = MaskSet::init(cfg.n_masks, cfg.mask_element, derive_seed(&[cfg.seed, 1]))?;
    let params = UNetParams::init(cfg.unet, derive_seed(&[cfg.seed, 2]))?;
    train_from(masks, params, train_set, val_set, otf, cfg)
}

/// Trains starting from the given masks and parameters.
pub fn train_from(
    mut masks: MaskSet,
    mut params: UNetParams,
    train_set: &[Tensor],
    val_set: &[Tensor],
    otf: &SparseOtf,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let dmd = otf.dmd_shape();
    if let Some(bad) = train_set.iter().chain(val_set).find(|t| t.shape() != [dmd.0, dmd.1]) {
        return Err(Error::shape("train", format!("image {:?} against DMD {dmd:?}", bad.shape())));
    }
    let start = Instant::now();
    let otf = Rc::new(otf.clone());
    let mut opt = optimiser_for(&masks, &params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 3]));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, MaskSet, UNetParams)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Tensor> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let seeds: Vec<u64> = (0..batch.len())
                .map(|k| derive_seed(&[cfg.seed, epoch as u64, bi as u64, k as u64]))
                .collect();
            let loss = match train_step(&otf, &mut masks, &mut params, &mut opt, &batch, &seeds, cfg) {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch }),
                Err(e) => return Err(e),
            };
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let (val_psnr, val_ssim) = evaluate(&otf, &masks, &params, val_set, cfg)?;
        records.push(EpochRecord { epoch, train_loss, val_psnr, val_ssim });
        let score = if val_psnr.is_nan() { -train_loss } else { val_psnr };
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, masks.clone(), params.clone()));
        }
    }
    let (_, best_epoch, masks, params) = best.expect("at least one epoch");
    Ok(Trained {
        masks,
        params,
        report: TrainReport {
            epochs: records,
            best_epoch,
            t1: start.elapsed().as_secs_f64(),
        },
    })
}
