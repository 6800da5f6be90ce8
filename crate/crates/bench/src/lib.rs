//! Shared inputs for the pipeline benchmarks.

use std::rc::Rc;

use pcsr_core::autodiff::Tape;
use pcsr_core::dataset::make_synthetic_dataset;
use pcsr_core::forward::{derive_seed, pci_measure};
use pcsr_core::masks::expand_var;
use pcsr_core::otf::make_ideal_otf;
use pcsr_core::recon::gi_reconstruct;
use pcsr_core::train::{batch_loss, pipeline_forward};
use pcsr_core::{GiVariant, MaskSet, MeasurementSet, NoiseConfig, NoiseConvention, Result, SparseOtf, Tensor, UNetConfig, UNetParams};

pub const FACTOR: (usize, usize) = (4, 4);
pub const N_MASKS: usize = 3;
pub const SIGMA: f64 = 0.3;

pub struct Fixture {
    pub otf: Rc<SparseOtf>,
    pub masks: MaskSet,
    /// `masks` tiled over the DMD.
    pub expanded: Tensor,
    pub params: UNetParams,
    pub images: Vec<Tensor>,
    /// Noisy measurement of `images[0]`.
    pub set: MeasurementSet,
    /// GI estimate from `set`.
    pub gi: Tensor,
}

impl Fixture {
    pub fn new(size: usize, unet: UNetConfig, batch: usize, seed: u64) -> Result<Self> {
        let dmd = (size, size);
        let otf = Rc::new(make_ideal_otf(dmd, FACTOR)?);
        let masks = MaskSet::init(N_MASKS, FACTOR, derive_seed(&[seed, 1]))?;
        let expanded = masks.expand(dmd)?;
        let params = UNetParams::init(unet, derive_seed(&[seed, 2]))?;
        let images = make_synthetic_dataset(batch.max(1), dmd, seed)?;
        let set = pci_measure(&otf, &expanded, &images[0], &NoiseConfig::new(SIGMA, seed))?;
        let gi = gi_reconstruct(&otf, &expanded, &set.frames, GiVariant::Uncentered)?;
        Ok(Self {
            otf,
            masks,
            expanded,
            params,
            images,
            set,
            gi,
        })
    }

    /// Loss and gradients of one training batch through masks, measurement,
    /// GI and the network; returns the loss.
    pub fn train_step_loss(&self) -> Result<f64> {
        let tape = Tape::new();
        let logits = tape.param(self.masks.logits().clone());
        let m = expand_var(logits, self.otf.dmd_shape())?;
        let bound = self.params.bind(&tape, |_| true);
        let x = tape.constant(Tensor::stack(&self.images)?);
        let seeds: Vec<u64> = (0..self.images.len() as u64).collect();
        let out = pipeline_forward(&self.otf, m, &self.params, &bound, x, SIGMA, NoiseConvention::Squared, &seeds)?;
        let loss = batch_loss(out, x)?;
        let value = loss.value().data()[0];
        tape.backward(loss)?;
        Ok(value)
    }
}
