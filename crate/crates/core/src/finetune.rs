//! Per-region adaptation of the first network layers so that re-simulated
//! measurements of the network output match the observed ones.

use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::forward::{measure_var, MeasurementSet};
use crate::masks::MaskSet;
use crate::network::{finetune_subset, UNetParams};
use crate::optim::Adam;
use crate::otf::{extract_region, split_fov, RegionSpec, SparseOtf};
use crate::recon::{gi_reconstruct, GiVariant};
use crate::tensor::Tensor;

/// Steps over which the relative loss decrease is measured for early stopping.
pub const STOP_WINDOW: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Stop once the loss fell by less than this fraction over the last
    /// [`STOP_WINDOW`] steps.
    pub tol: f64,
    pub seed: u64,
    /// Accept a step only if it does not increase the loss, halving the
    /// step size until it does.
    pub line_search: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0002,
            max_steps: 300,
            tol: 1e-4,
            seed: 0,
            line_search: false,
        }
    }
}

impl FinetuneConfig {
    fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and nonnegative"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::invalid("tol must be nonnegative"));
        }
        Ok(())
    }
}

/// Whether adapted weights are fitted per measurement set or once per
/// region and shared by every set measured there.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    #[default]
    PerMeasurementSet,
    PerRegion,
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub params: UNetParams,
    /// `X_out*`, `[P, Q]`.
    pub image: Tensor,
    /// Loss before the first step and after each accepted step.
    pub history: Vec<f64>,
    /// Wall-clock seconds.
    pub t2: f64,
    pub mode: FinetuneMode,
}

fn check_set(otf: &SparseOtf, masks: &MaskSet, set: &MeasurementSet) -> Result<()> {
    let (p, q) = otf.detector_shape();
    let fs = set.frames.shape();
    if fs.len() != 3 || fs[1..] != [p, q] || fs[0] != masks.len() {
        return Err(Error::shape(
            "finetune",
            format!("frames {fs:?} against {} masks on a {p}x{q} detector", masks.len()),
        ));
    }
    Ok(())
}

/// Network reconstruction from the GI estimate of `set` with fixed
/// parameters (no adaptation).
pub fn reconstruct_without_ft(
    params: &UNetParams,
    masks: &MaskSet,
    otf: &SparseOtf,
    set: &MeasurementSet,
) -> Result<Tensor> {
    check_set(otf, masks, set)?;
    let m = masks.expand(otf.dmd_shape())?;
    params.predict(&gi_reconstruct(otf, &m, &set.frames, GiVariant::Uncentered)?)
}

struct Problem {
    otf: Rc<SparseOtf>,
    masks: Tensor,
    /// `[B, 1, P, Q]` GI inputs.
    gi: Tensor,
    /// `[B, N, p·q]` observed measurements.
    y: Tensor,
    subset: Vec<usize>,
}

impl Problem {
    fn new(params: &UNetParams, masks: &MaskSet, otf: &SparseOtf, sets: &[MeasurementSet]) -> Result<Self> {
        let m = masks.expand(otf.dmd_shape())?;
        let (pp, qq) = otf.dmd_shape();
        let mut gi = Vec::with_capacity(sets.len());
        let mut y = Vec::with_capacity(sets.len());
        for s in sets {
            check_set(otf, masks, s)?;
            gi.push(gi_reconstruct(otf, &m, &s.frames, GiVariant::Uncentered)?);
            y.push(s.frames.reshape(&[masks.len(), otf.n_rows()])?);
        }
        let subset = finetune_subset(&params.config)
            .iter()
            .map(|n| params.layer_index(n).expect("subset names come from the layout"))
            .collect();
        Ok(Self {
            otf: Rc::new(otf.clone()),
            masks: m,
            gi: Tensor::stack(&gi)?.reshape(&[sets.len(), 1, pp, qq])?,
            y: Tensor::stack(&y)?,
            subset,
        })
    }

    /// `Σ_b ‖Y*_b − PCI(U(GI_b))‖²` and its gradients with respect to the
    /// subset's kernels and biases (interleaved).
    fn loss_and_grad(&self, params: &UNetParams) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let bound = params.bind(&tape, |i| self.subset.contains(&i));
        let out = params.forward(&bound, tape.constant(self.gi.clone()))?;
        let s = out.shape();
        let sim = measure_var(
            &self.otf,
            tape.constant(self.masks.clone()),
            out.reshape(&[s[0], s[2], s[3]])?,
        )?;
        let loss = tape.constant(self.y.clone()).sub(sim)?.square()?.sum()?;
        let value = loss.value().data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "finetune loss" });
        }
        let grads = tape.backward(loss)?;
        let mut out = Vec::with_capacity(2 * self.subset.len());
        for &i in &self.subset {
            out.push(grads.wrt(bound.weights[i]));
            out.push(grads.wrt(bound.biases[i]));
        }
        Ok((value, out))
    }

    fn step(&self, params: &mut UNetParams, opt: &mut Adam, grads: &[Tensor]) -> Result<()> {
        let mut targets: Vec<&mut Tensor> = Vec::with_capacity(grads.len());
        for (i, l) in params.layers.iter_mut().enumerate() {
            if self.subset.contains(&i) {
                targets.push(&mut l.weight);
                targets.push(&mut l.bias);
            }
        }
        opt.step(&mut targets, grads)
    }
}

fn stalled(history: &[f64], tol: f64) -> bool {
    let n = history.len();
    if n <= STOP_WINDOW {
        return false;
    }
    let (old, new) = (history[n - 1 - STOP_WINDOW], history[n - 1]);
    old <= 0.0 || (old - new) / old < tol
}

/// Adapts the fine-tune subset to every set in `sets` jointly and returns
/// the adapted parameters, the loss history and the elapsed seconds.
fn adapt(
    params: &UNetParams,
    masks: &MaskSet,
    otf: &SparseOtf,
    sets: &[MeasurementSet],
    cfg: &FinetuneConfig,
) -> Result<(UNetParams, Vec<f64>, f64)> {
    cfg.validate()?;
    if sets.is_empty() {
        return Err(Error::invalid("no measurement sets to fine-tune on"));
    }
    let start = Instant::now();
    let problem = Problem::new(params, masks, otf, sets)?;
    let mut params = params.clone();
    let shapes: Vec<&Tensor> = problem
        .subset
        .iter()
        .flat_map(|&i| [&params.layers[i].weight, &params.layers[i].bias])
        .collect();
    let mut opt = Adam::new(cfg.learning_rate, &shapes);
    let (mut loss, mut grads) = problem.loss_and_grad(&params)?;
    let mut history = vec![loss];

    for _ in 0..cfg.max_steps {
        if cfg.line_search {
            let mut lr = cfg.learning_rate;
            let mut accepted = false;
            for _ in 0..30 {
                let mut trial = params.clone();
                let mut trial_opt = opt.clone();
                trial_opt.lr = lr;
                problem.step(&mut trial, &mut trial_opt, &grads)?;
                let (l, g) = problem.loss_and_grad(&trial)?;
                if l <= loss {
                    params = trial;
                    opt = trial_opt;
                    opt.lr = cfg.learning_rate;
                    (loss, grads) = (l, g);
                    accepted = true;
                    break;
                }
                lr *= 0.5;
            }
            if !accepted {
                break;
            }
        } else {
            problem.step(&mut params, &mut opt, &grads)?;
            (loss, grads) = problem.loss_and_grad(&params)?;
        }
        history.push(loss);
        if stalled(&history, cfg.tol) {
            break;
        }
    }
    Ok((params, history, start.elapsed().as_secs_f64()))
}

/// Fine-tunes the first three convolutions of `params` against one
/// measurement set from the region with OTF `otf_mu`.
pub fn finetune_region(
    params: &UNetParams,
    masks: &MaskSet,
    otf_mu: &SparseOtf,
    y_star: &MeasurementSet,
    cfg: &FinetuneConfig,
) -> Result<FinetuneResult> {
    let start = Instant::now();
    let (adapted, history, _) = adapt(params, masks, otf_mu, std::slice::from_ref(y_star), cfg)?;
    let image = reconstruct_without_ft(&adapted, masks, otf_mu, y_star)?;
    Ok(FinetuneResult {
        params: adapted,
        image,
        history,
        t2: start.elapsed().as_secs_f64(),
        mode: FinetuneMode::PerMeasurementSet,
    })
}

/// Fine-tunes for several measurement sets of one region.
///
/// In per-set mode each set starts from `params`; in per-region mode one
/// adaptation is fitted to all sets jointly and shared, and every result
/// carries its time.
pub fn finetune_sets(
    params: &UNetParams,
    masks: &MaskSet,
    otf_mu: &SparseOtf,
    sets: &[MeasurementSet],
    cfg: &FinetuneConfig,
    mode: FinetuneMode,
) -> Result<Vec<FinetuneResult>> {
    match mode {
        FinetuneMode::PerMeasurementSet => sets
            .iter()
            .map(|s| finetune_region(params, masks, otf_mu, s, cfg))
            .collect(),
        FinetuneMode::PerRegion => {
            let start = Instant::now();
            let (adapted, history, _) = adapt(params, masks, otf_mu, sets, cfg)?;
            let images = sets
                .iter()
                .map(|s| reconstruct_without_ft(&adapted, masks, otf_mu, s))
                .collect::<Result<Vec<_>>>()?;
            let t2 = start.elapsed().as_secs_f64();
            Ok(images
                .into_iter()
                .map(|image| FinetuneResult {
                    params: adapted.clone(),
                    image,
                    history: history.clone(),
                    t2,
                    mode,
                })
                .collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub t1: f64,
    pub t2_list: Vec<f64>,
    /// `(t1 + Σ t2) / (n · t1)`
    pub ratio: f64,
}

impl TimingReport {
    pub fn new(t1: f64, t2_list: Vec<f64>) -> Self {
        let ratio = Self::ratio_of(t1, &t2_list);
        Self { t1, t2_list, ratio }
    }

    pub fn ratio_of(t1: f64, t2_list: &[f64]) -> f64 {
        (t1 + t2_list.iter().sum::<f64>()) / (t2_list.len() as f64 * t1)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct FovResult {
    /// Stitched reconstruction over the field of view.
    pub mosaic: Tensor,
    pub regions: Vec<(RegionSpec, FinetuneResult)>,
    pub timing: TimingReport,
}

/// Fine-tunes every region of `fov` independently from `params` and
/// hard-tiles the outputs.
///
/// `sets` must hold one measurement set tagged with each region; `t1` is the
/// recorded training time.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_fov(
    fov: &RegionSpec,
    region_size: (usize, usize),
    full_otf: &SparseOtf,
    masks: &MaskSet,
    params: &UNetParams,
    sets: &[MeasurementSet],
    t1: f64,
    cfg: &FinetuneConfig,
) -> Result<FovResult> {
    let regions = split_fov(fov, region_size)?;
    let (h, w) = fov.size;
    let mut mosaic = vec![0.0; h * w];
    let mut results = Vec::with_capacity(regions.len());
    for r in regions {
        let set = sets
            .iter()
            .find(|s| s.region == Some(r))
            .ok_or_else(|| Error::invalid(format!("missing measurements for region at {:?}", r.origin)))?;
        let (otf, _) = extract_region(full_otf, &r)?;
        let res = finetune_region(params, masks, &otf, set, cfg)?;
        let (oy, ox) = (r.origin.0 - fov.origin.0, r.origin.1 - fov.origin.1);
        for y in 0..r.size.0 {
            let src = &res.image.data()[y * r.size.1..(y + 1) * r.size.1];
            mosaic[(oy + y) * w + ox..(oy + y) * w + ox + r.size.1].copy_from_slice(src);
        }
        results.push((r, res));
    }
    let timing = TimingReport::new(t1, results.iter().map(|(_, r)| r.t2).collect());
    Ok(FovResult {
        mosaic: Tensor::new(vec![h, w], mosaic)?,
        regions: results,
        timing,
    })
}
