//! One function per subcommand: flags, effective config, run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use pcsr_core::dataset::{make_synthetic_dataset, split_indices};
use pcsr_core::finetune::{finetune_region, finetune_sets, reconstruct_fov, reconstruct_without_ft, FinetuneResult};
use pcsr_core::forward::{derive_seed, pci_measure};
use pcsr_core::io::{read_pgm, write_pgm, BitDepth};
use pcsr_core::masks::{crop_masks, load_masks};
use pcsr_core::metrics::{psnr, ssim, write_metrics_csv, MetricRow, PsnrConvention, DEFAULT_BITS};
use pcsr_core::otf::{
    calibrate_otf, default_ridge, default_windows, extract_region, make_ideal_otf, perturb_otf, random_binary_masks,
    split_fov,
};
use pcsr_core::recon::{gi_reconstruct, tv_reconstruct};
use pcsr_core::train::train;
use pcsr_core::{
    FinetuneConfig, FinetuneMode, GiVariant, MaskSet, MeasurementSet, NoiseConfig, NoiseConvention, OtfPerturbation,
    RegionSpec, SparseOtf, Tensor, TimingReport, TrainConfig, TvConfig, UNetConfig, UNetParams,
};

use crate::config::{effective, need, Dims, Pair};
use crate::run::{read_manifest, RunDir};

#[derive(Args, Debug)]
pub struct RunArgs {
    /// JSON config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory for outputs and the manifest.
    #[arg(long)]
    pub out: PathBuf,
}

fn load_otf(path: &Path) -> Result<SparseOtf> {
    SparseOtf::load(path).with_context(|| format!("{}", path.display()))
}

fn load_image(path: &Path) -> Result<Tensor> {
    read_pgm(path).with_context(|| format!("{}", path.display()))
}

fn load_set(path: &Path) -> Result<MeasurementSet> {
    MeasurementSet::load(path).with_context(|| format!("{}", path.display()))
}

/// Writes a 16-bit PGM and the full-precision `PCIT` tensor beside it.
fn write_image(run: &RunDir, stem: &str, img: &Tensor) -> Result<()> {
    write_pgm(run.path(format!("{stem}.pgm")), img, BitDepth::Sixteen)?;
    img.save(run.path(format!("{stem}.pcit")))?;
    Ok(())
}

/// The smallest periodic element reproducing `masks` (`[N, P, Q]`).
fn tiling_element(masks: &Tensor) -> Result<MaskSet> {
    let (h, w) = (masks.shape()[1], masks.shape()[2]);
    for fy in (1..=h).filter(|d| h % d == 0) {
        for fx in (1..=w).filter(|d| w % d == 0) {
            let set = MaskSet::from_binary(&crop_masks(masks, (0, 0), (fy, fx))?)?;
            if set.expand((h, w))? == *masks {
                return Ok(set);
            }
        }
    }
    unreachable!("the full plane always tiles itself")
}

/// Masks from a training run directory, a `PCIT` tensor or a PBM file.
/// Element-sized masks are tiled; DMD-sized masks must be periodic.
fn load_mask_set(path: &Path, dmd: (usize, usize)) -> Result<MaskSet> {
    let file = if path.is_dir() { path.join("mask_elements.pcit") } else { path.to_path_buf() };
    let ctx = || format!("{}", file.display());
    let m = load_masks(&file).with_context(ctx)?;
    let (h, w) = (m.shape()[1], m.shape()[2]);
    if (h, w) == dmd {
        tiling_element(&m).with_context(ctx)
    } else if dmd.0 % h == 0 && dmd.1 % w == 0 {
        MaskSet::from_binary(&m).with_context(ctx)
    } else {
        bail!("{}: masks {h}x{w} do not tile the {}x{} DMD", file.display(), dmd.0, dmd.1)
    }
}

/// Parameters from a network directory or a training run directory, with
/// the training time when the latter has a manifest.
fn load_net(path: &Path) -> Result<(UNetParams, Option<f64>)> {
    if path.join("net").join("manifest.json").is_file() {
        let params = UNetParams::load(path.join("net")).with_context(|| format!("{}", path.display()))?;
        let t1 = read_manifest(path).ok().and_then(|m| m.timings.get("t1").and_then(|v| v.as_f64()));
        Ok((params, t1))
    } else {
        Ok((UNetParams::load(path).with_context(|| format!("{}", path.display()))?, None))
    }
}

fn crop_image(img: &Tensor, r: &RegionSpec) -> Result<Tensor> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    Ok(crop_masks(&img.reshape(&[1, h, w])?, r.origin, r.size)?.reshape(&[r.size.0, r.size.1])?)
}

fn write_history(path: &Path, history: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (k, l) in history.iter().enumerate() {
        out += &format!("{k},{l:e}\n");
    }
    std::fs::write(path, out).with_context(|| format!("{}", path.display()))
}

fn done(run: RunDir, config: &impl Serialize) -> Result<()> {
    let root = run.path("");
    let m = run.finish(config)?;
    println!("{}: {} artifacts in {}", m.command, m.artifacts.len(), root.display());
    Ok(())
}

// ---------------------------------------------------------------- make-otf

#[derive(Args, Debug, Serialize)]
pub struct MakeOtfFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    /// DMD extents, e.g. 32x32.
    #[arg(long)]
    dmd: Option<Dims>,
    /// Under-sampling factor, e.g. 4x4.
    #[arg(long)]
    factor: Option<Dims>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MakeOtfConfig {
    dmd: Dims,
    factor: Dims,
}

impl Default for MakeOtfConfig {
    fn default() -> Self {
        Self {
            dmd: Dims(32, 32),
            factor: Dims(4, 4),
        }
    }
}

pub fn make_otf(f: &MakeOtfFlags) -> Result<()> {
    let cfg: MakeOtfConfig = effective(f.run.config.as_deref(), f)?;
    let run = RunDir::create(&f.run.out, "make-otf")?;
    let otf = make_ideal_otf((cfg.dmd.0, cfg.dmd.1), (cfg.factor.0, cfg.factor.1))?;
    otf.save(run.path("otf.pcio"))?;
    done(run, &cfg)
}

// ---------------------------------------------------------------- perturb-otf

#[derive(Args, Debug, Serialize)]
pub struct PerturbFlags {
    #[arg(long)]
    shift: Option<Pair>,
    #[arg(long)]
    rotation: Option<f64>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long = "blur")]
    blur_sigma: Option<f64>,
    #[arg(long)]
    gain_jitter: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct PerturbOtfFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    /// Input OTF (`PCIO`).
    #[arg(long)]
    otf: Option<PathBuf>,
    #[command(flatten)]
    perturbation: PerturbFlags,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PerturbOtfConfig {
    otf: Option<PathBuf>,
    perturbation: OtfPerturbation,
    seed: u64,
}

pub fn perturb(f: &PerturbOtfFlags) -> Result<()> {
    let cfg: PerturbOtfConfig = effective(f.run.config.as_deref(), f)?;
    let base = load_otf(need(&cfg.otf, "otf")?)?;
    let mut run = RunDir::create(&f.run.out, "perturb-otf")?;
    run.seed("gain", cfg.seed);
    let (otf, gains) = perturb_otf(&base, &cfg.perturbation, cfg.seed)?;
    otf.save(run.path("otf.pcio"))?;
    std::fs::write(run.path("gains.json"), serde_json::to_string_pretty(&gains)? + "\n")?;
    let rel = otf.relative_error(&base)?;
    std::fs::write(
        run.path("perturbation.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "relative_error_to_input": rel }))? + "\n",
    )?;
    done(run, &cfg)
}

// ---------------------------------------------------------------- calibrate

#[derive(Args, Debug, Serialize)]
pub struct CalibrateFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    /// Calibration masks `[N, P, Q]`; generated when absent.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Measured calibration frames `[N, p, q]`; simulated from `--truth` when absent.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// OTF used to simulate calibration frames.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Number of generated calibration masks (default: three per window pixel).
    #[arg(long)]
    n_cal: Option<usize>,
    /// Window half-margin in DMD pixels around each detector pixel's block.
    #[arg(long)]
    dilation: Option<usize>,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CalibrateConfig {
    masks: Option<PathBuf>,
    frames: Option<PathBuf>,
    truth: Option<PathBuf>,
    n_cal: Option<usize>,
    dilation: usize,
    ridge: Option<f64>,
    sigma: f64,
    seed: u64,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            masks: None,
            frames: None,
            truth: None,
            n_cal: None,
            dilation: 4,
            ridge: None,
            sigma: 0.0,
            seed: 0,
        }
    }
}

pub fn calibrate(f: &CalibrateFlags) -> Result<()> {
    let cfg: CalibrateConfig = effective(f.run.config.as_deref(), f)?;
    let truth = cfg.truth.as_deref().map(load_otf).transpose()?;
    let mut run = RunDir::create(&f.run.out, "calibrate")?;
    let (masks, frames) = match (&cfg.frames, &truth) {
        (Some(fp), _) => {
            let mp = need(&cfg.masks, "masks")?;
            let masks = load_masks(mp).with_context(|| format!("{}", mp.display()))?;
            (masks, Tensor::load(fp).with_context(|| format!("{}", fp.display()))?)
        }
        (None, Some(t)) => {
            let dmd = t.dmd_shape();
            let masks = match &cfg.masks {
                Some(mp) => load_masks(mp).with_context(|| format!("{}", mp.display()))?,
                None => {
                    let det = t.detector_shape();
                    let factor = (dmd.0 / det.0, dmd.1 / det.1);
                    let win = default_windows(dmd, factor, cfg.dilation)?.iter().map(Vec::len).max().unwrap_or(1);
                    let n = cfg.n_cal.unwrap_or(3 * win);
                    run.seed("masks", derive_seed(&[cfg.seed, 0]));
                    random_binary_masks(n, dmd, derive_seed(&[cfg.seed, 0]))
                }
            };
            // a calibration frame is the detector response to the bare mask
            run.seed("noise", derive_seed(&[cfg.seed, 1]));
            let white = Tensor::full(&[dmd.0, dmd.1], 1.0);
            let noise = NoiseConfig::new(cfg.sigma, derive_seed(&[cfg.seed, 1]));
            let frames = pci_measure(t, &masks, &white, &noise)?.frames;
            masks.save(run.path("cal_masks.pcit"))?;
            frames.save(run.path("cal_frames.pcit"))?;
            (masks, frames)
        }
        (None, None) => bail!("calibrate needs either --frames with --masks or --truth to simulate them"),
    };
    let (ms, fs) = (masks.shape(), frames.shape());
    if ms.len() != 3 || fs.len() != 3 || fs[1] == 0 || fs[2] == 0 || ms[1] % fs[1] != 0 || ms[2] % fs[2] != 0 {
        bail!("calibration masks {ms:?} and frames {fs:?} are not an integral under-sampling");
    }
    let (dmd, factor) = ((ms[1], ms[2]), (ms[1] / fs[1], ms[2] / fs[2]));
    let windows = default_windows(dmd, factor, cfg.dilation)?;
    let wlen = windows.iter().map(Vec::len).max().unwrap_or(1);
    let ridge = cfg.ridge.unwrap_or_else(|| default_ridge(&masks, wlen));
    let start = Instant::now();
    let cal = calibrate_otf(&masks, &frames, &windows, ridge)?;
    run.time("calibration", start.elapsed().as_secs_f64());
    cal.otf.save(run.path("otf.pcio"))?;
    let mut csv = String::from("row,residual\n");
    for (i, r) in cal.residual.iter().enumerate() {
        csv += &format!("{i},{r:e}\n");
    }
    std::fs::write(run.path("residual.csv"), csv)?;
    let summary = serde_json::json!({
        "n_cal": ms[0],
        "window_len": wlen,
        "ridge": ridge,
        "relative_error": truth.map(|t| cal.otf.relative_error(&t)).transpose()?,
    });
    std::fs::write(run.path("calibration.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    done(run, &cfg)
}

// ---------------------------------------------------------------- make-dataset

#[derive(Args, Debug, Serialize)]
pub struct MakeDatasetFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    #[arg(long)]
    n: Option<usize>,
    /// Image extents, e.g. 32x32.
    #[arg(long)]
    size: Option<Dims>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MakeDatasetConfig {
    n: usize,
    size: Dims,
    seed: u64,
}

impl Default for MakeDatasetConfig {
    fn default() -> Self {
        Self {
            n: 400,
            size: Dims(32, 32),
            seed: 0,
        }
    }
}

pub fn make_dataset(f: &MakeDatasetFlags) -> Result<()> {
    let cfg: MakeDatasetConfig = effective(f.run.config.as_deref(), f)?;
    let mut run = RunDir::create(&f.run.out, "make-dataset")?;
    run.seed("dataset", cfg.seed);
    let images = make_synthetic_dataset(cfg.n, (cfg.size.0, cfg.size.1), cfg.seed)?;
    for (i, img) in images.iter().enumerate() {
        write_pgm(run.path(format!("img_{i:04}.pgm")), img, BitDepth::Sixteen)?;
    }
    let (tr, va, te) = split_indices(cfg.n);
    let split = serde_json::json!({ "train": [tr.start, tr.end], "val": [va.start, va.end], "test": [te.start, te.end] });
    std::fs::write(run.path("split.json"), serde_json::to_string_pretty(&split)? + "\n")?;
    done(run, &cfg)
}

/// Every `*.pgm` of a directory in name order.
fn read_dataset(dir: &Path) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("{}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("{}: no PGM images", dir.display());
    }
    paths.iter().map(|p| load_image(p)).collect()
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug, Serialize)]
pub struct UNetFlags {
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training noise level.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_masks: Option<usize>,
    /// Mask element extents, e.g. 4x4.
    #[arg(long = "element")]
    mask_element: Option<Dims>,
    #[arg(long)]
    train_masks: Option<bool>,
    #[command(flatten)]
    unet: UNetFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainCmdFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    /// Directory of PGM images (e.g. a make-dataset run).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    otf: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainCmdConfig {
    dataset: Option<PathBuf>,
    otf: Option<PathBuf>,
    train: TrainConfig,
}

pub fn train_cmd(f: &TrainCmdFlags) -> Result<()> {
    let cfg: TrainCmdConfig = effective(f.run.config.as_deref(), f)?;
    let otf = load_otf(need(&cfg.otf, "otf")?)?;
    let images = read_dataset(need(&cfg.dataset, "dataset")?)?;
    let (tr, va, _) = split_indices(images.len());
    let mut run = RunDir::create(&f.run.out, "train")?;
    let s = cfg.train.seed;
    run.seed("train", s);
    run.seed("masks", derive_seed(&[s, 1]));
    run.seed("network", derive_seed(&[s, 2]));
    let trained = train(&images[tr], &images[va], &otf, &cfg.train)?;
    run.time("t1", trained.report.t1);
    let dmd = otf.dmd_shape();
    trained.params.save(run.path("net"))?;
    trained.masks.binary_elements().save(run.path("mask_elements.pcit"))?;
    trained.masks.logits().save(run.path("mask_logits.pcit"))?;
    trained.masks.save(run.path("masks.pcit"), dmd)?;
    for m in 0..trained.masks.len() {
        trained.masks.save_pbm(run.path(format!("mask_{m:03}.pbm")), m, dmd)?;
    }
    trained.report.write_csv(run.path("train.csv"))?;
    if let Some(best) = trained.report.epochs.iter().find(|e| e.epoch == trained.report.best_epoch) {
        println!("best epoch {}: val PSNR {:.2} dB, SSIM {:.3}", best.epoch, best.val_psnr, best.val_ssim);
    }
    done(run, &cfg)
}

// ---------------------------------------------------------------- measure

#[derive(Args, Debug, Serialize)]
pub struct MeasureFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    #[arg(long)]
    otf: Option<PathBuf>,
    /// Masks (`PCIT`, PBM or a training run directory).
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Object image (PGM) the size of the DMD.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Random binary masks when `--masks` is absent.
    #[arg(long)]
    n_masks: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_enum)]
    convention: Option<ConventionArg>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConventionArg {
    Squared,
    Linear,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MeasureConfig {
    otf: Option<PathBuf>,
    masks: Option<PathBuf>,
    image: Option<PathBuf>,
    n_masks: usize,
    sigma: f64,
    convention: NoiseConvention,
    seed: u64,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self {
            otf: None,
            masks: None,
            image: None,
            n_masks: 3,
            sigma: 0.0,
            convention: NoiseConvention::Squared,
            seed: 0,
        }
    }
}

pub fn measure(f: &MeasureFlags) -> Result<()> {
    let cfg: MeasureConfig = effective(f.run.config.as_deref(), f)?;
    let otf = load_otf(need(&cfg.otf, "otf")?)?;
    let ip = need(&cfg.image, "image")?;
    let image = load_image(ip)?;
    let dmd = otf.dmd_shape();
    let mut run = RunDir::create(&f.run.out, "measure")?;
    let masks = match &cfg.masks {
        Some(p) => load_mask_set(p, dmd)?.expand(dmd)?,
        None => {
            run.seed("masks", derive_seed(&[cfg.seed, 0]));
            random_binary_masks(cfg.n_masks, dmd, derive_seed(&[cfg.seed, 0]))
        }
    };
    run.seed("noise", cfg.seed);
    let noise = NoiseConfig {
        sigma: cfg.sigma,
        convention: cfg.convention,
        seed: cfg.seed,
    };
    let set = pci_measure(&otf, &masks, &image, &noise).with_context(|| format!("{}", ip.display()))?;
    set.save(run.path("frames.pcit"))?;
    masks.save(run.path("masks.pcit"))?;
    done(run, &cfg)
}

// ---------------------------------------------------------------- reconstruct

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Gi,
    Tv,
    Net,
    NetFt,
}

#[derive(Args, Debug, Serialize)]
pub struct TvFlags {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "tv-iters")]
    max_iters: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct FinetuneFlags {
    #[arg(long = "ft-lr")]
    learning_rate: Option<f64>,
    #[arg(long = "ft-steps")]
    max_steps: Option<usize>,
    #[arg(long = "ft-tol")]
    tol: Option<f64>,
    #[arg(long)]
    line_search: Option<bool>,
}

#[derive(Args, Debug, Serialize)]
pub struct ReconstructFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long)]
    otf: Option<PathBuf>,
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Frames written by `measure` (`PCIT` with its `.json` sidecar).
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Network or training run directory (net and net-ft).
    #[arg(long)]
    net: Option<PathBuf>,
    #[arg(long, value_enum)]
    gi_variant: Option<GiVariantArg>,
    #[command(flatten)]
    tv: TvFlags,
    #[command(flatten)]
    finetune: FinetuneFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GiVariantArg {
    Uncentered,
    Centered,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ReconstructConfig {
    method: Method,
    otf: Option<PathBuf>,
    masks: Option<PathBuf>,
    frames: Option<PathBuf>,
    net: Option<PathBuf>,
    gi_variant: GiVariant,
    tv: TvConfig,
    finetune: FinetuneConfig,
}

pub fn reconstruct(f: &ReconstructFlags) -> Result<()> {
    let cfg: ReconstructConfig = effective(f.run.config.as_deref(), f)?;
    let otf = load_otf(need(&cfg.otf, "otf")?)?;
    let dmd = otf.dmd_shape();
    let masks = load_mask_set(need(&cfg.masks, "masks")?, dmd)?;
    let fp = need(&cfg.frames, "frames")?;
    let set = load_set(fp)?;
    let net = match cfg.method {
        Method::Net | Method::NetFt => Some(load_net(need(&cfg.net, "net")?)?.0),
        _ => None,
    };
    let mut run = RunDir::create(&f.run.out, "reconstruct")?;
    let start = Instant::now();
    let ctx = || format!("{}", fp.display());
    let image = match cfg.method {
        Method::Gi => gi_reconstruct(&otf, &masks.expand(dmd)?, &set.frames, cfg.gi_variant).with_context(ctx)?,
        Method::Tv => {
            let res = tv_reconstruct(&otf, &masks.expand(dmd)?, &set.frames, &cfg.tv).with_context(ctx)?;
            res.write_history_csv(run.path("history.csv"))?;
            res.image
        }
        Method::Net => reconstruct_without_ft(net.as_ref().unwrap(), &masks, &otf, &set).with_context(ctx)?,
        Method::NetFt => {
            run.seed("finetune", cfg.finetune.seed);
            let res = finetune_region(net.as_ref().unwrap(), &masks, &otf, &set, &cfg.finetune).with_context(ctx)?;
            write_history(&run.path("history.csv"), &res.history)?;
            run.time("t2", res.t2);
            res.image
        }
    };
    run.time("reconstruction", start.elapsed().as_secs_f64());
    write_image(&run, "recon", &image)?;
    done(run, &cfg)
}

// ---------------------------------------------------------------- finetune

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    PerMeasurementSet,
    PerRegion,
}

#[derive(Args, Debug, Serialize)]
pub struct FinetuneCmdFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    #[arg(long)]
    otf: Option<PathBuf>,
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Frames of one measurement set; repeat for several sets of the region.
    #[arg(long)]
    frames: Option<Vec<PathBuf>>,
    #[arg(long)]
    net: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[command(flatten)]
    finetune: FinetuneFlags,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FinetuneCmdConfig {
    otf: Option<PathBuf>,
    masks: Option<PathBuf>,
    frames: Vec<PathBuf>,
    net: Option<PathBuf>,
    mode: FinetuneMode,
    finetune: FinetuneConfig,
}

pub fn finetune(f: &FinetuneCmdFlags) -> Result<()> {
    let cfg: FinetuneCmdConfig = effective(f.run.config.as_deref(), f)?;
    let otf = load_otf(need(&cfg.otf, "otf")?)?;
    let masks = load_mask_set(need(&cfg.masks, "masks")?, otf.dmd_shape())?;
    let (params, _) = load_net(need(&cfg.net, "net")?)?;
    if cfg.frames.is_empty() {
        bail!("missing required setting `frames` (flag --frames or config key)");
    }
    let sets = cfg.frames.iter().map(|p| load_set(p)).collect::<Result<Vec<_>>>()?;
    let mut run = RunDir::create(&f.run.out, "finetune")?;
    run.seed("finetune", cfg.finetune.seed);
    let results: Vec<FinetuneResult> = finetune_sets(&params, &masks, &otf, &sets, &cfg.finetune, cfg.mode)?;
    for (k, r) in results.iter().enumerate() {
        write_image(&run, &format!("recon_{k:03}"), &r.image)?;
        write_history(&run.path(format!("history_{k:03}.csv")), &r.history)?;
        if cfg.mode == FinetuneMode::PerMeasurementSet || k == 0 {
            r.params.save(run.path(format!("net_ft_{k:03}")))?;
        }
    }
    run.timings
        .insert("t2_list".into(), serde_json::to_value(results.iter().map(|r| r.t2).collect::<Vec<_>>())?);
    done(run, &cfg)
}

// ---------------------------------------------------------------- evaluate

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PsnrArg {
    AsPrinted,
    MseNormalized,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    /// Ground-truth image; repeat, paired in order with `--estimate`.
    #[arg(long)]
    reference: Option<Vec<PathBuf>>,
    #[arg(long)]
    estimate: Option<Vec<PathBuf>>,
    /// Label for the method column.
    #[arg(long)]
    method: Option<String>,
    /// Label for the sigma column.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long, value_enum)]
    convention: Option<PsnrArg>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateConfig {
    reference: Vec<PathBuf>,
    estimate: Vec<PathBuf>,
    method: String,
    sigma: f64,
    bits: u32,
    convention: PsnrConvention,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            reference: Vec::new(),
            estimate: Vec::new(),
            method: "unknown".into(),
            sigma: 0.0,
            bits: DEFAULT_BITS,
            convention: PsnrConvention::default(),
        }
    }
}

pub fn evaluate(f: &EvaluateFlags) -> Result<()> {
    let cfg: EvaluateConfig = effective(f.run.config.as_deref(), f)?;
    if cfg.reference.is_empty() || cfg.reference.len() != cfg.estimate.len() {
        bail!(
            "evaluate needs matching --reference/--estimate pairs, got {} and {}",
            cfg.reference.len(),
            cfg.estimate.len()
        );
    }
    let mut rows = Vec::new();
    for (r, e) in cfg.reference.iter().zip(&cfg.estimate) {
        let (ri, ei) = (load_image(r)?, load_image(e)?);
        let ctx = || format!("{} vs {}", e.display(), r.display());
        rows.push(MetricRow {
            image_id: r.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
            method: cfg.method.clone(),
            sigma: cfg.sigma,
            psnr: psnr(&ei, &ri, cfg.bits, cfg.convention).with_context(ctx)?,
            ssim: ssim(&ei, &ri, cfg.bits).with_context(ctx)?,
            convention: cfg.convention,
        });
    }
    let run = RunDir::create(&f.run.out, "evaluate")?;
    write_metrics_csv(run.path("metrics.csv"), &rows)?;
    let n = rows.len() as f64;
    println!(
        "mean PSNR {:.3} dB, mean SSIM {:.4} over {} images",
        rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows.len()
    );
    done(run, &cfg)
}

// ---------------------------------------------------------------- fov-run

#[derive(Args, Debug, Serialize)]
pub struct FovRunFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    /// OTF of the whole field of view.
    #[arg(long)]
    otf: Option<PathBuf>,
    /// Region-sized or element masks (or a training run directory).
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Training run directory (supplies T1) or a bare network directory.
    #[arg(long)]
    net: Option<PathBuf>,
    /// Object the size of the field of view.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Region extents, e.g. 32x32.
    #[arg(long)]
    region: Option<Dims>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training time in seconds, overriding the one in the run manifest.
    #[arg(long)]
    t1: Option<f64>,
    #[command(flatten)]
    finetune: FinetuneFlags,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FovRunConfig {
    otf: Option<PathBuf>,
    masks: Option<PathBuf>,
    net: Option<PathBuf>,
    image: Option<PathBuf>,
    region: Dims,
    sigma: f64,
    convention: NoiseConvention,
    seed: u64,
    t1: Option<f64>,
    finetune: FinetuneConfig,
}

impl Default for FovRunConfig {
    fn default() -> Self {
        Self {
            otf: None,
            masks: None,
            net: None,
            image: None,
            region: Dims(32, 32),
            sigma: 0.3,
            convention: NoiseConvention::Squared,
            seed: 0,
            t1: None,
            finetune: FinetuneConfig::default(),
        }
    }
}

pub fn fov_run(f: &FovRunFlags) -> Result<()> {
    let mut cfg: FovRunConfig = effective(f.run.config.as_deref(), f)?;
    let full = load_otf(need(&cfg.otf, "otf")?)?;
    let (params, t1_trained) = load_net(need(&cfg.net, "net")?)?;
    let Some(t1) = cfg.t1.or(t1_trained) else {
        bail!("no training time: pass --t1 or a training run directory as --net");
    };
    cfg.t1 = Some(t1);
    let region = (cfg.region.0, cfg.region.1);
    let masks = load_mask_set(need(&cfg.masks, "masks")?, region)?;
    let ip = need(&cfg.image, "image")?;
    let image = load_image(ip)?;
    let (dmd, det) = (full.dmd_shape(), full.detector_shape());
    if image.shape() != [dmd.0, dmd.1] {
        bail!("{}: image {:?} against field of view {}x{}", ip.display(), image.shape(), dmd.0, dmd.1);
    }
    let fov = RegionSpec::whole(dmd, (dmd.0 / det.0, dmd.1 / det.1))?;
    let regions = split_fov(&fov, region)?;
    let mut run = RunDir::create(&f.run.out, "fov-run")?;
    run.seed("noise", cfg.seed);
    run.seed("finetune", cfg.finetune.seed);
    let expanded = masks.expand(region)?;
    let mut sets = Vec::with_capacity(regions.len());
    for (k, r) in regions.iter().enumerate() {
        let (otf, _) = extract_region(&full, r)?;
        let noise = NoiseConfig {
            sigma: cfg.sigma,
            convention: cfg.convention,
            seed: derive_seed(&[cfg.seed, k as u64]),
        };
        let mut set = pci_measure(&otf, &expanded, &crop_image(&image, r)?, &noise)?;
        set.region = Some(*r);
        set.save(run.path(format!("frames_{k:03}.pcit")))?;
        sets.push(set);
    }
    let res = reconstruct_fov(&fov, region, &full, &masks, &params, &sets, t1, &cfg.finetune)?;
    write_image(&run, "mosaic", &res.mosaic)?;
    for (k, (_, r)) in res.regions.iter().enumerate() {
        write_image(&run, &format!("region_{k:03}"), &r.image)?;
        write_history(&run.path(format!("history_{k:03}.csv")), &r.history)?;
    }
    let TimingReport { t1, t2_list, ratio } = res.timing;
    println!(
        "T1 {t1:.2} s, sum T2 {:.2} s over {} regions, ratio {ratio:.4}",
        t2_list.iter().sum::<f64>(),
        t2_list.len()
    );
    run.time("t1", t1);
    run.timings.insert("t2_list".into(), serde_json::to_value(&t2_list)?);
    run.time("ratio", ratio);
    done(run, &cfg)
}

// ---------------------------------------------------------------- bench

#[derive(Args, Debug, Serialize)]
pub struct BenchFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    #[arg(long)]
    size: Option<Dims>,
    #[arg(long)]
    factor: Option<Dims>,
    #[arg(long)]
    n_masks: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    unet: UNetFlags,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchConfig {
    size: Dims,
    factor: Dims,
    n_masks: usize,
    repeats: usize,
    seed: u64,
    unet: UNetConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            size: Dims(32, 32),
            factor: Dims(4, 4),
            n_masks: 3,
            repeats: 5,
            seed: 0,
            unet: UNetConfig::default(),
        }
    }
}

fn best_of(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        f()?;
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

pub fn bench(f: &BenchFlags) -> Result<()> {
    let cfg: BenchConfig = effective(f.run.config.as_deref(), f)?;
    let dmd = (cfg.size.0, cfg.size.1);
    let otf = make_ideal_otf(dmd, (cfg.factor.0, cfg.factor.1))?;
    let masks = MaskSet::init(cfg.n_masks, (cfg.factor.0, cfg.factor.1), derive_seed(&[cfg.seed, 1]))?;
    let expanded = masks.expand(dmd)?;
    let params = UNetParams::init(cfg.unet, derive_seed(&[cfg.seed, 2]))?;
    let image = make_synthetic_dataset(1, dmd, cfg.seed)?.remove(0);
    let mut run = RunDir::create(&f.run.out, "bench")?;
    run.seed("bench", cfg.seed);
    let set = pci_measure(&otf, &expanded, &image, &NoiseConfig::new(0.3, cfg.seed))?;
    let n = cfg.repeats;
    let gi = gi_reconstruct(&otf, &expanded, &set.frames, GiVariant::Uncentered)?;
    let ft = FinetuneConfig {
        max_steps: 10,
        tol: 0.0,
        ..FinetuneConfig::default()
    };
    let tv = TvConfig {
        max_iters: 50,
        tol: 0.0,
        ..TvConfig::default()
    };
    let rows = [
        ("measure", best_of(n, || pci_measure(&otf, &expanded, &image, &set.noise).map(drop).map_err(Into::into))?),
        ("gi", best_of(n, || gi_reconstruct(&otf, &expanded, &set.frames, GiVariant::Uncentered).map(drop).map_err(Into::into))?),
        ("tv_50_iters", best_of(n, || tv_reconstruct(&otf, &expanded, &set.frames, &tv).map(drop).map_err(Into::into))?),
        ("unet_forward", best_of(n, || params.predict(&gi).map(drop).map_err(Into::into))?),
        ("finetune_10_steps", best_of(n, || finetune_region(&params, &masks, &otf, &set, &ft).map(drop).map_err(Into::into))?),
    ];
    println!("{:<20} {:>12}", "stage", "best s");
    for (name, secs) in rows {
        println!("{name:<20} {secs:>12.6}");
        run.time(name, secs);
    }
    done(run, &cfg)
}
