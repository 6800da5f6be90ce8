//! Convolutional U-Net mapping a GI estimate to a refined image.
//!
//! Layout for depth `D` and base width `c`, with `c_k = c·2^(k−1)`:
//!
//! * `stem`: 1 → c₁
//! * `enc{k}.conv`: c_k → c_k, output kept as the skip for level k
//! * `enc{k}.down`: stride-2 conv, c_k → c_{k+1} (c_{D+1} = 2·c_D)
//! * `bottleneck`: c_{D+1} → c_{D+1}
//! * `dec{k}.up`: nearest 2× upsample then conv, c_{k+1} → c_k
//! * `dec{k}.fuse`: conv over `[up, skip_k]`, 2·c_k → c_k
//! * `head`: c₁ → 1, sigmoid
//!
//! All kernels are 3×3 with padding 1 and every conv but the head is
//! followed by a ReLU. Input extents must be divisible by `2^D`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            depth: 4,
        }
    }
}

impl UNetConfig {
    fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 || self.depth > 16 {
            return Err(Error::invalid(format!("invalid U-Net config {self:?}")));
        }
        Ok(())
    }

    /// `(name, c_in, c_out, stride)` for every conv in forward order.
    pub fn layout(&self) -> Vec<(String, usize, usize, usize)> {
        let c = |k: usize| {
            if k > self.depth {
                2 * self.base_channels << (self.depth - 1)
            } else {
                self.base_channels << (k - 1)
            }
        };
        let mut out = vec![("stem".to_string(), 1, c(1), 1)];
        for k in 1..=self.depth {
            out.push((format!("enc{k}.conv"), c(k), c(k), 1));
            out.push((format!("enc{k}.down"), c(k), c(k + 1), 2));
        }
        out.push(("bottleneck".into(), c(self.depth + 1), c(self.depth + 1), 1));
        for k in (1..=self.depth).rev() {
            out.push((format!("dec{k}.up"), c(k + 1), c(k), 1));
            out.push((format!("dec{k}.fuse"), 2 * c(k), c(k), 1));
        }
        out.push(("head".into(), c(1), 1, 1));
        out
    }

    /// Multiply-accumulates of one forward pass on an `h × w` image.
    pub fn forward_macs(&self, h: usize, w: usize) -> usize {
        let mut size = h * w;
        let mut total = 0;
        for (name, ci, co, stride) in self.layout() {
            if name.starts_with("dec") && name.ends_with(".up") {
                size *= 4;
            }
            if stride == 2 {
                size /= 4;
            }
            total += ci * co * KERNEL * KERNEL * size;
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    /// `[c_out, c_in, 3, 3]`
    pub weight: Tensor,
    /// `[c_out]`
    pub bias: Tensor,
}

/// Names of the layers adapted during per-region fine-tuning: the first
/// three convolutions in forward order.
pub fn finetune_subset(cfg: &UNetConfig) -> Vec<String> {
    cfg.layout().into_iter().take(3).map(|l| l.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetParams {
    pub config: UNetConfig,
    pub layers: Vec<ConvLayer>,
}

/// Layer parameters bound to a tape.
pub struct BoundParams<'t> {
    pub weights: Vec<Var<'t>>,
    pub biases: Vec<Var<'t>>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLayer {
    name: String,
    weight_shape: Vec<usize>,
    bias_shape: Vec<usize>,
    weight_file: String,
    bias_file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: UNetConfig,
    layers: Vec<ManifestLayer>,
    finetune_subset: Vec<String>,
}

impl UNetParams {
    /// Kaiming-uniform kernels (`±sqrt(6 / fan_in)`) and zero biases.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layout()
            .into_iter()
            .map(|(name, ci, co, _)| {
                let bound = (6.0 / (ci * KERNEL * KERNEL) as f64).sqrt();
                ConvLayer {
                    name,
                    weight: Tensor::from_fn(&[co, ci, KERNEL, KERNEL], |_| rng.gen_range(-bound..bound)),
                    bias: Tensor::zeros(&[co]),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn zeroed(config: UNetConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        for l in &mut p.layers {
            l.weight = Tensor::zeros(l.weight.shape());
        }
        Ok(p)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Binds every layer, marking those for which `trainable` holds as
    /// parameters and the rest as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(usize) -> bool) -> BoundParams<'t> {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            if trainable(i) {
                weights.push(tape.param(l.weight.clone()));
                biases.push(tape.param(l.bias.clone()));
            } else {
                weights.push(tape.constant(l.weight.clone()));
                biases.push(tape.constant(l.bias.clone()));
            }
        }
        BoundParams { weights, biases }
    }

    /// Network output for `[B, 1, H, W]` input on a tape.
    pub fn forward<'t>(&self, bound: &BoundParams<'t>, input: Var<'t>) -> Result<Var<'t>> {
        self.forward_traced(bound, input, &mut Vec::new())
    }

    /// As [`forward`](Self::forward), also collecting every conv's
    /// activation (post-ReLU; pre-sigmoid for the head).
    pub fn forward_traced<'t>(
        &self,
        bound: &BoundParams<'t>,
        input: Var<'t>,
        trace: &mut Vec<Var<'t>>,
    ) -> Result<Var<'t>> {
        let s = input.shape();
        let div = 1usize << self.config.depth;
        if s.len() != 4 || s[1] != 1 || s[2] % div != 0 || s[3] % div != 0 {
            return Err(Error::shape(
                "unet",
                format!("input {s:?} must be [B, 1, H, W] with H, W divisible by {div}"),
            ));
        }
        let mut idx = 0;
        let mut conv = |x: Var<'t>, stride: usize, relu: bool| -> Result<Var<'t>> {
            let y = x.conv2d(bound.weights[idx], Some(bound.biases[idx]), stride, KERNEL / 2)?;
            idx += 1;
            let y = if relu { y.relu()? } else { y };
            trace.push(y);
            Ok(y)
        };
        let mut x = conv(input, 1, true)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        for _ in 0..self.config.depth {
            x = conv(x, 1, true)?;
            skips.push(x);
            x = conv(x, 2, true)?;
        }
        x = conv(x, 1, true)?;
        for skip in skips.into_iter().rev() {
            x = conv(x.upsample_nearest2x()?, 1, true)?;
            x = conv(x.concat_channels(skip)?, 1, true)?;
        }
        conv(x, 1, false)?.sigmoid()
    }

    /// Inference on `[H, W]` or `[B, H, W]` images, returning the same shape.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape().to_vec();
        let batched = match s.len() {
            2 => images.reshape(&[1, 1, s[0], s[1]])?,
            3 => images.reshape(&[s[0], 1, s[1], s[2]])?,
            _ => return Err(Error::shape("predict", format!("{s:?}"))),
        };
        let tape = Tape::new();
        let bound = self.bind(&tape, |_| false);
        let out = self.forward(&bound, tape.constant(batched))?;
        let v = out.value().reshape(&s)?;
        Ok(v)
    }

    /// Writes `manifest.json` and one `PCIT` file per tensor into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut layers = Vec::new();
        for l in &self.layers {
            let (wf, bf) = (format!("{}.weight.pcit", l.name), format!("{}.bias.pcit", l.name));
            l.weight.save(dir.join(&wf))?;
            l.bias.save(dir.join(&bf))?;
            layers.push(ManifestLayer {
                name: l.name.clone(),
                weight_shape: l.weight.shape().to_vec(),
                bias_shape: l.bias.shape().to_vec(),
                weight_file: wf,
                bias_file: bf,
            });
        }
        let manifest = Manifest {
            config: self.config,
            layers,
            finetune_subset: finetune_subset(&self.config),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        manifest.config.validate()?;
        let layout = manifest.config.layout();
        if layout.len() != manifest.layers.len() {
            return Err(Error::format("network manifest", "layer count does not match config"));
        }
        let mut layers = Vec::new();
        for ((name, ci, co, _), ml) in layout.into_iter().zip(manifest.layers) {
            let weight = Tensor::load(dir.join(&ml.weight_file))?;
            let bias = Tensor::load(dir.join(&ml.bias_file))?;
            if ml.name != name
                || weight.shape() != [co, ci, KERNEL, KERNEL]
                || bias.shape() != [co]
                || ml.weight_shape != weight.shape()
                || ml.bias_shape != bias.shape()
            {
                return Err(Error::format("network manifest", format!("layer {} does not match config", ml.name)));
            }
            layers.push(ConvLayer { name, weight, bias });
        }
        Ok(Self {
            config: manifest.config,
            layers,
        })
    }
}
