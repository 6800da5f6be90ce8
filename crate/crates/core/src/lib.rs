pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod finetune;
pub mod forward;
pub mod io;
pub mod masks;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod otf;
pub mod recon;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use finetune::{FinetuneConfig, FinetuneMode, TimingReport};
pub use forward::{MeasurementSet, NoiseConfig, NoiseConvention};
pub use masks::MaskSet;
pub use network::{UNetConfig, UNetParams};
pub use otf::{OtfPerturbation, RegionSpec, SparseOtf};
pub use recon::{GiVariant, TvConfig};
pub use train::{TrainConfig, TrainReport};
pub use tensor::Tensor;
