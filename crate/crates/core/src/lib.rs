//! Dynamic, information-gain weighted multimodal guidance for diffusion-based
//! image fusion, together with a synthetic test bed for its error bound.

pub mod cli;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod dig;
pub mod error;
pub mod guidance;
pub mod io;
pub mod metrics;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod theory;

pub use config::RunConfig;
pub use denoiser::{Denoiser, EmpiricalDataOracle, GaussianDataOracle, SpectralGaussianOracle, ZeroDenoiser};
pub use dig::{DigConfig, DigTrace, Distance, NoiseSharing, PatchGrid, PatchLayout};
pub use error::{Error, Result};
pub use guidance::{GuidanceWeights, ModalityStack, WeightField};
pub use sampler::{fuse, FusionConfig, FusionOutput, StepSpacing, WeightMode};
pub use schedule::{make_linear_schedule, NoiseSchedule};
pub use tensor::{ImageTensor, RngStream};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
