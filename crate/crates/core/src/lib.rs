//! Bilateral-grid pixel-adaptive MLP image enhancement.
//!
//! Two bilateral grids store the parameters of a per-pixel 3-8-3 MLP. Each
//! pixel reads its own weights out of the grids by trilinear slicing, steered
//! by learned guidance maps. With grid decomposition the parameter vector of
//! a cell is split into per-category subgrids, and each subgrid is sliced
//! with its own guidance channel.
//!
//! Module map:
//!
//! - [`imaging`]: images, PNG I/O, resampling, pixel (un)shuffle
//! - [`grid`]: geometry, slicing forward/backward, unroll, decomposition, `BPG1` files
//! - [`guidance`]: pointwise guidance networks
//! - [`transform`]: affine and MLP application, the full pipeline and its backward pass
//! - [`producer`]: identity grids and the small convolutional grid producer
//! - [`container`]: the `BPT1` named-tensor file
//! - [`loss`], [`optim`], [`gradcheck`], [`train`]: losses, Adam, schedules, checking, toy training
//! - [`metrics`]: PSNR, SSIM, CIE76 ΔE
//! - [`cli`]: the `bpam` command-line front end
//!
//! Every numeric type is generic over [`Real`] (`f32` or `f64`). Inference and
//! training use `f32`; gradient checking uses `f64`.
//!
//! Data-parallel kernels use rayon when the `parallel` feature is enabled
//! (default). Reductions use a fixed partition of the work, so results are
//! bit-identical for any thread count.

pub mod cli;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod guidance;
pub mod imaging;
pub mod layout;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod producer;
pub mod real;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
pub use grid::{BilateralGrid, GridGeometry, SubgridRole, SubgridSet};
pub use guidance::GuidanceNet;
pub use imaging::Image;
pub use real::Real;
pub use transform::{Pipeline, PipelineConfig, TransformMode};
