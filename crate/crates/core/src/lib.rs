//! Point-cloud convolution built on dynamic per-kernel voxelization.
//!
//! Every convolution site is a sampling centroid chosen by farthest point
//! sampling. Its k-NN neighborhood is fitted into a small cubic grid whose
//! half-side adapts to the local point density, each grid cell max-pools
//! the features of the points falling into it, and the resulting `S³`
//! grids are convolved with p4/p4m group-transformed kernel banks.
//!
//! Module map:
//!
//! * [`geom`] – point clouds, FPS, exact k-NN, dilated selection, augmentation.
//! * [`voxelizer`] – the dynamic voxelization operator and its backward pass.
//! * [`groups`] – p4 / p4m symmetry groups acting on grid cells and orientations.
//! * [`nn`] – tensors, the reverse-mode tape, group convolution, checkpoints.
//! * [`model`] – network configuration, assembly, parameter/FLOP accounting.
//! * [`train`] – ADAM, learning-rate schedule, training loop and metrics.
//! * [`data`] – loaders, binary dataset container, tiling, synthetic sets.
//! * [`cli`] – the `dvconv` command-line front end.

pub mod cli;
pub mod data;
pub mod error;
pub mod geom;
pub mod groups;
pub mod model;
pub mod nn;
pub mod rng;
pub mod train;
pub mod voxelizer;

pub use error::{Error, Result};
pub use geom::{Labels, PointCloud};
pub use groups::{Group, GroupElement, GroupKind};
pub use model::{Network, NetworkConfig};
