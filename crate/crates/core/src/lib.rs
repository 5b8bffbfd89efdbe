//! GlobalMind hyperspectral change detection: a small reverse-mode autodiff
//! engine, global axial segmentation attention, the siamese change network,
//! training, evaluation, raster formats and tiling.

pub mod bench;
pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gas;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod network;
pub mod params;
pub mod parallel;
pub mod raster;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tiling;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use gas::{AttentionMode, AxialLayout};
pub use network::{predict_binary, ChangeProbabilityPair, GasCombo, GlobalMindModel, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use raster::{BinaryMap, HyperCube, LabelRaster};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
pub use train::{train, TrainConfig};
