//! RGB-D 3D object detection with a YOLO-style head that reshapes a 2D
//! feature map into an S×S×S detection grid.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense 4D tensors, conv/activation kernels
//!   and a reverse-mode tape.
//! - [`geometry`]: axis-aligned boxes, 2D/3D IoU and greedy NMS.
//! - [`grid`]: encoding ground truth into the grid and decoding raw output.
//! - [`net`]: the backbone/head topology and the channel-to-depth split.
//! - [`loss`]: the five-term sum-of-squares detection loss.
//! - [`checkpoint`]: versioned binary weight files.
//! - [`dataset`] and [`ply`]: sample directories, synthetic scenes, PLY export.
//! - [`optim`], [`train`], [`eval`], [`bench`]: Adam, the training loop,
//!   IoU evaluation and timing.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod loss;
pub mod net;
pub mod optim;
pub mod ply;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use checkpoint::Checkpoint;
pub use dataset::{Sample, SceneSpec};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use geometry::{iou2d, iou3d, nms3d, Box3D, NmsConfig};
pub use grid::{CellPrediction, GridSpec, TargetGrid};
pub use loss::{LossBreakdown, LossConfig};
pub use net::{NetConfig, Network, Preset};
pub use optim::{Adam, AdamConfig};
pub use ply::Intrinsics;
pub use tensor::{ConvParams, Shape4, Tensor4};
pub use train::{TrainConfig, Trainer};
