//! Joint semantic segmentation and semantic edge detection trained with a
//! decoupled cross-task consistency loss, on a small self-contained
//! reverse-mode tensor engine.

pub mod checkpoint;
pub mod data;
pub mod edge;
pub mod error;
pub mod label;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use label::{LabelMap, IGNORE_LABEL};
pub use tensor::{Tape, Tensor, Var};
