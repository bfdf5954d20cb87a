//! Semi-supervised pathology patch segmentation with multimodal prototype
//! guidance: an encoder-decoder network with pluggable patch-token
//! encoders, visual and textual prototype banks, consistency training on
//! unlabeled images, metrics, and an ablation harness.

pub mod augment;
pub mod datasets;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod prototext;
pub mod protovis;
pub mod rng;
pub mod segmodel;
pub mod tensor;
pub mod tensorio;
pub mod test_util;

pub use error::{MpaError, Result};
