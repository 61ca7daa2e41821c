//! Desk-scale toolkit for studying and repairing unreliable image
//! classifiers: train deliberately corrupted models (Trojan triggers,
//! spurious cues, leaked features), locate the layer most responsible via
//! attribution-guided editability scores, and rectify it with
//! budget-constrained rank-one associative-memory edits.

pub mod attrib;
pub mod autograd;
pub mod data;
pub mod editor;
pub mod error;
pub mod layers;
pub mod locate;
pub mod metrics;
pub mod model;
pub mod rectify;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{RectError, Result};
pub use model::Model;
pub use tensor::Tensor;
