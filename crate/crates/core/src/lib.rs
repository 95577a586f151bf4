//! Domain adaptation for heterogeneous multi-agent BEV perception.
//!
//! Collaborators transmit feature maps produced by backbones the ego agent
//! does not control. This crate aligns them to the ego feature space with a
//! learnable resizer and a sparse cross-domain transformer, trains the
//! alignment adversarially against a domain classifier, and fuses the result
//! for detection.

pub mod adapter;
pub mod adversary;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod fax_attention;
pub mod feature_core;
pub mod fusion_head;
pub mod gradcheck;
pub mod nn;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use tensor::{Precision, Real, Tensor};
