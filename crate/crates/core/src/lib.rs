//! Desk-scale testbed for a three-expert mixture-of-transformers action
//! model: a semantic pathway, a dorsal visual pathway with a next-frame
//! prediction objective, and an action pathway with a flow-matching head,
//! plus the synthetic world, training stages, evaluation metrics, and
//! attention-map tooling needed to study how action fine-tuning erodes
//! pretrained visual-language capability.

pub mod ckpt;
pub mod encode;
pub mod error;
pub mod eval;
pub mod heads;
pub mod layout;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod viz;
pub mod world;

pub use error::{Error, Result};
pub use tensor::{BoolMat, Buf, Dtype, Graph, Tensor, Var};
