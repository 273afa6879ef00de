//! Few-shot learning on graphs with contrastively pre-trained,
//! self-distilled GCN encoders.
//!
//! The pipeline is: [`pretrain`] an online/target GCN pair on unlabeled
//! graph views, [`distill`] the result into a fresh student, meta-train the
//! student with first-order MAML over prototypical episodes ([`fewshot`]),
//! and optionally measure per-layer discarded information ([`infoprobe`]).
//! [`pipeline`] wires the stages together behind a serializable config.

pub mod augment;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod fewshot;
pub mod graph;
pub mod infoprobe;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
