//! Automated defect triage: a weak-supervision / augmentation / rebalancing
//! data pipeline feeding label-fused transformer classifiers.
//!
//! Pipeline order is weak labeling, then adversarial augmentation, then
//! MLSMOTE rebalancing. Models are small BERT-style encoders trained from
//! scratch on top of a tape-based reverse-mode autodiff engine.

// `!(x > 0.0)` style checks deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augmentation;
pub mod balancing;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod seed;
pub mod tokenizer;
pub mod weak_supervision;

pub use corpus::{Dataset, Defect, LabelId, LabelSet, Provenance, Split, TeamLabelRegistry};
pub use error::{Error, Result};
pub use evaluation::{ConfusionCounts, MetricsReport};
pub use model::{Checkpoint, EncoderConfig, HeadConfig, HeadKind, TrainConfig};
pub use tokenizer::{EncodedInput, InputVariant, Vocab};
