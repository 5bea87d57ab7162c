//! A small post-LN transformer trained with masked-token prediction on a
//! synthetic tagged corpus, with hooks to read and project every layer.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod model;
pub mod planted;
pub mod layerwise;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use corpus::{build_synthetic_corpus, GrammarConfig, SyntheticCorpus, Vocab};
pub use error::{EncoderError, Result};
pub use model::{Activation, EncoderConfig, LayeredEncoder};
pub use train::{train_toy_mlm, TrainConfig, TrainReport};
