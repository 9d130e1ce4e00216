//! Speaker-distinguishable CTC (SD-CTC) for multi-talker sequence
//! transduction, together with serialized output training, a toy
//! encoder/decoder trainer, beam-search rescoring and cpWER evaluation.

pub mod benchmark;
pub mod check;
pub mod ctc;
pub mod decode;
pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod model;
pub mod sdctc;
pub mod sot;
pub mod synth;
pub mod vocab;

pub use error::{Error, Result};
pub use grid::{FeatureSequence, LossBreakdown, SpeakerPosteriorGrid, TokenPosteriorGrid};
pub use sot::SotSequence;
pub use vocab::{SpeakerInventory, Transcript, Vocabulary};
