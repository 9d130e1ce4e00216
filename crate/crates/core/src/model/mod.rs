//! Toy encoder with token and speaker heads, attention decoder, and the
//! two-stage multi-task trainer.

pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod params;
pub mod train;

pub use decoder::{decoder_backward, decoder_forward, greedy_decode, DecoderOutput, DecoderState};
pub use encoder::{encoder_backward, encoder_forward, featurize, EncoderOutput, SpeakerMode};
pub use params::{Affine, ModelConfig, ParamGroup, Parameters};
pub use train::{
    batch_gradient, batch_loss, ctc_feasible, ctc_token_accuracy, run_training, speaker_mode, train_step, validation_cpwer,
    AdamState, BatchMetrics, DataSource, MetricsRow, StagePlan, TrainConfig, TrainedModel, METRICS_HEADER,
};
pub use checkpoint::{Checkpoint, TensorRecord, CHECKPOINT_VERSION};
