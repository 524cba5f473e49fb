//! Small trainable embedding model, Adam, synthetic data and the training loop.

pub mod adam;
pub mod model;
pub mod synth;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use model::{Affine, EmbeddingModel, ForwardCache, ModelGrads};
pub use synth::{generate_synthetic, SyntheticSpec, IR_CAMERAS, RGB_CAMERAS};
pub use train::{
    evaluate_batch, export_embeddings, init_model, train, write_history, BatchEvaluation,
    HistoryRow, LossKind, TrainConfig, TrainOutcome, TrainedModel,
};
