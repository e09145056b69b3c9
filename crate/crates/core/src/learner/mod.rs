//! Momentum-contrastive training with three projection sub-spaces.

mod checkpoint;
mod head;
mod loss;
mod queue;
mod state;
mod train;

pub use head::ProjectionHead;
pub use loss::{info_nce, nce_from_logits, seco_loss, seco_loss_with_grad, SecoLoss, SubspaceEmbeddings};
pub use queue::EmbeddingQueue;
pub use state::{lr_at, LearnerConfig, SecoState, StepMetrics, TrainConfig};
pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, TensorEntry};
pub use train::{latest_checkpoint, pretrain, steps_per_epoch, PretrainOptions, PretrainOutcome, FINAL_CHECKPOINT, LOG_HEADER, TRAIN_LOG};
