//! Dense networks trained with Adam on softmax cross-entropy plus an L1
//! penalty on kernel weights.

mod adam;
mod checkpoint;
mod gradcheck;
mod model;
mod train;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CHECKPOINT_EXTENSION, CHECKPOINT_MAGIC};
pub use gradcheck::grad_check;
pub use model::{
    init_model, Activation, Dense, ForwardRecord, Gradients, Init, MlpModel, MlpSpec,
};
pub use train::{evaluate, predict_chunked, train, Batch, EpochStats, TrainConfig, TrainHistory};
