//! Training loops for the diffusion models and the auxiliary segmenter,
//! and the checkpoint file format.

mod checkpoint;
mod diffusion;
mod segmenter;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use diffusion::{
    epoch_means, loss_tsv, pattern_histogram_tsv, train_diffusion, DiffusionRun, LossRecord,
    StepObserver, StepView, TrainConfig, TrainMode,
};
pub use segmenter::{
    segment, segment_with_features, segmentation_loss, train_segmenter, SegPair, SegmenterConfig,
    SegmenterRun,
};
