//! Dice, feature Fréchet distance and the evaluation protocols.

mod dice;
mod fid;
pub mod linalg;
mod protocols;
mod report;

pub use dice::{dataset_dice, dice, dice_binary, mean_foreground_dice, per_class_dice};
pub use fid::{feature_fid, fid_from_gaussians, tensor_rows, Gaussian, NEGATIVE_EIGEN_TOLERANCE};
pub use protocols::{
    eval_empty_mask, eval_faithfulness, eval_fid, eval_quality, organ_found_fraction, segment_all,
    stack_images, DiffusionGenerator, ImageGenerator, NoiseGenerator, OracleGenerator, QualityRun,
    FID_NOTE,
};
pub use report::EvalReport;
