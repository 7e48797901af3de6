//! Procedural "anatomy phantoms": an elliptical organ containing thin
//! vessels and blobby dense tissue, rendered with smooth illumination and
//! pixel noise, plus PGM persistence and split bookkeeping.

mod dataset;
mod generate;
pub mod io;

pub use dataset::{gen_dataset, Dataset, Split, SplitRatios, MANIFEST_FILE};
pub use generate::{
    gen_sample, Band, LabeledSample, PhantomConfig, BACKGROUND, DENSE, MAX_ORGAN_RETRIES, ORGAN,
    VESSEL,
};
