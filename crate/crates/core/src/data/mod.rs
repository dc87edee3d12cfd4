//! Manifest ingestion, image preprocessing, splitting, dataset statistics
//! and the synthetic corpus generator.

mod manifest;
mod preprocess;
mod stats;
mod synthetic;

pub use manifest::{
    assign_split, load_manifest, LoadReport, Manifest, ManifestSchema, ScreenSample, Split, MAX_RATING, MIN_RATING,
};
pub use preprocess::{preprocess_batch, preprocess_image, preprocess_path, NORM_MEAN, NORM_STD};
pub use stats::{dataset_stats, DatasetStats, HistogramBin};
pub use synthetic::{generate_synthetic, true_rating, SyntheticConfig, SyntheticFeatures, SyntheticSample};
