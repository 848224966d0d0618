//! Dataset ingestion, schema declaration, encoding and cross-validation.

mod dataset;
mod schema;
mod transform;

pub use dataset::{load_dataset, split_cv, stratified_assignment, write_dataset, Dataset, Fold};
pub use schema::{FeatureKind, FeatureSpec, TabularSchema};
pub use transform::{
    fit_transform, inverse_transform, slots, EncodedDataset, FeatureTransform, FittedTransform,
    QuantileMap, Slot,
};
