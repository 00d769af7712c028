//! Artifact formats and dataset plumbing.

pub(crate) mod bytes;
mod manifest;
mod phantom;
mod predictions;
mod volume_file;

pub use volume_file::{decode_volume, encode_volume, read_volume, write_volume, VOLUME_MAGIC, VOLUME_VERSION};
pub use manifest::{
    load_case, stratified_split, write_phantom_dataset, DatasetManifest, ManifestEntry, Split, DEFAULT_TRAIN_FRACTION,
    MANIFEST_HEADER,
};
pub use predictions::{
    load_predictions, predictions_from_csv, predictions_to_csv, GradePrediction, Prediction, PREDICTIONS_HEADER,
};
pub use phantom::{class_counts, generate_phantom, grade_name, parse_grade, CaseRecord, PhantomSpec, TumorProfile};

#[cfg(test)]
mod tests;
