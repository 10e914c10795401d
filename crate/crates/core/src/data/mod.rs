//! Manifests, PGM images, preprocessing, patient-level splits, the
//! synthetic generator and mini-batching.

pub mod batch;
pub mod manifest;
pub mod pgm;
pub mod preprocess;
pub mod split;
pub mod synthetic;

pub use batch::{BatchIter, Dataset, LabeledBatch};
pub use manifest::{load_manifest, Manifest, Record};
pub use pgm::GrayImage;
pub use preprocess::PreprocessConfig;
pub use split::{split_from_lists, split_patient_level, split_three};
pub use synthetic::{generate_synthetic, SyntheticSpec};

/// Finding labels in their fixed column order.
pub const LABELS: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural_Thickening",
    "Hernia",
];
