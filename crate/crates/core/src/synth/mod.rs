//! Procedural face meshes, AU rigging, rendering and dataset generation.

pub mod au;
pub mod dataset;
pub mod demographics;
pub mod mesh;
pub mod render;

pub use au::{
    integer_configurations, pspi_score, sample_au_config, ActionUnit, AuVector, MAX_PSPI, NUM_AUS,
    NUM_PSPI_CLASSES,
};
pub use dataset::{
    build_dataset, generate_identity, manifest_hash, BuildSummary, DatasetSpec, Manifest,
    ManifestRow, Sample, DATASET_META_FILE, MANIFEST_FILE,
};
pub use demographics::{
    marginals, sample_demographics, AgeGroup, DemographicConfig, DemographicProfile, Ethnicity,
    Gender,
};
pub use mesh::{apply_au_rig, make_identity_mesh, max_displacement, FaceMesh};
pub use render::{render_depth, render_heatmap, render_heatmap_raw, render_rgb, View};
