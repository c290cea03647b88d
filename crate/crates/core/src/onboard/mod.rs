//! Template onboarding: rendering, patch extraction, descriptor compression
//! and the database file format.

pub mod database;
pub mod format;
pub mod grid;
pub mod oracle;
pub mod pca;

pub use database::{
    build_template_database, gather_cells, DescriptorSource, OnboardConfig, TemplateDatabase, TemplateEntry,
};
pub use format::{decode_db, encode_db, load_db, save_db, RawDescriptorGrid};
pub use grid::{lift_patch_centers, valid_patch_indices, PatchGridSpec};
pub use oracle::OracleDescriptors;
pub use pca::{fit_pca, project_descriptors, PcaBasis};
