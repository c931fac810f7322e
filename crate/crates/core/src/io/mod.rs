//! File formats: PFM and 16-bit PGM images, particle CSV lists, raw flow
//! volumes, camera files, dataset manifests, and run reports.

mod cameras;
mod flowvol;
mod images;
mod manifest;
mod particles;
mod report;

pub use cameras::{load_camera, save_camera};
pub use flowvol::{load_flow_volume, save_flow_volume};
pub use images::{load_pfm, load_pgm16, save_pfm, save_pgm16};
pub use manifest::{load_dataset, load_manifest, Manifest, ManifestTruth};
pub use particles::{
    load_particles_csv, save_candidates_csv, save_particles_csv,
};
pub use report::{save_convergence_csv, save_run_report};
