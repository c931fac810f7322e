//! Dataset manifest: which image files belong to which camera and time
//! step, the camera files, the measurement volume, and optional ground
//! truth references. Paths are relative to the manifest location.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geometry::Box3;
use crate::motion::MotionGrid;
use crate::scene::{ImageSet, ParticleSet};
use crate::synth::AnalyticFlow;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestTruth {
    pub particles_t0: PathBuf,
    pub particles_t1: Option<PathBuf>,
    pub flow: Option<PathBuf>,
    /// The analytic flow the dataset was generated from, when applicable.
    pub flow_kind: Option<AnalyticFlow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub omega: Box3,
    pub cameras: Vec<PathBuf>,
    pub images_t0: Vec<PathBuf>,
    pub images_t1: Vec<PathBuf>,
    /// Blob scale the images were rendered with, if known.
    pub sigma: Option<f64>,
    pub seed: Option<u64>,
    pub ppp: Option<f64>,
    pub truth: Option<ManifestTruth>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::file_format(path.display().to_string(), e.to_string()))?;
    if m.cameras.len() != m.images_t0.len() || m.cameras.len() != m.images_t1.len() {
        return Err(Error::file_format(
            path.display().to_string(),
            format!(
                "{} cameras but {}/{} images at t0/t1",
                m.cameras.len(),
                m.images_t0.len(),
                m.images_t1.len()
            ),
        ));
    }
    if m.cameras.is_empty() {
        return Err(Error::file_format(path.display().to_string(), "no cameras listed"));
    }
    Ok(m)
}

/// Everything a reconstruction run needs, loaded and validated.
pub struct LoadedDataset {
    pub manifest: Manifest,
    pub cameras: Vec<Camera>,
    pub images: ImageSet,
    pub truth_particles: Option<ParticleSet>,
    pub truth_flow: Option<MotionGrid>,
}

/// Load and validate a dataset from its manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &PathBuf| -> PathBuf {
        if p.is_absolute() {
            p.clone()
        } else {
            base.join(p)
        }
    };
    let cameras: Vec<Camera> = manifest
        .cameras
        .iter()
        .map(|p| super::load_camera(&resolve(p)))
        .collect::<Result<_>>()?;
    let t0 = manifest
        .images_t0
        .iter()
        .map(|p| super::load_pfm(&resolve(p)))
        .collect::<Result<Vec<_>>>()?;
    let t1 = manifest
        .images_t1
        .iter()
        .map(|p| super::load_pfm(&resolve(p)))
        .collect::<Result<Vec<_>>>()?;
    let images = ImageSet::new(t0, t1)?;
    let truth_particles = match &manifest.truth {
        Some(t) => Some(super::load_particles_csv(&resolve(&t.particles_t0))?),
        None => None,
    };
    let truth_flow = match &manifest.truth {
        Some(ManifestTruth { flow: Some(f), .. }) => Some(super::load_flow_volume(&resolve(f))?),
        _ => None,
    };
    Ok(LoadedDataset { manifest, cameras, images, truth_particles, truth_flow })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn mismatched_image_counts_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = Manifest {
            omega: Box3::from_dims(10.0, 10.0, 10.0),
            cameras: vec!["a.json".into(), "b.json".into()],
            images_t0: vec!["a0.pfm".into()],
            images_t1: vec!["a1.pfm".into(), "b1.pfm".into()],
            sigma: None,
            seed: None,
            ppp: None,
            truth: None,
        };
        m.save(&path).unwrap();
        assert!(load_manifest(&path).is_err());
    }
}
