//! Particle lists as CSV `x,y,z,c` with a one-line header; candidate dumps
//! add the reprojection error column.

use crate::error::{Error, Result};
use crate::scene::ParticleSet;
use crate::triangulate::Candidate;
use nalgebra::Vector3;
use std::path::Path;

pub fn save_particles_csv(path: &Path, particles: &ParticleSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::file_format(path.display().to_string(), e.to_string()))?;
    w.write_record(["x", "y", "z", "c"])
        .map_err(|e| Error::file_format(path.display().to_string(), e.to_string()))?;
    for i in 0..particles.len() {
        let p = particles.positions[i];
        w.write_record([
            p.x.to_string(),
            p.y.to_string(),
            p.z.to_string(),
            particles.intensities[i].to_string(),
        ])
        .map_err(|e| Error::file_format(path.display().to_string(), e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_particles_csv(path: &Path) -> Result<ParticleSet> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::file_format(path.display().to_string(), e.to_string()))?;
    let mut out = ParticleSet::empty();
    for record in r.records() {
        let record =
            record.map_err(|e| Error::file_format(path.display().to_string(), e.to_string()))?;
        if record.len() < 4 {
            return Err(Error::file_format(
                path.display().to_string(),
                format!("need 4 columns, got {}", record.len()),
            ));
        }
        let field = |i: usize| -> Result<f64> {
            record[i].trim().parse().map_err(|_| {
                Error::file_format(
                    path.display().to_string(),
                    format!("bad number {:?}", &record[i]),
                )
            })
        };
        out.push(Vector3::new(field(0)?, field(1)?, field(2)?), field(3)?);
    }
    Ok(out)
}

/// Debug dump of triangulated candidates: `x,y,z,c,err`.
pub fn save_candidates_csv(path: &Path, candidates: &[Candidate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::file_format(path.display().to_string(), e.to_string()))?;
    w.write_record(["x", "y", "z", "c", "err"])
        .map_err(|e| Error::file_format(path.display().to_string(), e.to_string()))?;
    for c in candidates {
        w.write_record([
            c.position.x.to_string(),
            c.position.y.to_string(),
            c.position.z.to_string(),
            c.intensity.to_string(),
            c.error.to_string(),
        ])
        .map_err(|e| Error::file_format(path.display().to_string(), e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}
