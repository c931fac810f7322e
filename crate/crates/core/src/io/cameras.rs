//! Camera files: one JSON document per camera with a model tag and a flat
//! row-major coefficient array (12 numbers for pinhole, 38 for polynomial;
//! polynomial rows are (u, v) pairs per monomial).

use crate::camera::{Camera, PinholeCamera, PolynomialCamera, SOLOFF_TERMS};
use crate::error::{Error, Result};
use nalgebra::Matrix3x4;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct CameraFile {
    model: String,
    coeffs: Vec<f64>,
}

pub fn save_camera(path: &Path, camera: &Camera) -> Result<()> {
    let file = match camera {
        Camera::Pinhole(c) => CameraFile {
            model: "pinhole".into(),
            coeffs: (0..3).flat_map(|r| (0..4).map(move |col| c.p[(r, col)])).collect(),
        },
        Camera::Polynomial(c) => CameraFile {
            model: "polynomial".into(),
            coeffs: c.a.iter().flat_map(|pair| pair.iter().copied()).collect(),
        },
    };
    let json = serde_json::to_string_pretty(&file).expect("camera serializes");
    fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_camera(path: &Path) -> Result<Camera> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: CameraFile = serde_json::from_str(&text)
        .map_err(|e| Error::file_format(path.display().to_string(), e.to_string()))?;
    match file.model.as_str() {
        "pinhole" => {
            if file.coeffs.len() != 12 {
                return Err(Error::file_format(
                    path.display().to_string(),
                    format!("pinhole camera needs 12 coefficients, got {}", file.coeffs.len()),
                ));
            }
            let p = Matrix3x4::from_row_slice(&file.coeffs);
            if p.row(2).iter().all(|&v| v == 0.0) {
                return Err(Error::file_format(
                    path.display().to_string(),
                    "pinhole bottom row is zero",
                ));
            }
            Ok(Camera::Pinhole(PinholeCamera::new(p)))
        }
        "polynomial" => {
            if file.coeffs.len() != 2 * SOLOFF_TERMS {
                return Err(Error::file_format(
                    path.display().to_string(),
                    format!(
                        "polynomial camera needs {} coefficients, got {}",
                        2 * SOLOFF_TERMS,
                        file.coeffs.len()
                    ),
                ));
            }
            let mut a = [[0.0; 2]; SOLOFF_TERMS];
            for i in 0..SOLOFF_TERMS {
                a[i] = [file.coeffs[2 * i], file.coeffs[2 * i + 1]];
            }
            Ok(Camera::Polynomial(PolynomialCamera::new(a)))
        }
        other => Err(Error::file_format(
            path.display().to_string(),
            format!("unknown camera model {other:?}"),
        )),
    }
}
