//! Flow-volume files: one JSON header line (dims, spacing, "x-fastest"
//! vertex order, interleaved components) followed by the raw little-endian
//! 32-bit float coefficient block.

use crate::error::{Error, Result};
use crate::motion::MotionGrid;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct FlowHeader {
    dims: [usize; 3],
    spacing: f64,
    order: String,
    components: String,
}

pub fn save_flow_volume(path: &Path, grid: &MotionGrid) -> Result<()> {
    let header = FlowHeader {
        dims: grid.dims,
        spacing: grid.spacing,
        order: "x-fastest".into(),
        components: "interleaved".into(),
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let mut line = serde_json::to_string(&header).expect("header serializes");
    line.push('\n');
    w.write_all(line.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for &c in &grid.coeffs {
        w.write_all(&(c as f32).to_le_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn load_flow_volume(path: &Path) -> Result<MotionGrid> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let header: FlowHeader = serde_json::from_str(line.trim())
        .map_err(|e| Error::file_format(path.display().to_string(), e.to_string()))?;
    if header.order != "x-fastest" || header.components != "interleaved" {
        return Err(Error::file_format(
            path.display().to_string(),
            "unsupported layout (need x-fastest, interleaved)",
        ));
    }
    if header.dims.iter().any(|&d| d < 2) || header.spacing <= 0.0 {
        return Err(Error::file_format(path.display().to_string(), "invalid dims or spacing"));
    }
    let n = 3 * header.dims.iter().product::<usize>();
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let coeffs: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(MotionGrid { dims: header.dims, spacing: header.spacing, coeffs })
}
