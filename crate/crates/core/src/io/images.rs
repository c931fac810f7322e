//! Scalar image files: PFM (32-bit float, little-endian) and 16-bit PGM
//! with a JSON sidecar recording the linear scale.

use crate::error::{Error, Result};
use crate::scene::Image;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Write a grayscale PFM. Rows are stored bottom-up with a negative scale
/// (little-endian), per the format convention.
pub fn save_pfm(path: &Path, img: &Image) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let header = format!("Pf\n{} {}\n-1.0\n", img.width, img.height);
    w.write_all(header.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            let v = img.get(x, y) as f32;
            w.write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    Ok(())
}

pub fn load_pfm(path: &Path) -> Result<Image> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    let read_line = |r: &mut BufReader<fs::File>, line: &mut String| -> Result<String> {
        line.clear();
        r.read_line(line)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(line.trim().to_string())
    };
    let mut line = line;
    let magic = read_line(&mut r, &mut line)?;
    if magic != "Pf" {
        return Err(Error::file_format(
            path.display().to_string(),
            format!("expected grayscale PFM magic 'Pf', got {magic:?}"),
        ));
    }
    let dims = read_line(&mut r, &mut line)?;
    let mut it = dims.split_whitespace();
    let (w, h): (usize, usize) = match (it.next(), it.next()) {
        (Some(a), Some(b)) => (
            a.parse().map_err(|_| Error::file_format(path.display().to_string(), "bad width"))?,
            b.parse().map_err(|_| Error::file_format(path.display().to_string(), "bad height"))?,
        ),
        _ => return Err(Error::file_format(path.display().to_string(), "missing dimensions")),
    };
    let scale: f64 = read_line(&mut r, &mut line)?
        .parse()
        .map_err(|_| Error::file_format(path.display().to_string(), "bad scale"))?;
    let little_endian = scale < 0.0;
    let mut buf = vec![0u8; 4 * w * h];
    r.read_exact(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut img = Image::zeros(w, h);
    for (i, chunk) in buf.chunks_exact(4).enumerate() {
        let bytes: [u8; 4] = chunk.try_into().unwrap();
        let v = if little_endian {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        let (x, row) = (i % w, i / w);
        img.set(x, h - 1 - row, v as f64);
    }
    Ok(img)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct PgmSidecar {
    /// Pixel value represented by the maximum code 65535.
    scale: f64,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Write a 16-bit PGM (big-endian samples per the format) linearly scaled to
/// the image maximum; the scale lands in a `<file>.json` sidecar. Negative
/// values clamp to zero.
pub fn save_pgm16(path: &Path, img: &Image) -> Result<()> {
    let max = img.data.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let header = format!("P5\n{} {}\n65535\n", img.width, img.height);
    w.write_all(header.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for v in &img.data {
        let code = ((v / max).clamp(0.0, 1.0) * 65535.0).round() as u16;
        w.write_all(&code.to_be_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(&PgmSidecar { scale: max })
        .expect("sidecar serializes");
    fs::write(&sidecar, json).map_err(|e| Error::io(sidecar.display().to_string(), e))?;
    Ok(())
}

pub fn load_pgm16(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let text_end = {
        // header: magic, dims, maxval separated by whitespace
        let mut fields = 0;
        let mut i = 0;
        while i < bytes.len() && fields < 4 {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            fields += 1;
        }
        i + 1
    };
    let header = String::from_utf8_lossy(&bytes[..text_end.min(bytes.len())]);
    let mut it = header.split_whitespace();
    if it.next() != Some("P5") {
        return Err(Error::file_format(path.display().to_string(), "expected P5 magic"));
    }
    let parse = |s: Option<&str>, what: &str| -> Result<usize> {
        s.and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::file_format(path.display().to_string(), format!("bad {what}")))
    };
    let w = parse(it.next(), "width")?;
    let h = parse(it.next(), "height")?;
    let maxval = parse(it.next(), "maxval")?;
    if maxval != 65535 {
        return Err(Error::file_format(path.display().to_string(), "expected 16-bit PGM"));
    }
    let data = &bytes[text_end..];
    if data.len() < 2 * w * h {
        return Err(Error::file_format(path.display().to_string(), "truncated pixel data"));
    }
    let sidecar = sidecar_path(path);
    let scale = match fs::read_to_string(&sidecar) {
        Ok(text) => {
            serde_json::from_str::<PgmSidecar>(&text)
                .map_err(|e| Error::file_format(sidecar.display().to_string(), e.to_string()))?
                .scale
        }
        Err(_) => 1.0,
    };
    let mut img = Image::zeros(w, h);
    for (i, chunk) in data.chunks_exact(2).take(w * h).enumerate() {
        let code = u16::from_be_bytes([chunk[0], chunk[1]]);
        img.data[i] = code as f64 / 65535.0 * scale;
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn pfm_roundtrip(values in proptest::collection::vec(-1e6f32..1e6f32, 12)) {
            let dir = tempdir().unwrap();
            let path = dir.path().join("img.pfm");
            let img = Image::from_data(4, 3, values.iter().map(|&v| v as f64).collect());
            save_pfm(&path, &img).unwrap();
            let back = load_pfm(&path).unwrap();
            prop_assert_eq!(back.width, 4);
            prop_assert_eq!(back.height, 3);
            for (a, b) in img.data.iter().zip(&back.data) {
                prop_assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn pgm_roundtrip_quantizes_to_16_bits() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = Image::from_data(3, 2, vec![0.0, 0.25, 0.5, 0.75, 1.0, 2.0]);
        save_pgm16(&path, &img).unwrap();
        let back = load_pgm16(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 2.0 * 2.0 / 65535.0, "{a} vs {b}");
        }
    }

    #[test]
    fn pfm_rejects_color_images() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.pfm");
        std::fs::write(&path, b"PF\n2 2\n-1.0\n").unwrap();
        assert!(load_pfm(&path).is_err());
    }
}
