//! Small writers for the on-disk artifacts: PGM images, raw float sidecars, text.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid2;

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Binary (P5) 8-bit PGM. Values are clamped to [0, 1] and scaled to 0..=255.
pub fn write_pgm(path: &Path, map: &Grid2<f64>) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", map.cols(), map.rows()).into_bytes();
    bytes.extend(
        map.as_slice()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    write_bytes(path, &bytes)
}

/// Read back a binary PGM written by [`write_pgm`] as values in [0, 1].
pub fn read_pgm(path: &Path) -> Result<Grid2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("only 8-bit binary PGM is supported"));
    }
    let cols: usize = fields[1].parse().map_err(|_| bad("bad PGM width"))?;
    let rows: usize = fields[2].parse().map_err(|_| bad("bad PGM height"))?;
    let payload = bytes.get(pos..pos + rows * cols).ok_or_else(|| bad("truncated PGM data"))?;
    Ok(Grid2::from_vec(
        rows,
        cols,
        payload.iter().map(|&b| b as f64 / 255.0).collect(),
    ))
}

/// Little-endian 32-bit float sidecar, row-major, no header.
pub fn write_f32_raw(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn read_f32_raw(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, "raw float file length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Buffered line writer that attaches the path to every I/O error.
pub struct TextFile<'a> {
    path: &'a Path,
    inner: BufWriter<fs::File>,
}

impl<'a> TextFile<'a> {
    pub fn create(path: &'a Path) -> Result<Self> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path,
            inner: BufWriter::new(f),
        })
    }

    pub fn line(&mut self, text: &str) -> Result<()> {
        self.inner
            .write_all(text.as_bytes())
            .and_then(|_| self.inner.write_all(b"\n"))
            .map_err(|e| Error::io(self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(self.path, e))
    }
}
