//! 16-bit binary PGM export of a real map. The display window goes to a
//! sidecar `<name>.window` text file (`min <v>` / `max <v>`).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub min: f64,
    pub max: f64,
}

impl Window {
    /// Finite minimum and maximum of `values`; a flat map gets a unit-wide window.
    pub fn auto(values: &[f64]) -> Result<Self> {
        let mut it = values.iter().copied().filter(|v| v.is_finite());
        let first = it.next().ok_or_else(|| Error::InvalidInput("map has no finite values".into()))?;
        let (min, max) = it.fold((first, first), |(a, b), v| (a.min(v), b.max(v)));
        Ok(if max > min { Self { min, max } } else { Self { min, max: min + 1.0 } })
    }

    fn check(&self) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.max > self.min) {
            return Err(Error::Config(format!("invalid window [{}, {}]", self.min, self.max)));
        }
        Ok(())
    }

    /// Grey level in `0..=65535`, clipped outside the window.
    pub fn level(&self, v: f64) -> u16 {
        if v.is_nan() {
            return 0;
        }
        let t = ((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0);
        (t * 65535.0).round() as u16
    }
}

pub fn encode(values: &[f64], rows: usize, cols: usize, window: Window) -> Result<Vec<u8>> {
    window.check()?;
    if values.len() != rows * cols {
        return Err(Error::Geometry(format!("{} values for a {rows}x{cols} image", values.len())));
    }
    let mut out = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    for &v in values {
        out.extend_from_slice(&window.level(v).to_be_bytes());
    }
    Ok(out)
}

pub fn window_path(path: &Path) -> PathBuf {
    path.with_extension("window")
}

/// Writes the image and its window sidecar.
pub fn write(path: &Path, values: &[f64], rows: usize, cols: usize, window: Window) -> Result<()> {
    fs::write(path, encode(values, rows, cols, window)?)?;
    fs::write(window_path(path), format!("min {:e}\nmax {:e}\n", window.min, window.max))?;
    Ok(())
}

/// Header dimensions and grey levels of a 16-bit binary PGM.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(format!("bad PGM header field {s:?}")));
    if fields[0] != "P5" || num(&fields[3])? != 65535 {
        return Err(Error::format("not a 16-bit binary PGM"));
    }
    let (cols, rows) = (num(&fields[1])?, num(&fields[2])?);
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != 2 * rows * cols {
        return Err(Error::format(format!("PGM payload {} bytes, expected {}", body.len(), 2 * rows * cols)));
    }
    Ok((rows, cols, body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}

pub fn read_window(path: &Path) -> Result<Window> {
    let text = crate::error::read_text(&window_path(path))?;
    let mut min = None;
    let mut max = None;
    for line in text.lines() {
        match line.split_once(' ') {
            Some(("min", v)) => min = v.trim().parse().ok(),
            Some(("max", v)) => max = v.trim().parse().ok(),
            _ => {}
        }
    }
    match (min, max) {
        (Some(min), Some(max)) => Ok(Window { min, max }),
        _ => Err(Error::format("window file needs min and max").at(&window_path(path))),
    }
}
