//! `.wfv` volume files.
//!
//! A file is one line of JSON header, a `\n`, then little-endian `f32`
//! samples. Complex volumes store interleaved `(re, im)` pairs. Samples are
//! row-major over the header `shape` with the echo axis (when present) last.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AcquisitionParams, GridShape, MultiEchoSignal, ParameterMaps, DEFAULT_MASK_THRESHOLD};

pub const MAGIC: &str = "WFV1";
pub const AXIS_ORDER: &str = "row-major, echo-fastest";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    Real,
    #[serde(rename = "c64-interleaved")]
    Complex,
}

impl Dtype {
    fn floats_per_sample(self) -> usize {
        match self {
            Dtype::Real => 1,
            Dtype::Complex => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WfvHeader {
    pub magic: String,
    /// `[rows, cols, slices]` for maps, `[rows, cols, slices, echoes]` for signals.
    pub shape: Vec<usize>,
    pub axis_order: String,
    pub dtype: Dtype,
    pub echo_times_s: Vec<f64>,
    pub fat_shift_hz: f64,
    pub mask_threshold: f64,
}

impl WfvHeader {
    pub fn sample_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn grid(&self) -> Result<GridShape> {
        match self.shape.as_slice() {
            [r, c, s] | [r, c, s, _] => Ok(GridShape::new(*r, *c, *s)),
            other => Err(Error::format(format!("shape must have 3 or 4 axes, got {other:?}"))),
        }
    }

    pub fn params(&self) -> Result<AcquisitionParams> {
        AcquisitionParams::new(self.echo_times_s.clone(), self.fat_shift_hz, self.grid()?)
    }

    fn validate(&self) -> Result<()> {
        if self.magic != MAGIC {
            return Err(Error::format(format!("bad magic {:?}", self.magic)));
        }
        if self.axis_order != AXIS_ORDER {
            return Err(Error::format(format!("unsupported axis order {:?}", self.axis_order)));
        }
        self.grid()?;
        Ok(())
    }
}

/// A header plus its raw samples, exactly as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct WfvVolume {
    pub header: WfvHeader,
    pub data: Vec<f32>,
}

impl WfvVolume {
    fn new(shape: Vec<usize>, dtype: Dtype, params: &AcquisitionParams, mask_threshold: f64, data: Vec<f32>) -> Self {
        let header = WfvHeader {
            magic: MAGIC.into(),
            shape,
            axis_order: AXIS_ORDER.into(),
            dtype,
            echo_times_s: params.echo_times.clone(),
            fat_shift_hz: params.fat_shift_hz,
            mask_threshold,
        };
        Self { header, data }
    }

    pub fn from_signal(signal: &MultiEchoSignal) -> Self {
        let g = signal.grid();
        let shape = vec![g.rows, g.cols, g.slices, signal.num_echoes()];
        let data = interleave(&signal.data);
        Self::new(shape, Dtype::Complex, &signal.params, signal.mask_threshold, data)
    }

    pub fn from_real(values: &[f64], params: &AcquisitionParams) -> Self {
        let g = params.grid;
        let data = values.iter().map(|&x| x as f32).collect();
        Self::new(vec![g.rows, g.cols, g.slices], Dtype::Real, params, DEFAULT_MASK_THRESHOLD, data)
    }

    pub fn from_complex(values: &[Complex64], params: &AcquisitionParams) -> Self {
        let g = params.grid;
        Self::new(vec![g.rows, g.cols, g.slices], Dtype::Complex, params, DEFAULT_MASK_THRESHOLD, interleave(values))
    }

    pub fn to_signal(&self) -> Result<MultiEchoSignal> {
        let params = self.header.params()?;
        if self.header.dtype != Dtype::Complex || self.header.shape.len() != 4 {
            return Err(Error::format("a signal needs a 4-axis complex volume"));
        }
        if self.header.shape[3] != params.num_echoes() {
            return Err(Error::format(format!(
                "echo axis has {} entries but {} echo times are listed",
                self.header.shape[3],
                params.num_echoes()
            )));
        }
        let mut signal = MultiEchoSignal::new(deinterleave(&self.data), params)?;
        signal.mask_threshold = self.header.mask_threshold;
        Ok(signal)
    }

    pub fn to_real(&self) -> Result<Vec<f64>> {
        if self.header.dtype != Dtype::Real || self.header.shape.len() != 3 {
            return Err(Error::format("expected a 3-axis real volume"));
        }
        Ok(self.data.iter().map(|&x| x as f64).collect())
    }

    pub fn to_complex(&self) -> Result<Vec<Complex64>> {
        if self.header.dtype != Dtype::Complex || self.header.shape.len() != 3 {
            return Err(Error::format("expected a 3-axis complex volume"));
        }
        Ok(deinterleave(&self.data))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        out.reserve(self.data.len() * 4);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("missing header terminator"))?;
        let header: WfvHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format(format!("header: {e}")))?;
        header.validate()?;
        let payload = &bytes[nl + 1..];
        let expected = header.sample_count() * header.dtype.floats_per_sample() * 4;
        if payload.len() != expected {
            return Err(Error::format(format!("payload has {} bytes, header implies {expected}", payload.len())));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self { header, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::from(e).at(path))?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = crate::error::read_file(path)?;
        Self::from_bytes(&bytes).map_err(|e| e.at(path))
    }
}

fn interleave(values: &[Complex64]) -> Vec<f32> {
    values.iter().flat_map(|z| [z.re as f32, z.im as f32]).collect()
}

fn deinterleave(data: &[f32]) -> Vec<Complex64> {
    data.chunks_exact(2).map(|p| Complex64::new(p[0] as f64, p[1] as f64)).collect()
}

pub fn write_signal(path: &Path, signal: &MultiEchoSignal) -> Result<()> {
    WfvVolume::from_signal(signal).write(path)
}

pub fn read_signal(path: &Path) -> Result<MultiEchoSignal> {
    WfvVolume::read(path)?.to_signal().map_err(|e| e.at(path))
}

pub const MAP_FILES: [&str; 4] = ["water.wfv", "fat.wfv", "field.wfv", "r2star.wfv"];

/// Writes `water.wfv`, `fat.wfv`, `field.wfv` (Hz) and `r2star.wfv` (1/s).
pub fn write_maps(dir: &Path, maps: &ParameterMaps, params: &AcquisitionParams) -> Result<()> {
    maps.check_grid(params.grid)?;
    fs::create_dir_all(dir)?;
    WfvVolume::from_complex(&maps.water, params).write(&dir.join(MAP_FILES[0]))?;
    WfvVolume::from_complex(&maps.fat, params).write(&dir.join(MAP_FILES[1]))?;
    WfvVolume::from_real(&maps.field_hz, params).write(&dir.join(MAP_FILES[2]))?;
    WfvVolume::from_real(&maps.r2star, params).write(&dir.join(MAP_FILES[3]))?;
    Ok(())
}

pub fn read_maps(dir: &Path) -> Result<(ParameterMaps, AcquisitionParams)> {
    let load = |name: &str| WfvVolume::read(&dir.join(name));
    let water = load(MAP_FILES[0])?;
    let params = water.header.params()?;
    let maps = ParameterMaps {
        grid: params.grid,
        water: water.to_complex()?,
        fat: load(MAP_FILES[1])?.to_complex()?,
        field_hz: load(MAP_FILES[2])?.to_real()?,
        r2star: load(MAP_FILES[3])?.to_real()?,
    };
    maps.check()?;
    Ok((maps, params))
}
