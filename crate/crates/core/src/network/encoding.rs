//! Conversions between signals, maps and network tensors.
//!
//! Output channel layout: `[|W|, ∠W, |F|, ∠F, f·ΔTE, R2*·ΔTE]` with the
//! magnitudes relative to the normalisation scale of the input.

use num_complex::Complex64;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{AcquisitionParams, MultiEchoSignal, ParameterMaps};
use crate::network::config::{InputEncoding, OUT_CHANNELS};

/// Divides the signal by its largest first-echo magnitude. Returns the
/// normalised signal and the scale (1 for an all-zero signal).
pub fn normalize(signal: &MultiEchoSignal) -> (MultiEchoSignal, f64) {
    let m = signal.max_first_echo();
    let scale = if m > 0.0 { m } else { 1.0 };
    let data = signal.data.iter().map(|z| z / scale).collect();
    (MultiEchoSignal { data, ..signal.clone() }, scale)
}

fn plane(signal: &MultiEchoSignal) -> Result<(usize, usize)> {
    let g = signal.grid();
    if g.slices != 1 {
        return Err(Error::Geometry(format!("expected a single slice, got {} slices", g.slices)));
    }
    Ok((g.rows, g.cols))
}

/// `[2N, h, w]` network input of one slice.
pub fn encode_input(signal: &MultiEchoSignal, encoding: InputEncoding) -> Result<Tensor> {
    let (h, w) = plane(signal)?;
    let n = signal.num_echoes();
    let hw = h * w;
    let mut data = vec![0.0; 2 * n * hw];
    for v in 0..hw {
        for (j, z) in signal.voxel(v).iter().enumerate() {
            let (a, b) = match encoding {
                InputEncoding::MagPhase => (z.norm(), z.arg()),
                InputEncoding::RealImag => (z.re, z.im),
            };
            data[j * hw + v] = a;
            data[(n + j) * hw + v] = b;
        }
    }
    Tensor::new(vec![2 * n, h, w], data)
}

/// Inverse of [`encode_input`].
pub fn decode_input(t: &Tensor, encoding: InputEncoding, params: &AcquisitionParams) -> Result<MultiEchoSignal> {
    let n = params.num_echoes();
    let (h, w) = match t.shape.as_slice() {
        &[c, h, w] if c == 2 * n => (h, w),
        s => return Err(Error::Geometry(format!("input tensor {s:?} does not hold {n} echoes"))),
    };
    let hw = h * w;
    let mut data = Vec::with_capacity(n * hw);
    for v in 0..hw {
        for j in 0..n {
            let (a, b) = (t.data[j * hw + v], t.data[(n + j) * hw + v]);
            data.push(match encoding {
                InputEncoding::MagPhase => Complex64::from_polar(a, b),
                InputEncoding::RealImag => Complex64::new(a, b),
            });
        }
    }
    MultiEchoSignal::new(data, params.with_grid(crate::model::GridShape::plane(h, w)))
}

/// `[6, h, w]` channels representing `maps` of a single slice.
pub fn maps_to_channels(maps: &ParameterMaps, scale: f64, echo_spacing: f64) -> Result<Tensor> {
    maps.check()?;
    let g = maps.grid;
    if g.slices != 1 {
        return Err(Error::Geometry("channel maps are built per slice".into()));
    }
    let hw = g.rows * g.cols;
    let mut data = vec![0.0; OUT_CHANNELS * hw];
    for v in 0..hw {
        data[v] = maps.water[v].norm() / scale;
        data[hw + v] = maps.water[v].arg();
        data[2 * hw + v] = maps.fat[v].norm() / scale;
        data[3 * hw + v] = maps.fat[v].arg();
        data[4 * hw + v] = maps.field_hz[v] * echo_spacing;
        data[5 * hw + v] = maps.r2star[v] * echo_spacing;
    }
    Tensor::new(vec![OUT_CHANNELS, g.rows, g.cols], data)
}

/// Maps from `[6, h, w]` network output. R2* is clamped at zero.
pub fn decode_output(out: &Tensor, scale: f64, echo_spacing: f64) -> Result<ParameterMaps> {
    let (h, w) = match out.shape.as_slice() {
        &[OUT_CHANNELS, h, w] => (h, w),
        s => return Err(Error::Geometry(format!("network output {s:?} is not [6, h, w]"))),
    };
    let hw = h * w;
    let d = &out.data;
    let mut maps = ParameterMaps::zeros(crate::model::GridShape::plane(h, w));
    for v in 0..hw {
        maps.water[v] = Complex64::from_polar(d[v] * scale, d[hw + v]);
        maps.fat[v] = Complex64::from_polar(d[2 * hw + v] * scale, d[3 * hw + v]);
        maps.field_hz[v] = d[4 * hw + v] / echo_spacing;
        maps.r2star[v] = (d[5 * hw + v] / echo_spacing).max(0.0);
    }
    Ok(maps)
}

/// Stacks `[c, h, w]` tensors into `[batch, c, h, w]`.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::InvalidInput("nothing to stack".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(&first.shape);
    let mut data = Vec::with_capacity(items.len() * first.len());
    for t in items {
        if t.shape != first.shape {
            return Err(Error::Geometry(format!("cannot stack {:?} with {:?}", t.shape, first.shape)));
        }
        data.extend_from_slice(&t.data);
    }
    Tensor::new(shape, data)
}

/// Item `i` of a `[batch, c, h, w]` tensor as `[c, h, w]`.
pub fn unstack(t: &Tensor, i: usize) -> Result<Tensor> {
    let [b, c, h, w] = t.dims4()?;
    if i >= b {
        return Err(Error::Geometry(format!("batch index {i} out of range 0..{b}")));
    }
    let n = c * h * w;
    Tensor::new(vec![c, h, w], t.data[i * n..(i + 1) * n].to_vec())
}
