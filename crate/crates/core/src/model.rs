//! Single-peak chemical-shift signal model.
//!
//! A voxel with water `W`, fat `F` (both complex), off-resonance field `f` (Hz)
//! and transverse relaxation rate `R2*` (1/s) produces at echo time `t_j`
//!
//! ```text
//! S_j = exp(-R2* t_j) · exp(-i 2π f t_j) · (W + F · exp(-i 2π ν_F t_j))
//! ```
//!
//! Volumes are stored row-major over `(row, col, slice)` with the echo index
//! fastest for multi-echo data. Complex values are `Complex64`, which is laid
//! out as interleaved `(re, im)` pairs.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fat resonance offset at 1.5 T: 3.4 ppm × 42.58 MHz/T × 1.5 T.
pub const DEFAULT_FAT_SHIFT_HZ: f64 = -217.2;
pub const DEFAULT_ECHO_SPACING_S: f64 = 2.3e-3;
pub const DEFAULT_NUM_ECHOES: usize = 6;
/// Voxels whose echo-combined magnitude falls below this fraction of the
/// volume maximum are treated as background.
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
    pub slices: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize, slices: usize) -> Self {
        Self { rows, cols, slices }
    }

    pub fn plane(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, 1)
    }

    pub fn voxels(&self) -> usize {
        self.rows * self.cols * self.slices
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, slice: usize) -> usize {
        (row * self.cols + col) * self.slices + slice
    }

    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let slice = index % self.slices;
        let rc = index / self.slices;
        (rc / self.cols, rc % self.cols, slice)
    }

    fn check(&self) -> Result<()> {
        if self.voxels() == 0 {
            return Err(Error::InvalidInput(format!("empty grid {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionParams {
    pub echo_times: Vec<f64>,
    pub fat_shift_hz: f64,
    pub grid: GridShape,
}

impl AcquisitionParams {
    pub fn new(echo_times: Vec<f64>, fat_shift_hz: f64, grid: GridShape) -> Result<Self> {
        let params = Self { echo_times, fat_shift_hz, grid };
        params.validate()?;
        Ok(params)
    }

    /// Six echoes at `t_j = j · 2.3 ms` with the 1.5 T fat shift. The first
    /// echo time equals the spacing so that even echoes are close to in-phase.
    pub fn default_protocol(grid: GridShape) -> Self {
        let echo_times = (1..=DEFAULT_NUM_ECHOES)
            .map(|j| j as f64 * DEFAULT_ECHO_SPACING_S)
            .collect();
        Self { echo_times, fat_shift_hz: DEFAULT_FAT_SHIFT_HZ, grid }
    }

    pub fn with_grid(&self, grid: GridShape) -> Self {
        Self { grid, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.check()?;
        if self.echo_times.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "at least 3 echoes are required, got {}",
                self.echo_times.len()
            )));
        }
        if self.echo_times.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return Err(Error::InvalidInput("echo times must be finite and positive".into()));
        }
        if self.echo_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("echo times must be strictly increasing".into()));
        }
        if !self.fat_shift_hz.is_finite() || self.fat_shift_hz == 0.0 {
            return Err(Error::InvalidInput("fat shift must be finite and non-zero".into()));
        }
        Ok(())
    }

    pub fn num_echoes(&self) -> usize {
        self.echo_times.len()
    }

    /// Mean echo spacing; equals ΔTE for uniformly spaced echoes.
    pub fn echo_spacing(&self) -> f64 {
        let n = self.echo_times.len();
        (self.echo_times[n - 1] - self.echo_times[0]) / (n - 1) as f64
    }

    /// `exp(-i 2π ν_F t_j)` for every echo.
    pub fn fat_phasors(&self) -> Vec<Complex64> {
        self.echo_times
            .iter()
            .map(|&t| Complex64::from_polar(1.0, -2.0 * PI * self.fat_shift_hz * t))
            .collect()
    }
}

/// Measured (or simulated) multi-echo complex data.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiEchoSignal {
    pub data: Vec<Complex64>,
    pub params: AcquisitionParams,
    pub mask_threshold: f64,
}

impl MultiEchoSignal {
    pub fn new(data: Vec<Complex64>, params: AcquisitionParams) -> Result<Self> {
        params.validate()?;
        let expected = params.grid.voxels() * params.num_echoes();
        if data.len() != expected {
            return Err(Error::Geometry(format!(
                "signal has {} samples, grid × echoes needs {expected}",
                data.len()
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidInput("signal contains non-finite samples".into()));
        }
        Ok(Self { data, params, mask_threshold: DEFAULT_MASK_THRESHOLD })
    }

    pub fn zeros(params: AcquisitionParams) -> Self {
        let n = params.grid.voxels() * params.num_echoes();
        Self { data: vec![Complex64::new(0.0, 0.0); n], params, mask_threshold: DEFAULT_MASK_THRESHOLD }
    }

    pub fn grid(&self) -> GridShape {
        self.params.grid
    }

    pub fn num_echoes(&self) -> usize {
        self.params.num_echoes()
    }

    #[inline]
    pub fn voxel(&self, v: usize) -> &[Complex64] {
        let n = self.num_echoes();
        &self.data[v * n..(v + 1) * n]
    }

    /// Foreground mask: root-sum-of-squares magnitude over echoes at least
    /// `mask_threshold` times the volume maximum. An all-zero volume has an
    /// empty mask. The echo-combined magnitude is used because the first echo
    /// of the default protocol is opposed-phase, where equal water and fat
    /// cancel.
    pub fn mask(&self) -> Vec<bool> {
        let rss: Vec<f64> = self
            .data
            .chunks(self.num_echoes())
            .map(|v| v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
            .collect();
        let max = rss.iter().cloned().fold(0.0, f64::max);
        if max == 0.0 {
            return vec![false; rss.len()];
        }
        let cut = self.mask_threshold * max;
        rss.into_iter().map(|m| m >= cut && m > 0.0).collect()
    }

    /// Largest first-echo magnitude in the volume.
    pub fn max_first_echo(&self) -> f64 {
        self.data.iter().step_by(self.num_echoes()).map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { data: self.data.iter().map(|z| z * factor).collect(), ..self.clone() }
    }

    pub fn slice(&self, s: usize) -> Result<Self> {
        let g = self.grid();
        if s >= g.slices {
            return Err(Error::Geometry(format!("slice {s} out of range 0..{}", g.slices)));
        }
        let n = self.num_echoes();
        let mut data = Vec::with_capacity(g.rows * g.cols * n);
        for r in 0..g.rows {
            for c in 0..g.cols {
                data.extend_from_slice(self.voxel(g.index(r, c, s)));
            }
        }
        let params = self.params.with_grid(GridShape::plane(g.rows, g.cols));
        Ok(Self { data, params, mask_threshold: self.mask_threshold })
    }

    /// Stacks single-slice signals with a shared protocol along the slice axis.
    pub fn stack(slices: &[MultiEchoSignal]) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::InvalidInput("no slices to stack".into()))?;
        let plane = first.grid();
        let g = GridShape::new(plane.rows, plane.cols, slices.len());
        let n = first.num_echoes();
        let mut data = vec![Complex64::new(0.0, 0.0); g.voxels() * n];
        for (s, sig) in slices.iter().enumerate() {
            if sig.grid() != GridShape::plane(plane.rows, plane.cols)
                || sig.params.echo_times != first.params.echo_times
                || sig.params.fat_shift_hz != first.params.fat_shift_hz
            {
                return Err(Error::Geometry(format!("slice {s} differs in size or protocol")));
            }
            for v in 0..plane.rows * plane.cols {
                let dst = g.index(v / plane.cols, v % plane.cols, s) * n;
                data[dst..dst + n].copy_from_slice(sig.voxel(v));
            }
        }
        Ok(Self { data, params: first.params.with_grid(g), mask_threshold: first.mask_threshold })
    }

    pub fn signal_energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }
}

/// Per-voxel water/fat/field/R2* estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterMaps {
    pub grid: GridShape,
    pub water: Vec<Complex64>,
    pub fat: Vec<Complex64>,
    pub field_hz: Vec<f64>,
    pub r2star: Vec<f64>,
}

impl ParameterMaps {
    pub fn zeros(grid: GridShape) -> Self {
        let n = grid.voxels();
        Self {
            grid,
            water: vec![Complex64::new(0.0, 0.0); n],
            fat: vec![Complex64::new(0.0, 0.0); n],
            field_hz: vec![0.0; n],
            r2star: vec![0.0; n],
        }
    }

    pub fn check(&self) -> Result<()> {
        let n = self.grid.voxels();
        if self.water.len() != n || self.fat.len() != n || self.field_hz.len() != n || self.r2star.len() != n {
            return Err(Error::Geometry(format!("parameter maps do not all match grid {:?}", self.grid)));
        }
        Ok(())
    }

    pub fn check_grid(&self, grid: GridShape) -> Result<()> {
        self.check()?;
        if self.grid != grid {
            return Err(Error::Geometry(format!("maps grid {:?} vs signal grid {grid:?}", self.grid)));
        }
        Ok(())
    }

    pub fn slice(&self, s: usize) -> Result<Self> {
        self.check()?;
        let g = self.grid;
        if s >= g.slices {
            return Err(Error::Geometry(format!("slice {s} out of range 0..{}", g.slices)));
        }
        let plane = GridShape::plane(g.rows, g.cols);
        let mut out = Self::zeros(plane);
        for r in 0..g.rows {
            for c in 0..g.cols {
                let src = g.index(r, c, s);
                let dst = plane.index(r, c, 0);
                out.water[dst] = self.water[src];
                out.fat[dst] = self.fat[src];
                out.field_hz[dst] = self.field_hz[src];
                out.r2star[dst] = self.r2star[src];
            }
        }
        Ok(out)
    }

    /// Stacks 2D slices (each with a single slice) along the slice axis.
    pub fn stack(slices: &[ParameterMaps]) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::InvalidInput("no slices to stack".into()))?;
        let g = GridShape::new(first.grid.rows, first.grid.cols, slices.len());
        let mut out = Self::zeros(g);
        for (s, m) in slices.iter().enumerate() {
            m.check_grid(GridShape::plane(g.rows, g.cols))?;
            for r in 0..g.rows {
                for c in 0..g.cols {
                    let src = m.grid.index(r, c, 0);
                    let dst = g.index(r, c, s);
                    out.water[dst] = m.water[src];
                    out.fat[dst] = m.fat[src];
                    out.field_hz[dst] = m.field_hz[src];
                    out.r2star[dst] = m.r2star[src];
                }
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.water.iter().chain(&self.fat).all(|z| z.re.is_finite() && z.im.is_finite())
            && self.field_hz.iter().chain(&self.r2star).all(|x| x.is_finite())
    }
}

/// Model signal of one voxel without input validation; `out` must hold one
/// sample per echo. Negative `r2star` is allowed here since solver iterates
/// may pass through it.
#[inline]
pub(crate) fn model_voxel_into(
    water: Complex64,
    fat: Complex64,
    field_hz: f64,
    r2star: f64,
    echo_times: &[f64],
    fat_phasors: &[Complex64],
    out: &mut [Complex64],
) {
    for ((o, &t), &p) in out.iter_mut().zip(echo_times).zip(fat_phasors) {
        let envelope = Complex64::from_polar((-r2star * t).exp(), -2.0 * PI * field_hz * t);
        *o = envelope * (water + fat * p);
    }
}

pub fn forward_model_voxel(
    water: Complex64,
    fat: Complex64,
    field_hz: f64,
    r2star: f64,
    params: &AcquisitionParams,
) -> Result<Vec<Complex64>> {
    params.validate()?;
    let finite = [water.re, water.im, fat.re, fat.im, field_hz, r2star].iter().all(|x| x.is_finite());
    if !finite {
        return Err(Error::InvalidInput("non-finite voxel parameters".into()));
    }
    if r2star < 0.0 {
        return Err(Error::InvalidInput(format!("negative R2* {r2star}")));
    }
    let mut out = vec![Complex64::new(0.0, 0.0); params.num_echoes()];
    model_voxel_into(water, fat, field_hz, r2star, &params.echo_times, &params.fat_phasors(), &mut out);
    Ok(out)
}

pub fn forward_model_volume(maps: &ParameterMaps, params: &AcquisitionParams) -> Result<MultiEchoSignal> {
    params.validate()?;
    maps.check_grid(params.grid)?;
    if !maps.is_finite() {
        return Err(Error::InvalidInput("non-finite parameter maps".into()));
    }
    let n = params.num_echoes();
    let phasors = params.fat_phasors();
    let mut data = vec![Complex64::new(0.0, 0.0); params.grid.voxels() * n];
    data.par_chunks_mut(n).enumerate().for_each(|(v, out)| {
        model_voxel_into(
            maps.water[v],
            maps.fat[v],
            maps.field_hz[v],
            maps.r2star[v],
            &params.echo_times,
            &phasors,
            out,
        )
    });
    Ok(MultiEchoSignal { data, params: params.clone(), mask_threshold: DEFAULT_MASK_THRESHOLD })
}

/// Half the squared residual of one voxel.
#[inline]
pub(crate) fn voxel_cost(
    samples: &[Complex64],
    water: Complex64,
    fat: Complex64,
    field_hz: f64,
    r2star: f64,
    echo_times: &[f64],
    fat_phasors: &[Complex64],
) -> f64 {
    let mut acc = 0.0;
    for ((s, &t), &p) in samples.iter().zip(echo_times).zip(fat_phasors) {
        let envelope = Complex64::from_polar((-r2star * t).exp(), -2.0 * PI * field_hz * t);
        acc += (s - envelope * (water + fat * p)).norm_sqr();
    }
    0.5 * acc
}

/// Per-voxel data cost; background voxels contribute zero.
pub fn voxel_costs(maps: &ParameterMaps, signal: &MultiEchoSignal) -> Result<Vec<f64>> {
    maps.check_grid(signal.grid())?;
    let mask = signal.mask();
    let phasors = signal.params.fat_phasors();
    let t = &signal.params.echo_times;
    Ok((0..signal.grid().voxels())
        .into_par_iter()
        .map(|v| {
            if !mask[v] {
                return 0.0;
            }
            voxel_cost(signal.voxel(v), maps.water[v], maps.fat[v], maps.field_hz[v], maps.r2star[v], t, &phasors)
        })
        .collect())
}

/// `½ Σ_voxels Σ_j |S_j − S̃_j|²` over the foreground mask of `signal`.
/// The reduction runs in voxel order so the result does not depend on the
/// thread count.
pub fn data_cost(maps: &ParameterMaps, signal: &MultiEchoSignal) -> Result<f64> {
    Ok(voxel_costs(maps, signal)?.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn params() -> AcquisitionParams {
        AcquisitionParams::default_protocol(GridShape::plane(1, 1))
    }

    #[test]
    fn pure_water_is_constant() {
        let s = forward_model_voxel(c(1.0, 0.0), c(0.0, 0.0), 0.0, 0.0, &params()).unwrap();
        assert!(s.iter().all(|z| *z == c(1.0, 0.0)));
    }

    #[test]
    fn pure_fat_is_fat_phasor() {
        let p = params();
        let s = forward_model_voxel(c(0.0, 0.0), c(1.0, 0.0), 0.0, 0.0, &p).unwrap();
        for (z, t) in s.iter().zip(&p.echo_times) {
            let expect = Complex64::from_polar(1.0, -2.0 * PI * p.fat_shift_hz * t);
            assert!((z - expect).norm() < 1e-15);
        }
    }

    #[test]
    fn r2star_decay_at_10ms() {
        let p = AcquisitionParams::new(vec![0.005, 0.010, 0.015], -217.2, GridShape::plane(1, 1)).unwrap();
        let s = forward_model_voxel(c(1.0, 0.0), c(0.0, 0.0), 0.0, 100.0, &p).unwrap();
        assert!((s[1].norm() - 0.36787944117144233).abs() < 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        let err = forward_model_voxel(c(f64::NAN, 0.0), c(0.0, 0.0), 0.0, 0.0, &params());
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn invalid_protocols() {
        let g = GridShape::plane(1, 1);
        assert!(AcquisitionParams::new(vec![0.001, 0.002], -217.2, g).is_err());
        assert!(AcquisitionParams::new(vec![0.001, 0.003, 0.002], -217.2, g).is_err());
        assert!(AcquisitionParams::new(vec![0.001, 0.002, 0.003], 0.0, g).is_err());
        assert!(AcquisitionParams::new(vec![0.0, 0.002, 0.003], -217.2, g).is_err());
    }

    #[test]
    fn zero_maps_give_zero_signal() {
        let p = AcquisitionParams::default_protocol(GridShape::new(3, 2, 2));
        let s = forward_model_volume(&ParameterMaps::zeros(p.grid), &p).unwrap();
        assert!(s.data.iter().all(|z| *z == c(0.0, 0.0)));
    }

    #[test]
    fn volume_matches_voxel() {
        let p = AcquisitionParams::default_protocol(GridShape::new(2, 3, 1));
        let mut maps = ParameterMaps::zeros(p.grid);
        maps.water[4] = c(0.7, 0.2);
        maps.fat[4] = c(0.1, -0.4);
        maps.field_hz[4] = 33.0;
        maps.r2star[4] = 45.0;
        let s = forward_model_volume(&maps, &p).unwrap();
        let v = forward_model_voxel(c(0.7, 0.2), c(0.1, -0.4), 33.0, 45.0, &p).unwrap();
        assert_eq!(s.voxel(4), &v[..]);
    }

    #[test]
    fn geometry_mismatch() {
        let p = AcquisitionParams::default_protocol(GridShape::new(2, 2, 1));
        let maps = ParameterMaps::zeros(GridShape::new(2, 3, 1));
        assert!(matches!(forward_model_volume(&maps, &p), Err(Error::Geometry(_))));
    }

    #[test]
    fn data_cost_of_unit_voxel() {
        let p = params();
        let signal = MultiEchoSignal::new(vec![c(1.0, 0.0); 6], p.clone()).unwrap();
        let cost = data_cost(&ParameterMaps::zeros(p.grid), &signal).unwrap();
        assert_eq!(cost, 3.0);
    }

    #[test]
    fn data_cost_zero_at_truth() {
        let p = AcquisitionParams::default_protocol(GridShape::new(4, 4, 1));
        let mut maps = ParameterMaps::zeros(p.grid);
        for v in 0..16 {
            maps.water[v] = c(1.0 + v as f64 * 0.1, 0.3);
            maps.fat[v] = c(0.2, -0.1 * v as f64);
            maps.field_hz[v] = -40.0 + 5.0 * v as f64;
            maps.r2star[v] = 10.0 * v as f64;
        }
        let s = forward_model_volume(&maps, &p).unwrap();
        assert_eq!(data_cost(&maps, &s).unwrap(), 0.0);
    }

    #[test]
    fn data_cost_matches_scalar_loop() {
        let p = AcquisitionParams::default_protocol(GridShape::new(3, 3, 2));
        let mut truth = ParameterMaps::zeros(p.grid);
        for v in 0..p.grid.voxels() {
            truth.water[v] = c(1.0, 0.1 * v as f64);
            truth.fat[v] = c(0.5 - 0.02 * v as f64, 0.0);
            truth.field_hz[v] = 3.0 * v as f64;
            truth.r2star[v] = 25.0 + v as f64;
        }
        let signal = forward_model_volume(&truth, &p).unwrap();
        let mut pert = truth.clone();
        for v in 0..p.grid.voxels() {
            pert.field_hz[v] += 1.5;
            pert.r2star[v] *= 1.1;
            pert.fat[v] += c(0.05, 0.02);
        }
        // scalar reimplementation with explicit cos/sin
        let mut expect = 0.0;
        for v in 0..p.grid.voxels() {
            for (j, &t) in p.echo_times.iter().enumerate() {
                let decay = (-pert.r2star[v] * t).exp();
                let th = -2.0 * PI * pert.field_hz[v] * t;
                let tf = -2.0 * PI * p.fat_shift_hz * t;
                let (w, f) = (pert.water[v], pert.fat[v]);
                let a_re = w.re + f.re * tf.cos() - f.im * tf.sin();
                let a_im = w.im + f.re * tf.sin() + f.im * tf.cos();
                let m_re = decay * (th.cos() * a_re - th.sin() * a_im);
                let m_im = decay * (th.sin() * a_re + th.cos() * a_im);
                let s = signal.data[v * 6 + j];
                expect += (s.re - m_re).powi(2) + (s.im - m_im).powi(2);
            }
        }
        expect *= 0.5;
        let got = data_cost(&pert, &signal).unwrap();
        assert!((got - expect).abs() <= 1e-12 * expect, "{got} vs {expect}");
    }

    #[test]
    fn mask_excludes_dim_voxels() {
        let p = AcquisitionParams::default_protocol(GridShape::plane(1, 3));
        let mut data = vec![c(0.0, 0.0); 18];
        data[0] = c(1.0, 0.0);
        data[6] = c(0.04, 0.0);
        data[12] = c(0.05, 0.0);
        // opposed-phase first echo does not mask a bright voxel
        let mut bright = vec![c(0.0, 0.0); 6];
        bright[1] = c(0.0, 1.0);
        assert!(MultiEchoSignal::new([bright, vec![c(0.0, 0.0); 12]].concat(), p.clone()).unwrap().mask()[0]);
        let s = MultiEchoSignal::new(data, p).unwrap();
        assert_eq!(s.mask(), vec![true, false, true]);
    }

    #[test]
    fn slice_and_stack() {
        let g = GridShape::new(2, 2, 3);
        let mut maps = ParameterMaps::zeros(g);
        for v in 0..g.voxels() {
            maps.field_hz[v] = v as f64;
        }
        let slices: Vec<_> = (0..3).map(|s| maps.slice(s).unwrap()).collect();
        assert_eq!(slices[1].field_hz, vec![1.0, 4.0, 7.0, 10.0]);
        assert_eq!(ParameterMaps::stack(&slices).unwrap(), maps);

        let p = AcquisitionParams::default_protocol(g);
        let data = (0..g.voxels() * 6).map(|i| c(i as f64, -(i as f64))).collect();
        let sig = MultiEchoSignal::new(data, p).unwrap();
        let parts: Vec<_> = (0..3).map(|s| sig.slice(s).unwrap()).collect();
        assert_eq!(MultiEchoSignal::stack(&parts).unwrap(), sig);
        assert!(MultiEchoSignal::stack(&[parts[0].clone(), sig.clone()]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn linear_in_amplitudes(
            wr in -2.0..2.0f64, wi in -2.0..2.0f64, fr in -2.0..2.0f64, fi in -2.0..2.0f64,
            ar in -3.0..3.0f64, ai in -3.0..3.0f64, field in -150.0..150.0f64, r2 in 0.0..300.0f64,
        ) {
            let a = c(ar, ai);
            let base = forward_model_voxel(c(wr, wi), c(fr, fi), field, r2, &params()).unwrap();
            let scaled = forward_model_voxel(a * c(wr, wi), a * c(fr, fi), field, r2, &params()).unwrap();
            for (x, y) in base.iter().zip(&scaled) {
                proptest::prop_assert!((a * x - y).norm() <= 1e-12 * (1.0 + y.norm()));
            }
        }

        #[test]
        fn pure_water_magnitude_decays(w in 0.1..5.0f64, field in -150.0..150.0f64, r2 in 0.0..500.0f64) {
            let s = forward_model_voxel(c(w, 0.0), c(0.0, 0.0), field, r2, &params()).unwrap();
            for pair in s.windows(2) {
                proptest::prop_assert!(pair[1].norm() <= pair[0].norm() * (1.0 + 1e-12));
            }
        }

        #[test]
        fn cost_vanishes_at_truth(
            wr in -2.0..2.0f64, fi in -2.0..2.0f64, field in -150.0..150.0f64, r2 in 0.0..300.0f64,
        ) {
            let maps = ParameterMaps {
                grid: GridShape::plane(1, 1),
                water: vec![c(wr, 0.3)],
                fat: vec![c(0.1, fi)],
                field_hz: vec![field],
                r2star: vec![r2],
            };
            let sig = forward_model_volume(&maps, &params()).unwrap();
            proptest::prop_assert!(data_cost(&maps, &sig).unwrap() < 1e-24);
        }
    }
}
