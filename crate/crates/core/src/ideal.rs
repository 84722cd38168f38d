//! T2*-IDEAL: alternate an exact per-voxel least-squares solve for the water
//! and fat amplitudes with damped Gauss-Newton updates of field and R2*.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{voxel_cost, AcquisitionParams, GridShape, MultiEchoSignal, ParameterMaps};

/// Damping grows by this factor after a rejected step.
const DAMPING_GROWTH: f64 = 10.0;
const MAX_RETRIES: usize = 5;
const MAX_DAMPING: f64 = 1e12;
/// In-phase echoes: `ν_F t` within this many cycles of an integer.
pub const IN_PHASE_TOLERANCE_CYCLES: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdealConfig {
    pub max_outer_iters: usize,
    /// Initial Levenberg damping added to the diagonal of the normal matrix.
    pub gn_damping: f64,
    pub tol_rel_cost: f64,
    /// R2* iterates are clamped to `[-r2_max, r2_max]`, final output to `[0, r2_max]`.
    pub r2_max: f64,
    #[serde(default)]
    pub jacobian: GnJacobian,
}

impl Default for IdealConfig {
    fn default() -> Self {
        Self { max_outer_iters: 100, gn_damping: 1e-4, tol_rel_cost: 1e-9, r2_max: 1000.0, jacobian: GnJacobian::Projected }
    }
}

impl IdealConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iters < 1 {
            return Err(Error::Config("max_outer_iters must be >= 1".into()));
        }
        if !(self.tol_rel_cost > 0.0) {
            return Err(Error::Config("tol_rel_cost must be > 0".into()));
        }
        if !(self.gn_damping >= 0.0) || !(self.r2_max > 0.0) {
            return Err(Error::Config("gn_damping must be >= 0 and r2_max > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitProvenance {
    Zeros,
    InPhase,
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitMaps {
    pub grid: GridShape,
    pub field_hz: Vec<f64>,
    pub r2star: Vec<f64>,
    pub provenance: InitProvenance,
    /// Voxels the initializer could not estimate (zero magnitude).
    pub unestimated: Vec<bool>,
}

impl InitMaps {
    pub fn external(grid: GridShape, field_hz: Vec<f64>, r2star: Vec<f64>) -> Result<Self> {
        let n = grid.voxels();
        if field_hz.len() != n || r2star.len() != n {
            return Err(Error::Geometry("initial maps do not match grid".into()));
        }
        Ok(Self { grid, field_hz, r2star, provenance: InitProvenance::External, unestimated: vec![false; n] })
    }
}

pub fn init_zeros(params: &AcquisitionParams) -> InitMaps {
    let n = params.grid.voxels();
    InitMaps {
        grid: params.grid,
        field_hz: vec![0.0; n],
        r2star: vec![0.0; n],
        provenance: InitProvenance::Zeros,
        unestimated: vec![false; n],
    }
}

/// Indices of echoes where water and fat are in phase, and their spacing.
pub fn in_phase_echoes(params: &AcquisitionParams) -> Result<(Vec<usize>, f64)> {
    let idx: Vec<usize> = params
        .echo_times
        .iter()
        .enumerate()
        .filter(|(_, &t)| {
            let cycles = params.fat_shift_hz * t;
            (cycles - cycles.round()).abs() < IN_PHASE_TOLERANCE_CYCLES
        })
        .map(|(j, _)| j)
        .collect();
    if idx.len() < 2 {
        return Err(Error::UnsupportedProtocol(format!(
            "in-phase initialization needs at least 2 in-phase echoes, found {}",
            idx.len()
        )));
    }
    let t = &params.echo_times;
    let spacing = idx.windows(2).map(|w| t[w[1]] - t[w[0]]).fold(f64::INFINITY, f64::min);
    Ok((idx, spacing))
}

/// Field and R2* from the in-phase echoes only. R2* comes from a log-linear
/// fit of magnitude against echo time; the field comes from the summed phase
/// of successive in-phase echo ratios and is therefore aliased into
/// `(-1/(2 T_ip), 1/(2 T_ip)]` where `T_ip` is the in-phase spacing.
pub fn init_in_phase(signal: &MultiEchoSignal) -> Result<InitMaps> {
    let params = &signal.params;
    let (idx, spacing) = in_phase_echoes(params)?;
    let t = &params.echo_times;
    // only pairs at the minimal spacing enter the phase estimate
    let pairs: Vec<(usize, usize)> = idx
        .windows(2)
        .filter(|w| (t[w[1]] - t[w[0]] - spacing).abs() < 1e-9)
        .map(|w| (w[0], w[1]))
        .collect();
    let n = signal.grid().voxels();
    let estimates: Vec<(f64, f64, bool)> = (0..n)
        .into_par_iter()
        .map(|v| {
            let s = signal.voxel(v);
            if idx.iter().any(|&j| s[j].norm() == 0.0) {
                return (0.0, 0.0, true);
            }
            let mut acc = Complex64::new(0.0, 0.0);
            for &(a, b) in &pairs {
                acc += s[a] * s[b].conj();
            }
            let field = acc.arg() / (2.0 * PI * spacing);
            let field = if field <= -0.5 / spacing { field + 1.0 / spacing } else { field };
            // least-squares slope of ln|S| against t
            let k = idx.len() as f64;
            let mean_t = idx.iter().map(|&j| t[j]).sum::<f64>() / k;
            let mean_l = idx.iter().map(|&j| s[j].norm().ln()).sum::<f64>() / k;
            let (mut num, mut den) = (0.0, 0.0);
            for &j in &idx {
                let dt = t[j] - mean_t;
                num += dt * (s[j].norm().ln() - mean_l);
                den += dt * dt;
            }
            (field, (-num / den).max(0.0), false)
        })
        .collect();
    Ok(InitMaps {
        grid: signal.grid(),
        field_hz: estimates.iter().map(|e| e.0).collect(),
        r2star: estimates.iter().map(|e| e.1).collect(),
        provenance: InitProvenance::InPhase,
        unestimated: estimates.iter().map(|e| e.2).collect(),
    })
}

/// Water/fat amplitudes from the linear subproblem.
#[derive(Clone, Debug)]
pub struct LinearSolution {
    pub water: Vec<Complex64>,
    pub fat: Vec<Complex64>,
    /// Voxels whose 2×2 system was rank deficient; those carry the
    /// minimum-norm solution.
    pub degenerate: Vec<bool>,
}

/// Least-squares `(W, F)` for one voxel with field and R2* held fixed.
/// Returns the amplitudes and whether the normal matrix was rank deficient.
pub(crate) fn solve_voxel_linear(
    samples: &[Complex64],
    field_hz: f64,
    r2star: f64,
    echo_times: &[f64],
    fat_phasors: &[Complex64],
) -> (Complex64, Complex64, bool) {
    let zero = Complex64::new(0.0, 0.0);
    let (mut g00, mut g01) = (0.0, zero);
    let (mut b0, mut b1) = (zero, zero);
    for ((s, &t), &p) in samples.iter().zip(echo_times).zip(fat_phasors) {
        let a = Complex64::from_polar((-r2star * t).exp(), -2.0 * PI * field_hz * t);
        let aa = a.norm_sqr();
        g00 += aa;
        g01 += p * aa;
        b0 += a.conj() * s;
        b1 += (a * p).conj() * s;
    }
    // columns have equal norms since |p| = 1
    let g11 = g00;
    let det = g00 * g11 - g01.norm_sqr();
    if g00 > 0.0 && det > 1e-12 * g00 * g11 {
        let w = (b0 * g11 - g01 * b1) / det;
        let f = (b1 * g00 - g01.conj() * b0) / det;
        (w, f, false)
    } else if g00 > 0.0 {
        // rank one: G⁺ = G / tr(G)²
        let tr2 = (g00 + g11).powi(2);
        let w = (b0 * g00 + g01 * b1) / tr2;
        let f = (g01.conj() * b0 + b1 * g11) / tr2;
        (w, f, true)
    } else {
        (zero, zero, true)
    }
}

pub fn solve_linear_subproblem(signal: &MultiEchoSignal, field_hz: &[f64], r2star: &[f64]) -> Result<LinearSolution> {
    let n = signal.grid().voxels();
    if field_hz.len() != n || r2star.len() != n {
        return Err(Error::Geometry("field/R2* maps do not match signal grid".into()));
    }
    if field_hz.iter().chain(r2star).any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite field or R2*".into()));
    }
    let t = &signal.params.echo_times;
    let phasors = signal.params.fat_phasors();
    let sol: Vec<_> = (0..n)
        .into_par_iter()
        .map(|v| solve_voxel_linear(signal.voxel(v), field_hz[v], r2star[v], t, &phasors))
        .collect();
    Ok(LinearSolution {
        water: sol.iter().map(|s| s.0).collect(),
        fat: sol.iter().map(|s| s.1).collect(),
        degenerate: sol.iter().map(|s| s.2).collect(),
    })
}

/// Which normal matrix the (field, R2*) update uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GnJacobian {
    /// Jacobian of the model with water and fat held fixed.
    Fixed,
    /// Jacobian projected onto the orthogonal complement of the water/fat
    /// columns. This is the (field, R2*) block of a joint linearization in all
    /// four unknowns, and the step is judged on the re-solved amplitudes.
    #[default]
    Projected,
}

/// Echo times and fat phasors shared by every voxel of a volume.
#[derive(Clone, Copy)]
struct Protocol<'a> {
    echo_times: &'a [f64],
    fat_phasors: &'a [Complex64],
}

impl Protocol<'_> {
    fn cost(&self, samples: &[Complex64], w: Complex64, f: Complex64, field: f64, r2: f64) -> f64 {
        voxel_cost(samples, w, f, field, r2, self.echo_times, self.fat_phasors)
    }

    /// Cost after re-solving the amplitudes at (field, r2).
    fn projected_cost(&self, samples: &[Complex64], field: f64, r2: f64) -> f64 {
        let (w, f, _) = solve_voxel_linear(samples, field, r2, self.echo_times, self.fat_phasors);
        self.cost(samples, w, f, field, r2)
    }
}

/// `(JᵀJ + λI)⁻¹ Jᵀr` for the real-valued (field, R2*) update of one voxel,
/// where the Jacobian columns are `-i2πt S̃` and `-t S̃` with `W`, `F` fixed.
/// `None` if the damped system is singular.
pub fn damped_gauss_newton_direction(
    samples: &[Complex64],
    water: Complex64,
    fat: Complex64,
    field_hz: f64,
    r2star: f64,
    damping: f64,
    params: &AcquisitionParams,
) -> Option<[f64; 2]> {
    let phasors = params.fat_phasors();
    let proto = Protocol { echo_times: &params.echo_times, fat_phasors: &phasors };
    gn_direction(samples, water, fat, field_hz, r2star, damping, GnJacobian::Fixed, proto)
}

/// Same as [`damped_gauss_newton_direction`] with the projected Jacobian.
pub fn projected_gauss_newton_direction(
    samples: &[Complex64],
    water: Complex64,
    fat: Complex64,
    field_hz: f64,
    r2star: f64,
    damping: f64,
    params: &AcquisitionParams,
) -> Option<[f64; 2]> {
    let phasors = params.fat_phasors();
    let proto = Protocol { echo_times: &params.echo_times, fat_phasors: &phasors };
    gn_direction(samples, water, fat, field_hz, r2star, damping, GnJacobian::Projected, proto)
}

#[allow(clippy::too_many_arguments)]
fn gn_direction(
    samples: &[Complex64],
    water: Complex64,
    fat: Complex64,
    field_hz: f64,
    r2star: f64,
    damping: f64,
    jacobian: GnJacobian,
    proto: Protocol<'_>,
) -> Option<[f64; 2]> {
    let zero = Complex64::new(0.0, 0.0);
    let (mut hff, mut hfr, mut hrr, mut gf, mut gr) = (0.0, 0.0, 0.0, 0.0, 0.0);
    // Aᴴ j for both Jacobian columns and the Gram matrix of A = [a, a·p]
    let (mut uf, mut ur) = ([zero; 2], [zero; 2]);
    let (mut g00, mut g01) = (0.0, zero);
    for ((s, &t), &p) in samples.iter().zip(proto.echo_times).zip(proto.fat_phasors) {
        let a = Complex64::from_polar((-r2star * t).exp(), -2.0 * PI * field_hz * t);
        let m = a * (water + fat * p);
        let jf = Complex64::new(0.0, -2.0 * PI * t) * m;
        let jr = -t * m;
        let r = s - m;
        hff += jf.norm_sqr();
        hrr += jr.norm_sqr();
        hfr += (jf.conj() * jr).re;
        gf += (jf.conj() * r).re;
        gr += (jr.conj() * r).re;
        if jacobian == GnJacobian::Projected {
            let (c0, c1) = (a, a * p);
            uf[0] += c0.conj() * jf;
            uf[1] += c1.conj() * jf;
            ur[0] += c0.conj() * jr;
            ur[1] += c1.conj() * jr;
            g00 += a.norm_sqr();
            g01 += p * a.norm_sqr();
        }
    }
    if jacobian == GnJacobian::Projected {
        let det = g00 * g00 - g01.norm_sqr();
        if g00 > 0.0 && det > 1e-12 * g00 * g00 {
            // Re(uᴴ G⁻¹ v) with G⁻¹ = [[g00, -g01], [-g01*, g00]] / det
            let quad = |u: &[Complex64; 2], v: &[Complex64; 2]| {
                let x0 = (v[0] * g00 - g01 * v[1]) / det;
                let x1 = (v[1] * g00 - g01.conj() * v[0]) / det;
                (u[0].conj() * x0 + u[1].conj() * x1).re
            };
            hff -= quad(&uf, &uf);
            hrr -= quad(&ur, &ur);
            hfr -= quad(&uf, &ur);
        }
    }
    let (a, d) = (hff + damping, hrr + damping);
    let det = a * d - hfr * hfr;
    let scale = a.abs().max(d.abs());
    if !(det.is_finite() && det > 1e-14 * scale * scale) {
        return None;
    }
    Some([(d * gf - hfr * gr) / det, (a * gr - hfr * gf) / det])
}

#[derive(Clone, Copy, Debug)]
struct VoxelStep {
    field_hz: f64,
    r2star: f64,
    damping: f64,
    accepted: bool,
}

/// Levenberg-style attempt sequence: accept the step only if the voxel cost
/// decreases, otherwise raise damping and retry.
#[allow(clippy::too_many_arguments)]
fn gn_voxel(
    samples: &[Complex64],
    water: Complex64,
    fat: Complex64,
    field_hz: f64,
    r2star: f64,
    damping: f64,
    config: &IdealConfig,
    proto: Protocol<'_>,
) -> VoxelStep {
    let projected = config.jacobian == GnJacobian::Projected;
    let cost_at = |fh: f64, rr: f64| {
        if projected {
            proto.projected_cost(samples, fh, rr)
        } else {
            proto.cost(samples, water, fat, fh, rr)
        }
    };
    let current = cost_at(field_hz, r2star);
    let mut lambda = damping;
    for _ in 0..=MAX_RETRIES {
        if let Some([df, dr]) = gn_direction(samples, water, fat, field_hz, r2star, lambda, config.jacobian, proto) {
            let f_new = field_hz + df;
            let r_new = (r2star + dr).clamp(-config.r2_max, config.r2_max);
            let cost = cost_at(f_new, r_new);
            if cost.is_finite() && cost < current {
                return VoxelStep { field_hz: f_new, r2star: r_new, damping: lambda, accepted: true };
            }
        }
        lambda = if lambda == 0.0 { 1e-12 } else { (lambda * DAMPING_GROWTH).min(MAX_DAMPING) };
    }
    VoxelStep { field_hz, r2star, damping: lambda, accepted: false }
}

/// Result of a single Gauss-Newton update over the volume.
#[derive(Clone, Debug)]
pub struct GaussNewtonStep {
    pub field_hz: Vec<f64>,
    pub r2star: Vec<f64>,
    /// Voxels where no damped step lowered the cost; their values are unchanged.
    pub skipped: Vec<bool>,
}

/// One damped Gauss-Newton update of field and R2* linearized around the
/// amplitudes in `maps`. Inputs are not modified.
pub fn gauss_newton_step(signal: &MultiEchoSignal, maps: &ParameterMaps, config: &IdealConfig) -> Result<GaussNewtonStep> {
    config.validate()?;
    maps.check_grid(signal.grid())?;
    if !maps.is_finite() {
        return Err(Error::InvalidInput("non-finite parameter maps".into()));
    }
    let phasors = signal.params.fat_phasors();
    let proto = Protocol { echo_times: &signal.params.echo_times, fat_phasors: &phasors };
    let steps: Vec<VoxelStep> = (0..signal.grid().voxels())
        .into_par_iter()
        .map(|v| {
            gn_voxel(
                signal.voxel(v),
                maps.water[v],
                maps.fat[v],
                maps.field_hz[v],
                maps.r2star[v],
                config.gn_damping,
                config,
                proto,
            )
        })
        .collect();
    Ok(GaussNewtonStep {
        field_hz: steps.iter().map(|s| s.field_hz).collect(),
        r2star: steps.iter().map(|s| s.r2star).collect(),
        skipped: steps.iter().map(|s| !s.accepted).collect(),
    })
}

#[derive(Clone, Debug)]
pub struct IdealResult {
    pub maps: ParameterMaps,
    /// Data cost after the linear solve of every outer iteration.
    pub cost_history: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl IdealResult {
    pub fn final_cost(&self) -> f64 {
        *self.cost_history.last().unwrap_or(&0.0)
    }
}

/// Runs T2*-IDEAL from the given initial field and R2* maps.
pub fn t2star_ideal(signal: &MultiEchoSignal, init: &InitMaps, config: &IdealConfig) -> Result<IdealResult> {
    config.validate()?;
    let grid = signal.grid();
    if init.grid != grid || init.field_hz.len() != grid.voxels() || init.r2star.len() != grid.voxels() {
        return Err(Error::Geometry(format!("init grid {:?} vs signal grid {grid:?}", init.grid)));
    }
    if init.field_hz.iter().chain(&init.r2star).any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite initial maps".into()));
    }
    let n = grid.voxels();
    let mask = signal.mask();
    let phasors = signal.params.fat_phasors();
    let proto = Protocol { echo_times: &signal.params.echo_times, fat_phasors: &phasors };
    let floor = f64::EPSILON * f64::EPSILON * signal.signal_energy();

    let mut field = init.field_hz.clone();
    let mut r2: Vec<f64> = init.r2star.iter().map(|r| r.clamp(-config.r2_max, config.r2_max)).collect();
    let mut damping = vec![config.gn_damping; n];
    let mut history: Vec<f64> = Vec::new();
    let mut linear;
    loop {
        linear = solve_linear_subproblem(signal, &field, &r2)?;
        let costs: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|v| if mask[v] { proto.cost(signal.voxel(v), linear.water[v], linear.fat[v], field[v], r2[v]) } else { 0.0 })
            .collect();
        let cost: f64 = costs.iter().sum();
        if !cost.is_finite() {
            return Err(Error::Numerical(format!("non-finite cost at iteration {}", history.len())));
        }
        let converged = history.last().is_some_and(|&prev| prev - cost <= config.tol_rel_cost * prev) || cost <= floor;
        history.push(cost);
        if converged || history.len() >= config.max_outer_iters {
            break;
        }
        let steps: Vec<VoxelStep> = (0..n)
            .into_par_iter()
            .map(|v| {
                if !mask[v] {
                    return VoxelStep { field_hz: field[v], r2star: r2[v], damping: damping[v], accepted: false };
                }
                gn_voxel(signal.voxel(v), linear.water[v], linear.fat[v], field[v], r2[v], damping[v], config, proto)
            })
            .collect();
        for (v, s) in steps.into_iter().enumerate() {
            field[v] = s.field_hz;
            r2[v] = s.r2star;
            damping[v] = if s.accepted { (s.damping / DAMPING_GROWTH).max(config.gn_damping) } else { s.damping };
        }
    }

    // final R2* must be non-negative; re-solve amplitudes where clamping moved it
    let mut water = linear.water;
    let mut fat = linear.fat;
    let mut degenerate = linear.degenerate;
    for v in 0..n {
        let clamped = r2[v].clamp(0.0, config.r2_max);
        if clamped != r2[v] {
            r2[v] = clamped;
            let (w, f, d) = solve_voxel_linear(signal.voxel(v), field[v], clamped, proto.echo_times, proto.fat_phasors);
            water[v] = w;
            fat[v] = f;
            degenerate[v] = d;
        }
    }
    let maps = ParameterMaps { grid, water, fat, field_hz: field, r2star: r2 };
    if !maps.is_finite() {
        return Err(Error::Numerical("T2*-IDEAL produced non-finite maps".into()));
    }
    Ok(IdealResult { maps, cost_history: history, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{data_cost, forward_model_voxel};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn voxel_signal(w: Complex64, f: Complex64, field: f64, r2: f64) -> MultiEchoSignal {
        let p = AcquisitionParams::default_protocol(GridShape::plane(1, 1));
        let s = forward_model_voxel(w, f, field, r2, &p).unwrap();
        MultiEchoSignal::new(s, p).unwrap()
    }

    fn maps1(w: Complex64, f: Complex64, field: f64, r2: f64) -> ParameterMaps {
        ParameterMaps {
            grid: GridShape::plane(1, 1),
            water: vec![w],
            fat: vec![f],
            field_hz: vec![field],
            r2star: vec![r2],
        }
    }

    #[test]
    fn linear_solve_recovers_amplitudes() {
        let sig = voxel_signal(c(2.0, 1.0), c(0.5, -0.3), 37.0, 55.0);
        let sol = solve_linear_subproblem(&sig, &[37.0], &[55.0]).unwrap();
        assert!((sol.water[0] - c(2.0, 1.0)).norm() < 1e-10);
        assert!((sol.fat[0] - c(0.5, -0.3)).norm() < 1e-10);
        assert!(!sol.degenerate[0]);
    }

    #[test]
    fn linear_solve_of_zero_signal() {
        let p = AcquisitionParams::default_protocol(GridShape::plane(1, 1));
        let sig = MultiEchoSignal::zeros(p);
        let sol = solve_linear_subproblem(&sig, &[10.0], &[20.0]).unwrap();
        assert_eq!(sol.water[0], c(0.0, 0.0));
        assert_eq!(sol.fat[0], c(0.0, 0.0));
    }

    #[test]
    fn wrong_field_leaks_fat() {
        let p = AcquisitionParams::default_protocol(GridShape::plane(1, 1));
        let sig = voxel_signal(c(1.0, 0.0), c(0.0, 0.0), 20.0, 30.0);
        let wrong = 20.0 + p.fat_shift_hz;
        let sol = solve_linear_subproblem(&sig, &[wrong], &[30.0]).unwrap();
        // brute-force oracle: explicit normal equations on the 2 columns
        let phasors = p.fat_phasors();
        let cols: Vec<[Complex64; 2]> = p
            .echo_times
            .iter()
            .zip(&phasors)
            .map(|(&t, &ph)| {
                let a = Complex64::from_polar((-30.0 * t).exp(), -2.0 * PI * wrong * t);
                [a, a * ph]
            })
            .collect();
        let mut g = [[c(0.0, 0.0); 2]; 2];
        let mut b = [c(0.0, 0.0); 2];
        for (row, s) in cols.iter().zip(sig.voxel(0)) {
            for i in 0..2 {
                for k in 0..2 {
                    g[i][k] += row[i].conj() * row[k];
                }
                b[i] += row[i].conj() * s;
            }
        }
        let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
        let w = (g[1][1] * b[0] - g[0][1] * b[1]) / det;
        let f = (g[0][0] * b[1] - g[1][0] * b[0]) / det;
        assert!((sol.water[0] - w).norm() < 1e-12);
        assert!((sol.fat[0] - f).norm() < 1e-12);
        assert!(sol.fat[0].norm() > 0.1);
        let m = maps1(sol.water[0], sol.fat[0], wrong, 30.0);
        assert!(data_cost(&m, &sig).unwrap() > 0.0);
    }

    #[test]
    fn parallel_columns_flag_degeneracy() {
        // ν_F t integral at every echo: fat and water columns coincide
        let p = AcquisitionParams::new(vec![0.01, 0.02, 0.03], 100.0, GridShape::plane(1, 1)).unwrap();
        let s = forward_model_voxel(c(1.0, 0.0), c(0.0, 0.0), 0.0, 0.0, &p).unwrap();
        let sig = MultiEchoSignal::new(s, p).unwrap();
        let sol = solve_linear_subproblem(&sig, &[0.0], &[0.0]).unwrap();
        assert!(sol.degenerate[0]);
        // minimum-norm split of W + F = 1
        assert!((sol.water[0] - c(0.5, 0.0)).norm() < 1e-9);
        assert!((sol.fat[0] - c(0.5, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn stationary_at_exact_fit() {
        let sig = voxel_signal(c(0.8, 0.1), c(0.3, 0.0), 25.0, 40.0);
        let p = &sig.params;
        let d = damped_gauss_newton_direction(sig.voxel(0), c(0.8, 0.1), c(0.3, 0.0), 25.0, 40.0, 1e-4, p).unwrap();
        assert!(d[0].hypot(d[1]) < 1e-10);
        let step = gauss_newton_step(&sig, &maps1(c(0.8, 0.1), c(0.3, 0.0), 25.0, 40.0), &IdealConfig::default()).unwrap();
        assert!((step.field_hz[0] - 25.0).abs() < 1e-10 && (step.r2star[0] - 40.0).abs() < 1e-10);
    }

    #[test]
    fn field_converges_from_ten_hz_off() {
        let (w, f) = (c(0.7, 0.0), c(0.3, 0.0));
        let sig = voxel_signal(w, f, 40.0, 50.0);
        let cfg = IdealConfig { gn_damping: 0.0, jacobian: GnJacobian::Fixed, ..IdealConfig::default() };
        let mut maps = maps1(w, f, 30.0, 50.0);
        for _ in 0..10 {
            let step = gauss_newton_step(&sig, &maps, &cfg).unwrap();
            maps.field_hz = step.field_hz;
            maps.r2star = step.r2star;
        }
        assert!((maps.field_hz[0] - 40.0).abs() < 0.01, "{}", maps.field_hz[0]);
    }

    #[test]
    fn direction_matches_finite_difference_jacobian() {
        let p = AcquisitionParams::default_protocol(GridShape::plane(1, 1));
        let sig = voxel_signal(c(0.9, 0.2), c(0.4, -0.1), 31.0, 70.0);
        let (w, f, field, r2, lambda) = (c(0.85, 0.15), c(0.45, -0.05), 27.0, 60.0, 1e-3);
        let got = damped_gauss_newton_direction(sig.voxel(0), w, f, field, r2, lambda, &p).unwrap();
        // finite-difference Jacobian of the stacked real/imag model
        let model = |fh: f64, rr: f64| forward_model_voxel(w, f, fh, rr, &p).unwrap();
        let h = 1e-6;
        let (fp, fm) = (model(field + h, r2), model(field - h, r2));
        let (rp, rm) = (model(field, r2 + h), model(field, r2 - h));
        let m0 = model(field, r2);
        let mut jt_j = [[lambda, 0.0], [0.0, lambda]];
        let mut jt_r = [0.0; 2];
        for j in 0..6 {
            let cf = (fp[j] - fm[j]) / (2.0 * h);
            let cr = (rp[j] - rm[j]) / (2.0 * h);
            let res = sig.voxel(0)[j] - m0[j];
            let rows = [[cf.re, cr.re], [cf.im, cr.im]];
            let rv = [res.re, res.im];
            for (row, rv) in rows.iter().zip(rv) {
                for a in 0..2 {
                    for b in 0..2 {
                        jt_j[a][b] += row[a] * row[b];
                    }
                    jt_r[a] += row[a] * rv;
                }
            }
        }
        let det = jt_j[0][0] * jt_j[1][1] - jt_j[0][1] * jt_j[1][0];
        let expect = [
            (jt_j[1][1] * jt_r[0] - jt_j[0][1] * jt_r[1]) / det,
            (jt_j[0][0] * jt_r[1] - jt_j[1][0] * jt_r[0]) / det,
        ];
        let err = (got[0] - expect[0]).hypot(got[1] - expect[1]) / expect[0].hypot(expect[1]);
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn singular_voxel_is_skipped() {
        let p = AcquisitionParams::default_protocol(GridShape::plane(1, 1));
        let sig = MultiEchoSignal::zeros(p);
        let cfg = IdealConfig { gn_damping: 0.0, ..IdealConfig::default() };
        let step = gauss_newton_step(&sig, &maps1(c(0.0, 0.0), c(0.0, 0.0), 5.0, 6.0), &cfg).unwrap();
        assert!(step.skipped[0]);
        assert_eq!((step.field_hz[0], step.r2star[0]), (5.0, 6.0));
    }

    #[test]
    fn in_phase_water_only() {
        let sig = voxel_signal(c(1.0, 0.0), c(0.0, 0.0), 50.0, 30.0);
        let init = init_in_phase(&sig).unwrap();
        assert!((init.field_hz[0] - 50.0).abs() < 0.1);
        assert!((init.r2star[0] - 30.0).abs() < 0.1);
        assert_eq!(init.provenance, InitProvenance::InPhase);
    }

    #[test]
    fn in_phase_with_fat() {
        let sig = voxel_signal(c(0.6, 0.0), c(0.4, 0.0), 50.0, 30.0);
        let init = init_in_phase(&sig).unwrap();
        assert!((init.field_hz[0] - 50.0).abs() < 0.1, "{}", init.field_hz[0]);
        assert!((init.r2star[0] - 30.0).abs() < 0.1, "{}", init.r2star[0]);
    }

    #[test]
    fn in_phase_aliases_large_fields() {
        let sig = voxel_signal(c(1.0, 0.0), c(0.0, 0.0), 120.0, 30.0);
        let (_, spacing) = in_phase_echoes(&sig.params).unwrap();
        assert!((spacing - 4.6e-3).abs() < 1e-12);
        let init = init_in_phase(&sig).unwrap();
        assert!((init.field_hz[0] - (120.0 - 1.0 / 0.0046)).abs() < 0.1, "{}", init.field_hz[0]);
    }

    #[test]
    fn in_phase_needs_two_echoes() {
        let p = AcquisitionParams::new(vec![0.001, 0.002, 0.003], -217.2, GridShape::plane(1, 1)).unwrap();
        let sig = MultiEchoSignal::zeros(p);
        assert!(matches!(init_in_phase(&sig), Err(Error::UnsupportedProtocol(_))));
    }

    #[test]
    fn in_phase_zero_voxel_flagged() {
        let p = AcquisitionParams::default_protocol(GridShape::plane(1, 1));
        let init = init_in_phase(&MultiEchoSignal::zeros(p)).unwrap();
        assert_eq!((init.field_hz[0], init.r2star[0]), (0.0, 0.0));
        assert!(init.unestimated[0]);
    }

    #[test]
    fn zero_init_shape() {
        let p = AcquisitionParams::default_protocol(GridShape::new(3, 4, 2));
        let init = init_zeros(&p);
        assert_eq!(init.field_hz.len(), 24);
        assert!(init.field_hz.iter().chain(&init.r2star).all(|&x| x == 0.0));
        assert_eq!(init.provenance, InitProvenance::Zeros);
    }

    #[test]
    fn ideal_fixed_point_at_truth() {
        let sig = voxel_signal(c(0.7, 0.2), c(0.3, 0.1), -20.0, 80.0);
        let init = InitMaps::external(sig.grid(), vec![-20.0], vec![80.0]).unwrap();
        let res = t2star_ideal(&sig, &init, &IdealConfig::default()).unwrap();
        assert!(res.cost_history.len() <= 2);
        assert!(res.final_cost() < 1e-12);
    }

    #[test]
    fn ideal_zero_init_easy_voxel() {
        let sig = voxel_signal(c(1.0, 0.0), c(0.0, 0.0), 15.0, 40.0);
        let res = t2star_ideal(&sig, &init_zeros(&sig.params), &IdealConfig::default()).unwrap();
        assert!((res.maps.field_hz[0] - 15.0).abs() < 1e-6);
        assert!((res.maps.r2star[0] - 40.0).abs() < 1e-6, "{:?} {:?}", res.maps, res.cost_history);
        assert!(res.maps.fat[0].norm() < 1e-6);
    }

    #[test]
    fn bad_config_rejected() {
        let sig = voxel_signal(c(1.0, 0.0), c(0.0, 0.0), 0.0, 0.0);
        let cfg = IdealConfig { max_outer_iters: 0, ..IdealConfig::default() };
        assert!(t2star_ideal(&sig, &init_zeros(&sig.params), &cfg).is_err());
    }

    #[test]
    fn swapped_solution_fits_equally_at_half_cycle_shift() {
        let dte = 2.3e-3;
        let nu = -1.0 / (2.0 * dte);
        let p = AcquisitionParams::new((1..=6).map(|j| j as f64 * dte).collect(), nu, GridShape::plane(1, 1)).unwrap();
        let (w, f, field, r2) = (c(0.8, 0.1), c(0.2, -0.05), 12.0, 45.0);
        let sig = MultiEchoSignal::new(forward_model_voxel(w, f, field, r2, &p).unwrap(), p).unwrap();
        let truth = data_cost(&maps1(w, f, field, r2), &sig).unwrap();
        // the fat phasor is (-1)^j, so swapping the amplitudes and moving the
        // field by ±ν_F reproduces every echo with no extra phase
        for shifted in [field + nu, field - nu] {
            let swapped = data_cost(&maps1(f, w, shifted, r2), &sig).unwrap();
            assert!((swapped - truth).abs() < 1e-10, "{swapped} vs {truth}");
        }
        let flipped = data_cost(&maps1(-f, -w, field - nu, r2), &sig).unwrap();
        assert!(flipped > 0.1);
    }

    #[test]
    fn ideal_is_equivariant_to_complex_scaling() {
        let a = c(0.6, -1.3);
        let sig = voxel_signal(c(0.7, 0.2), c(0.3, 0.1), -20.0, 80.0);
        let scaled = MultiEchoSignal::new(sig.data.iter().map(|z| a * z).collect(), sig.params.clone()).unwrap();
        let init = InitMaps::external(sig.grid(), vec![-15.0], vec![60.0]).unwrap();
        // a fixed damping floor is not scale-free, so compare undamped runs
        let cfg = IdealConfig { gn_damping: 0.0, ..IdealConfig::default() };
        let r1 = t2star_ideal(&sig, &init, &cfg).unwrap();
        let r2 = t2star_ideal(&scaled, &init, &cfg).unwrap();
        assert!((r1.maps.field_hz[0] - r2.maps.field_hz[0]).abs() < 1e-8);
        assert!((r1.maps.r2star[0] - r2.maps.r2star[0]).abs() < 1e-6);
        assert!((a * r1.maps.water[0] - r2.maps.water[0]).norm() < 1e-8);
        assert!((a * r1.maps.fat[0] - r2.maps.fat[0]).norm() < 1e-8);
    }

    #[test]
    fn zero_init_loses_to_in_phase_on_swap_prone_phantom() {
        let p = AcquisitionParams::default_protocol(GridShape::plane(32, 32));
        let ph = crate::phantom::make_phantom(&crate::phantom::swap_prone_spec(), &p).unwrap();
        let cfg = IdealConfig::default();
        let zero = t2star_ideal(&ph.signal, &init_zeros(&p), &cfg).unwrap();
        let inph = t2star_ideal(&ph.signal, &init_in_phase(&ph.signal).unwrap(), &cfg).unwrap();
        assert!(zero.final_cost() > inph.final_cost());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn cost_history_never_increases(
            pdff in 0.0..1.0f64, field in -100.0..100.0f64, r2 in 0.0..250.0f64,
            f0 in -100.0..100.0f64, r0 in 0.0..200.0f64,
        ) {
            let sig = voxel_signal(c(1.0 - pdff, 0.0), c(pdff, 0.0), field, r2);
            let init = InitMaps::external(sig.grid(), vec![f0], vec![r0]).unwrap();
            let res = t2star_ideal(&sig, &init, &IdealConfig::default()).unwrap();
            for pair in res.cost_history.windows(2) {
                proptest::prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-12));
            }
        }
    }
}
