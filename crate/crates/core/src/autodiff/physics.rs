//! Signal-model fidelity expressed on the tape.
//!
//! The network emits six channels per voxel: `[|W|, ∠W, |F|, ∠F, f·ΔTE,
//! R2*·ΔTE]`, with magnitudes in units of the normalised signal. The loss
//! is half the masked squared residual between the normalised measurement and
//! the model signal those channels predict.

use std::f64::consts::PI;

use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::model::MultiEchoSignal;

/// Normalised measurements and protocol constants for a batch of 2D slices.
#[derive(Clone, Debug)]
pub struct PhysicsTarget {
    /// `t_j / ΔTE` per echo.
    pub relative_times: Vec<f64>,
    /// `-2π ν_F t_j` per echo.
    pub fat_angles: Vec<f64>,
    /// Real and imaginary parts per echo, each `[batch, 1, h, w]`.
    pub real: Vec<Tensor>,
    pub imag: Vec<Tensor>,
    /// 1 for foreground voxels, 0 for background, `[batch, 1, h, w]`.
    pub mask: Tensor,
}

impl PhysicsTarget {
    /// Builds a target from slices that are already normalised. All slices
    /// must share one protocol and in-plane size. `masks` gives the
    /// foreground of each slice.
    pub fn new(slices: &[&MultiEchoSignal], masks: &[Vec<bool>]) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        let params = &first.params;
        let g = params.grid;
        if g.slices != 1 {
            return Err(Error::Geometry("physics targets are built from single slices".into()));
        }
        if masks.len() != slices.len() {
            return Err(Error::Geometry("one mask per slice is required".into()));
        }
        let n = params.num_echoes();
        let hw = g.rows * g.cols;
        let b = slices.len();
        let spacing = params.echo_spacing();
        let mut real = vec![Tensor::zeros(&[b, 1, g.rows, g.cols]); n];
        let mut imag = real.clone();
        let mut mask = Tensor::zeros(&[b, 1, g.rows, g.cols]);
        for (i, (s, m)) in slices.iter().zip(masks).enumerate() {
            if s.params.echo_times != params.echo_times
                || s.params.fat_shift_hz != params.fat_shift_hz
                || s.grid() != g
                || m.len() != hw
            {
                return Err(Error::Geometry("batch slices differ in protocol or size".into()));
            }
            for v in 0..hw {
                for (j, z) in s.voxel(v).iter().enumerate() {
                    real[j].data[i * hw + v] = z.re;
                    imag[j].data[i * hw + v] = z.im;
                }
                mask.data[i * hw + v] = if m[v] { 1.0 } else { 0.0 };
            }
        }
        Ok(Self {
            relative_times: params.echo_times.iter().map(|t| t / spacing).collect(),
            fat_angles: params.echo_times.iter().map(|t| -2.0 * PI * params.fat_shift_hz * t).collect(),
            real,
            imag,
            mask,
        })
    }

    pub fn batch(&self) -> usize {
        self.mask.shape[0]
    }
}

/// Half the masked sum of squared complex residuals.
pub fn physics_loss(tape: &mut Tape, channels: Var, target: &PhysicsTarget) -> Result<Var> {
    let [b, c, h, w] = tape.value(channels).dims4()?;
    if c != 6 || target.mask.shape != [b, 1, h, w] {
        return Err(Error::Geometry(format!(
            "channels {:?} do not match target {:?}",
            tape.value(channels).shape,
            target.mask.shape
        )));
    }
    let ch: Vec<Var> = (0..6).map(|k| tape.slice_channels(channels, k, 1)).collect::<Result<_>>()?;
    let (mag_w, phase_w, mag_f, phase_f, field, r2) = (ch[0], ch[1], ch[2], ch[3], ch[4], ch[5]);

    let cos_w = tape.cos(phase_w);
    let sin_w = tape.sin(phase_w);
    let water_re = tape.mul(mag_w, cos_w)?;
    let water_im = tape.mul(mag_w, sin_w)?;
    let cos_f = tape.cos(phase_f);
    let sin_f = tape.sin(phase_f);
    let fat_c = tape.mul(mag_f, cos_f)?;
    let fat_s = tape.mul(mag_f, sin_f)?;
    let mask = tape.constant(target.mask.clone());

    let mut total: Option<Var> = None;
    for (j, (&tau, &alpha)) in target.relative_times.iter().zip(&target.fat_angles).enumerate() {
        // W + F·exp(iα)
        let (ca, sa) = (alpha.cos(), alpha.sin());
        let t1 = tape.scale(fat_c, ca);
        let t2 = tape.scale(fat_s, -sa);
        let fat_re = tape.add(t1, t2)?;
        let t3 = tape.scale(fat_c, sa);
        let t4 = tape.scale(fat_s, ca);
        let fat_im = tape.add(t3, t4)?;
        let a_re = tape.add(water_re, fat_re)?;
        let a_im = tape.add(water_im, fat_im)?;

        // × exp(-R2* t) · exp(-i 2π f t)
        let theta = tape.scale(field, 2.0 * PI * tau);
        let cos_t = tape.cos(theta);
        let sin_t = tape.sin(theta);
        let neg_rate = tape.scale(r2, -tau);
        let decay = tape.exp(neg_rate);
        let p1 = tape.mul(a_re, cos_t)?;
        let p2 = tape.mul(a_im, sin_t)?;
        let rot_re = tape.add(p1, p2)?;
        let p3 = tape.mul(a_im, cos_t)?;
        let p4 = tape.mul(a_re, sin_t)?;
        let rot_im = tape.sub(p3, p4)?;
        let model_re = tape.mul(decay, rot_re)?;
        let model_im = tape.mul(decay, rot_im)?;

        let meas_re = tape.constant(target.real[j].clone());
        let meas_im = tape.constant(target.imag[j].clone());
        let res_re = tape.sub(model_re, meas_re)?;
        let res_im = tape.sub(model_im, meas_im)?;
        let sq_re = tape.square(res_re);
        let sq_im = tape.square(res_im);
        let sq = tape.add(sq_re, sq_im)?;
        let masked = tape.mul(sq, mask)?;
        let echo_sum = tape.sum(masked);
        total = Some(match total {
            Some(acc) => tape.add(acc, echo_sum)?,
            None => echo_sum,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidInput("protocol without echoes".into()))?;
    Ok(tape.scale(total, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{data_cost, AcquisitionParams, GridShape, ParameterMaps};
    use crate::network::encoding::{maps_to_channels, stack};
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_maps(rng: &mut ChaCha8Rng, g: GridShape) -> ParameterMaps {
        let mut m = ParameterMaps::zeros(g);
        for v in 0..g.voxels() {
            m.water[v] = Complex64::from_polar(rng.gen_range(0.0..1.0), rng.gen_range(-3.0..3.0));
            m.fat[v] = Complex64::from_polar(rng.gen_range(0.0..1.0), rng.gen_range(-3.0..3.0));
            m.field_hz[v] = rng.gen_range(-100.0..100.0);
            m.r2star[v] = rng.gen_range(0.0..200.0);
        }
        m
    }

    #[test]
    fn matches_scalar_data_cost_over_a_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AcquisitionParams::default_protocol(GridShape::plane(4, 3));
        let signals: Vec<MultiEchoSignal> = (0..2)
            .map(|_| {
                let m = random_maps(&mut rng, p.grid);
                crate::model::forward_model_volume(&m, &p).unwrap()
            })
            .collect();
        let guesses: Vec<ParameterMaps> = (0..2).map(|_| random_maps(&mut rng, p.grid)).collect();
        let expect: f64 = signals.iter().zip(&guesses).map(|(s, m)| data_cost(m, s).unwrap()).sum();

        let channels: Vec<Tensor> = guesses.iter().map(|m| maps_to_channels(m, 1.0, p.echo_spacing()).unwrap()).collect();
        let batch = stack(&channels.iter().collect::<Vec<_>>()).unwrap();
        let refs: Vec<&MultiEchoSignal> = signals.iter().collect();
        let masks: Vec<Vec<bool>> = signals.iter().map(|s| s.mask()).collect();
        let target = PhysicsTarget::new(&refs, &masks).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let loss = physics_loss(&mut tape, x, &target).unwrap();
        let got = tape.value(loss).item().unwrap();
        assert!((got - expect).abs() <= 1e-10 * expect.max(1.0), "{got} vs {expect}");
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let p = AcquisitionParams::default_protocol(GridShape::plane(2, 2));
        let s = MultiEchoSignal::zeros(p);
        let target = PhysicsTarget::new(&[&s], &[s.mask()]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 5, 2, 2]));
        assert!(physics_loss(&mut tape, x, &target).is_err());
    }
}
