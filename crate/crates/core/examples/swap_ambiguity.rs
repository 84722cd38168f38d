//! With the fat shift at exactly half a cycle per echo spacing, swapping
//! water and fat and moving the field by the fat shift fits the echoes just
//! as well as the truth.

use num_complex::Complex64;
use wfsep::model::{data_cost, forward_model_voxel, AcquisitionParams, GridShape, MultiEchoSignal, ParameterMaps};

fn one(w: Complex64, f: Complex64, field: f64, r2: f64) -> ParameterMaps {
    ParameterMaps { grid: GridShape::plane(1, 1), water: vec![w], fat: vec![f], field_hz: vec![field], r2star: vec![r2] }
}

fn main() -> wfsep::Result<()> {
    let dte = 2.3e-3;
    let nu = -1.0 / (2.0 * dte);
    let p = AcquisitionParams::new((1..=6).map(|j| j as f64 * dte).collect(), nu, GridShape::plane(1, 1))?;
    let (w, f, field, r2) = (Complex64::new(0.8, 0.0), Complex64::new(0.2, 0.0), 15.0, 40.0);
    let signal = MultiEchoSignal::new(forward_model_voxel(w, f, field, r2, &p)?, p)?;
    println!("fat shift {nu:.1} Hz");
    println!("truth   pdff 0.20 field {field:6.1} Hz  cost {:.2e}", data_cost(&one(w, f, field, r2), &signal)?);
    let swapped = one(f, w, field + nu, r2);
    println!("swapped pdff 0.80 field {:6.1} Hz  cost {:.2e}", field + nu, data_cost(&swapped, &signal)?);
    Ok(())
}
