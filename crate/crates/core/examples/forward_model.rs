//! Echo train of a few voxels under the single-peak fat model.

use num_complex::Complex64;
use wfsep::model::{forward_model_voxel, AcquisitionParams, GridShape};

fn main() -> wfsep::Result<()> {
    let p = AcquisitionParams::default_protocol(GridShape::plane(1, 1));
    println!("echo times (ms): {:?}", p.echo_times.iter().map(|t| t * 1e3).collect::<Vec<_>>());
    let voxels = [("water", 1.0, 0.0, 0.0, 0.0), ("fat", 0.0, 1.0, 0.0, 0.0), ("mixed, 20 Hz, R2* 50", 0.6, 0.4, 20.0, 50.0)];
    for (name, w, f, field, r2) in voxels {
        let s = forward_model_voxel(Complex64::new(w, 0.0), Complex64::new(f, 0.0), field, r2, &p)?;
        let mags: Vec<String> = s.iter().map(|z| format!("{:.3}", z.norm())).collect();
        println!("{name:>22}: |S| = [{}]", mags.join(", "));
    }
    Ok(())
}
