//! Noiseless tiled phantom reconstructed by T2*-IDEAL from the in-phase start.

use std::time::Instant;

use wfsep::eval::error_report;
use wfsep::ideal::{init_in_phase, t2star_ideal, IdealConfig};
use wfsep::model::{AcquisitionParams, GridShape};
use wfsep::phantom::{make_phantom, tiled_spec};

fn main() -> wfsep::Result<()> {
    let p = AcquisitionParams::default_protocol(GridShape::plane(64, 64));
    let pdffs: Vec<f64> = (0..10).map(|k| k as f64 / 10.0).collect();
    let ph = make_phantom(&tiled_spec(8, 8, &pdffs, (-60.0, 60.0), (20.0, 200.0)), &p)?;
    let t = Instant::now();
    let res = t2star_ideal(&ph.signal, &init_in_phase(&ph.signal)?, &IdealConfig::default())?;
    println!("{} outer iterations, final cost {:.3e}, {:.2}s", res.cost_history.len(), res.final_cost(), t.elapsed().as_secs_f64());
    print!("{}", error_report(&res.maps, &ph.truth, &ph.signal.mask())?.to_csv());
    Ok(())
}
