//! Writes a signal, its maps, a checkpoint and a PGM, then reads them back.
//! Usage: formats [out_dir]

use std::path::PathBuf;

use wfsep::eval::pdff_map;
use wfsep::model::{AcquisitionParams, GridShape};
use wfsep::network::{checkpoint, NetworkWeights, UNetConfig};
use wfsep::phantom::{make_phantom, tiled_spec};
use wfsep::{pgm, wfv};

fn main() -> wfsep::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "formats_out".into()));
    std::fs::create_dir_all(&out)?;
    let p = AcquisitionParams::default_protocol(GridShape::plane(32, 32));
    let ph = make_phantom(&tiled_spec(4, 8, &[0.0, 0.3, 0.6, 0.9], (-60.0, 60.0), (20.0, 200.0)), &p)?;

    wfv::write_signal(&out.join("signal.wfv"), &ph.signal)?;
    wfv::write_maps(&out.join("truth"), &ph.truth, &p)?;
    let back = wfv::read_signal(&out.join("signal.wfv"))?;
    let worst = back.data.iter().zip(&ph.signal.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    println!("signal.wfv: {} samples, max f32 rounding error {worst:.2e}", back.data.len());

    let w = NetworkWeights::init(&UNetConfig::default(), 0)?;
    checkpoint::save(&out.join("model.wts"), &w)?;
    println!("model.wts: {} parameters, roundtrip equal: {}", w.param_count(), checkpoint::load(&out.join("model.wts"))? == w);

    let pdff = pdff_map(&ph.truth);
    pgm::write(&out.join("pdff.pgm"), &pdff, 32, 32, pgm::Window { min: 0.0, max: 1.0 })?;
    println!("pdff.pgm written to {}", out.display());
    Ok(())
}
