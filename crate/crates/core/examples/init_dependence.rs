//! Zero start against in-phase start on the swap-prone phantom, with the
//! mean PDFF error of every tile.

use wfsep::eval::pdff_map;
use wfsep::ideal::{init_in_phase, init_zeros, t2star_ideal, IdealConfig};
use wfsep::pipeline::swap_prone_phantom;

fn main() -> wfsep::Result<()> {
    let (spec, ph) = swap_prone_phantom()?;
    let cfg = IdealConfig::default();
    let zero = t2star_ideal(&ph.signal, &init_zeros(&ph.signal.params), &cfg)?;
    let inph = t2star_ideal(&ph.signal, &init_in_phase(&ph.signal)?, &cfg)?;
    println!("final cost: zero start {:.3e}, in-phase start {:.3e}", zero.final_cost(), inph.final_cost());
    let truth = pdff_map(&ph.truth);
    let (pz, pi) = (pdff_map(&zero.maps), pdff_map(&inph.maps));
    println!("{:>7} {:>6} {:>8} {:>6} {:>9} {:>9}", "tile", "pdff", "f (Hz)", "R2*", "err zero", "err inph");
    for (k, r) in spec.regions.iter().enumerate() {
        let vs = ph.region_voxels(k);
        let err = |m: &[f64]| vs.iter().map(|&v| (m[v] - truth[v]).abs()).sum::<f64>() / vs.len() as f64;
        let label = r.label.as_deref().unwrap_or("?");
        println!("{label:>7} {:>6.2} {:>8.1} {:>6.0} {:>9.3} {:>9.3}", r.pdff(), r.field_hz, r.r2star, err(&pz), err(&pi));
    }
    Ok(())
}
