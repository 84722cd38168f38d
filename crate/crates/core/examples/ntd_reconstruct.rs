//! Fits an untrained network to one noiseless slice with the signal-model
//! loss. Usage: ntd_reconstruct [epochs] [seed]

use std::time::Instant;

use wfsep::eval::error_report;
use wfsep::model::{AcquisitionParams, GridShape};
use wfsep::network::{ntd_reconstruct, TrainConfig, UNetConfig};
use wfsep::phantom::{make_phantom, tiled_spec};

fn main() -> wfsep::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let p = AcquisitionParams::default_protocol(GridShape::plane(32, 32));
    let pdffs: Vec<f64> = (0..10).map(|k| k as f64 / 10.0).collect();
    let ph = make_phantom(&tiled_spec(4, 8, &pdffs, (-60.0, 60.0), (20.0, 200.0)), &p)?;
    let cfg = TrainConfig { epochs, seed, ..TrainConfig::ntd_defaults() };
    let t = Instant::now();
    let step = (epochs / 10).max(1);
    let res = ntd_reconstruct(&ph.signal, &UNetConfig::default(), &cfg, None, |e, c| {
        if e % step == 0 {
            println!("epoch {e:>6}  cost {c:.4e}");
        }
    })?;
    let rep = error_report(&res.maps, &ph.truth, &ph.signal.mask())?;
    println!("pdff rmse {:.4}, field rmse {:.2} Hz, {:.1}s", rep.pdff_rmse, rep.field_rmse, t.elapsed().as_secs_f64());
    Ok(())
}
