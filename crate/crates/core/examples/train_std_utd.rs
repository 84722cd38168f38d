//! Supervised and unsupervised training on a small random corpus, scored on
//! held-out slices. Usage: train_std_utd [epochs] [out_dir]

use std::path::PathBuf;

use wfsep::eval::error_report;
use wfsep::model::{AcquisitionParams, GridShape};
use wfsep::network::train::write_curves;
use wfsep::network::{predict, train_std, train_utd, Dataset, TrainConfig, TrainOutcome, UNetConfig};
use wfsep::phantom::{random_corpus, Phantom};

fn held_out_pdff(out: &TrainOutcome, test: &[Phantom]) -> wfsep::Result<f64> {
    let mut se = 0.0;
    for x in test {
        se += error_report(&predict(&x.signal, &out.weights)?, &x.truth, &x.signal.mask())?.pdff_rmse.powi(2);
    }
    Ok((se / test.len() as f64).sqrt())
}

fn main() -> wfsep::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "train_out".into()));
    std::fs::create_dir_all(&out)?;
    let p = AcquisitionParams::default_protocol(GridShape::plane(16, 16));
    let corpus = random_corpus(64, 16, 7, &p, (-60.0, 60.0), 0.0)?;
    let signals: Vec<_> = corpus.iter().map(|x| x.signal.clone()).collect();
    let truths: Vec<_> = corpus.iter().map(|x| x.truth.clone()).collect();
    let data = Dataset::from_slices(&signals, Some(&truths))?.split_at(48)?;
    let test = random_corpus(16, 16, 99, &p, (-60.0, 60.0), 0.0)?;
    let net = UNetConfig::default();
    for (name, cfg) in [("std", TrainConfig::std_defaults()), ("utd", TrainConfig::utd_defaults())] {
        let cfg = TrainConfig { epochs, ..cfg };
        let res = if name == "std" { train_std(&data, &net, &cfg)? } else { train_utd(&data, &net, &cfg)? };
        write_curves(&out.join(format!("{name}_curves.csv")), &res.curves)?;
        let first = res.curves[0].train_loss;
        let last = res.curves.last().map_or(first, |r| r.train_loss);
        println!("{name}: loss {first:.3e} -> {last:.3e}, best epoch {}, held-out pdff rmse {:.4}", res.best_epoch, held_out_pdff(&res, &test)?);
    }
    Ok(())
}
