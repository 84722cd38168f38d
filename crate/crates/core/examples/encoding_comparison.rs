//! Magnitude/phase against real/imaginary network input under the same
//! supervised budget. Usage: encoding_comparison [epochs]

use wfsep::eval::error_report;
use wfsep::model::{AcquisitionParams, GridShape};
use wfsep::network::{predict, train_std, Dataset, InputEncoding, TrainConfig, UNetConfig};
use wfsep::phantom::random_corpus;

fn main() -> wfsep::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let p = AcquisitionParams::default_protocol(GridShape::plane(16, 16));
    let corpus = random_corpus(64, 16, 7, &p, (-60.0, 60.0), 0.0)?;
    let signals: Vec<_> = corpus.iter().map(|x| x.signal.clone()).collect();
    let truths: Vec<_> = corpus.iter().map(|x| x.truth.clone()).collect();
    let data = Dataset::from_slices(&signals, Some(&truths))?.split_at(48)?;
    let test = random_corpus(16, 16, 99, &p, (-60.0, 60.0), 0.0)?;
    for enc in [InputEncoding::MagPhase, InputEncoding::RealImag] {
        let net = UNetConfig { input_encoding: enc, ..UNetConfig::default() };
        let res = train_std(&data, &net, &TrainConfig { epochs, ..TrainConfig::std_defaults() })?;
        let (mut field, mut r2) = (0.0, 0.0);
        for x in &test {
            let e = error_report(&predict(&x.signal, &res.weights)?, &x.truth, &x.signal.mask())?;
            field += e.field_rmse.powi(2);
            r2 += e.r2star_rmse.powi(2);
        }
        let n = test.len() as f64;
        println!("{enc:?}: field rmse {:.2} Hz, R2* rmse {:.1} 1/s", (field / n).sqrt(), (r2 / n).sqrt());
    }
    Ok(())
}
