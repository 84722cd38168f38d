//! Central finite-difference check of every differentiable primitive.

use wfsep::autodiff::gradcheck::{registry, run_gradcheck, DEFAULT_TOLERANCE, DEFAULT_TRIALS};

fn main() {
    let report = run_gradcheck(&registry(), DEFAULT_TRIALS, 0, DEFAULT_TOLERANCE);
    print!("{report}");
    println!("{}", if report.passed() { "all primitives pass" } else { "some primitives FAIL" });
}
