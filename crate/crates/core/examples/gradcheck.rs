//! Finite-difference gradient checks of every differentiable component, in
//! double precision.
//!
//! ```text
//! cargo run --release --example gradcheck -- [seed]
//! ```

use accvit::harness::{gradcheck, COMPONENTS};

fn main() -> accvit::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed must be an integer"));
    for component in COMPONENTS {
        let r = gradcheck(component, seed)?;
        let worst = r
            .worst
            .as_ref()
            .map(|w| format!("worst {}[{}]: analytic {:+.6e} numeric {:+.6e}", w.tensor, w.index, w.analytic, w.numeric))
            .unwrap_or_default();
        println!(
            "{:<17} {:>4} coords  max rel err {:.2e}  {}  {worst}",
            r.component,
            r.coordinates,
            r.max_rel_err,
            if r.passed { "pass" } else { "FAIL" },
        );
    }
    Ok(())
}
