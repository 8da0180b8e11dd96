//! Simulates a constant volatility tilt and compares the Monte Carlo
//! relative entropy with its closed form `c² (T2 - t0) / 2`.
//!
//! ```bash
//! cargo run --release --example girsanov_weights
//! ```

use mot_bridge::measures::{Grid1D, GridMeasure};
use mot_bridge::sb_dual::{constant_tilt, optimal_density_report, SbProblem};
use mot_bridge::svm_models::{make_heston, SvmSpec};

fn main() -> mot_bridge::Result<()> {
    let model = make_heston(1.5, 0.04, 0.3, -0.3, (0.01, 1.0))?;
    let spec = SvmSpec { model, x0: 1.0, y0: 0.04 };
    let flat = GridMeasure::from_atoms(Grid1D::uniform(0.5, 1.5, 21)?, &[(1.0, 1.0)])?;
    let p = SbProblem::new(spec, flat.clone(), flat, (0.0, 0.25, 0.5), Grid1D::uniform(0.01, 0.13, 7)?, 0.5)?;
    for (seed, c) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        let r = optimal_density_report(&p, &constant_tilt(&p, c), 20_000, seed as u64)?;
        let exact = 0.5 * c * c * (p.t2 - p.t0);
        println!(
            "c = {c}: entropy {:.5} ± {:.5} (exact {exact:.5}), tilted mean {:.4} ± {:.4}",
            r.entropy_weights, r.entropy_weights_se, r.tilted_mean_x, r.tilted_mean_x_se
        );
    }
    Ok(())
}
