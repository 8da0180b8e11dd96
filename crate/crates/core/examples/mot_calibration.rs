//! Calibrates the dual potentials of a small martingale transport problem
//! by normalized gradient ascent and prints the trace.
//!
//! ```bash
//! cargo run --release --example mot_calibration
//! ```

use mot_bridge::hamiltonian::{legendre, symmetric_a_grid, Lagrangian, LagrangianSpec};
use mot_bridge::measures::{convex_order, Grid1D, GridMeasure};
use mot_bridge::mot_dual::{ascend, AscentConfig, DualState, MotProblem};

fn main() -> mot_bridge::Result<()> {
    let g = Grid1D::uniform(-3.0, 3.0, 31)?;
    let gauss = |s: f64| GridMeasure::normalized(g.clone(), g.map(|x| (-x * x / (2.0 * s * s)).exp()));
    let mu0 = GridMeasure::from_atoms(g.clone(), &[(0.0, 1.0)])?;
    let (mu1, mu2) = (gauss(0.6)?, gauss(0.9)?);
    assert!(convex_order(&mu1, &mu2).holds);

    let spec = LagrangianSpec::new(Lagrangian::Quadratic { gamma: 1.0 }, 2.0, 20.0, 1001)?;
    let h = legendre(&spec, &symmetric_a_grid(15.0, 601), 20.0, 2001)?;
    let problem = MotProblem::new(mu0, mu1, mu2, (0.0, 1.0, 2.0), h, 0.9)?;

    let config = AscentConfig { max_iters: 1000, tol: 1e-2, ..AscentConfig::default() };
    let state = ascend(DualState::zero(g.len()), &problem, &config)?;
    for r in state.history.iter().filter(|r| r.iter % 50 == 0) {
        println!("{:4}  value {:.6}  residuals {:.2e} {:.2e}", r.iter, r.value, r.residual1, r.residual2);
    }
    let (r1, r2) = state.residual_norms();
    println!("{:?} after {} iterations: dual {:.6}, residuals {r1:.2e} {r2:.2e}", state.status, state.iterations(), state.dual_value);
    Ok(())
}
