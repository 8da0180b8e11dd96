//! Pushes a point mass forward under a diffusion field and checks that the
//! marginals increase in the convex order.
//!
//! ```bash
//! cargo run --release --example forward_flow
//! ```

use mot_bridge::fokker_planck::evolve_1d;
use mot_bridge::hamiltonian::{Lagrangian, LagrangianSpec};
use mot_bridge::hj_solver::{mot_stable_dt, TimeGrid};
use mot_bridge::measures::{convex_order, Grid1D, GridMeasure};

fn main() -> mot_bridge::Result<()> {
    let g = Grid1D::uniform(-3.0, 3.0, 61)?;
    let spec = LagrangianSpec::new(Lagrangian::Quadratic { gamma: 1.0 }, 2.0, 2.0, 101)?;
    let tg = TimeGrid::with_max_step(0.0, 0.5, 1.0, 0.9 * mot_stable_dt(&g, 2.0))?;
    // more diffusion away from the origin
    let b: Vec<Vec<f64>> = (0..tg.n_steps()).map(|_| g.map(|x| 0.2 + 0.3 * x.abs().min(2.0))).collect();
    let m0 = GridMeasure::from_atoms(g.clone(), &[(0.0, 1.0)])?;
    let flow = evolve_1d(&b, &m0, &tg, &spec)?;

    let marks = [0, flow.marginals.len() / 2, flow.marginals.len() - 1];
    for w in marks.windows(2) {
        let (a, c) = (flow.marginal(w[0])?, flow.marginal(w[1])?);
        let r = convex_order(&a, &c);
        println!("t={:.3} -> t={:.3}: ordered {}, mean {:+.2e}", flow.times[w[0]], flow.times[w[1]], r.holds, c.mean());
    }
    println!("transport cost {:.6}", flow.cost);
    Ok(())
}
