//! Fits a martingale bridge above a truncated Heston reference to two
//! price marginals and reports the attained entropy.
//!
//! ```bash
//! cargo run --release --example schrodinger_bridge
//! ```

use mot_bridge::fokker_planck::evolve_2d_with;
use mot_bridge::measures::{Grid1D, GridMeasure};
use mot_bridge::mot_dual::AscentConfig;
use mot_bridge::sb_dual::{sb_ascend, SbDualState, SbProblem};
use mot_bridge::svm_models::{make_heston, SvmSpec};

fn main() -> mot_bridge::Result<()> {
    let model = make_heston(1.5, 0.04, 0.3, -0.3, (0.01, 1.0))?;
    let spec = SvmSpec { model, x0: 1.0, y0: 0.04 };
    let g = Grid1D::uniform(0.5, 1.5, 21)?;
    let flat = GridMeasure::from_atoms(g.clone(), &[(1.0, 1.0)])?;
    let mut p = SbProblem::new(spec, flat.clone(), flat, (0.0, 0.25, 0.5), Grid1D::uniform(0.01, 0.13, 7)?, 0.5)?;

    // targets: the reference laws, with extra spread at the far date
    let zero = vec![vec![0.0; p.grid.len()]; p.time.n_steps()];
    let f = evolve_2d_with(p.generator(), &zero, &p.initial()?, &p.time)?;
    p.mu1 = f.marginal(p.time.jump_node())?;
    let w = f.last()?.weights().to_vec();
    let mut wide = w.clone();
    for i in 1..w.len() - 1 {
        wide[i] -= 0.1 * w[i];
        wide[i - 1] += 0.05 * w[i];
        wide[i + 1] += 0.05 * w[i];
    }
    p.mu2 = GridMeasure::new(g, wide)?;

    let st = sb_ascend(SbDualState::zero(p.grid.nx()), &p, &AscentConfig { max_iters: 400, ..AscentConfig::default() })?;
    let last = st.history.last().expect("at least one iteration");
    println!("{:?} after {} iterations", st.status, st.history.len());
    println!("dual {:.6}, entropy {:.6}, residuals {:.2e} {:.2e}", st.dual_value, st.entropy, last.residual1, last.residual2);
    Ok(())
}
