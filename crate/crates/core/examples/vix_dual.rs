//! Evaluates the joint SPX/VIX dual value for a constant volatility model
//! and checks that it does not move when the VIX potential is shifted.
//!
//! ```bash
//! cargo run --release --example vix_dual
//! ```

use mot_bridge::measures::{Grid1D, GridMeasure};
use mot_bridge::svm_models::{SvmModel, SvmSpec};
use mot_bridge::vix::{vix_dual_value, ConvexPiecewise, VixGrids, VixInstance};

fn main() -> mot_bridge::Result<()> {
    let model = SvmModel::Constant { sigma_tilde: 1.0, b: 0.0, tau1: 0.0, tau2: 0.2 };
    let g = Grid1D::uniform(0.5, 1.5, 21)?;
    let inst = VixInstance {
        spec: SvmSpec { model, x0: 1.0, y0: 1.0 },
        mu1: GridMeasure::from_atoms(g.clone(), &[(0.9, 0.5), (1.1, 0.5)])?,
        mu2: GridMeasure::from_atoms(g, &[(0.8, 0.5), (1.2, 0.5)])?,
        mu3: GridMeasure::from_atoms(Grid1D::uniform(0.0, 0.02, 11)?, &[(0.004, 1.0)])?,
        t0: 0.0,
        t1: 0.1,
        t2: 0.2,
    };
    let grids = VixGrids::new(&inst, Grid1D::uniform(-0.8, 0.8, 33)?, Grid1D::uniform(0.5, 1.5, 5)?, 2.0, 21, 41, 0.5)?;
    let u1 = inst.mu1.grid().map(|x| -0.2 * (x - 1.0).abs());
    let u2 = inst.mu2.grid().map(|x| 0.1 * (x - 1.0).powi(2));
    let u3 = ConvexPiecewise::new(vec![0.0, 0.004, 0.01], 0.0, vec![-2.0, 0.0, 1.0])?;

    let r = vix_dual_value(&inst, &u1, &u2, &u3, &grids)?;
    let shifted = vix_dual_value(&inst, &u1, &u2, &u3.shifted(0.7), &grids)?;
    println!("dual {:.8} (shifted potential {:.8})", r.dual_value, shifted.dual_value);
    println!("u(t0) {:.6}, pairings {:?}", r.value_at_start, r.pairing);
    println!("bound excursion {:.1e}, concavity defect {:.1e}", r.phi_bound_violation, r.concavity_violation);
    Ok(())
}
