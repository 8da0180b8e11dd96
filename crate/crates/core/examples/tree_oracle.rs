//! Solves the entropic bridge on a trinomial Heston tree exactly, in primal
//! and dual form, and compares the two values.
//!
//! ```bash
//! cargo run --release --example tree_oracle
//! ```

use mot_bridge::measures::Grid1D;
use mot_bridge::primal_oracle::entropy::solve_entropy_dual;
use mot_bridge::primal_oracle::tree::{sb_program, solve_discrete_sb, PathTree, SbTargets};
use mot_bridge::svm_models::make_heston;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mot_bridge::Result<()> {
    let model = make_heston(1.0, 0.04, 0.3, -0.5, (0.01, 1.0))?;
    let tree = PathTree::trinomial(&model, 1.0, 0.04, (0.0, 0.5, 1.0), (2, 2))?;
    println!("{} paths over {} levels", tree.n_paths(), tree.depth());

    // targets attained by some other martingale measure on the same tree
    let q = tree.perturbed_martingale_measure(0.4, &mut ChaCha8Rng::seed_from_u64(3));
    let grid = |level: usize| {
        let (lo, hi) = tree.x_range(level);
        Grid1D::uniform(lo - 1e-9, hi + 1e-9, 7)
    };
    let l1 = tree.t1_level.expect("tree starts before T1");
    let targets = SbTargets {
        mu1: Some(tree.x_marginal(&q, l1, &grid(l1)?)?),
        mu2: tree.x_marginal(&q, tree.depth(), &grid(tree.depth())?)?,
        mu3: None,
    };
    let primal = solve_discrete_sb(&tree, &targets)?;
    let dual = solve_entropy_dual(&sb_program(&tree, &targets)?, 1e-12, 200_000)?;
    println!("primal {:.10} in {} Newton steps, KKT {:.1e}", primal.value, primal.newton_steps, primal.kkt.max());
    println!("dual   {:.10} in {} sweeps", dual.value, dual.sweeps);
    Ok(())
}
