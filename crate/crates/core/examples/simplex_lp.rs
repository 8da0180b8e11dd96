//! A small transport linear program solved with the dense simplex, with its
//! duals and reduced costs.
//!
//! ```bash
//! cargo run --release --example simplex_lp
//! ```

use mot_bridge::primal_oracle::simplex::{solve, LinearProgram};

fn main() -> mot_bridge::Result<()> {
    // two sources, three sinks, cost |i - j|
    let supply = [0.6, 0.4];
    let demand = [0.3, 0.3, 0.4];
    let mut lp = LinearProgram::new(0);
    let mut var = [[0usize; 3]; 2];
    for (i, row) in var.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = lp.add_var((i as f64 - j as f64).abs());
        }
    }
    for (i, &s) in supply.iter().enumerate() {
        lp.add_row((0..3).map(|j| (var[i][j], 1.0)).collect(), s, format!("supply {i}"));
    }
    for (j, &d) in demand.iter().enumerate() {
        lp.add_row((0..2).map(|i| (var[i][j], 1.0)).collect(), d, format!("demand {j}"));
    }
    let sol = solve(&lp)?;
    println!("cost {:.6} after {} pivots", sol.objective, sol.pivots);
    for (i, row) in var.iter().enumerate() {
        println!("  from {i}: {:?}", row.iter().map(|&v| sol.x[v]).collect::<Vec<_>>());
    }
    println!("duals {:?}", sol.duals);
    println!("min reduced cost {:.1e}, residual {:.1e}", sol.min_reduced_cost, sol.primal_residual);
    Ok(())
}
