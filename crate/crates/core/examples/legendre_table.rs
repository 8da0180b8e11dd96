//! Tabulates the Hamiltonian `H(a) = sup_b { -ab - L(b) }` for a few costs
//! and recovers the cost from the table by a second transform.
//!
//! ```bash
//! cargo run --release --example legendre_table
//! ```

use mot_bridge::hamiltonian::{legendre, symmetric_a_grid, Lagrangian, LagrangianSpec};

fn main() -> mot_bridge::Result<()> {
    let costs = [
        ("quadratic", Lagrangian::Quadratic { gamma: 1.0 }, 2.0),
        ("cubic", Lagrangian::Power { p: 3.0 }, 3.0),
        ("entropic", Lagrangian::EntropicLike, 2.0),
    ];
    for (name, cost, p) in costs {
        let spec = LagrangianSpec::new(cost.clone(), p, 10.0, 2001)?;
        let h = legendre(&spec, &symmetric_a_grid(2.0, 401), 10.0, 4001)?;
        println!("{name}: max control {:.3}", h.max_control());
        for a in [-1.5, -0.5, 0.0, 0.5, 1.5] {
            println!("  H({a:+.1}) = {:+.6}", h.eval(a)?);
        }
        for b in [0.25, 1.0, 2.0] {
            println!("  L({b}) = {:.6}, recovered {:.6}", cost.eval(b), h.conjugate(b));
        }
    }
    Ok(())
}
