//! Compares sampled VIX put prices with the bound implied by a law of the
//! log-contract value, for a contracted sample and for a violator.
//!
//! ```bash
//! cargo run --release --example vix_put_bound
//! ```

use mot_bridge::measures::{Grid1D, GridMeasure};
use mot_bridge::vix::{vix_index, vix_put_bound};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mot_bridge::Result<()> {
    let tau = 30.0 / 365.0;
    let level = |vix: f64| (vix / 100.0).powi(2) * tau / 2.0;
    let g = Grid1D::uniform(0.0, level(60.0), 21)?;
    let mu3 = GridMeasure::project_atoms(g.clone(), &[(level(12.0), 0.3), (level(20.0), 0.4), (level(40.0), 0.3)])?;
    let strikes = [10.0, 15.0, 20.0, 25.0, 30.0];

    let atoms: Vec<(f64, f64)> = mu3.support().collect();
    let m = mu3.mean();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut draw = || {
        let mut u: f64 = rng.gen();
        for &(x, p) in &atoms {
            if u <= p {
                return x;
            }
            u -= p;
        }
        atoms[atoms.len() - 1].0
    };
    let inside: Vec<f64> = (0..20_000).map(|_| m + 0.5 * (draw() - m)).collect();
    let outside: Vec<f64> = (0..20_000).map(|i| if i % 4 == 0 { 0.0 } else { level(28.0) }).collect();

    for (name, samples) in [("contracted", &inside), ("violator", &outside)] {
        let r = vix_put_bound(&mu3, samples, &strikes, 0.0, tau)?;
        println!("{name}: {} failing strikes", r.failures);
        for row in &r.rows {
            println!("  K={:4.1}  sample {:.4} ± {:.4}  bound {:.4}  {}", row.strike, row.sample, row.se, row.bound, row.pass);
        }
    }
    println!("VIX at the middle atom: {:.2}", vix_index(level(20.0), 0.0, tau)?);
    Ok(())
}
