//! Reads a call price curve from CSV, recovers the implied law on a grid
//! and prices the curve back.
//!
//! ```bash
//! cargo run --release --example ingest_calls
//! ```

use mot_bridge::measures::{breeden_litzenberger, call_prices, CallCurve, Grid1D};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/instances/calls_1y.csv");
    let mut strikes = Vec::new();
    let mut prices = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let (k, c): (f64, f64) = row?;
        strikes.push(k);
        prices.push(c);
    }
    let curve = CallCurve::new(1.0, strikes.clone(), prices.clone());
    let grid = Grid1D::uniform(0.05, 4.0, 80)?;
    let mu = breeden_litzenberger(&curve, &grid)?;
    println!("{} quotes, implied mean {:.6}", strikes.len(), mu.mean());
    let back = call_prices(&mu, &strikes);
    let worst = back.iter().zip(&prices).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("largest repricing error {worst:.2e}");
    Ok(())
}
