//! Per-layer penalty factors under every allocation strategy for a fixed
//! smoothness profile.

use jachess::regularizer::{allocate_lambdas, SmoothnessProfile, Strategy};

fn main() -> jachess::Result<()> {
    let norms: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let norms = if norms.is_empty() { vec![2.0, 4.0, 7.5, 12.0] } else { norms };
    let profile = SmoothnessProfile { norms: norms.clone(), calibration_id: "example".into(), projections: 0 };
    let xi = 1e-2;
    println!("profile {norms:?}, xi {xi}");
    for s in Strategy::ALL {
        let l = allocate_lambdas(&profile, xi, s)?;
        let shown: Vec<String> = l.iter().map(|v| format!("{v:.5}")).collect();
        println!("{:<28} [{}]  sum {:.5}", s.name(), shown.join(", "), l.iter().sum::<f64>());
    }
    Ok(())
}
