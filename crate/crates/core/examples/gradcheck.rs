//! Checks every differentiable primitive, first and second order, against
//! central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use jachess::autodiff::gradcheck::{check_probe, primitive_probes};

fn main() -> jachess::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for probe in primitive_probes() {
        let c = check_probe(&probe, &mut rng, 1e-5)?;
        let ok = c.first_order < 1e-4 && c.second_order < 1e-4;
        println!("{:<16} first {:.2e}  second {:.2e}  {}", c.name, c.first_order, c.second_order, if ok { "ok" } else { "FAIL" });
    }
    Ok(())
}
