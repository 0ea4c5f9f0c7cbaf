//! Central-difference gradient checks for every block of the network.
//!
//! ```text
//! cargo run --example gradcheck_blocks -- 42
//! ```

use otsnet::gradcheck::suite::block_suite;
use otsnet::gradcheck::GradcheckOptions;

fn main() -> otsnet::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let opts = GradcheckOptions::default();
    let mut all = true;
    for check in block_suite(seed, opts)? {
        let r = &check.report;
        let elements: usize = r.params.iter().map(|p| p.elements).sum();
        println!(
            "{:<11} {} params, {elements} elements, max rel err {:.2e}  {}",
            check.block,
            r.params.len(),
            r.max_rel_err(),
            if r.passed() { "ok" } else { "FAILED" }
        );
        all &= r.passed();
    }
    if !all {
        std::process::exit(1);
    }
    Ok(())
}
