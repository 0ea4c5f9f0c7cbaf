//! A miniature ablation: every variant of one suite trained briefly on a
//! small corpus, scored on its held-out split.
//!
//! Real comparisons need far longer runs (`otsnet ablate`); this one only
//! shows the harness and the table format.
//!
//! ```text
//! cargo run --example ablation -- sq_variants
//! ```

use otsnet::config::RunConfig;
use otsnet::train::ablation::{run_ablation, Suite};

fn main() -> otsnet::Result<()> {
    let suite: Suite = std::env::args().nth(1).as_deref().unwrap_or("dame").parse()?;
    let mut cfg = RunConfig::default();
    cfg.data.samples = 160;
    cfg.data.holdout = 0.25;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 16;
    cfg.train.lr = 1e-3;

    let table = run_ablation(suite, &cfg, &[1], 1, |line| eprintln!("{line}"))?;
    print!("{table}");
    for v in table.verdicts() {
        println!("{} {}", if v.passed { "holds" } else { "fails" }, v.claim);
    }
    Ok(())
}
