//! One differential attention block on random tokens.
//!
//! Each head subtracts a second softmax map, scaled by its learned λ, from
//! the first. Rows of the difference therefore sum to `1 - λ` instead of 1,
//! and entries can go negative. The printout shows both for every head.
//!
//! ```text
//! cargo run --example differential_attention -- 0.1
//! ```

use otsnet::attention::{dmha_block, AttentionKind, DmhaParams, HeadConfig, RecordSink};
use otsnet::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> otsnet::Result<()> {
    let lambda_init: f64 = std::env::args().nth(1).map_or(Ok(0.05), |s| s.parse()).expect("λ_init must be a number");
    let cfg = HeadConfig::new(32, 4, lambda_init)?;
    let mut store = ParamStore::new();
    let block = DmhaParams::register(&mut store, "dmha", &cfg, 64, false)?;
    store.initialize(11);

    let tokens = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..tokens * 32).map(|_| rng.sample(StandardNormal)).collect();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, tokens, 32], x)?)?;
    let mut sink = RecordSink::new();
    let y = dmha_block(&mut tape, &store, &block, x, &cfg, Some(&mut sink))?;

    println!("{} heads, λ_init = {lambda_init}, output {:?}", cfg.dual_heads()?, tape.value(y).shape());
    for rec in sink.of_kind(AttentionKind::DmhaDiff) {
        let lambda = rec.lambda.unwrap_or(0.0);
        let sums = rec.row_sums();
        let worst = sums.iter().map(|s| (s - (1.0 - lambda)).abs()).fold(0.0, f64::max);
        let negatives = rec.map.data().iter().filter(|&&v| v < 0.0).count();
        println!(
            "head {}: λ = {lambda:.4}  row sum = {:.6}  max |sum - (1 - λ)| = {worst:.1e}  negative entries = {negatives}/{}",
            rec.head,
            sums[0],
            rec.map.len()
        );
    }
    Ok(())
}
