//! Gumbel-Softmax quantization of slot features onto a codebook.
//!
//! The same logits are pushed through the relaxation at falling
//! temperatures. As τ shrinks the weights approach the one-hot of the
//! perturbed argmax and the reconstructed feature approaches a single
//! codebook row.

use otsnet::thinking::{gumbel_softmax, hard_quantize, GumbelNoise, QuantizeStage, SemanticQuantizer, SqMode};
use otsnet::{ParamStore, Tape, Tensor};

fn main() -> otsnet::Result<()> {
    let (dim, units, slots) = (16, 10, 3);
    let mut store = ParamStore::new();
    let sq = SemanticQuantizer::register(&mut store, "sq", dim, units, SqMode::Gumbel)?;
    store.initialize(5);

    let focus: Vec<f64> = (0..slots * dim).map(|i| ((i * 37 % 23) as f64 / 11.5) - 1.0).collect();
    let focus = Tensor::new(&[1, slots, dim], focus)?;

    let noise = GumbelNoise::Sampled { seed: 9, step: 0 };
    for tau in [2.0, 1.0, 0.5, 0.1, 0.01] {
        let mut tape = Tape::new();
        let f = tape.constant(focus.clone())?;
        let out = sq.forward(&mut tape, &store, f, &QuantizeStage::Train { tau, noise: noise.clone() })?;
        let weights = tape.value(out.weights.expect("gumbel mode yields weights"));
        let peaks: Vec<String> = weights.data().chunks(units).map(|r| format!("{:.3}", r.iter().cloned().fold(0.0, f64::max))).collect();
        println!("τ = {tau:<5} largest weight per slot: {}", peaks.join(" "));
    }

    // The relaxation on its own, and the hard choice used at inference.
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::new(&[1, 1, 4], vec![1.0, 2.0, 0.5, 1.9])?)?;
    let soft = gumbel_softmax(&mut tape, logits, 0.5, &GumbelNoise::None)?;
    println!("noise-free softmax at τ = 0.5: {:?}", tape.value(soft).data());
    println!("hard choice: {:?}", hard_quantize(tape.value(logits)));
    Ok(())
}
