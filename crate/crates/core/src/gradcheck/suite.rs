//! Block-by-block and end-to-end gradient checks on small random instances.
//!
//! Every parameter (gains, biases and the zero-initialized λ vectors
//! included) is moved off its initial value first, so that no derivative is
//! checked only at a degenerate point. Block outputs are reduced to a scalar
//! by projecting onto a fixed random tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::attention::{dmha_block, mhca, mhsa_block, DmhaParams, HeadConfig, MhcaParams, MhsaParams};
use crate::autograd::{Tape, Var};
use crate::decoder::{build_fusion, build_mask, decode_train, CharVocab, DecoderConfig, DecoderParams, LabelSequence};
use crate::error::Result;
use crate::model::{ModelConfig, OtsNet};
use crate::param::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::thinking::{GumbelNoise, QuantizeStage, SemanticQuantizer, SlotEncoding, SqMode};
use crate::train::loss_total;

const DIM: usize = 16;
const HEAD: usize = 4;
const BATCH: usize = 2;
const TOKENS: usize = 6;

#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub block: &'static str,
    pub report: GradcheckReport,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Initializes `store` and nudges every element by `N(0, 0.1²)`.
fn perturbed(store: &mut ParamStore, seed: u64) {
    store.initialize(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for p in store.iter_mut() {
        for v in std::sync::Arc::make_mut(&mut p.value).data_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// `Σ y ⊙ R` for a constant `R`.
fn project(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let r = tape.constant(r.clone())?;
    let p = tape.mul(y, r)?;
    tape.sum_all(p)
}

fn heads() -> HeadConfig {
    HeadConfig::new(DIM, HEAD, 0.05).expect("valid head config")
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}

/// Self-attention block on `[2, 6, 16]` tokens, input included.
pub fn check_mhsa(seed: u64, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = heads();
    let mut store = ParamStore::new();
    let p = MhsaParams::register(&mut store, "mhsa", &cfg, 2 * DIM, false)?;
    let x = store.add("input", &[BATCH, TOKENS, DIM], Init::TruncNormal { std: 1.0 })?;
    perturbed(&mut store, seed);
    let r = gaussian(&mut ChaCha8Rng::seed_from_u64(seed), &[BATCH, TOKENS, DIM], 1.0);
    let ids = all_ids(&store);
    gradcheck(&mut store, &ids, opts, |tape, s| {
        let x = tape.param(s, x)?;
        let y = mhsa_block(tape, s, &p, x, &cfg, None)?;
        project(tape, y, &r)
    })
}

/// Differential attention block on `[2, 6, 16]` tokens, input included.
pub fn check_dmha(seed: u64, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = heads();
    let mut store = ParamStore::new();
    let p = DmhaParams::register(&mut store, "dmha", &cfg, 2 * DIM, false)?;
    let x = store.add("input", &[BATCH, TOKENS, DIM], Init::TruncNormal { std: 1.0 })?;
    perturbed(&mut store, seed);
    let r = gaussian(&mut ChaCha8Rng::seed_from_u64(seed), &[BATCH, TOKENS, DIM], 1.0);
    let ids = all_ids(&store);
    gradcheck(&mut store, &ids, opts, |tape, s| {
        let x = tape.param(s, x)?;
        let y = dmha_block(tape, s, &p, x, &cfg, None)?;
        project(tape, y, &r)
    })
}

/// Masked cross-attention: 4 queries over 3 visual plus 4 slot tokens.
pub fn check_mhca(seed: u64, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = heads();
    let (visual, slots) = (3, 4);
    let mut store = ParamStore::new();
    let p = MhcaParams::register(&mut store, "mhca", DIM)?;
    let q = store.add("query", &[BATCH, slots, DIM], Init::TruncNormal { std: 1.0 })?;
    let kv = store.add("key_value", &[BATCH, visual + slots, DIM], Init::TruncNormal { std: 1.0 })?;
    perturbed(&mut store, seed);
    let mask = build_mask(visual, slots)?;
    let r = gaussian(&mut ChaCha8Rng::seed_from_u64(seed), &[BATCH, slots, DIM], 1.0);
    let ids = all_ids(&store);
    gradcheck(&mut store, &ids, opts, |tape, s| {
        let q = tape.param(s, q)?;
        let kv = tape.param(s, kv)?;
        let y = mhca(tape, s, &p, q, kv, &cfg, Some(&mask), None)?;
        project(tape, y, &r)
    })
}

/// Projection, Gumbel-Softmax with frozen noise and codebook lookup, plus a
/// cross-entropy on the pre-noise logits.
pub fn check_sq_chain(seed: u64, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let units = 12;
    let slots = 4;
    let mut store = ParamStore::new();
    let sq = SemanticQuantizer::register(&mut store, "sq", DIM, units, SqMode::Gumbel)?;
    let focus = store.add("focus", &[BATCH, slots, DIM], Init::TruncNormal { std: 1.0 })?;
    perturbed(&mut store, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = gaussian(&mut rng, &[BATCH, slots, DIM], 1.0);
    let noise = gaussian(&mut rng, &[BATCH, slots, units], 1.0);
    let stage = QuantizeStage::Train { tau: 0.7, noise: GumbelNoise::Frozen(noise) };
    let targets: Vec<usize> = (0..BATCH * slots).map(|i| (i * 5 + seed as usize) % units).collect();
    let ids = all_ids(&store);
    gradcheck(&mut store, &ids, opts, |tape, s| {
        let f = tape.param(s, focus)?;
        let out = sq.forward(tape, s, f, &stage)?;
        let y = project(tape, out.features, &r)?;
        let ce = tape.cross_entropy(out.logits, &targets, usize::MAX)?;
        tape.add(y, ce)
    })
}

/// One decoder layer with causal self-attention and the fusion mask.
pub fn check_mmcv_layer(seed: u64, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let (visual, len) = (3, 4);
    let cfg = DecoderConfig { depth: 1, heads: heads(), max_len: len, mlp_hidden: 2 * DIM };
    let mut store = ParamStore::new();
    let p = DecoderParams::register(&mut store, "decoder", &cfg)?;
    let v = store.add("visual", &[BATCH, visual, DIM], Init::TruncNormal { std: 1.0 })?;
    let sem = store.add("semantic", &[BATCH, len, DIM], Init::TruncNormal { std: 1.0 })?;
    perturbed(&mut store, seed);
    let slots = SlotEncoding::new(len, DIM);
    let r = gaussian(&mut ChaCha8Rng::seed_from_u64(seed), &[BATCH, len, CharVocab::SIZE], 1.0);
    let input: Vec<usize> = (0..BATCH * len).map(|i| (i * 7 + seed as usize) % CharVocab::SIZE).collect();
    let ids = all_ids(&store);
    gradcheck(&mut store, &ids, opts, |tape, s| {
        let v = tape.param(s, v)?;
        let sem = tape.param(s, sem)?;
        let fusion = build_fusion(tape, v, sem)?;
        let y = decode_train(tape, s, &p, &fusion, &input, &cfg, &slots, None)?;
        project(tape, y, &r)
    })
}

/// Small model used by the end-to-end check.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        image_height: 4,
        image_width: 8,
        patch_height: 2,
        patch_width: 4,
        model_dim: 8,
        head_dim: 2,
        encoder_depth: 5,
        slots: 4,
        decoder_depth: 1,
        ..ModelConfig::default()
    }
}

/// Full training loss (character and quantizer terms, `alpha = 0.3`) on a
/// one-sample batch with frozen Gumbel noise.
pub fn check_end_to_end(seed: u64, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = toy_model();
    let mut net = OtsNet::uninitialized(cfg.clone())?;
    perturbed(&mut net.store, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::new(
        &[1, 1, cfg.image_height, cfg.image_width],
        (0..cfg.image_height * cfg.image_width).map(|_| rng.random::<f64>()).collect(),
    )?;
    let label = LabelSequence::from_text("ab")?;
    let len = (label.len() + 1).min(cfg.slots);
    let noise = gaussian(&mut rng, &[1, len, CharVocab::CLASSES], 1.0);
    let stage = QuantizeStage::Train { tau: 0.7, noise: GumbelNoise::Frozen(noise) };
    let mut store = net.store.clone();
    let ids = all_ids(&store);
    gradcheck(&mut store, &ids, opts, |tape, s| {
        net.store.clone_from(s);
        let fwd = net.forward_train(tape, &image, std::slice::from_ref(&label), &stage, None)?;
        Ok(loss_total(tape, &fwd, 0.3)?.total)
    })
}

/// Every check above, in a fixed order.
pub fn block_suite(seed: u64, opts: GradcheckOptions) -> Result<Vec<BlockCheck>> {
    type Check = fn(u64, GradcheckOptions) -> Result<GradcheckReport>;
    let checks: [(&'static str, Check); 6] = [
        ("mhsa", check_mhsa),
        ("dmha", check_dmha),
        ("mhca", check_mhca),
        ("sq_chain", check_sq_chain),
        ("mmcv_layer", check_mmcv_layer),
        ("end_to_end", check_end_to_end),
    ];
    checks.iter().map(|&(block, f)| Ok(BlockCheck { block, report: f(seed, opts)? })).collect()
}
