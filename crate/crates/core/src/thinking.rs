//! Thinking stage: sinusoidal slot queries, position-aware alignment of
//! visual tokens to character slots, and the semantic quantizer.

use std::fmt;
use std::str::FromStr;

use crate::attention::{linear, mhca, AttentionKind, HeadConfig, MhcaParams, RecordSink};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{mix, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fixed sinusoidal table `[T, D]`: even columns `sin(t / 10000^(2i/D))`,
/// odd columns the matching cosine.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotEncoding {
    pub slots: usize,
    pub dim: usize,
    pub table: Tensor,
}

impl SlotEncoding {
    pub fn new(slots: usize, dim: usize) -> Self {
        let mut data = vec![0.0; slots * dim];
        for t in 0..slots {
            for i in 0..dim.div_ceil(2) {
                let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
                data[t * dim + 2 * i] = angle.sin();
                if 2 * i + 1 < dim {
                    data[t * dim + 2 * i + 1] = angle.cos();
                }
            }
        }
        SlotEncoding { slots, dim, table: Tensor::new(&[slots, dim], data).expect("slot table") }
    }

    /// First `len` rows.
    pub fn rows(&self, len: usize) -> Result<Tensor> {
        if len == 0 || len > self.slots {
            return Err(Error::dim("slot_encoding", format!("{len} rows of a {}-slot table", self.slots)));
        }
        Tensor::new(&[len, self.dim], self.table.data()[..len * self.dim].to_vec())
    }

    /// First `len` rows repeated over a batch: `[B, len, D]`.
    pub fn batched(&self, batch: usize, len: usize) -> Result<Tensor> {
        let rows = self.rows(len)?;
        let data = rows.data().repeat(batch);
        Tensor::new(&[batch, len, self.dim], data)
    }
}

/// Temperature `τ(step) = max(end, start · decay^step)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub decay: f64,
}

impl TemperatureSchedule {
    /// Exponential decay reaching `end` after `total_steps`.
    pub fn over_run(start: f64, end: f64, total_steps: usize) -> Result<Self> {
        if !(start >= end && end > 0.0) {
            return Err(Error::Config(format!("temperature schedule needs start >= end > 0, got {start} -> {end}")));
        }
        let decay = if total_steps == 0 { 1.0 } else { (end / start).powf(1.0 / total_steps as f64) };
        Ok(TemperatureSchedule { start, end, decay })
    }

    pub fn at(&self, step: usize) -> f64 {
        (self.start * self.decay.powi(step as i32)).max(self.end)
    }
}

/// Learnable `[C, D]` matrix of semantic-unit embeddings.
#[derive(Debug, Clone, Copy)]
pub struct Codebook {
    pub embeddings: ParamId,
    pub units: usize,
    pub dim: usize,
}

impl Codebook {
    pub fn register(store: &mut ParamStore, name: &str, units: usize, dim: usize) -> Result<Self> {
        let embeddings = store.add(name, &[units, dim], Init::TruncNormal { std: 1.0 })?;
        Ok(Codebook { embeddings, units, dim })
    }
}

/// Position-aware alignment: slot queries attend over visual tokens,
/// producing one focus feature per character slot.
pub fn pam_align(
    tape: &mut Tape,
    store: &ParamStore,
    p: &MhcaParams,
    slot_queries: Var,
    visual: Var,
    cfg: &HeadConfig,
    rec: Option<&mut RecordSink>,
) -> Result<Var> {
    mhca(tape, store, p, slot_queries, visual, cfg, None, rec.map(|r| (r, AttentionKind::Mhca)))
}

/// Affine map to semantic-unit logits, `[B, T, D] -> [B, T, C]`.
#[derive(Debug, Clone, Copy)]
pub struct SqProjection {
    pub w: ParamId,
    pub b: ParamId,
}

impl SqProjection {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize, units: usize) -> Result<Self> {
        Ok(SqProjection {
            w: store.add(format!("{prefix}.w"), &[dim, units], Init::fan_in(dim))?,
            b: store.add(format!("{prefix}.b"), &[units], Init::Zeros)?,
        })
    }
}

pub fn sq_project(tape: &mut Tape, store: &ParamStore, p: &SqProjection, focus: Var) -> Result<Var> {
    linear(tape, store, focus, p.w, Some(p.b))
}

/// Source of Gumbel perturbations.
#[derive(Debug, Clone)]
pub enum GumbelNoise {
    /// Counter-based stream keyed by `(seed, step, sample, slot, unit)`.
    Sampled { seed: u64, step: u64 },
    /// Explicit noise with the logits' shape.
    Frozen(Tensor),
    None,
}

/// Uniform in the open interval (0, 1) from a hash of the key.
fn keyed_uniform(seed: u64, step: u64, sample: u64, slot: u64, unit: u64) -> f64 {
    let h = mix(mix(mix(seed, step), mix(sample, slot)), unit);
    ((h >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Standard Gumbel sample `−ln(−ln U)`.
pub fn gumbel(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Materializes the keyed noise for logits of shape `[B, T, C]`, with
/// sample indices starting at `first_sample`.
pub fn gumbel_noise(seed: u64, step: u64, first_sample: u64, shape: &[usize]) -> Result<Tensor> {
    let [b, t, c] = *shape else {
        return Err(Error::dim("gumbel_noise", format!("expected [B, T, C], got {shape:?}")));
    };
    let mut data = Vec::with_capacity(b * t * c);
    for n in 0..b {
        for s in 0..t {
            for u in 0..c {
                data.push(gumbel(keyed_uniform(seed, step, first_sample + n as u64, s as u64, u as u64)));
            }
        }
    }
    Tensor::new(shape, data)
}

/// `softmax((q + G) / τ)` over the last axis.
pub fn gumbel_softmax(tape: &mut Tape, q: Var, tau: f64, noise: &GumbelNoise) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    let perturbed = match noise {
        GumbelNoise::None => q,
        GumbelNoise::Frozen(g) => {
            let g = tape.constant(g.clone())?;
            tape.add(q, g)?
        }
        GumbelNoise::Sampled { seed, step } => {
            let g = gumbel_noise(*seed, *step, 0, tape.shape(q))?;
            let g = tape.constant(g)?;
            tape.add(q, g)?
        }
    };
    let scaled = tape.scale(perturbed, 1.0 / tau)?;
    tape.softmax(scaled)
}

/// Argmax of each row over the last axis; ties go to the lowest index.
pub fn hard_quantize(q: &Tensor) -> Vec<usize> {
    q.data().chunks(q.last_dim()).map(argmax).collect()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One-hot rows `[len(ids), C]`.
pub fn one_hot(ids: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; ids.len() * classes];
    for (r, &i) in ids.iter().enumerate() {
        data[r * classes + i] = 1.0;
    }
    Tensor::new(&[ids.len(), classes], data).expect("one-hot shape")
}

/// `F_q = p · E`: each slot's feature is the `p`-weighted sum of codebook
/// rows. Rows of `p` must be distributions.
pub fn codebook_embed(tape: &mut Tape, store: &ParamStore, p: Var, codebook: &Codebook) -> Result<Var> {
    let pv = tape.value(p);
    if pv.last_dim() != codebook.units {
        return Err(Error::dim("codebook_embed", format!("{:?} against {} units", pv.shape(), codebook.units)));
    }
    if let Some(r) = pv.data().chunks(codebook.units).position(|row| (row.iter().sum::<f64>() - 1.0).abs() > 1e-6) {
        return Err(Error::Contract(format!("codebook weights row {r} does not sum to 1")));
    }
    let e = tape.param(store, codebook.embeddings)?;
    tape.matmul(p, e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SqMode {
    /// No quantization: focus features go to the decoder as they are.
    None,
    /// `softmax(Q) · E` with full gradient.
    Normal,
    /// As `Normal`, but no gradient from the codebook path into `Q`.
    Detach,
    /// Gumbel-Softmax relaxation in training, hard argmax at inference.
    Gumbel,
}

impl fmt::Display for SqMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SqMode::None => "none",
            SqMode::Normal => "normal",
            SqMode::Detach => "detach",
            SqMode::Gumbel => "gumbel",
        })
    }
}

impl FromStr for SqMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SqMode::None),
            "normal" => Ok(SqMode::Normal),
            "detach" => Ok(SqMode::Detach),
            "gumbel" => Ok(SqMode::Gumbel),
            other => Err(Error::Config(format!("unknown quantizer mode `{other}`"))),
        }
    }
}

/// How the quantizer turns logits into codebook weights on this pass.
#[derive(Debug, Clone)]
pub enum QuantizeStage {
    Train { tau: f64, noise: GumbelNoise },
    Infer,
}

#[derive(Debug, Clone, Copy)]
pub struct SemanticQuantizer {
    pub projection: SqProjection,
    pub codebook: Codebook,
    pub mode: SqMode,
}

#[derive(Debug, Clone, Copy)]
pub struct SqOutput {
    /// Pre-noise logits `Q`, `[B, T, C]`.
    pub logits: Var,
    /// Codebook weights, absent in `SqMode::None`.
    pub weights: Option<Var>,
    /// Features handed to the decoder, `[B, T, D]`.
    pub features: Var,
}

impl SemanticQuantizer {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize, units: usize, mode: SqMode) -> Result<Self> {
        Ok(SemanticQuantizer {
            projection: SqProjection::register(store, &format!("{prefix}.phi"), dim, units)?,
            codebook: Codebook::register(store, &format!("{prefix}.codebook"), units, dim)?,
            mode,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, focus: Var, stage: &QuantizeStage) -> Result<SqOutput> {
        let logits = sq_project(tape, store, &self.projection, focus)?;
        let weights = match (self.mode, stage) {
            (SqMode::None, _) => None,
            (SqMode::Normal, _) => Some(tape.softmax(logits)?),
            (SqMode::Detach, _) => {
                let cut = tape.detach(logits)?;
                Some(tape.softmax(cut)?)
            }
            (SqMode::Gumbel, QuantizeStage::Train { tau, noise }) => Some(gumbel_softmax(tape, logits, *tau, noise)?),
            (SqMode::Gumbel, QuantizeStage::Infer) => {
                let lv = tape.value(logits);
                let hot = one_hot(&hard_quantize(lv), self.codebook.units).reshape(lv.shape())?;
                Some(tape.constant(hot)?)
            }
        };
        let features = match weights {
            Some(w) => codebook_embed(tape, store, w, &self.codebook)?,
            None => focus,
        };
        Ok(SqOutput { logits, weights, features })
    }
}
