//! Spelling stage: fusion of visual and glyph-semantic tokens and the masked
//! autoregressive character decoder.

use std::fmt;

use crate::attention::{
    linear, mhca, AttentionKind, AttentionMask, HeadConfig, LayerNormParams, MhcaParams, MlpParams, RecordSink,
};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::thinking::SlotEncoding;

/// Printable ASCII `' '..='~'` plus a replacement class, then the three
/// framing tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CharVocab;

impl CharVocab {
    pub const CLASSES: usize = 96;
    pub const BOS: usize = 96;
    pub const EOS: usize = 97;
    pub const PAD: usize = 98;
    pub const SIZE: usize = 99;
    const UNKNOWN: usize = 95;

    pub fn id(c: char) -> Option<usize> {
        match c {
            ' '..='~' => Some(c as usize - 0x20),
            char::REPLACEMENT_CHARACTER => Some(Self::UNKNOWN),
            _ => None,
        }
    }

    pub fn char(id: usize) -> Option<char> {
        match id {
            0..=94 => char::from_u32(id as u32 + 0x20),
            Self::UNKNOWN => Some(char::REPLACEMENT_CHARACTER),
            _ => None,
        }
    }

    pub fn encode(text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| Self::id(c).ok_or_else(|| Error::Contract(format!("character {c:?} is outside the vocabulary"))))
            .collect()
    }

    pub fn decode(ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| Self::char(i)).collect()
    }
}

/// Character ids of one label, without framing.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= CharVocab::CLASSES) {
            return Err(Error::Index { op: "label", id: bad, bound: CharVocab::CLASSES });
        }
        Ok(LabelSequence(ids))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(LabelSequence(CharVocab::encode(text)?))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn text(&self) -> String {
        CharVocab::decode(&self.0)
    }

    fn check_fits(&self, len: usize) -> Result<()> {
        if self.0.len() > len {
            return Err(Error::Contract(format!("label of {} characters exceeds the {len}-step decoder", self.0.len())));
        }
        Ok(())
    }

    /// `[BOS, c1, .., c_{len-1}]` padded to `len`.
    pub fn decoder_input(&self, len: usize) -> Result<Vec<usize>> {
        self.check_fits(len)?;
        let mut out = Vec::with_capacity(len);
        out.push(CharVocab::BOS);
        out.extend(self.0.iter().copied().take(len - 1));
        out.resize(len, CharVocab::PAD);
        Ok(out)
    }

    /// `[c1, .., cn, EOS]` padded to `len`; EOS is dropped when `n == len`.
    pub fn decoder_targets(&self, len: usize) -> Result<Vec<usize>> {
        self.check_fits(len)?;
        let mut out = self.0.clone();
        out.push(CharVocab::EOS);
        out.resize(len, CharVocab::PAD);
        Ok(out)
    }

    /// One target per semantic slot: `[c1, .., cn]` padded to `slots`.
    pub fn slot_targets(&self, slots: usize) -> Result<Vec<usize>> {
        self.check_fits(slots)?;
        let mut out = self.0.clone();
        out.resize(slots, CharVocab::PAD);
        Ok(out)
    }
}

/// `Concat(F_v, F_q)` along the token axis.
#[derive(Debug, Clone, Copy)]
pub struct FusionFeatures {
    pub tokens: Var,
    pub visual: usize,
    pub slots: usize,
}

pub fn build_fusion(tape: &mut Tape, visual: Var, semantic: Var) -> Result<FusionFeatures> {
    let (sv, sq) = (tape.shape(visual).to_vec(), tape.shape(semantic).to_vec());
    if sv.len() != 3 || sq.len() != 3 || sv[0] != sq[0] || sv[2] != sq[2] {
        return Err(Error::shapes("build_fusion", &sv, &sq));
    }
    let tokens = tape.concat(&[visual, semantic], 1)?;
    Ok(FusionFeatures { tokens, visual: sv[1], slots: sq[1] })
}

impl FusionFeatures {
    /// Visual tokens alone, for a decoder without a semantic stream.
    pub fn visual_only(tape: &Tape, visual: Var) -> Result<FusionFeatures> {
        match *tape.shape(visual) {
            [_, n, _] => Ok(FusionFeatures { tokens: visual, visual: n, slots: 0 }),
            ref s => Err(Error::dim("fusion", format!("expected [B, N, D], got {s:?}"))),
        }
    }

    /// Keeps the visual tokens and the first `slots` semantic tokens.
    pub fn crop(&self, tape: &mut Tape, slots: usize) -> Result<FusionFeatures> {
        if slots == self.slots {
            return Ok(*self);
        }
        if slots > self.slots {
            return Err(Error::dim("fusion_crop", format!("{slots} of {} slots", self.slots)));
        }
        let tokens = tape.slice(self.tokens, 1, 0, self.visual + slots)?;
        Ok(FusionFeatures { tokens, visual: self.visual, slots })
    }
}

/// Step `i` sees every visual token and semantic slots `0..=i`.
pub fn build_mask(visual: usize, slots: usize) -> Result<AttentionMask> {
    if visual == 0 || slots == 0 {
        return Err(Error::dim("build_mask", format!("{visual} visual tokens, {slots} slots")));
    }
    AttentionMask::from_fn(slots, visual + slots, |i, j| j <= visual + i)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub heads: HeadConfig,
    pub max_len: usize,
    pub mlp_hidden: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::ConfigKey { key: "decoder_depth".into(), reason: "must be at least 1".into() });
        }
        if self.max_len == 0 {
            return Err(Error::ConfigKey { key: "max_len".into(), reason: "must be at least 1".into() });
        }
        self.heads.validate()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerParams {
    pub ln_self: LayerNormParams,
    pub self_attn: MhcaParams,
    pub ln_cross: LayerNormParams,
    pub cross_attn: MhcaParams,
    pub ln_mlp: LayerNormParams,
    pub mlp: MlpParams,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub embed: ParamId,
    pub layers: Vec<DecoderLayerParams>,
    pub final_ln: LayerNormParams,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl DecoderParams {
    pub fn register(store: &mut ParamStore, prefix: &str, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.heads.model_dim;
        let embed = store.add(format!("{prefix}.embed"), &[CharVocab::SIZE, d], Init::TruncNormal { std: 1.0 })?;
        let layers = (0..cfg.depth)
            .map(|i| {
                let p = format!("{prefix}.layer{i}");
                Ok(DecoderLayerParams {
                    ln_self: LayerNormParams::register(store, &format!("{p}.ln_self"), d)?,
                    self_attn: MhcaParams::register(store, &format!("{p}.self_attn"), d)?,
                    ln_cross: LayerNormParams::register(store, &format!("{p}.ln_cross"), d)?,
                    cross_attn: MhcaParams::register(store, &format!("{p}.cross_attn"), d)?,
                    ln_mlp: LayerNormParams::register(store, &format!("{p}.ln_mlp"), d)?,
                    mlp: MlpParams::register(store, &format!("{p}.mlp"), d, cfg.mlp_hidden)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderParams {
            embed,
            layers,
            final_ln: LayerNormParams::register(store, &format!("{prefix}.final_ln"), d)?,
            head_w: store.add(format!("{prefix}.head.w"), &[d, CharVocab::SIZE], Init::fan_in(d))?,
            head_b: store.add(format!("{prefix}.head.b"), &[CharVocab::SIZE], Init::Zeros)?,
        })
    }
}

/// Table lookup plus the slot sinusoid: `ids` is `[B * len]` row-major.
pub fn char_embed(
    tape: &mut Tape,
    store: &ParamStore,
    table: ParamId,
    ids: &[usize],
    batch: usize,
    slots: &SlotEncoding,
) -> Result<Var> {
    if batch == 0 || ids.len() % batch != 0 {
        return Err(Error::dim("char_embed", format!("{} ids for batch {batch}", ids.len())));
    }
    let len = ids.len() / batch;
    let t = tape.param(store, table)?;
    let e = tape.embedding(t, ids, &[batch, len])?;
    let pe = tape.constant(slots.rows(len)?)?;
    tape.add(e, pe)
}

/// Teacher-forced pass over `input` (`[B * len]` ids). Only the first `len`
/// semantic slots can influence the output, so the fusion is cropped to them.
/// Returns logits `[B, len, vocab]`.
#[allow(clippy::too_many_arguments)]
pub fn decode_train(
    tape: &mut Tape,
    store: &ParamStore,
    p: &DecoderParams,
    fusion: &FusionFeatures,
    input: &[usize],
    cfg: &DecoderConfig,
    slots: &SlotEncoding,
    mut rec: Option<&mut RecordSink>,
) -> Result<Var> {
    let batch = tape.shape(fusion.tokens)[0];
    let len = input.len() / batch.max(1);
    // without semantic tokens every step sees the visual tokens only
    let used = if fusion.slots == 0 { 0 } else { len };
    if len == 0 || len > cfg.max_len || used > fusion.slots || len * batch != input.len() {
        return Err(Error::dim(
            "decode_train",
            format!("{} ids for batch {batch}, max_len {}, {} slots", input.len(), cfg.max_len, fusion.slots),
        ));
    }
    let fusion = fusion.crop(tape, used)?;
    let cross_mask = if used == 0 { None } else { Some(build_mask(fusion.visual, len)?) };
    let causal = AttentionMask::causal(len);

    let mut c = char_embed(tape, store, p.embed, input, batch, slots)?;
    for (i, l) in p.layers.iter().enumerate() {
        if let Some(r) = rec.as_deref_mut() {
            r.layer = i;
        }
        let h = l.ln_self.apply(tape, store, c)?;
        let r = rec.as_deref_mut().map(|r| (r, AttentionKind::MmcvSelf));
        let a = mhca(tape, store, &l.self_attn, h, h, &cfg.heads, Some(&causal), r)?;
        c = tape.add(c, a)?;

        let h = l.ln_cross.apply(tape, store, c)?;
        let r = rec.as_deref_mut().map(|r| (r, AttentionKind::MmcvCross));
        let a = mhca(tape, store, &l.cross_attn, h, fusion.tokens, &cfg.heads, cross_mask.as_ref(), r)?;
        c = tape.add(c, a)?;

        let h = l.ln_mlp.apply(tape, store, c)?;
        let m = l.mlp.apply(tape, store, h)?;
        c = tape.add(c, m)?;
    }
    let c = p.final_ln.apply(tape, store, c)?;
    linear(tape, store, c, p.head_w, Some(p.head_b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Eos,
    MaxLen,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Eos => "eos",
            StopReason::MaxLen => "max_len",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recognition {
    pub label: LabelSequence,
    /// Probability of every chosen id, including a final EOS.
    pub confidences: Vec<f64>,
    pub stop: StopReason,
}

impl Recognition {
    pub fn text(&self) -> String {
        self.label.text()
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.confidences.is_empty() {
            return 0.0;
        }
        self.confidences.iter().sum::<f64>() / self.confidences.len() as f64
    }
}

/// Greedy choice among recognition classes and EOS, with its probability.
pub(crate) fn greedy_pick(logits: &[f64]) -> (usize, f64) {
    let allowed = |i: usize| i < CharVocab::CLASSES || i == CharVocab::EOS;
    let mut best = 0;
    for i in 1..logits.len() {
        if allowed(i) && logits[i] > logits[best] {
            best = i;
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    (best, (logits[best] - max).exp() / z)
}

/// Greedy autoregressive decoding of a whole batch. The prefix is re-run
/// from scratch at each step; finished rows keep decoding but are ignored.
pub fn decode_infer(
    store: &ParamStore,
    p: &DecoderParams,
    tape: &mut Tape,
    fusion: &FusionFeatures,
    cfg: &DecoderConfig,
    slots: &SlotEncoding,
) -> Result<Vec<Recognition>> {
    let batch = tape.shape(fusion.tokens)[0];
    let steps = if fusion.slots == 0 { cfg.max_len } else { cfg.max_len.min(fusion.slots) };
    let mut prefix: Vec<Vec<usize>> = vec![vec![CharVocab::BOS]; batch];
    let mut out: Vec<Option<Recognition>> = vec![None; batch];
    let mut chosen: Vec<Vec<usize>> = vec![Vec::new(); batch];
    let mut conf: Vec<Vec<f64>> = vec![Vec::new(); batch];

    for step in 0..steps {
        let input: Vec<usize> = prefix.iter().flatten().copied().collect();
        let mark = tape.len();
        let logits = decode_train(tape, store, p, fusion, &input, cfg, slots, None)?;
        let lv = tape.value(logits);
        for b in 0..batch {
            if out[b].is_some() {
                prefix[b].push(CharVocab::PAD);
                continue;
            }
            let off = (b * (step + 1) + step) * CharVocab::SIZE;
            let (id, prob) = greedy_pick(&lv.data()[off..off + CharVocab::SIZE]);
            conf[b].push(prob);
            if id == CharVocab::EOS {
                out[b] = Some(Recognition {
                    label: LabelSequence(std::mem::take(&mut chosen[b])),
                    confidences: std::mem::take(&mut conf[b]),
                    stop: StopReason::Eos,
                });
                prefix[b].push(CharVocab::PAD);
            } else {
                chosen[b].push(id);
                prefix[b].push(id);
            }
        }
        tape.truncate(mark);
        if out.iter().all(Option::is_some) {
            break;
        }
    }
    Ok(out
        .into_iter()
        .enumerate()
        .map(|(b, r)| {
            r.unwrap_or_else(|| Recognition {
                label: LabelSequence(std::mem::take(&mut chosen[b])),
                confidences: std::mem::take(&mut conf[b]),
                stop: StopReason::MaxLen,
            })
        })
        .collect())
}

/// Argmax per position of `[B, len, vocab]` logits, over the same classes
/// as greedy decoding.
pub fn greedy_argmax(logits: &Tensor) -> Vec<usize> {
    logits.data().chunks(logits.last_dim()).map(|row| greedy_pick(row).0).collect()
}
