//! Observation stage: patch embedding and the Macaron-interleaved encoder.

use std::fmt;
use std::str::FromStr;

use crate::attention::{dmha_block, mhsa_block, DmhaParams, HeadConfig, LayerNormParams, MhsaParams, RecordSink};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchEmbedConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub model_dim: usize,
}

impl PatchEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.patch_height > 0
            && self.patch_width > 0
            && self.image_height % self.patch_height == 0
            && self.image_width % self.patch_width == 0
            && self.image_height > 0
            && self.image_width > 0
            && self.channels > 0;
        if !ok {
            return Err(Error::Config(format!(
                "{}x{} image does not tile into {}x{} patches",
                self.image_height, self.image_width, self.patch_height, self.patch_width
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_height, self.image_width / self.patch_width)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_height * self.patch_width
    }
}

/// Cuts `[B, C, H, W]` into non-overlapping patches, row-major over the
/// grid, each flattened channel-major: `[B, N, C*ph*pw]`.
pub fn patchify(image: &Tensor, cfg: &PatchEmbedConfig) -> Result<Tensor> {
    cfg.validate()?;
    let expect = [cfg.channels, cfg.image_height, cfg.image_width];
    let s = image.shape();
    if s.len() != 4 || s[1..] != expect {
        return Err(Error::dim("patch_embed", format!("expected [B, {expect:?}], got {s:?}")));
    }
    let b = s[0];
    let (gh, gw) = cfg.grid();
    let (ph, pw) = (cfg.patch_height, cfg.patch_width);
    let (h, w) = (cfg.image_height, cfg.image_width);
    let mut out = Vec::with_capacity(image.len());
    let data = image.data();
    for n in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for c in 0..cfg.channels {
                    for py in 0..ph {
                        let row = ((n * cfg.channels + c) * h + gy * ph + py) * w + gx * pw;
                        out.extend_from_slice(&data[row..row + pw]);
                    }
                }
            }
        }
    }
    Tensor::new(&[b, gh * gw, cfg.patch_len()], out)
}

#[derive(Debug, Clone, Copy)]
pub struct PatchEmbedParams {
    pub w: ParamId,
    pub b: ParamId,
    /// Learned embedding per grid cell, `[N, D]`.
    pub pos: ParamId,
}

impl PatchEmbedParams {
    pub fn register(store: &mut ParamStore, prefix: &str, cfg: &PatchEmbedConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(PatchEmbedParams {
            w: store.add(format!("{prefix}.w"), &[cfg.patch_len(), cfg.model_dim], Init::fan_in(cfg.patch_len()))?,
            b: store.add(format!("{prefix}.b"), &[cfg.model_dim], Init::Zeros)?,
            pos: store.add(format!("{prefix}.pos"), &[cfg.num_patches(), cfg.model_dim], Init::TruncNormal { std: 0.02 })?,
        })
    }
}

/// Linear projection of each patch plus its position embedding.
pub fn patch_embed(tape: &mut Tape, store: &ParamStore, p: &PatchEmbedParams, image: &Tensor, cfg: &PatchEmbedConfig) -> Result<Var> {
    let patches = tape.constant(patchify(image, cfg)?)?;
    let w = tape.param(store, p.w)?;
    let b = tape.param(store, p.b)?;
    let pos = tape.param(store, p.pos)?;
    let y = tape.matmul(patches, w)?;
    let y = tape.add(y, b)?;
    tape.add(y, pos)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Mhsa,
    Dmha,
}

impl BlockKind {
    pub fn letter(self) -> char {
        match self {
            BlockKind::Mhsa => 'M',
            BlockKind::Dmha => 'D',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderVariant {
    /// Every layer is self-attention.
    Vit,
    /// Every layer is differential.
    DmhaOnly,
    /// Self-attention segments sandwiching differential segments.
    Dame,
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderVariant::Vit => "vit",
            EncoderVariant::DmhaOnly => "dmha_only",
            EncoderVariant::Dame => "dame",
        })
    }
}

impl FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit" => Ok(EncoderVariant::Vit),
            "dmha_only" => Ok(EncoderVariant::DmhaOnly),
            "dame" => Ok(EncoderVariant::Dame),
            other => Err(Error::Config(format!("unknown encoder variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub kind: BlockKind,
    pub len: usize,
}

/// Ordered segments of identical blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct MacaronStack {
    pub segments: Vec<Segment>,
    pub heads: HeadConfig,
}

impl MacaronStack {
    /// Alternating M, D, M, D, M segments with the given lengths.
    pub fn sandwich(lengths: [usize; 5], heads: HeadConfig) -> Result<Self> {
        use BlockKind::{Dmha, Mhsa};
        let kinds = [Mhsa, Dmha, Mhsa, Dmha, Mhsa];
        let segments = kinds
            .into_iter()
            .zip(lengths)
            .filter(|&(_, len)| len > 0)
            .map(|(kind, len)| Segment { kind, len })
            .collect();
        Self::new(segments, heads)
    }

    pub fn new(segments: Vec<Segment>, heads: HeadConfig) -> Result<Self> {
        heads.validate()?;
        if segments.iter().all(|s| s.len == 0) {
            return Err(Error::Config("encoder stack has no layers".into()));
        }
        if segments.iter().any(|s| s.kind == BlockKind::Dmha) {
            heads.dual_heads()?;
        }
        Ok(MacaronStack { segments, heads })
    }

    pub fn depth(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.len).collect()
    }

    /// Block kind of every layer, in order.
    pub fn layer_kinds(&self) -> Vec<BlockKind> {
        self.segments.iter().flat_map(|s| std::iter::repeat_n(s.kind, s.len)).collect()
    }

    /// Compact pattern such as `MMDMMMMMMDMM`.
    pub fn pattern(&self) -> String {
        self.layer_kinds().into_iter().map(BlockKind::letter).collect()
    }
}

/// Builds the stack for one row of the encoder ablation.
///
/// For `Dame`, each outer self-attention segment gets `ceil(depth / 6)`
/// layers, each differential segment one layer, and the middle segment the
/// rest; depth 12 gives (2, 1, 6, 1, 2). When fewer than three layers remain
/// between the outer segments they form a single differential segment.
pub fn build_ablation_stack(variant: EncoderVariant, depth: usize, heads: HeadConfig) -> Result<MacaronStack> {
    if depth == 0 {
        return Err(Error::Config("encoder depth must be at least 1".into()));
    }
    let segments = match variant {
        EncoderVariant::Vit => vec![Segment { kind: BlockKind::Mhsa, len: depth }],
        EncoderVariant::DmhaOnly => vec![Segment { kind: BlockKind::Dmha, len: depth }],
        EncoderVariant::Dame => {
            if depth < 3 {
                return Err(Error::Config(format!("a Macaron sandwich needs depth >= 3, got {depth}")));
            }
            let outer = depth.div_ceil(6);
            let inner = depth - 2 * outer;
            if inner >= 3 {
                return MacaronStack::sandwich([outer, 1, inner - 2, 1, outer], heads);
            }
            vec![
                Segment { kind: BlockKind::Mhsa, len: outer },
                Segment { kind: BlockKind::Dmha, len: inner },
                Segment { kind: BlockKind::Mhsa, len: outer },
            ]
        }
    };
    MacaronStack::new(segments, heads)
}

#[derive(Debug, Clone, Copy)]
pub enum EncoderBlock {
    Mhsa(MhsaParams),
    Dmha(DmhaParams),
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub patch: PatchEmbedParams,
    pub blocks: Vec<EncoderBlock>,
    pub final_ln: LayerNormParams,
}

impl EncoderParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        patch: &PatchEmbedConfig,
        stack: &MacaronStack,
        mlp_hidden: usize,
        split_ffn: bool,
    ) -> Result<Self> {
        let patch_params = PatchEmbedParams::register(store, &format!("{prefix}.patch"), patch)?;
        let mut blocks = Vec::with_capacity(stack.depth());
        for (i, kind) in stack.layer_kinds().into_iter().enumerate() {
            let name = format!("{prefix}.layer{i}");
            blocks.push(match kind {
                BlockKind::Mhsa => EncoderBlock::Mhsa(MhsaParams::register(store, &name, &stack.heads, mlp_hidden, split_ffn)?),
                BlockKind::Dmha => EncoderBlock::Dmha(DmhaParams::register(store, &name, &stack.heads, mlp_hidden, split_ffn)?),
            });
        }
        let final_ln = LayerNormParams::register(store, &format!("{prefix}.final_ln"), patch.model_dim)?;
        Ok(EncoderParams { patch: patch_params, blocks, final_ln })
    }
}

/// Runs the stack over patch tokens and applies the closing layer norm,
/// yielding the visual features. The sink's `layer` is set to each block's
/// index before it runs.
pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    p: &EncoderParams,
    tokens: Var,
    stack: &MacaronStack,
    mut rec: Option<&mut RecordSink>,
) -> Result<Var> {
    if p.blocks.len() != stack.depth() {
        return Err(Error::Contract(format!(
            "encoder has {} blocks for a stack of depth {}",
            p.blocks.len(),
            stack.depth()
        )));
    }
    let mut x = tokens;
    for (i, (block, kind)) in p.blocks.iter().zip(stack.layer_kinds()).enumerate() {
        if let Some(r) = rec.as_deref_mut() {
            r.layer = i;
        }
        x = match (block, kind) {
            (EncoderBlock::Mhsa(bp), BlockKind::Mhsa) => mhsa_block(tape, store, bp, x, &stack.heads, rec.as_deref_mut())?,
            (EncoderBlock::Dmha(bp), BlockKind::Dmha) => dmha_block(tape, store, bp, x, &stack.heads, rec.as_deref_mut())?,
            _ => return Err(Error::Contract(format!("encoder layer {i} does not match the stack kind"))),
        };
    }
    p.final_ln.apply(tape, store, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;

    fn heads() -> HeadConfig {
        HeadConfig::new(16, 4, 0.05).unwrap()
    }

    fn desk() -> PatchEmbedConfig {
        PatchEmbedConfig { image_height: 8, image_width: 32, channels: 1, patch_height: 4, patch_width: 4, model_dim: 16 }
    }

    #[test]
    fn patch_counts() {
        let big = PatchEmbedConfig { image_height: 32, image_width: 128, ..desk() };
        assert_eq!(big.num_patches(), 256);
        assert_eq!(desk().num_patches(), 16);
        let bad = PatchEmbedConfig { image_width: 30, ..desk() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn patchify_layout() {
        let cfg = PatchEmbedConfig { image_height: 4, image_width: 4, channels: 1, patch_height: 2, patch_width: 2, model_dim: 4 };
        let img = Tensor::new(&[1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn zero_image_gives_position_embedding() {
        let cfg = desk();
        let mut store = ParamStore::new();
        let p = PatchEmbedParams::register(&mut store, "patch", &cfg).unwrap();
        store.initialize(3);
        let mut tape = Tape::new();
        let y = patch_embed(&mut tape, &store, &p, &Tensor::zeros(&[2, 1, 8, 32]), &cfg).unwrap();
        let pos = store.value(p.pos);
        for b in 0..2 {
            assert_eq!(&tape.value(y).data()[b * pos.len()..(b + 1) * pos.len()], pos.data());
        }
    }

    #[test]
    fn ablation_stacks() {
        let s = build_ablation_stack(EncoderVariant::Dame, 12, heads()).unwrap();
        assert_eq!(s.lengths(), vec![2, 1, 6, 1, 2]);
        assert_eq!(s.pattern(), "MMDMMMMMMDMM");
        let s = build_ablation_stack(EncoderVariant::Vit, 12, heads()).unwrap();
        assert_eq!(s.lengths(), vec![12]);
        assert_eq!(s.pattern(), "M".repeat(12));
        let s = build_ablation_stack(EncoderVariant::Dame, 6, heads()).unwrap();
        assert_eq!(s.lengths(), vec![1, 1, 2, 1, 1]);
        assert!(build_ablation_stack(EncoderVariant::Dame, 2, heads()).is_err());
        assert_eq!(build_ablation_stack(EncoderVariant::Dame, 3, heads()).unwrap().pattern(), "MDM");
    }

    #[test]
    fn dame_keeps_differential_layers_inside() {
        for depth in 3..=40 {
            let s = build_ablation_stack(EncoderVariant::Dame, depth, heads()).unwrap();
            let kinds = s.layer_kinds();
            assert_eq!(kinds.len(), depth);
            assert_eq!(kinds[0], BlockKind::Mhsa);
            assert_eq!(kinds[depth - 1], BlockKind::Mhsa);
            assert!(kinds.contains(&BlockKind::Dmha));
        }
    }

    #[test]
    fn encode_applies_layers_in_order() {
        let cfg = desk();
        let stack = build_ablation_stack(EncoderVariant::Dame, 6, heads()).unwrap();
        let mut store = ParamStore::new();
        let p = EncoderParams::register(&mut store, "enc", &cfg, &stack, 32, false).unwrap();
        store.initialize(5);
        let mut tape = Tape::new();
        let img = Tensor::full(&[1, 1, 8, 32], 0.5);
        let tokens = patch_embed(&mut tape, &store, &p.patch, &img, &cfg).unwrap();
        let mut rec = RecordSink::new();
        let y = encode(&mut tape, &store, &p, tokens, &stack, Some(&mut rec)).unwrap();
        assert_eq!(tape.shape(y), &[1, 16, 16]);
        let mhsa_layers: std::collections::BTreeSet<_> = rec.of_kind(AttentionKind::Mhsa).map(|r| r.layer).collect();
        let dmha_layers: std::collections::BTreeSet<_> = rec.of_kind(AttentionKind::DmhaDiff).map(|r| r.layer).collect();
        assert_eq!(mhsa_layers.into_iter().collect::<Vec<_>>(), vec![0, 2, 3, 5]);
        assert_eq!(dmha_layers.into_iter().collect::<Vec<_>>(), vec![1, 4]);
    }
}
