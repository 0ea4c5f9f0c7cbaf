//! The full recognizer: encoder, thinking stage and decoder wired together.

use crate::attention::{linear, HeadConfig, MhcaParams, RecordSink};
use crate::autograd::{Tape, Var};
use crate::decoder::{
    build_fusion, decode_infer, decode_train, greedy_pick, CharVocab, DecoderConfig, DecoderParams, FusionFeatures,
    LabelSequence, Recognition, StopReason,
};
use crate::encoder::{
    build_ablation_stack, encode, patch_embed, EncoderParams, EncoderVariant, MacaronStack, PatchEmbedConfig,
};
use crate::error::{Error, Result};
use crate::param::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::thinking::{pam_align, QuantizeStage, SemanticQuantizer, SlotEncoding, SqMode};

/// Every architectural hyperparameter. Defaults are the desk-scale model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub lambda_init: f64,
    pub mlp_ratio: usize,
    pub encoder: EncoderVariant,
    pub encoder_depth: usize,
    /// Half-step feed-forward before and after attention in every block.
    pub split_ffn: bool,
    /// Character slots, which is also the longest decodable string.
    pub slots: usize,
    pub decoder_depth: usize,
    pub sq_mode: SqMode,
    pub use_pam: bool,
    pub use_sq: bool,
    pub use_mmcv: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 8,
            image_width: 32,
            patch_height: 4,
            patch_width: 4,
            model_dim: 64,
            head_dim: 16,
            lambda_init: 0.05,
            mlp_ratio: 2,
            encoder: EncoderVariant::Dame,
            encoder_depth: 12,
            split_ffn: false,
            slots: 25,
            decoder_depth: 3,
            sq_mode: SqMode::Gumbel,
            use_pam: true,
            use_sq: true,
            use_mmcv: true,
        }
    }
}

impl ModelConfig {
    pub fn heads(&self) -> Result<HeadConfig> {
        HeadConfig::new(self.model_dim, self.head_dim, self.lambda_init)
    }

    pub fn patch(&self) -> PatchEmbedConfig {
        PatchEmbedConfig {
            image_height: self.image_height,
            image_width: self.image_width,
            channels: 1,
            patch_height: self.patch_height,
            patch_width: self.patch_width,
            model_dim: self.model_dim,
        }
    }

    pub fn stack(&self) -> Result<MacaronStack> {
        build_ablation_stack(self.encoder, self.encoder_depth, self.heads()?)
    }

    pub fn decoder(&self) -> Result<DecoderConfig> {
        Ok(DecoderConfig {
            depth: self.decoder_depth,
            heads: self.heads()?,
            max_len: self.slots,
            mlp_hidden: self.mlp_hidden(),
        })
    }

    pub fn mlp_hidden(&self) -> usize {
        self.model_dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let key = |key: &str, reason: &str| Err(Error::ConfigKey { key: key.into(), reason: reason.into() });
        if self.slots == 0 {
            return key("slots", "must be at least 1");
        }
        if self.mlp_ratio == 0 {
            return key("mlp_ratio", "must be at least 1");
        }
        if self.use_sq && !self.use_pam {
            return key("use_sq", "the quantizer reads position-aligned features and needs use_pam");
        }
        if !self.use_pam && !self.use_mmcv {
            return key("use_mmcv", "with use_pam off the decoder is the only recognition path");
        }
        self.patch().validate()?;
        self.stack()?;
        if self.use_mmcv {
            self.decoder()?.validate()?;
        }
        Ok(())
    }
}

/// Per-slot classifier used when the decoder is switched off.
#[derive(Debug, Clone, Copy)]
pub struct SlotHead {
    pub w: ParamId,
    pub b: ParamId,
}

/// Outputs of a teacher-forced pass.
#[derive(Debug, Clone)]
pub struct TrainForward {
    /// `[B, len, vocab]` character logits.
    pub logits: Var,
    /// Pre-noise quantizer logits `[B, len, C]`, when a quantizer exists.
    pub sq_logits: Option<Var>,
    /// Flattened `[B * len]` targets for `logits`.
    pub targets: Vec<usize>,
    /// Flattened `[B * len]` character targets per semantic slot.
    pub slot_targets: Vec<usize>,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct OtsNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub stack: MacaronStack,
    pub encoder: EncoderParams,
    pub pam: Option<MhcaParams>,
    pub quantizer: Option<SemanticQuantizer>,
    pub decoder: Option<DecoderParams>,
    pub slot_head: Option<SlotHead>,
    pub slot_encoding: SlotEncoding,
}

impl OtsNet {
    /// Registers every parameter and draws initial values from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut net = Self::uninitialized(config)?;
        net.store.initialize(seed);
        Ok(net)
    }

    /// Same layout as [`OtsNet::new`], all values zero; for loading weights.
    pub fn uninitialized(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let stack = config.stack()?;
        let d = config.model_dim;
        let encoder =
            EncoderParams::register(&mut store, "encoder", &config.patch(), &stack, config.mlp_hidden(), config.split_ffn)?;
        let pam = match config.use_pam {
            true => Some(MhcaParams::register(&mut store, "pam", d)?),
            false => None,
        };
        let quantizer = match config.use_sq {
            true => Some(SemanticQuantizer::register(&mut store, "sq", d, CharVocab::CLASSES, config.sq_mode)?),
            false => None,
        };
        let (decoder, slot_head) = if config.use_mmcv {
            (Some(DecoderParams::register(&mut store, "decoder", &config.decoder()?)?), None)
        } else {
            let head = SlotHead {
                w: store.add("slot_head.w", &[d, CharVocab::SIZE], Init::fan_in(d))?,
                b: store.add("slot_head.b", &[CharVocab::SIZE], Init::Zeros)?,
            };
            (None, Some(head))
        };
        Ok(OtsNet {
            slot_encoding: SlotEncoding::new(config.slots, d),
            config,
            store,
            stack,
            encoder,
            pam,
            quantizer,
            decoder,
            slot_head,
        })
    }

    fn check_images(&self, images: &Tensor) -> Result<usize> {
        let c = &self.config;
        match *images.shape() {
            [b, 1, h, w] if b > 0 && h == c.image_height && w == c.image_width => Ok(b),
            ref s => Err(Error::dim(
                "otsnet",
                format!("expected [B, 1, {}, {}] images, got {s:?}", c.image_height, c.image_width),
            )),
        }
    }

    /// Visual features `[B, N, D]`.
    pub fn observe(&self, tape: &mut Tape, images: &Tensor, rec: Option<&mut RecordSink>) -> Result<Var> {
        self.check_images(images)?;
        let tokens = patch_embed(tape, &self.store, &self.encoder.patch, images, &self.config.patch())?;
        encode(tape, &self.store, &self.encoder, tokens, &self.stack, rec)
    }

    /// Slot features for the first `len` slots: the aligned focus features,
    /// quantized when a quantizer is present. Also returns the quantizer
    /// logits.
    fn think(
        &self,
        tape: &mut Tape,
        visual: Var,
        len: usize,
        stage: &QuantizeStage,
        rec: Option<&mut RecordSink>,
    ) -> Result<Option<(Var, Option<Var>)>> {
        let Some(pam) = &self.pam else { return Ok(None) };
        let batch = tape.shape(visual)[0];
        let queries = tape.constant(self.slot_encoding.batched(batch, len)?)?;
        let rec = rec.map(|r| {
            r.layer = 0;
            r
        });
        let focus = pam_align(tape, &self.store, pam, queries, visual, &self.config.heads()?, rec)?;
        Ok(Some(match &self.quantizer {
            Some(q) => {
                let out = q.forward(tape, &self.store, focus, stage)?;
                (out.features, Some(out.logits))
            }
            None => (focus, None),
        }))
    }

    fn fusion(&self, tape: &mut Tape, visual: Var, semantic: Option<Var>) -> Result<FusionFeatures> {
        match semantic {
            Some(s) => build_fusion(tape, visual, s),
            None => FusionFeatures::visual_only(tape, visual),
        }
    }

    /// Teacher-forced pass. Steps beyond the longest label in the batch
    /// cannot influence any counted position, so they are not computed.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        labels: &[LabelSequence],
        stage: &QuantizeStage,
        mut rec: Option<&mut RecordSink>,
    ) -> Result<TrainForward> {
        let batch = self.check_images(images)?;
        if labels.len() != batch {
            return Err(Error::dim("forward_train", format!("{} labels for {batch} images", labels.len())));
        }
        let slots = self.config.slots;
        if let Some(l) = labels.iter().find(|l| l.len() > slots) {
            return Err(Error::Contract(format!("label {:?} is longer than {slots} slots", l.text())));
        }
        let len = labels.iter().map(|l| l.len() + 1).max().unwrap_or(1).min(slots);
        let mut targets = Vec::with_capacity(batch * len);
        let mut slot_targets = Vec::with_capacity(batch * len);
        let mut input = Vec::with_capacity(batch * len);
        for l in labels {
            targets.extend(l.decoder_targets(len)?);
            slot_targets.extend(l.slot_targets(len)?);
            input.extend(l.decoder_input(len)?);
        }

        let visual = self.observe(tape, images, rec.as_deref_mut())?;
        let thought = self.think(tape, visual, len, stage, rec.as_deref_mut())?;
        let semantic = thought.map(|t| t.0);
        let sq_logits = thought.and_then(|t| t.1);
        let logits = match (&self.decoder, &self.slot_head) {
            (Some(dp), _) => {
                let fusion = self.fusion(tape, visual, semantic)?;
                let cfg = self.config.decoder()?;
                decode_train(tape, &self.store, dp, &fusion, &input, &cfg, &self.slot_encoding, rec)?
            }
            (None, Some(h)) => {
                let s = semantic.ok_or_else(|| Error::Contract("slot head without slot features".into()))?;
                linear(tape, &self.store, s, h.w, Some(h.b))?
            }
            (None, None) => return Err(Error::Contract("model has no recognition head".into())),
        };
        Ok(TrainForward { logits, sq_logits, targets, slot_targets, len })
    }

    /// Greedy recognition of a batch of `[B, 1, H, W]` images.
    pub fn recognize(&self, images: &Tensor) -> Result<Vec<Recognition>> {
        let mut tape = Tape::new();
        self.recognize_on(&mut tape, images, None)
    }

    fn recognize_on(&self, tape: &mut Tape, images: &Tensor, mut rec: Option<&mut RecordSink>) -> Result<Vec<Recognition>> {
        let visual = self.observe(tape, images, rec.as_deref_mut())?;
        let slots = self.config.slots;
        let semantic = self.think(tape, visual, slots, &QuantizeStage::Infer, rec)?.map(|t| t.0);
        match (&self.decoder, &self.slot_head) {
            (Some(dp), _) => {
                let fusion = self.fusion(tape, visual, semantic)?;
                decode_infer(&self.store, dp, tape, &fusion, &self.config.decoder()?, &self.slot_encoding)
            }
            (None, Some(h)) => {
                let s = semantic.ok_or_else(|| Error::Contract("slot head without slot features".into()))?;
                let logits = linear(tape, &self.store, s, h.w, Some(h.b))?;
                Ok(parallel_readout(tape.value(logits)))
            }
            (None, None) => Err(Error::Contract("model has no recognition head".into())),
        }
    }

    /// Recognizes the images and captures every attention map: encoder
    /// layers, slot alignment, and the decoder replayed on its own output.
    pub fn recognize_recorded(&self, images: &Tensor) -> Result<(Vec<Recognition>, RecordSink)> {
        let mut rec = RecordSink::new();
        let mut tape = Tape::new();
        let out = self.recognize_on(&mut tape, images, Some(&mut rec))?;
        if let Some(dp) = &self.decoder {
            let batch = out.len();
            let len = out.iter().map(|r| r.confidences.len()).max().unwrap_or(1).clamp(1, self.config.slots);
            let mut input = Vec::with_capacity(batch * len);
            for r in &out {
                let mut ids = vec![CharVocab::BOS];
                ids.extend(r.label.ids());
                ids.resize(len, CharVocab::PAD);
                input.extend(&ids[..len]);
            }
            let mut tape = Tape::new();
            let visual = self.observe(&mut tape, images, None)?;
            let semantic = self.think(&mut tape, visual, len, &QuantizeStage::Infer, None)?.map(|t| t.0);
            let fusion = self.fusion(&mut tape, visual, semantic)?;
            let cfg = self.config.decoder()?;
            decode_train(&mut tape, &self.store, dp, &fusion, &input, &cfg, &self.slot_encoding, Some(&mut rec))?;
        }
        Ok((out, rec))
    }

    /// Inference-time slot features `[B, T, D]` (quantized when a quantizer
    /// exists), or `None` without slot alignment.
    pub fn slot_features(&self, images: &Tensor) -> Result<Option<Tensor>> {
        let mut tape = Tape::new();
        let visual = self.observe(&mut tape, images, None)?;
        let semantic = self.think(&mut tape, visual, self.config.slots, &QuantizeStage::Infer, None)?;
        Ok(semantic.map(|(s, _)| tape.value(s).clone()))
    }
}

/// Reads `[B, T, vocab]` per-slot logits left to right until EOS.
fn parallel_readout(logits: &Tensor) -> Vec<Recognition> {
    let s = logits.shape();
    let (batch, slots, v) = (s[0], s[1], s[2]);
    (0..batch)
        .map(|b| {
            let mut ids = Vec::new();
            let mut confidences = Vec::new();
            let mut stop = StopReason::MaxLen;
            for t in 0..slots {
                let off = (b * slots + t) * v;
                let (id, p) = greedy_pick(&logits.data()[off..off + v]);
                confidences.push(p);
                if id == CharVocab::EOS {
                    stop = StopReason::Eos;
                    break;
                }
                ids.push(id);
            }
            Recognition { label: LabelSequence::new(ids).expect("greedy ids are classes"), confidences, stop }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;

    pub(crate) fn toy() -> ModelConfig {
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

    fn images(b: usize, cfg: &ModelConfig) -> Tensor {
        let n = b * cfg.image_height * cfg.image_width;
        Tensor::new(&[b, 1, cfg.image_height, cfg.image_width], (0..n).map(|i| ((i * 37) % 11) as f64 / 10.0).collect())
            .unwrap()
    }

    #[test]
    fn default_config_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stack().unwrap().lengths(), vec![2, 1, 6, 1, 2]);
        assert_eq!(c.patch().num_patches(), 16);
    }

    #[test]
    fn toggle_rules() {
        let bad = ModelConfig { use_pam: false, ..toy() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { use_pam: false, use_sq: false, use_mmcv: false, ..toy() };
        assert!(bad.validate().is_err());
        for (pam, mmcv, sq) in [(true, false, false), (false, true, false), (true, true, false), (true, true, true)] {
            let c = ModelConfig { use_pam: pam, use_mmcv: mmcv, use_sq: sq, ..toy() };
            let net = OtsNet::new(c.clone(), 1).unwrap();
            let mut tape = Tape::new();
            let labels = vec![LabelSequence::from_text("ab").unwrap(), LabelSequence::from_text("c").unwrap()];
            let f = net.forward_train(&mut tape, &images(2, &c), &labels, &QuantizeStage::Infer, None).unwrap();
            assert_eq!(f.len, 3);
            assert_eq!(tape.shape(f.logits), &[2, 3, CharVocab::SIZE]);
            assert_eq!(f.sq_logits.is_some(), sq);
            let r = net.recognize(&images(2, &c)).unwrap();
            assert_eq!(r.len(), 2);
        }
    }

    #[test]
    fn recorded_maps_cover_every_stage() {
        let c = toy();
        let net = OtsNet::new(c.clone(), 3).unwrap();
        let (_, rec) = net.recognize_recorded(&images(1, &c)).unwrap();
        let heads = c.model_dim / c.head_dim;
        let count = |k| rec.of_kind(k).count();
        assert_eq!(count(AttentionKind::Mhsa), 3 * heads);
        assert_eq!(count(AttentionKind::DmhaDiff), 2 * heads / 2);
        assert_eq!(count(AttentionKind::Mhca), heads);
        assert_eq!(count(AttentionKind::MmcvCross), heads);
        assert_eq!(count(AttentionKind::MmcvSelf), heads);
    }

    #[test]
    fn recognition_is_deterministic() {
        let c = toy();
        let net = OtsNet::new(c.clone(), 5).unwrap();
        let a = net.recognize(&images(3, &c)).unwrap();
        let b = net.recognize(&images(3, &c)).unwrap();
        assert_eq!(a, b);
        // batching does not change per-sample output
        let all = images(3, &c);
        let second = Tensor::new(&[1, 1, 4, 8], all.data()[32..64].to_vec()).unwrap();
        let one = net.recognize(&second).unwrap();
        assert_eq!(a[1].label, one[0].label);
    }
}
