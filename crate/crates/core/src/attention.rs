//! Attention primitives: the pre-norm self-attention block, dual-QK
//! subtractive attention and the block built on it, and masked multi-head
//! cross-attention.
//!
//! Activations are `[B, N, D]`. Heads are split to `[B, h, N, w]` and merged
//! back by concatenation, so one `[D, h*w]` matrix holds the independent
//! per-head projections side by side.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub model_dim: usize,
    pub head_dim: usize,
    pub lambda_init: f64,
}

impl HeadConfig {
    pub fn new(model_dim: usize, head_dim: usize, lambda_init: f64) -> Result<Self> {
        let cfg = HeadConfig { model_dim, head_dim, lambda_init };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.model_dim % self.head_dim != 0 {
            return Err(Error::Config(format!(
                "model dim {} is not a multiple of head dim {}",
                self.model_dim, self.head_dim
            )));
        }
        if !(self.lambda_init > 0.0 && self.lambda_init < 1.0) {
            return Err(Error::Config(format!("lambda_init {} outside (0, 1)", self.lambda_init)));
        }
        Ok(())
    }

    /// Heads of a standard (self or cross) attention layer: `D / d`.
    pub fn heads(&self) -> usize {
        self.model_dim / self.head_dim
    }

    /// Heads of a differential layer: `D / 2d`, which must be exact.
    pub fn dual_heads(&self) -> Result<usize> {
        if self.model_dim % (2 * self.head_dim) != 0 {
            return Err(Error::Config(format!(
                "differential attention needs D divisible by 2d (D={}, d={})",
                self.model_dim, self.head_dim
            )));
        }
        Ok(self.model_dim / (2 * self.head_dim))
    }
}

/// Boolean visibility pattern, `rows x cols`. Hidden positions behave like an
/// additive −∞ before the softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::dim("attention_mask", format!("{} entries for {rows}x{cols}", allowed.len())));
        }
        if let Some(r) = (0..rows).find(|&r| !allowed[r * cols..(r + 1) * cols].contains(&true)) {
            return Err(Error::Contract(format!("attention mask row {r} hides every key")));
        }
        Ok(AttentionMask { rows, cols, allowed })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let allowed = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Self::new(rows, cols, allowed)
    }

    /// Query `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i).expect("causal rows always see themselves")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// The leading `rows x cols` corner.
    pub fn crop(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows > self.rows || cols > self.cols {
            return Err(Error::dim("attention_mask", format!("cannot crop {}x{} to {rows}x{cols}", self.rows, self.cols)));
        }
        Self::from_fn(rows, cols, |i, j| self.allowed(i, j))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Mhsa,
    DmhaA1,
    DmhaA2,
    DmhaDiff,
    Mhca,
    MmcvCross,
    MmcvSelf,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Mhsa => "mhsa",
            AttentionKind::DmhaA1 => "dmha_a1",
            AttentionKind::DmhaA2 => "dmha_a2",
            AttentionKind::DmhaDiff => "dmha_diff",
            AttentionKind::Mhca => "mhca",
            AttentionKind::MmcvCross => "mmcv_cross",
            AttentionKind::MmcvSelf => "mmcv_self",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mhsa" => AttentionKind::Mhsa,
            "dmha_a1" => AttentionKind::DmhaA1,
            "dmha_a2" => AttentionKind::DmhaA2,
            "dmha_diff" => AttentionKind::DmhaDiff,
            "mhca" => AttentionKind::Mhca,
            "mmcv_cross" => AttentionKind::MmcvCross,
            "mmcv_self" => AttentionKind::MmcvSelf,
            other => return Err(Error::Config(format!("unknown attention kind `{other}`"))),
        })
    }
}

/// One captured attention map (`rows x cols`) of one head of one sample.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub sample: usize,
    pub kind: AttentionKind,
    /// Effective λ of the head, for differential maps.
    pub lambda: Option<f64>,
    pub map: Tensor,
}

impl AttentionRecord {
    pub fn row_sums(&self) -> Vec<f64> {
        let cols = self.map.last_dim();
        self.map.data().chunks(cols).map(|r| r.iter().sum()).collect()
    }
}

/// Collects attention maps. Callers set `layer` before each block.
#[derive(Debug, Default)]
pub struct RecordSink {
    pub layer: usize,
    pub records: Vec<AttentionRecord>,
}

impl RecordSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn of_kind(&self, kind: AttentionKind) -> impl Iterator<Item = &AttentionRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    /// Splits a `[B, h, rows, cols]` map into per-sample, per-head records.
    fn capture(&mut self, maps: &Tensor, kind: AttentionKind, lambdas: Option<&[f64]>) {
        let s = maps.shape();
        let (b, h, rows, cols) = (s[0], s[1], s[2], s[3]);
        let block = rows * cols;
        for sample in 0..b {
            for head in 0..h {
                let off = (sample * h + head) * block;
                let map = Tensor::new(&[rows, cols], maps.data()[off..off + block].to_vec()).expect("map block");
                self.records.push(AttentionRecord {
                    layer: self.layer,
                    head,
                    sample,
                    kind,
                    lambda: lambdas.map(|l| l[head]),
                    map,
                });
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gain: store.add(format!("{prefix}.gain"), &[dim], Init::Ones)?,
            bias: store.add(format!("{prefix}.bias"), &[dim], Init::Zeros)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain)?;
        let b = tape.param(store, self.bias)?;
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two-layer GELU feed-forward with biases.
#[derive(Debug, Clone, Copy)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpParams {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(MlpParams {
            w1: store.add(format!("{prefix}.w1"), &[dim, hidden], Init::fan_in(dim))?,
            b1: store.add(format!("{prefix}.b1"), &[hidden], Init::Zeros)?,
            w2: store.add(format!("{prefix}.w2"), &[hidden, dim], Init::fan_in(hidden))?,
            b2: store.add(format!("{prefix}.b2"), &[dim], Init::Zeros)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = linear(tape, store, x, self.w1, Some(self.b1))?;
        let h = tape.gelu(h)?;
        linear(tape, store, h, self.w2, Some(self.b2))
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// `x @ w (+ b)`.
pub fn linear(tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
    let wv = tape.param(store, w)?;
    let y = tape.matmul(x, wv)?;
    match b {
        Some(b) => {
            let bv = tape.param(store, b)?;
            tape.add(y, bv)
        }
        None => Ok(y),
    }
}

/// `[B, N, h*w]` to `[B, h, N, w]`.
pub fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[2] % heads != 0 {
        return Err(Error::dim("split_heads", format!("{s:?} into {heads} heads")));
    }
    let r = tape.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// `[B, h, N, w]` to `[B, N, h*w]`.
pub fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

fn check_tokens(tape: &Tape, x: Var, dim: usize, op: &'static str) -> Result<[usize; 3]> {
    match *tape.shape(x) {
        [b, n, d] if d == dim => Ok([b, n, d]),
        ref s => Err(Error::dim(op, format!("expected [B, N, {dim}], got {s:?}"))),
    }
}

/// The feed-forward half shared by both encoder block kinds, plus the
/// optional leading half-step feed-forward of the split-FFN Macaron variant.
#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub ln: LayerNormParams,
    pub mlp: MlpParams,
    pub pre: Option<(LayerNormParams, MlpParams)>,
}

impl FfnParams {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, split_ffn: bool) -> Result<Self> {
        let pre = if split_ffn {
            Some((
                LayerNormParams::register(store, &format!("{prefix}.pre_ln"), dim)?,
                MlpParams::register(store, &format!("{prefix}.pre_mlp"), dim, hidden)?,
            ))
        } else {
            None
        };
        Ok(FfnParams {
            ln: LayerNormParams::register(store, &format!("{prefix}.ln2"), dim)?,
            mlp: MlpParams::register(store, &format!("{prefix}.mlp"), dim, hidden)?,
            pre,
        })
    }

    fn before(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self.pre {
            Some((ln, mlp)) => {
                let h = ln.apply(tape, store, x)?;
                let h = mlp.apply(tape, store, h)?;
                let h = tape.scale(h, 0.5)?;
                tape.add(x, h)
            }
            None => Ok(x),
        }
    }

    fn after(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln.apply(tape, store, x)?;
        let h = self.mlp.apply(tape, store, h)?;
        let h = if self.pre.is_some() { tape.scale(h, 0.5)? } else { h };
        tape.add(x, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MhsaParams {
    pub ln1: LayerNormParams,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ffn: FfnParams,
}

impl MhsaParams {
    pub fn register(store: &mut ParamStore, prefix: &str, cfg: &HeadConfig, hidden: usize, split_ffn: bool) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(MhsaParams {
            ln1: LayerNormParams::register(store, &format!("{prefix}.ln1"), d)?,
            wq: store.add(format!("{prefix}.wq"), &[d, d], Init::fan_in(d))?,
            wk: store.add(format!("{prefix}.wk"), &[d, d], Init::fan_in(d))?,
            wv: store.add(format!("{prefix}.wv"), &[d, d], Init::fan_in(d))?,
            ffn: FfnParams::register(store, prefix, d, hidden, split_ffn)?,
        })
    }
}

/// Scaled dot-product attention over split heads; `q`, `k`, `v` are
/// `[B, h, *, w]`. Returns the context and the attention weights.
fn sdpa(tape: &mut Tape, q: Var, k: Var, v: Var, scale_dim: usize, mask: Option<&AttentionMask>) -> Result<(Var, Var)> {
    let s = tape.matmul_t(q, k)?;
    let s = tape.scale(s, 1.0 / (scale_dim as f64).sqrt())?;
    let a = match mask {
        Some(m) => tape.softmax_masked(s, m.as_slice(), m.rows(), m.cols())?,
        None => tape.softmax(s)?,
    };
    let ctx = tape.matmul(a, v)?;
    Ok((ctx, a))
}

/// Pre-norm self-attention block:
/// `Q,K,V = LN(X)W`, `X' = X + softmax(QKᵀ/√d)V`, `X'' = X' + MLP(LN(X'))`.
/// Heads are concatenated without an output projection.
pub fn mhsa_block(
    tape: &mut Tape,
    store: &ParamStore,
    p: &MhsaParams,
    x: Var,
    cfg: &HeadConfig,
    rec: Option<&mut RecordSink>,
) -> Result<Var> {
    check_tokens(tape, x, cfg.model_dim, "mhsa_block")?;
    let h = cfg.heads();
    let x = p.ffn.before(tape, store, x)?;
    let xn = p.ln1.apply(tape, store, x)?;
    let q = linear(tape, store, xn, p.wq, None)?;
    let k = linear(tape, store, xn, p.wk, None)?;
    let v = linear(tape, store, xn, p.wv, None)?;
    let (q, k, v) = (split_heads(tape, q, h)?, split_heads(tape, k, h)?, split_heads(tape, v, h)?);
    let (ctx, a) = sdpa(tape, q, k, v, cfg.head_dim, None)?;
    if let Some(rec) = rec {
        rec.capture(tape.value(a), AttentionKind::Mhsa, None);
    }
    let ctx = merge_heads(tape, ctx)?;
    let x = tape.add(x, ctx)?;
    p.ffn.after(tape, store, x)
}

/// `exp(q1·k1) − exp(q2·k2) + λ_init`.
pub fn lambda_value(q1: &[f64], k1: &[f64], q2: &[f64], k2: &[f64], lambda_init: f64) -> f64 {
    assert!(q1.len() == k1.len() && q2.len() == k2.len() && q1.len() == q2.len(), "lambda vectors differ in length");
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    dot(q1, k1).exp() - dot(q2, k2).exp() + lambda_init
}

/// Per-head projections of dual-QK attention. Each matrix packs the `h`
/// independent head projections column-wise; the λ vectors are `[h, d]`
/// and start at zero so that λ equals λ_init at initialization.
#[derive(Debug, Clone, Copy)]
pub struct DualQkParams {
    pub wq1: ParamId,
    pub wq2: ParamId,
    pub wk1: ParamId,
    pub wk2: ParamId,
    pub wv: ParamId,
    pub lambda_q1: ParamId,
    pub lambda_k1: ParamId,
    pub lambda_q2: ParamId,
    pub lambda_k2: ParamId,
}

impl DualQkParams {
    pub fn register(store: &mut ParamStore, prefix: &str, cfg: &HeadConfig) -> Result<Self> {
        let h = cfg.dual_heads()?;
        let (dm, d) = (cfg.model_dim, cfg.head_dim);
        let mut w = |name: &str, cols: usize| store.add(format!("{prefix}.{name}"), &[dm, cols], Init::fan_in(dm));
        let (wq1, wq2, wk1, wk2, wv) = (w("wq1", h * d)?, w("wq2", h * d)?, w("wk1", h * d)?, w("wk2", h * d)?, w("wv", h * 2 * d)?);
        let mut l = |name: &str| store.add(format!("{prefix}.{name}"), &[h, d], Init::Zeros);
        Ok(DualQkParams {
            wq1,
            wq2,
            wk1,
            wk2,
            wv,
            lambda_q1: l("lambda_q1")?,
            lambda_k1: l("lambda_k1")?,
            lambda_q2: l("lambda_q2")?,
            lambda_k2: l("lambda_k2")?,
        })
    }

    /// Effective λ per head for the current parameter values.
    pub fn lambdas(&self, store: &ParamStore, lambda_init: f64) -> Vec<f64> {
        let [q1, k1, q2, k2] = [self.lambda_q1, self.lambda_k1, self.lambda_q2, self.lambda_k2].map(|id| store.value(id));
        let d = q1.last_dim();
        (0..q1.len() / d)
            .map(|h| lambda_value(q1.row(h), k1.row(h), q2.row(h), k2.row(h), lambda_init))
            .collect()
    }
}

/// Differentiable per-head λ, shape `[h]`.
fn lambda_var(tape: &mut Tape, store: &ParamStore, p: &DualQkParams, lambda_init: f64) -> Result<Var> {
    let [q1, k1, q2, k2] = [p.lambda_q1, p.lambda_k1, p.lambda_q2, p.lambda_k2];
    let (q1, k1, q2, k2) = (tape.param(store, q1)?, tape.param(store, k1)?, tape.param(store, q2)?, tape.param(store, k2)?);
    let m1 = tape.mul(q1, k1)?;
    let s1 = tape.sum_last(m1)?;
    let e1 = tape.exp(s1)?;
    let m2 = tape.mul(q2, k2)?;
    let s2 = tape.sum_last(m2)?;
    let e2 = tape.exp(s2)?;
    let diff = tape.sub(e1, e2)?;
    tape.add_scalar(diff, lambda_init)
}

/// Dual-QK subtractive attention on already-normalized tokens `x`
/// (`[B, N, D]`). Returns per-head outputs `(A₁ − λA₂)V` as `[B, h, N, 2d]`.
pub fn dual_qk_attention(
    tape: &mut Tape,
    store: &ParamStore,
    p: &DualQkParams,
    x: Var,
    cfg: &HeadConfig,
    rec: Option<&mut RecordSink>,
) -> Result<Var> {
    check_tokens(tape, x, cfg.model_dim, "dual_qk_attention")?;
    let h = cfg.dual_heads()?;
    let heads = |w: ParamId, tape: &mut Tape| -> Result<Var> {
        let y = linear(tape, store, x, w, None)?;
        split_heads(tape, y, h)
    };
    let q1 = heads(p.wq1, tape)?;
    let q2 = heads(p.wq2, tape)?;
    let k1 = heads(p.wk1, tape)?;
    let k2 = heads(p.wk2, tape)?;
    let v = heads(p.wv, tape)?;
    let scale = 1.0 / (cfg.head_dim as f64).sqrt();
    let s1 = tape.matmul_t(q1, k1)?;
    let s1 = tape.scale(s1, scale)?;
    let a1 = tape.softmax(s1)?;
    let s2 = tape.matmul_t(q2, k2)?;
    let s2 = tape.scale(s2, scale)?;
    let a2 = tape.softmax(s2)?;
    let lambda = lambda_var(tape, store, p, cfg.lambda_init)?;
    let lam = tape.reshape(lambda, &[h, 1, 1])?;
    let weighted = tape.mul(lam, a2)?;
    let diff = tape.sub(a1, weighted)?;
    if let Some(rec) = rec {
        let lambdas = tape.value(lambda).data().to_vec();
        rec.capture(tape.value(a1), AttentionKind::DmhaA1, None);
        rec.capture(tape.value(a2), AttentionKind::DmhaA2, None);
        rec.capture(tape.value(diff), AttentionKind::DmhaDiff, Some(&lambdas));
    }
    tape.matmul(diff, v)
}

#[derive(Debug, Clone, Copy)]
pub struct DmhaParams {
    pub ln1: LayerNormParams,
    pub dual: DualQkParams,
    /// Shared RMSNorm gain over each head's `2d` output.
    pub head_norm: ParamId,
    pub w_proj: ParamId,
    pub ffn: FfnParams,
}

impl DmhaParams {
    pub fn register(store: &mut ParamStore, prefix: &str, cfg: &HeadConfig, hidden: usize, split_ffn: bool) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(DmhaParams {
            ln1: LayerNormParams::register(store, &format!("{prefix}.ln1"), d)?,
            dual: DualQkParams::register(store, prefix, cfg)?,
            head_norm: store.add(format!("{prefix}.head_norm"), &[2 * cfg.head_dim], Init::Ones)?,
            w_proj: store.add(format!("{prefix}.w_proj"), &[d, d], Init::fan_in(d))?,
            ffn: FfnParams::register(store, prefix, d, hidden, split_ffn)?,
        })
    }
}

/// Differential attention block: each head's dual-QK output is RMS-normalized
/// and scaled by `1 − λ_init`, heads are concatenated and projected by
/// `W_proj`, inside the same pre-norm residual + MLP wrapper as
/// [`mhsa_block`].
pub fn dmha_block(
    tape: &mut Tape,
    store: &ParamStore,
    p: &DmhaParams,
    x: Var,
    cfg: &HeadConfig,
    rec: Option<&mut RecordSink>,
) -> Result<Var> {
    check_tokens(tape, x, cfg.model_dim, "dmha_block")?;
    let x = p.ffn.before(tape, store, x)?;
    let xn = p.ln1.apply(tape, store, x)?;
    let heads = dual_qk_attention(tape, store, &p.dual, xn, cfg, rec)?;
    let g = tape.param(store, p.head_norm)?;
    let normed = tape.rms_norm(heads, g, RMS_EPS)?;
    let normed = tape.scale(normed, 1.0 - cfg.lambda_init)?;
    let merged = merge_heads(tape, normed)?;
    let out = linear(tape, store, merged, p.w_proj, None)?;
    let x = tape.add(x, out)?;
    p.ffn.after(tape, store, x)
}

#[derive(Debug, Clone, Copy)]
pub struct MhcaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl MhcaParams {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let mut w = |n: &str| store.add(format!("{prefix}.{n}"), &[dim, dim], Init::fan_in(dim));
        Ok(MhcaParams { wq: w("wq")?, wk: w("wk")?, wv: w("wv")?, wo: w("wo")? })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }
}

/// Multi-head cross-attention: queries from `query` (`[B, T, D]`), keys and
/// values from `key_value` (`[B, S, D]`), optional `T x S` mask, output
/// projection `W_o`. Recorded maps are tagged with `kind`.
#[allow(clippy::too_many_arguments)]
pub fn mhca(
    tape: &mut Tape,
    store: &ParamStore,
    p: &MhcaParams,
    query: Var,
    key_value: Var,
    cfg: &HeadConfig,
    mask: Option<&AttentionMask>,
    rec: Option<(&mut RecordSink, AttentionKind)>,
) -> Result<Var> {
    let [bq, t, _] = check_tokens(tape, query, cfg.model_dim, "mhca")?;
    let [bk, s, _] = check_tokens(tape, key_value, cfg.model_dim, "mhca")?;
    if bq != bk {
        return Err(Error::shapes("mhca", tape.shape(query), tape.shape(key_value)));
    }
    if let Some(m) = mask {
        if m.rows() != t || m.cols() != s {
            return Err(Error::dim("mhca", format!("mask {}x{} for {t} queries and {s} keys", m.rows(), m.cols())));
        }
    }
    let h = cfg.heads();
    let q = linear(tape, store, query, p.wq, None)?;
    let k = linear(tape, store, key_value, p.wk, None)?;
    let v = linear(tape, store, key_value, p.wv, None)?;
    let (q, k, v) = (split_heads(tape, q, h)?, split_heads(tape, k, h)?, split_heads(tape, v, h)?);
    let (ctx, a) = sdpa(tape, q, k, v, cfg.head_dim, mask)?;
    if let Some((rec, kind)) = rec {
        rec.capture(tape.value(a), kind, None);
    }
    let ctx = merge_heads(tape, ctx)?;
    linear(tape, store, ctx, p.wo, None)
}
