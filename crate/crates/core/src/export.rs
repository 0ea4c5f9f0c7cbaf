//! Text exports: slot features for offline projection and attention maps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attention::{AttentionKind, AttentionRecord};
use crate::decoder::LabelSequence;
use crate::encoder::BlockKind;
use crate::error::Result;
use crate::model::{ModelConfig, OtsNet};
use crate::pgm::heatmap;
use crate::tensor::Tensor;

/// One row per labelled slot: `label_char_id,d0,d1,..`. Slots past the end
/// of the label are skipped.
pub fn feature_rows(features: &Tensor, labels: &[LabelSequence]) -> String {
    let s = features.shape();
    let (slots, dim) = (s[1], s[2]);
    let mut out = String::new();
    for (b, label) in labels.iter().enumerate() {
        for (t, &id) in label.ids().iter().enumerate().take(slots) {
            let off = (b * slots + t) * dim;
            out.push_str(&id.to_string());
            for v in &features.data()[off..off + dim] {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
    }
    out
}

/// Slot features of every image, batched. `None` when the model has no
/// slot alignment.
pub fn export_features(net: &OtsNet, images: &Tensor, labels: &[LabelSequence]) -> Result<Option<String>> {
    Ok(net.slot_features(images)?.map(|f| feature_rows(&f, labels)))
}

/// Number of maps one sample produces for a model configuration.
pub fn expected_map_count(cfg: &ModelConfig) -> Result<usize> {
    let heads = cfg.heads()?;
    let h = heads.heads();
    let mut n = 0;
    for kind in cfg.stack()?.layer_kinds() {
        n += match kind {
            BlockKind::Mhsa => h,
            BlockKind::Dmha => 3 * heads.dual_heads()?,
        };
    }
    if cfg.use_pam {
        n += h;
    }
    if cfg.use_mmcv {
        n += 2 * h * cfg.decoder_depth;
    }
    Ok(n)
}

pub fn record_stem(r: &AttentionRecord) -> String {
    format!("{}_l{:02}_h{}_s{}", r.kind, r.layer, r.head, r.sample)
}

/// Header and comma-separated rows of one map.
pub fn record_text(r: &AttentionRecord) -> String {
    let sums = r.row_sums();
    let (lo, hi) = sums.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let s = r.map.shape();
    let lambda = r.lambda.map_or("none".to_string(), |l| format!("{l:e}"));
    let mut out = format!(
        "# layer={} head={} sample={} kind={} rows={} cols={} lambda={lambda}\n# row_sum_min={lo:e} row_sum_max={hi:e}\n",
        r.layer, r.head, r.sample, r.kind, s[0], s[1]
    );
    for row in r.map.data().chunks(s[1]) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Writes `<stem>.txt` and a `<stem>.pgm` heatmap per record. Returns the
/// text files written.
pub fn write_attention(records: &[AttentionRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(records.len());
    for r in records {
        let stem = record_stem(r);
        let txt = dir.join(format!("{stem}.txt"));
        fs::write(&txt, record_text(r))?;
        heatmap(&r.map)?.write(&dir.join(format!("{stem}.pgm")))?;
        written.push(txt);
    }
    Ok(written)
}

/// Parsed header of an exported map.
#[derive(Debug, Clone, PartialEq)]
pub struct MapHeader {
    pub kind: AttentionKind,
    pub lambda: Option<f64>,
    pub row_sum_min: f64,
    pub row_sum_max: f64,
}

pub fn parse_map_header(text: &str) -> Option<MapHeader> {
    let mut fields = std::collections::HashMap::new();
    for line in text.lines().take(2) {
        for kv in line.trim_start_matches('#').split_whitespace() {
            if let Some((k, v)) = kv.split_once('=') {
                fields.insert(k.to_string(), v.to_string());
            }
        }
    }
    Some(MapHeader {
        kind: fields.get("kind")?.parse().ok()?,
        lambda: fields.get("lambda").and_then(|l| l.parse().ok()),
        row_sum_min: fields.get("row_sum_min")?.parse().ok()?,
        row_sum_max: fields.get("row_sum_max")?.parse().ok()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_map_count() {
        // 10 MHSA x 4 heads, 2 DMHA x 2 heads x 3 maps, 4 PAM, 3 x (4 + 4)
        assert_eq!(expected_map_count(&ModelConfig::default()).unwrap(), 80);
    }

    #[test]
    fn feature_rows_skip_padding() {
        let f = Tensor::new(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let rows = feature_rows(&f, &[LabelSequence::from_text("ab").unwrap()]);
        assert_eq!(rows, "65,1e0,2e0\n66,3e0,4e0\n");
    }

    #[test]
    fn header_roundtrip() {
        let r = AttentionRecord {
            layer: 2,
            head: 1,
            sample: 0,
            kind: AttentionKind::DmhaDiff,
            lambda: Some(0.05),
            map: Tensor::new(&[2, 2], vec![0.5, 0.45, 1.0, -0.05]).unwrap(),
        };
        let h = parse_map_header(&record_text(&r)).unwrap();
        assert_eq!(h.kind, AttentionKind::DmhaDiff);
        assert_eq!(h.lambda, Some(0.05));
        assert!((h.row_sum_min - 0.95).abs() < 1e-15 && (h.row_sum_max - 0.95).abs() < 1e-15);
    }
}
