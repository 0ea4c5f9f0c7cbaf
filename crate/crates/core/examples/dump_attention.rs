//! Captures every attention map of one recognition pass and writes them as
//! text matrices next to graymap heatmaps.
//!
//! ```text
//! cargo run --example dump_attention -- hello /tmp/maps
//! ```

use std::collections::BTreeMap;

use otsnet::export::{expected_map_count, write_attention};
use otsnet::train::render_plain;
use otsnet::{ModelConfig, OtsNet};

fn main() -> otsnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let text = args.next().unwrap_or_else(|| "hello".into());
    let dir = args.next().map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("otsnet_maps"));

    let cfg = ModelConfig::default();
    let net = OtsNet::new(cfg.clone(), 7)?;
    let spec = otsnet::train::SynthSpec { height: cfg.image_height, width: cfg.image_width, ..Default::default() };
    let image = render_plain(&text, &spec)?;
    let batch = image.reshape(&[1, 1, cfg.image_height, cfg.image_width])?;
    let (out, sink) = net.recognize_recorded(&batch)?;
    println!("untrained read of {text:?}: {:?}", out[0].text());

    let mut per_kind: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &sink.records {
        *per_kind.entry(r.kind.as_str()).or_default() += 1;
    }
    for (kind, n) in &per_kind {
        println!("{kind:<11} {n} maps");
    }
    let files = write_attention(&sink.records, &dir)?;
    println!("{} maps (expected {}), {} files in {}", sink.records.len(), expected_map_count(&cfg)?, files.len(), dir.display());
    Ok(())
}
