//! Renders a few synthetic samples and prints them as text.
//!
//! Pass a directory to also write them as graymaps.

use otsnet::pgm::GrayImage;
use otsnet::train::{synth_generate, SynthSpec};

fn main() -> otsnet::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from);
    let spec = SynthSpec { max_rotation: 4.0, noise_sigma: 0.05, ..SynthSpec::default() };
    for (i, s) in synth_generate(4, 21, &spec)?.iter().enumerate() {
        println!("#{i} {:?} rotation {:+.2}°", s.text, s.meta.rotation);
        for row in s.image.data().chunks(spec.width) {
            let line: String = row.iter().map(|&v| if v > 0.6 { '#' } else if v > 0.3 { '+' } else { '.' }).collect();
            println!("  {line}");
        }
        if let Some(dir) = &out {
            std::fs::create_dir_all(dir)?;
            GrayImage::from_tensor(&s.image)?.write(&dir.join(format!("sample_{i}.pgm")))?;
        }
    }
    Ok(())
}
