//! Deterministic synthetic text-line rasters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::decoder::{CharVocab, LabelSequence};
use crate::error::{Error, Result};
use crate::param::mix;
use crate::tensor::Tensor;

use super::font::{glyph, ink, text_width, ADVANCE, GLYPH_HEIGHT, GLYPH_WIDTH};

pub const DEFAULT_ALPHABET: &str = "0123456789abcdefghijklmnopqrstuvwxyz";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub alphabet: String,
    pub min_len: usize,
    pub max_len: usize,
    pub height: usize,
    pub width: usize,
    /// Largest absolute rotation in degrees; 0 disables rotation.
    pub max_rotation: f64,
    /// Standard deviation of additive pixel noise; 0 disables noise.
    pub noise_sigma: f64,
    pub intensity: f64,
    /// Largest random offset in pixels from the top-left placement, on
    /// either axis, limited by the free space; 0 keeps text left-aligned.
    pub max_shift: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            alphabet: DEFAULT_ALPHABET.into(),
            min_len: 1,
            max_len: 5,
            height: 8,
            width: 32,
            max_rotation: 0.0,
            noise_sigma: 0.0,
            intensity: 1.0,
            max_shift: 0,
        }
    }
}

impl SynthSpec {
    /// Plain rendering with the augmentations turned on.
    pub fn augmented() -> Self {
        SynthSpec { max_rotation: 10.0, noise_sigma: 0.05, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let chars: Vec<char> = self.alphabet.chars().collect();
        if chars.is_empty() {
            return Err(Error::Generation("empty alphabet".into()));
        }
        if let Some(c) = chars.iter().find(|&&c| glyph(c).is_none() || CharVocab::id(c).is_none()) {
            return Err(Error::Generation(format!("no glyph for {c:?}")));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Generation(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        if text_width(self.max_len) > self.width || GLYPH_HEIGHT > self.height {
            return Err(Error::Generation(format!(
                "{} characters need {}x{} pixels, raster is {}x{}",
                self.max_len,
                GLYPH_HEIGHT,
                text_width(self.max_len),
                self.height,
                self.width
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.max_rotation >= 0.0 && self.intensity > 0.0) {
            return Err(Error::Generation("noise, rotation and intensity must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderMeta {
    pub x_offset: usize,
    pub y_offset: usize,
    pub rotation: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub text: String,
    pub meta: RenderMeta,
}

impl SyntheticSample {
    pub fn label(&self) -> LabelSequence {
        LabelSequence::from_text(&self.text).expect("synthetic text is in the vocabulary")
    }
}

/// Draws `text` with its top-left corner at (`y`, `x`).
pub fn render_text(text: &str, spec: &SynthSpec, x: usize, y: usize) -> Result<Vec<f64>> {
    let n = text.chars().count();
    if x + text_width(n) > spec.width || y + GLYPH_HEIGHT > spec.height {
        return Err(Error::Generation(format!("{text:?} does not fit a {}x{} raster", spec.height, spec.width)));
    }
    let mut px = vec![0.0; spec.height * spec.width];
    for (i, c) in text.chars().enumerate() {
        let g = glyph(c).ok_or_else(|| Error::Generation(format!("no glyph for {c:?}")))?;
        for col in 0..GLYPH_WIDTH {
            for row in 0..GLYPH_HEIGHT {
                if ink(g, row, col) {
                    px[(y + row) * spec.width + x + i * ADVANCE + col] = spec.intensity;
                }
            }
        }
    }
    Ok(px)
}

/// Nearest-neighbour rotation about the raster centre.
fn rotate(px: &[f64], h: usize, w: usize, degrees: f64) -> Vec<f64> {
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for col in 0..w {
            let (dy, dx) = (r as f64 - cy, col as f64 - cx);
            let sx = (c * dx + s * dy + cx).round();
            let sy = (-s * dx + c * dy + cy).round();
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                out[r * w + col] = px[sy as usize * w + sx as usize];
            }
        }
    }
    out
}

/// Sample `index` of the corpus keyed by `seed`; independent of every
/// other index.
pub fn synth_sample(spec: &SynthSpec, seed: u64, index: u64) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, index));
    let alphabet: Vec<char> = spec.alphabet.chars().collect();
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let text: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
    let x = rng.random_range(0..=spec.max_shift.min(spec.width - text_width(len)));
    let y = rng.random_range(0..=spec.max_shift.min(spec.height - GLYPH_HEIGHT));
    let rotation = if spec.max_rotation > 0.0 { rng.random_range(-spec.max_rotation..=spec.max_rotation) } else { 0.0 };
    let mut px = render_text(&text, spec, x, y)?;
    if rotation != 0.0 {
        px = rotate(&px, spec.height, spec.width, rotation);
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Generation(e.to_string()))?;
        for p in px.iter_mut() {
            *p = (*p + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(SyntheticSample {
        image: Tensor::new(&[1, spec.height, spec.width], px)?,
        text,
        meta: RenderMeta { x_offset: x, y_offset: y, rotation, noise_sigma: spec.noise_sigma },
    })
}

/// Renders a fixed string at the corpus placement, without augmentation.
pub fn render_plain(text: &str, spec: &SynthSpec) -> Result<Tensor> {
    let px = render_text(text, spec, 0, 0)?;
    Tensor::new(&[1, spec.height, spec.width], px)
}

pub fn synth_generate(count: usize, seed: u64, spec: &SynthSpec) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    (0..count as u64).map(|i| synth_sample(spec, seed, i)).collect()
}

/// Stacks `[1, H, W]` images into `[B, 1, H, W]`.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut count = 0;
    for im in images {
        match &shape {
            None => shape = Some(im.shape().to_vec()),
            Some(s) if s != im.shape() => return Err(Error::shapes("stack_images", s, im.shape())),
            _ => {}
        }
        data.extend_from_slice(im.data());
        count += 1;
    }
    let mut full = vec![count];
    full.extend(shape.ok_or_else(|| Error::dim("stack_images", "no images".to_string()))?);
    Tensor::new(&full, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let spec = SynthSpec::augmented();
        let a = synth_generate(20, 7, &spec).unwrap();
        let b = synth_generate(20, 7, &spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_generate(20, 8, &spec).unwrap());
    }

    #[test]
    fn clean_rasters_are_binary() {
        let spec = SynthSpec { intensity: 0.8, ..SynthSpec::default() };
        for s in synth_generate(50, 1, &spec).unwrap() {
            assert!(s.image.data().iter().all(|&p| p == 0.0 || p == 0.8));
            assert!(s.image.data().iter().any(|&p| p == 0.8));
            assert!((1..=5).contains(&s.text.len()));
        }
    }

    #[test]
    fn noisy_rasters_stay_in_range() {
        for s in synth_generate(30, 2, &SynthSpec::augmented()).unwrap() {
            assert!(s.image.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
            assert!(s.meta.rotation.abs() <= 10.0);
        }
    }

    #[test]
    fn too_long_is_rejected() {
        let spec = SynthSpec { max_len: 6, ..SynthSpec::default() };
        assert!(matches!(synth_generate(1, 0, &spec), Err(Error::Generation(_))));
        assert!(render_plain("abcdef", &SynthSpec::default()).is_err());
    }

    #[test]
    fn zero_rotation_is_identity() {
        let spec = SynthSpec::default();
        let px = render_text("a1", &spec, 3, 0).unwrap();
        assert_eq!(rotate(&px, 8, 32, 0.0), px);
    }
}
