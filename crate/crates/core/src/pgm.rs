//! Portable graymap input and output.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grayscale raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [h, w] | [1, h, w] | [1, 1, h, w] => (h, w),
            ref s => return Err(Error::dim("pgm", format!("expected a single-channel raster, got {s:?}"))),
        };
        Ok(GrayImage { height: h, width: w, pixels: t.data().to_vec() })
    }

    /// `[1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.pixels.clone()).expect("raster size")
    }

    /// Nearest-neighbour resampling.
    pub fn resize(&self, height: usize, width: usize) -> GrayImage {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            let sr = (r * self.height / height).min(self.height - 1);
            for c in 0..width {
                let sc = (c * self.width / width).min(self.width - 1);
                pixels.push(self.pixels[sr * self.width + sc]);
            }
        }
        GrayImage { height, width, pixels }
    }

    /// Binary 8-bit graymap. Values are clamped to `[0, 1]`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = || -> std::result::Result<String, String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token()?;
        let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
        let width = num(token()?)?;
        let height = num(token()?)?;
        let maxval = num(token()?)?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(format!("unsupported geometry {width}x{height} max {maxval}"));
        }
        let n = width * height;
        let scale = maxval as f64;
        let pixels: Vec<f64> = match magic.as_str() {
            "P5" => {
                let data = &bytes[(pos + 1).min(bytes.len())..];
                let wide = maxval > 255;
                let need = if wide { 2 * n } else { n };
                if data.len() < need {
                    return Err(format!("expected {need} pixel bytes, found {}", data.len()));
                }
                if wide {
                    data[..need].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / scale).collect()
                } else {
                    data[..n].iter().map(|&b| b as f64 / scale).collect()
                }
            }
            "P2" => {
                let text = String::from_utf8_lossy(&bytes[pos..]);
                let vals: Vec<f64> = text
                    .split_whitespace()
                    .take(n)
                    .map(|t| t.parse::<f64>().map(|v| v / scale).map_err(|_| format!("bad pixel `{t}`")))
                    .collect::<std::result::Result<_, _>>()?;
                if vals.len() < n {
                    return Err(format!("expected {n} pixels, found {}", vals.len()));
                }
                vals
            }
            other => return Err(format!("not a graymap (magic `{other}`)")),
        };
        if pixels.iter().any(|&p| p > 1.0) {
            return Err("pixel exceeds maxval".into());
        }
        Ok(GrayImage { height, width, pixels })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Image { path: path.into(), reason: e.to_string() })?;
        Self::decode(&bytes).map_err(|reason| Error::Image { path: path.into(), reason })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}

/// Scales an arbitrary map to `[0, 1]` by its own range, for heatmaps.
pub fn heatmap(map: &Tensor) -> Result<GrayImage> {
    let (lo, hi) = map.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let scaled = Tensor::new(map.shape(), map.data().iter().map(|v| (v - lo) / span).collect())?;
    GrayImage::from_tensor(&scaled)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_roundtrip() {
        let img = GrayImage { height: 2, width: 3, pixels: vec![0.0, 1.0, 0.2, 0.4, 0.6, 0.8] };
        let back = GrayImage::decode(&img.encode()).unwrap();
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0);
        }
        let again = GrayImage::decode(&back.encode()).unwrap();
        assert_eq!(again, back);
    }

    #[test]
    fn ascii_with_comments() {
        let img = GrayImage::decode(b"P2\n# hi\n2 1\n4\n0 4\n").unwrap();
        assert_eq!(img.pixels, vec![0.0, 1.0]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(GrayImage::decode(b"P6\n1 1\n255\nabc").is_err());
        assert!(GrayImage::decode(b"P5\n4 4\n255\nab").is_err());
        assert!(GrayImage::decode(b"").is_err());
    }

    #[test]
    fn resize_nearest() {
        let img = GrayImage { height: 1, width: 2, pixels: vec![0.0, 1.0] };
        assert_eq!(img.resize(2, 4).pixels, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
