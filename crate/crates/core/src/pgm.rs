//! Binary PGM (P5) grayscale images.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale image with values quantized from `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::invalid("pgm", format!("{} values for a {width}x{height} image", values.len())));
        }
        let pixels = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Ok(Self { width, height, pixels })
    }

    /// Tiles equally sized `cells` row-major into `cols` columns, separated
    /// by `gap` black pixels.
    pub fn grid(cells: &[GrayImage], cols: usize, gap: usize) -> Result<Self> {
        let first = cells.first().ok_or_else(|| Error::invalid("pgm", "empty grid"))?;
        let (w, h) = (first.width, first.height);
        if cells.iter().any(|c| c.width != w || c.height != h) || cols == 0 {
            return Err(Error::invalid("pgm", "grid cells must share one size"));
        }
        let rows = cells.len().div_ceil(cols);
        let width = cols * w + (cols - 1) * gap;
        let height = rows * h + (rows - 1) * gap;
        let mut pixels = vec![0u8; width * height];
        for (i, cell) in cells.iter().enumerate() {
            let (r, c) = (i / cols, i % cols);
            let (x0, y0) = (c * (w + gap), r * (h + gap));
            for y in 0..h {
                let dst = (y0 + y) * width + x0;
                pixels[dst..dst + w].copy_from_slice(&cell.pixels[y * w..(y + 1) * w]);
            }
        }
        Ok(Self { width, height, pixels })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::invalid("pgm", "not a binary 8-bit PGM");
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
        }
        pos += 1;
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        if fields[0] != "P5" || num(&fields[3])? != 255 {
            return Err(bad());
        }
        let (width, height) = (num(&fields[1])?, num(&fields[2])?);
        let pixels = bytes.get(pos..pos + width * height).ok_or_else(bad)?.to_vec();
        Ok(Self { width, height, pixels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let img = GrayImage::from_unit(3, 2, &[0.0, 0.5, 1.0, 2.0, -1.0, 0.25]).unwrap();
        assert_eq!(img.pixels, vec![0, 128, 255, 255, 0, 64]);
        assert_eq!(GrayImage::decode(&img.encode()).unwrap(), img);
        assert!(img.encode().starts_with(b"P5\n3 2\n255\n"));
    }

    #[test]
    fn grid_layout() {
        let a = GrayImage::from_unit(2, 2, &[1.0; 4]).unwrap();
        let g = GrayImage::grid(&[a.clone(), a.clone(), a], 2, 1).unwrap();
        assert_eq!((g.width, g.height), (5, 5));
        assert_eq!(g.pixels[2], 0);
        assert_eq!(g.pixels[3], 255);
        assert_eq!(g.pixels[5 * 3], 255);
        assert_eq!(g.pixels[5 * 3 + 3], 0);
    }
}
