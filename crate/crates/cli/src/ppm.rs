//! Binary PPM (`P6`) images and the colour maps used by `demo`.

use std::path::Path;

use tmanet::data::class_color;
use tmanet::{LabelMap, Tensor, IGNORE_INDEX};

use crate::CliError;

/// Row-major RGB bytes of a `width×height` image.
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Rgb {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.encode()).map_err(|e| tmanet::Error::io(path, e).into())
    }

    /// A `3×H×W` frame with values in `[0, 1]`.
    pub fn from_frame(frame: &Tensor) -> Result<Self, CliError> {
        let (_, h, w) = frame.chw()?;
        let d = frame.data();
        let pixels = (0..h * w)
            .map(|i| [to_byte(d[i]), to_byte(d[h * w + i]), to_byte(d[2 * h * w + i])])
            .collect();
        Ok(Self { width: w, height: h, pixels })
    }

    /// Class-indexed palette; ignored pixels are black.
    pub fn from_labels(labels: &LabelMap) -> Self {
        let pixels = labels
            .data()
            .iter()
            .map(|&c| if c == IGNORE_INDEX { [0; 3] } else { class_color(c).map(to_byte) })
            .collect();
        Self { width: labels.width(), height: labels.height(), pixels }
    }

    /// Black-red-yellow-white heat map of `values`, scaled so `max` is white.
    pub fn heat(values: &[f64], height: usize, width: usize, max: f64) -> Self {
        let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
        let pixels = values
            .iter()
            .map(|&v| {
                let t = (v * scale).clamp(0.0, 1.0);
                [to_byte(3.0 * t), to_byte(3.0 * t - 1.0), to_byte(3.0 * t - 2.0)]
            })
            .collect();
        Self { width, height, pixels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_bytes() {
        let img = Rgb { width: 2, height: 1, pixels: vec![[1, 2, 3], [255, 0, 7]] };
        assert_eq!(img.encode(), b"P6\n2 1\n255\n\x01\x02\x03\xff\x00\x07".to_vec());
    }

    #[test]
    fn heat_extremes() {
        let img = Rgb::heat(&[0.0, 0.5, 1.0], 1, 3, 1.0);
        assert_eq!(img.pixels[0], [0, 0, 0]);
        assert_eq!(img.pixels[2], [255, 255, 255]);
    }
}
