//! 8-bit binary greyscale images for side-by-side frame comparison.

use serde::{Deserialize, Serialize};

/// Intensity range mapped onto 0..=255 for one truth/prediction pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScale {
    pub min: f64,
    pub max: f64,
}

impl PairScale {
    pub fn of(a: &[f64], b: &[f64]) -> Self {
        let (min, max) = a
            .iter()
            .chain(b)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Self { min, max }
    }

    pub fn quantize(&self, v: f64) -> u8 {
        let span = self.max - self.min;
        if span <= 0.0 {
            return 0;
        }
        ((v - self.min) / span * 255.0).round().clamp(0.0, 255.0) as u8
    }

    /// Centre of the bin a byte stands for.
    pub fn dequantize(&self, b: u8) -> f64 {
        self.min + (self.max - self.min) * f64::from(b) / 255.0
    }
}

/// P5 encoding of a row-major `width x height` image.
pub fn encode(width: usize, height: usize, values: &[f64], scale: &PairScale) -> Vec<u8> {
    assert_eq!(values.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| scale.quantize(v)));
    out
}

/// Parses what [`encode`] writes; returns width, height and pixels.
pub fn decode(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
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
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let pixels = bytes.get(pos + 1..)?.to_vec();
    (pixels.len() == w * h).then_some((w, h, pixels))
}
