//! Whitespace-separated text rows: 784 pixel values in `[0, 1]` followed by
//! the label.

use crate::error::{Error, Result};

use super::Dataset;

const PIXELS: usize = 28 * 28;

/// Parses one image per non-empty line. Pixels are clamped to `[0, 1]` and
/// stored as bytes.
pub fn parse_amat(text: &str) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| Error::Line { line: line_no, message };
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|_| err(format!("not a number: {tok:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != PIXELS + 1 {
            return Err(err(format!("expected {} columns, found {}", PIXELS + 1, values.len())));
        }
        let label = values[PIXELS];
        if !(label.fract() == 0.0 && (0.0..=9.0).contains(&label)) {
            return Err(err(format!("label {label} is not a digit")));
        }
        pixels.extend(values[..PIXELS].iter().map(|&v| {
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            (v * 255.0).round() as u8
        }));
        labels.push(label as u8);
    }
    Ok(Dataset {
        height: 28,
        width: 28,
        pixels,
        labels,
        provenance: None,
    })
}
