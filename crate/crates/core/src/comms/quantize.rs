use crate::error::{invalid, Result};

/// Quantized symbols plus the number of inputs clamped into `[-clip, clip]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quantized {
    pub symbols: Vec<u16>,
    pub clamped: usize,
}

fn check(bits: u8, clip: f64) -> Result<u32> {
    if !(2..=16).contains(&bits) {
        return Err(invalid(format!("quantization bits must be in [2, 16], got {bits}")));
    }
    if !(clip > 0.0 && clip.is_finite()) {
        return Err(invalid(format!("quantization clip must be positive, got {clip}")));
    }
    Ok((1u32 << bits) - 1)
}

/// Uniform quantizer with `2^bits` levels spanning `[-clip, clip]`, so the
/// two end symbols decode to exactly `-clip` and `clip` and the
/// reconstruction error of any clamped input is at most `clip / (2^bits - 1)`.
pub fn quantize(values: &[f64], bits: u8, clip: f64) -> Result<Quantized> {
    let top = check(bits, clip)?;
    let half_span = top as f64 / 2.0;
    let mut clamped = 0;
    let symbols = values
        .iter()
        .map(|&x| {
            let x = if x.is_nan() { 0.0 } else { x };
            if x.abs() > clip {
                clamped += 1;
            }
            let c = x.clamp(-clip, clip);
            ((c / clip + 1.0) * half_span).round().clamp(0.0, top as f64) as u16
        })
        .collect();
    Ok(Quantized { symbols, clamped })
}

pub fn dequantize(symbols: &[u16], bits: u8, clip: f64) -> Result<Vec<f64>> {
    let top = check(bits, clip)? as f64;
    Ok(symbols.iter().map(|&s| clip * (2.0 * s as f64 / top - 1.0)).collect())
}
