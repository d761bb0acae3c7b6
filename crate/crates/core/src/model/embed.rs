//! Sinusoidal codes for flow time, spatial scale and timescale.

use crate::error::{invalid, Result};

/// Interleaved `sin, cos` code of `x` with geometrically spaced frequencies
/// from 1 down to 1/10000.
pub fn sinusoid(x: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(invalid(format!("sinusoidal code needs an even dimension, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = if half > 1 {
            (-(10_000f64.ln()) * i as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        out.push((x * freq).sin());
        out.push((x * freq).cos());
    }
    Ok(out)
}

/// Flow time lives in `[0, 1]`; it is stretched so the fastest frequencies
/// resolve small steps.
pub const FLOW_TIME_SCALE: f64 = 1000.0;
