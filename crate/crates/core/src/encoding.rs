//! Frequency positional encoding `[x, sin(2^d1 x), cos(2^d1 x), ..., sin(2^(d2-1) x), cos(2^(d2-1) x)]`.
//!
//! Each input scalar expands to its own contiguous block; blocks follow input order.

use crate::error::{precondition, Result};

/// Frequency exponents `lo..hi` (half-open) of the sin/cos ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncodingBand {
    lo: u32,
    hi: u32,
}

impl EncodingBand {
    pub fn new(lo: u32, hi: u32) -> Result<Self> {
        if lo > hi {
            return Err(precondition(format!("encoding band {lo}..{hi} is inverted")));
        }
        if hi > 30 {
            return Err(precondition(format!("encoding band upper exponent {hi} too large")));
        }
        Ok(EncodingBand { lo, hi })
    }

    /// `γ(·, 0, l)`.
    pub fn up_to(l: u32) -> Self {
        EncodingBand { lo: 0, hi: l }
    }

    pub fn lo(&self) -> u32 {
        self.lo
    }

    pub fn hi(&self) -> u32 {
        self.hi
    }

    pub fn frequencies(&self) -> usize {
        (self.hi - self.lo) as usize
    }

    /// Encoded length of one scalar.
    pub fn width(&self) -> usize {
        1 + 2 * self.frequencies()
    }

    pub fn encoded_len(&self, n: usize) -> usize {
        n * self.width()
    }
}

pub fn positional_encode(x: &[f64], band: EncodingBand) -> Vec<f64> {
    let mut out = vec![0.0; band.encoded_len(x.len())];
    encode_into(x, band, &mut out);
    out
}

/// Writes the encoding of `x` into `out[..band.encoded_len(x.len())]`.
pub fn encode_into(x: &[f64], band: EncodingBand, out: &mut [f64]) {
    let w = band.width();
    for (xi, block) in x.iter().zip(out.chunks_exact_mut(w)) {
        block[0] = *xi;
        for (k, pair) in (band.lo..band.hi).zip(block[1..].chunks_exact_mut(2)) {
            let (s, c) = (scale(k) * xi).sin_cos();
            pair[0] = s;
            pair[1] = c;
        }
    }
}

#[inline]
fn scale(k: u32) -> f64 {
    (1u64 << k) as f64
}

/// Dense Jacobian, row-major `encoded_len(n) x n`. It is block diagonal since each
/// block depends only on its own scalar.
pub fn encode_gradient(x: &[f64], band: EncodingBand) -> Vec<f64> {
    let n = x.len();
    let w = band.width();
    let mut jac = vec![0.0; w * n * n];
    for (i, xi) in x.iter().enumerate() {
        let row0 = i * w;
        jac[row0 * n + i] = 1.0;
        for (j, k) in (band.lo..band.hi).enumerate() {
            let f = scale(k);
            let (s, c) = (f * xi).sin_cos();
            jac[(row0 + 1 + 2 * j) * n + i] = f * c;
            jac[(row0 + 2 + 2 * j) * n + i] = -f * s;
        }
    }
    jac
}

/// Vector-Jacobian product: accumulates `J^T d_out` into `d_x`.
pub fn encode_backward(x: &[f64], band: EncodingBand, d_out: &[f64], d_x: &mut [f64]) {
    let w = band.width();
    for ((xi, dx), block) in x.iter().zip(d_x.iter_mut()).zip(d_out.chunks_exact(w)) {
        let mut acc = block[0];
        for (k, pair) in (band.lo..band.hi).zip(block[1..].chunks_exact(2)) {
            let f = scale(k);
            let (s, c) = (f * xi).sin_cos();
            acc += pair[0] * f * c - pair[1] * f * s;
        }
        *dx += acc;
    }
}
