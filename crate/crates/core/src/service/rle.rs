//! Row-major run-length encoding of masks as `[count, bit]` pairs.

use crate::error::{Error, Result};
use crate::segmenter::Mask;

/// Alternating runs in row-major order. Adjacent runs always differ in bit
/// and no run is empty; an empty image encodes as `[]`.
pub fn rle_encode(mask: &Mask) -> Vec<[u64; 2]> {
    let mut runs: Vec<[u64; 2]> = Vec::new();
    for &b in mask.bits() {
        let bit = b as u64;
        match runs.last_mut() {
            Some(run) if run[1] == bit => run[0] += 1,
            _ => runs.push([1, bit]),
        }
    }
    runs
}

/// Decodes runs into a `width x height` mask. The counts must sum to exactly
/// `width * height` and every bit must be 0 or 1.
pub fn rle_decode(width: usize, height: usize, runs: &[[u64; 2]]) -> Result<Mask> {
    let n = width * height;
    let mut bits = Vec::with_capacity(n);
    for &[count, bit] in runs {
        if bit > 1 {
            return Err(Error::Format(format!("run bit {bit} is not 0 or 1")));
        }
        if count as usize > n - bits.len() {
            return Err(Error::Format(format!("runs exceed {n} pixels")));
        }
        bits.resize(bits.len() + count as usize, bit == 1);
    }
    if bits.len() != n {
        return Err(Error::Format(format!("runs cover {} of {n} pixels", bits.len())));
    }
    Mask::from_bits(width, height, bits)
}
