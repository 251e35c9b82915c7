//! Uniform quantization of bounded feature vectors into `n`-bit symbols,
//! plus the packed wire format carried between device and server.
//!
//! Levels span `[-1, 1]` inclusive with `2^n` uniform points, so `n = 1`
//! is the natural sign quantizer. Inputs are clamped to the box first;
//! ties between neighboring levels resolve toward the lower index.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Bits-per-dimension and dimension count of one device's code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    /// Bits per dimension, `n >= 1`.
    pub bits: u32,
    /// Number of quantized dimensions.
    pub dims: usize,
}

impl QuantizerSpec {
    pub fn new(bits: u32, dims: usize) -> Self {
        assert!(bits >= 1, "quantizer needs at least one bit per dimension");
        assert!(bits <= 16, "indices are stored as u16");
        assert!(dims >= 1, "quantizer needs at least one dimension");
        QuantizerSpec { bits, dims }
    }

    pub fn num_levels(&self) -> usize {
        1usize << self.bits
    }

    /// The dequantization grid `{-1 + 2i/(2^n - 1)}`, strictly increasing
    /// and symmetric about zero. Computed as one signed division so the
    /// grid is exactly symmetric in floating point and midpoint ties
    /// resolve the same way on both sides of zero.
    pub fn levels(&self) -> Vec<f64> {
        let l = self.num_levels();
        (0..l)
            .map(|i| (2 * i as i64 - (l as i64 - 1)) as f64 / (l - 1) as f64)
            .collect()
    }

    /// Transmitted cost of one code: exactly `bits * dims`.
    pub fn bit_cost(&self) -> u64 {
        self.bits as u64 * self.dims as u64
    }
}

/// One transmitted message: integer levels plus their dequantized values.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedCode {
    pub indices: Vec<u16>,
    pub dequantized: Vec<f64>,
    pub bits: u32,
}

impl QuantizedCode {
    pub fn bit_cost(&self) -> u64 {
        self.bits as u64 * self.indices.len() as u64
    }
}

/// Index of the level nearest to `v` (already clamped), ties toward the
/// lower index. Distances are compared directly rather than via division
/// so that exact midpoints resolve deterministically.
fn nearest_level(v: f64, levels: &[f64]) -> usize {
    let l = levels.len();
    let spacing = 2.0 / (l - 1) as f64;
    let guess = ((v + 1.0) / spacing) as isize;
    let lo = guess.saturating_sub(1).max(0) as usize;
    let hi = ((guess + 1).max(0) as usize).min(l - 1);
    let mut best = lo;
    let mut best_d = (v - levels[lo]).abs();
    for i in (lo + 1)..=hi {
        let d = (v - levels[i]).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Clamp each element to `[-1, 1]` and map it to the nearest grid level.
pub fn quantize(v: &[f64], spec: QuantizerSpec) -> QuantizedCode {
    assert_eq!(v.len(), spec.dims, "input length {} != spec dims {}", v.len(), spec.dims);
    let levels = spec.levels();
    let mut indices = Vec::with_capacity(v.len());
    let mut dequantized = Vec::with_capacity(v.len());
    for &x in v {
        let c = x.clamp(-1.0, 1.0);
        let i = nearest_level(c, &levels);
        indices.push(i as u16);
        dequantized.push(levels[i]);
    }
    QuantizedCode { indices, dequantized, bits: spec.bits }
}

/// Dequantize forward values only (used by the autodiff node, which keeps
/// its own record of the pre-quantizer input for the backward surrogate).
pub fn dequantize_values(v: &[f64], bits: u32) -> Vec<f64> {
    let spec = QuantizerSpec::new(bits, v.len());
    quantize(v, spec).dequantized
}

/// Straight-through surrogate: pass the upstream gradient where the
/// pre-quantizer input lies inside the representable box, zero outside.
pub fn quantize_backward(upstream: &[f64], v: &[f64]) -> Vec<f64> {
    upstream
        .iter()
        .zip(v.iter())
        .map(|(&g, &x)| if x.abs() <= 1.0 { g } else { 0.0 })
        .collect()
}

/// MSB-first concatenation of `bits`-wide fields, zero-padded to a byte.
pub fn pack_bits(indices: &[u16], bits: u32) -> Result<Vec<u8>> {
    let max = if bits >= 16 { u16::MAX } else { (1u16 << bits) - 1 };
    let mut out = Vec::with_capacity((indices.len() * bits as usize + 7) / 8);
    let mut acc: u32 = 0;
    let mut nbits: u32 = 0;
    for &idx in indices {
        if idx > max {
            return Err(Error::IndexOutOfRange { index: idx, bits });
        }
        acc = (acc << bits) | idx as u32;
        nbits += bits;
        while nbits >= 8 {
            out.push((acc >> (nbits - 8)) as u8);
            nbits -= 8;
            acc &= (1 << nbits) - 1;
        }
    }
    if nbits > 0 {
        out.push((acc << (8 - nbits)) as u8);
    }
    Ok(out)
}

/// Inverse of [`pack_bits`]; `dims` fields of `bits` each.
pub fn unpack_bits(bytes: &[u8], bits: u32, dims: usize) -> Result<Vec<u16>> {
    let need = (dims * bits as usize + 7) / 8;
    if bytes.len() < need {
        return Err(Error::TruncatedBytes { need, got: bytes.len() });
    }
    let mut out = Vec::with_capacity(dims);
    let mut acc: u32 = 0;
    let mut nbits: u32 = 0;
    let mut pos = 0;
    for _ in 0..dims {
        while nbits < bits {
            acc = (acc << 8) | bytes[pos] as u32;
            pos += 1;
            nbits += 8;
        }
        out.push((acc >> (nbits - bits)) as u16);
        nbits -= bits;
        acc &= (1 << nbits) - 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn level_grid() {
        let spec = QuantizerSpec::new(2, 4);
        let levels = spec.levels();
        assert_eq!(levels.len(), 4);
        assert_eq!(levels[0], -1.0);
        assert_eq!(levels[3], 1.0);
        assert!((levels[1] + 1.0 / 3.0).abs() < 1e-15);
        assert!((levels[2] - 1.0 / 3.0).abs() < 1e-15);
        // symmetric about zero
        for (a, b) in levels.iter().zip(levels.iter().rev()) {
            assert!((a + b).abs() < 1e-15);
        }
    }

    #[test]
    fn sign_quantizer() {
        let spec = QuantizerSpec::new(1, 1);
        let c = quantize(&[0.7], spec);
        assert_eq!(c.indices, vec![1]);
        assert_eq!(c.dequantized, vec![1.0]);
    }

    #[test]
    fn clamps_out_of_range() {
        let spec = QuantizerSpec::new(1, 1);
        let c = quantize(&[1.5], spec);
        assert_eq!(c.indices, vec![1]);
        assert_eq!(c.dequantized, vec![1.0]);
    }

    #[test]
    fn nearest_among_levels() {
        // levels {-1, -1/3, 1/3, 1}; -0.2 is nearest to -1/3
        let spec = QuantizerSpec::new(2, 1);
        let c = quantize(&[-0.2], spec);
        assert_eq!(c.indices, vec![1]);
        assert!((c.dequantized[0] + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn midpoint_tie_goes_low() {
        // 0 sits exactly between -1/3 and 1/3; the tie resolves down.
        let spec = QuantizerSpec::new(2, 1);
        let c = quantize(&[0.0], spec);
        assert_eq!(c.indices, vec![1]);
    }

    #[test]
    fn bit_cost_formula() {
        assert_eq!(QuantizerSpec::new(2, 5).bit_cost(), 10);
        assert_eq!(QuantizerSpec::new(1, 64).bit_cost(), 64);
        assert_eq!(QuantizerSpec::new(4, 3).bit_cost(), 12);
    }

    #[test]
    fn ste_passes_inside_box_only() {
        assert_eq!(quantize_backward(&[2.0], &[0.3]), vec![2.0]);
        assert_eq!(quantize_backward(&[2.0], &[1.7]), vec![0.0]);
        assert_eq!(quantize_backward(&[2.0], &[-1.0]), vec![2.0]);
    }

    #[test]
    fn pack_example() {
        // fields 01 00 11 -> 010011 padded -> 0x4C
        let bytes = pack_bits(&[1, 0, 3], 2).unwrap();
        assert_eq!(bytes, vec![0x4C]);
        assert_eq!(pack_bits(&[], 2).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn pack_rejects_out_of_range() {
        assert!(pack_bits(&[4], 2).is_err());
    }

    #[test]
    fn unpack_rejects_truncation() {
        assert!(unpack_bits(&[0x4C], 2, 5).is_err());
    }

    #[test]
    fn idempotent_on_grid() {
        let spec = QuantizerSpec::new(3, 8);
        let c = quantize(&vec![0.4; 8], spec);
        let c2 = quantize(&c.dequantized, spec);
        assert_eq!(c, c2);
    }

    proptest! {
        #[test]
        fn pack_roundtrip(vals in proptest::collection::vec(0u16..16, 0..50)) {
            let bytes = pack_bits(&vals, 4).unwrap();
            let back = unpack_bits(&bytes, 4, vals.len()).unwrap();
            prop_assert_eq!(back, vals);
        }

        #[test]
        fn quantization_error_bounded(v in -3.0f64..3.0, bits in 1u32..6) {
            let spec = QuantizerSpec::new(bits, 1);
            let c = quantize(&[v], spec);
            let clamped = v.clamp(-1.0, 1.0);
            let half_step = 1.0 / ((1usize << bits) - 1) as f64;
            prop_assert!((clamped - c.dequantized[0]).abs() <= half_step + 1e-12);
        }
    }
}
