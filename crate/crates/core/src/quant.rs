//! Absmax quantization.
//!
//! A tensor `X` is mapped to integer codes with
//!
//! ```text
//! c = (2^b − 1) / absmax(X)
//! q = round(c · X)            (ties away from zero)
//! ```
//!
//! and recovered as `X̂ = q / c`.
//!
//! **Code range.** Because the scale uses `2^b − 1` and `X` is signed, codes
//! span `[−(2^b − 1), 2^b − 1]`: 31 levels for `b = 4`, 511 for `b = 8`.
//! This is wider than two's-complement `intb` (`[−2^{b−1}, 2^{b−1} − 1]`) and
//! cannot be stored in `b` bits. The packed form therefore carries a
//! `b`-bit magnitude plane plus a one-bit-per-entry sign plane:
//!
//! * magnitudes, `b = 4`: two per byte, entry `2i` in the low nibble of byte
//!   `i`, entry `2i + 1` in the high nibble; `b = 8`: one byte each;
//! * signs: bit `j` (LSB first) of byte `i` is set when entry `8i + j` is
//!   negative. The bit is never set for a zero code.
//!
//! Effective storage is `b + 1` bits per entry.

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::lora::LowRankUpdate;
use crate::numerics::{matmul, Matrix};

/// How scales are assigned to entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleScheme {
    /// One absmax over the whole tensor.
    #[default]
    PerTensor,
    /// One absmax per run of `block_len` consecutive row-major entries.
    Blockwise { block_len: usize },
}

/// Integer codes plus the scale(s) needed to dequantize them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    bits: u8,
    scheme: ScaleScheme,
    scales: Vec<f64>,
    codes: Vec<i32>,
    packed: Vec<u8>,
}

pub(crate) fn max_code(bits: u8) -> i32 {
    (1i32 << bits) - 1
}

fn check_bits(bits: u8) -> Result<()> {
    if bits == 4 || bits == 8 {
        Ok(())
    } else {
        Err(Error::param(format!("unsupported bit width {bits}; expected 4 or 8")))
    }
}

/// Quantizes `x` with a single per-tensor scale.
pub fn quantize(x: &Matrix, bits: u8) -> Result<QuantizedTensor> {
    quantize_with(x, bits, ScaleScheme::PerTensor)
}

pub fn quantize_with(x: &Matrix, bits: u8, scheme: ScaleScheme) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    let block_len = match scheme {
        ScaleScheme::PerTensor => x.len(),
        ScaleScheme::Blockwise { block_len } if block_len > 0 => block_len,
        ScaleScheme::Blockwise { .. } => return Err(Error::param("block length must be positive")),
    };
    let levels = max_code(bits) as f64;
    let mut scales = Vec::new();
    let mut codes = Vec::with_capacity(x.len());
    for block in x.as_slice().chunks(block_len) {
        let absmax = block.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if absmax == 0.0 {
            scales.push(0.0);
            codes.extend(std::iter::repeat_n(0, block.len()));
            continue;
        }
        let c = levels / absmax;
        scales.push(c);
        codes.extend(block.iter().map(|&v| (c * v).round() as i32));
    }
    let packed = pack_codes(&codes, bits);
    Ok(QuantizedTensor {
        rows: x.rows(),
        cols: x.cols(),
        bits,
        scheme,
        scales,
        codes,
        packed,
    })
}

/// `X̂ = q / c`, zeros wherever the scale is flagged zero.
pub fn dequantize(q: &QuantizedTensor) -> Result<Matrix> {
    let codes = unpack_codes(&q.packed, q.bits, q.rows * q.cols)?;
    let block_len = q.block_len();
    let data = codes
        .iter()
        .enumerate()
        .map(|(i, &code)| {
            let c = q.scales[i / block_len];
            if c == 0.0 {
                0.0
            } else {
                code as f64 / c
            }
        })
        .collect();
    Matrix::from_vec(q.rows, q.cols, data)
}

/// Exact size in bytes of the serialized quantized section (header, scales
/// and packed planes).
pub fn storage_footprint(q: &QuantizedTensor) -> usize {
    checkpoint::encode_quantized(q).len()
}

/// Size in bytes of the same tensor stored as 16-bit floats, no header.
pub fn half_precision_footprint(rows: usize, cols: usize) -> usize {
    rows * cols * 2
}

/// `dequantize(W0q)·x + (α/r)·B·(A·x)`: the base lives only in quantized form
/// and is expanded on every call.
pub fn qlora_forward(qbase: &QuantizedTensor, update: &LowRankUpdate, x: &Matrix) -> Result<Matrix> {
    if qbase.shape() != (update.out_dim(), update.in_dim()) {
        return Err(Error::shape(
            "qlora base vs adapter",
            qbase.shape(),
            (update.out_dim(), update.in_dim()),
        ));
    }
    if x.rows() != qbase.cols {
        return Err(Error::shape("qlora forward", qbase.shape(), x.shape()));
    }
    let base = dequantize(qbase)?;
    matmul(&base, x)?.add(&update.apply(x)?)
}

impl QuantizedTensor {
    pub(crate) fn from_parts(
        rows: usize,
        cols: usize,
        bits: u8,
        scheme: ScaleScheme,
        scales: Vec<f64>,
        packed: Vec<u8>,
    ) -> Result<Self> {
        check_bits(bits)?;
        if rows == 0 || cols == 0 {
            return Err(Error::format("quantized tensor with empty shape"));
        }
        let n = rows * cols;
        let block_len = match scheme {
            ScaleScheme::PerTensor => n,
            ScaleScheme::Blockwise { block_len } if block_len > 0 => block_len,
            ScaleScheme::Blockwise { .. } => return Err(Error::format("zero block length")),
        };
        if scales.len() != n.div_ceil(block_len) {
            return Err(Error::format(format!(
                "expected {} scales, found {}",
                n.div_ceil(block_len),
                scales.len()
            )));
        }
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::format("scales must be finite and non-negative"));
        }
        let codes = unpack_codes(&packed, bits, n)?;
        for (i, &code) in codes.iter().enumerate() {
            if scales[i / block_len] == 0.0 && code != 0 {
                return Err(Error::format("nonzero code under a zero scale"));
            }
        }
        Ok(QuantizedTensor {
            rows,
            cols,
            bits,
            scheme,
            scales,
            codes,
            packed,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scheme(&self) -> ScaleScheme {
        self.scheme
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    /// Per-tensor scale `c`, or the first block's scale under blockwise
    /// scaling.
    pub fn scale(&self) -> f64 {
        self.scales[0]
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// True for an all-zero input: every scale is flagged zero.
    pub fn is_zero(&self) -> bool {
        self.scales.iter().all(|&s| s == 0.0)
    }

    pub(crate) fn block_len(&self) -> usize {
        match self.scheme {
            ScaleScheme::PerTensor => self.rows * self.cols,
            ScaleScheme::Blockwise { block_len } => block_len,
        }
    }
}

fn magnitude_plane_len(n: usize, bits: u8) -> usize {
    if bits == 4 {
        n.div_ceil(2)
    } else {
        n
    }
}

/// Length in bytes of the packed magnitude and sign planes for `n` codes.
pub fn packed_len(n: usize, bits: u8) -> usize {
    magnitude_plane_len(n, bits) + n.div_ceil(8)
}

/// Packs signed codes into a magnitude plane followed by a sign plane.
pub fn pack_codes(codes: &[i32], bits: u8) -> Vec<u8> {
    let n = codes.len();
    let mag_len = magnitude_plane_len(n, bits);
    let mut out = vec![0u8; packed_len(n, bits)];
    for (i, &code) in codes.iter().enumerate() {
        let mag = code.unsigned_abs() as u8;
        if bits == 4 {
            out[i / 2] |= (mag & 0x0f) << (4 * (i % 2));
        } else {
            out[i] = mag;
        }
        if code < 0 {
            out[mag_len + i / 8] |= 1 << (i % 8);
        }
    }
    out
}

/// Inverse of [`pack_codes`]. Rejects wrong lengths, set padding bits and
/// negative zeros so that packing is a bijection on valid inputs.
pub fn unpack_codes(packed: &[u8], bits: u8, n: usize) -> Result<Vec<i32>> {
    check_bits(bits)?;
    if packed.len() != packed_len(n, bits) {
        return Err(Error::format(format!(
            "packed code length {} does not match {} for {n} codes at {bits} bits",
            packed.len(),
            packed_len(n, bits)
        )));
    }
    let mag_len = magnitude_plane_len(n, bits);
    let (mags, signs) = packed.split_at(mag_len);
    if bits == 4 && n % 2 == 1 && mags[mag_len - 1] >> 4 != 0 {
        return Err(Error::format("nonzero padding nibble"));
    }
    if !n.is_multiple_of(8) && signs[signs.len() - 1] >> (n % 8) != 0 {
        return Err(Error::format("nonzero padding bits in sign plane"));
    }
    let mut codes = Vec::with_capacity(n);
    for i in 0..n {
        let mag = if bits == 4 {
            (mags[i / 2] >> (4 * (i % 2))) & 0x0f
        } else {
            mags[i]
        } as i32;
        let negative = signs[i / 8] >> (i % 8) & 1 == 1;
        if negative && mag == 0 {
            return Err(Error::format(format!("negative zero code at entry {i}")));
        }
        codes.push(if negative { -mag } else { mag });
    }
    Ok(codes)
}
