//! Binary checkpoint sections.
//!
//! All integers and floats are little-endian. Byte layouts (offsets in bytes):
//!
//! **Matrix** (`PFMX`)
//! ```text
//!  0  4  magic "PFMX"
//!  4  2  version u16 = 1
//!  6  4  rows u32
//! 10  4  cols u32
//! 14  1  dtype tag u8 (1 = f64)
//! 15  8·rows·cols  row-major f64 values
//! ```
//!
//! **Quantized tensor** (`PFQT`)
//! ```text
//!  0  4  magic "PFQT"
//!  4  2  version u16 = 1
//!  6  1  bits u8 (4 or 8)
//!  7  1  zero flag u8 (1 iff every scale is zero)
//!  8  4  rows u32
//! 12  4  cols u32
//! 16  4  block length u32 (0 = one scale for the whole tensor)
//! 20  8  scale f64 (first block's scale when blockwise)
//! 28  8·(blocks − 1)  remaining block scales, blockwise only
//!  …     magnitude plane, then sign plane (see `quant`)
//! ```
//!
//! **Mask** (`PFMK`)
//! ```text
//!  0  4  magic "PFMK"
//!  4  2  version u16 = 1
//!  6  2  layer id length u16, then that many UTF-8 bytes
//!  …  4  rows u32
//!  …  4  cols u32
//!  …  8  target sparsity f64
//!  …  1  threshold present u8, then threshold f64 (0.0 when absent)
//!  …  1  mode u8 (0 = global, 1 = per-layer)
//!  …     ⌈rows·cols/8⌉ keep bits, entry 8i + j in bit j (LSB first) of byte i
//! ```
//!
//! **Adapter** (`PFAD`)
//! ```text
//!  0  4  magic "PFAD"
//!  4  2  version u16 = 1
//!  6  4  rank u32
//! 10  8  alpha f64
//! 18  8  checksum of the frozen base the adapter was trained against
//! 26     A as a Matrix section, then B as a Matrix section
//! ```
//!
//! **Container** (`PFCK`)
//! ```text
//!  0  4  magic "PFCK"
//!  4  2  version u16 = 1
//!  6  4  section count u32
//! per section:
//!     1  kind u8 (1 matrix, 2 quantized, 3 mask, 4 adapter, 5 metadata)
//!     2  name length u16, then UTF-8 name
//!     8  payload length u64, then payload
//! ```
//! Metadata payloads are UTF-8 text (JSON by convention).

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LowRankUpdate};
use crate::numerics::{digest_u64, Matrix};
use crate::prune::{PruneMask, PruneMode};
use crate::quant::{packed_len, QuantizedTensor, ScaleScheme};

const VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(format!(
                "{}: truncated at byte {} (needed {n} more)",
                self.what, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.array::<4>()?;
        if &got != expected {
            return Err(Error::format(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(expected)
            )));
        }
        let version = self.u16()?;
        if version != VERSION {
            return Err(Error::format(format!("{}: unsupported version {version}", self.what)));
        }
        Ok(())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::format(format!("{}: name is not UTF-8", self.what)))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_header(out: &mut Vec<u8>, magic: &[u8; 4]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn dim_u32(n: usize) -> u32 {
    u32::try_from(n).expect("dimension exceeds u32")
}

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(15 + 8 * m.len());
    put_header(&mut out, b"PFMX");
    out.extend_from_slice(&dim_u32(m.rows()).to_le_bytes());
    out.extend_from_slice(&dim_u32(m.cols()).to_le_bytes());
    out.push(DTYPE_F64);
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_matrix(r: &mut Reader<'_>) -> Result<Matrix> {
    r.magic(b"PFMX")?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let dtype = r.u8()?;
    if dtype != DTYPE_F64 {
        return Err(Error::format(format!("matrix: unknown dtype tag {dtype}")));
    }
    let bytes = r.take(
        rows.checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::format("matrix: size overflow"))?,
    )?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Matrix::from_vec(rows, cols, data).map_err(|e| Error::format(format!("matrix: {e}")))
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader::new(bytes, "matrix");
    let m = read_matrix(&mut r)?;
    r.finish()?;
    Ok(m)
}

pub fn encode_quantized(q: &QuantizedTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + q.packed().len());
    put_header(&mut out, b"PFQT");
    out.push(q.bits());
    out.push(u8::from(q.is_zero()));
    out.extend_from_slice(&dim_u32(q.rows()).to_le_bytes());
    out.extend_from_slice(&dim_u32(q.cols()).to_le_bytes());
    let block = match q.scheme() {
        ScaleScheme::PerTensor => 0,
        ScaleScheme::Blockwise { block_len } => dim_u32(block_len),
    };
    out.extend_from_slice(&block.to_le_bytes());
    for s in q.scales() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(q.packed());
    out
}

pub fn decode_quantized(bytes: &[u8]) -> Result<QuantizedTensor> {
    let mut r = Reader::new(bytes, "quantized tensor");
    r.magic(b"PFQT")?;
    let bits = r.u8()?;
    let zero_flag = r.u8()?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let block = r.u32()? as usize;
    let n = rows * cols;
    let (scheme, n_scales) = if block == 0 {
        (ScaleScheme::PerTensor, 1)
    } else {
        (ScaleScheme::Blockwise { block_len: block }, n.div_ceil(block))
    };
    let scales = (0..n_scales).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    if bits != 4 && bits != 8 {
        return Err(Error::format(format!("quantized tensor: bit width {bits}")));
    }
    let packed = r.take(packed_len(n, bits))?.to_vec();
    r.finish()?;
    let q = QuantizedTensor::from_parts(rows, cols, bits, scheme, scales, packed)?;
    if u8::from(q.is_zero()) != zero_flag {
        return Err(Error::format("quantized tensor: zero flag disagrees with scales"));
    }
    Ok(q)
}

pub fn encode_mask(m: &PruneMask) -> Vec<u8> {
    let (rows, cols) = m.shape();
    let mut out = Vec::new();
    put_header(&mut out, b"PFMK");
    put_string(&mut out, &m.layer_id);
    out.extend_from_slice(&dim_u32(rows).to_le_bytes());
    out.extend_from_slice(&dim_u32(cols).to_le_bytes());
    out.extend_from_slice(&m.target_sparsity.to_le_bytes());
    out.push(u8::from(m.threshold.is_some()));
    out.extend_from_slice(&m.threshold.unwrap_or(0.0).to_le_bytes());
    out.push(match m.mode {
        PruneMode::Global => 0,
        PruneMode::PerLayer => 1,
    });
    let mut bits = vec![0u8; m.bits().len().div_ceil(8)];
    for (i, &keep) in m.bits().iter().enumerate() {
        if keep {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&bits);
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<PruneMask> {
    let mut r = Reader::new(bytes, "mask");
    r.magic(b"PFMK")?;
    let layer_id = r.string()?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let target = r.f64()?;
    let has_threshold = r.u8()?;
    let threshold = r.f64()?;
    let mode = match r.u8()? {
        0 => PruneMode::Global,
        1 => PruneMode::PerLayer,
        other => return Err(Error::format(format!("mask: unknown mode {other}"))),
    };
    let n = rows * cols;
    let packed = r.take(n.div_ceil(8))?;
    r.finish()?;
    if !n.is_multiple_of(8) && packed[packed.len() - 1] >> (n % 8) != 0 {
        return Err(Error::format("mask: nonzero padding bits"));
    }
    let keep = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
    let threshold = match has_threshold {
        0 => None,
        1 => Some(threshold),
        other => return Err(Error::format(format!("mask: bad threshold flag {other}"))),
    };
    PruneMask::from_bits(layer_id, rows, cols, keep, threshold, target, mode)
}

pub fn encode_adapter(update: &LowRankUpdate, base_checksum: u64) -> Vec<u8> {
    let mut out = Vec::new();
    put_header(&mut out, b"PFAD");
    out.extend_from_slice(&dim_u32(update.rank()).to_le_bytes());
    out.extend_from_slice(&update.alpha().to_le_bytes());
    out.extend_from_slice(&base_checksum.to_le_bytes());
    out.extend_from_slice(&encode_matrix(update.a()));
    out.extend_from_slice(&encode_matrix(update.b()));
    out
}

pub fn decode_adapter(bytes: &[u8]) -> Result<(LowRankUpdate, u64)> {
    let mut r = Reader::new(bytes, "adapter");
    r.magic(b"PFAD")?;
    let rank = r.u32()? as usize;
    let alpha = r.f64()?;
    let checksum = r.u64()?;
    let a = read_matrix(&mut r)?;
    let b = read_matrix(&mut r)?;
    r.finish()?;
    if a.rows() != rank {
        return Err(Error::format(format!(
            "adapter: header rank {rank} but A has {} rows",
            a.rows()
        )));
    }
    let update = LowRankUpdate::new(a, b, alpha).map_err(|e| Error::format(format!("adapter: {e}")))?;
    Ok((update, checksum))
}

/// Checksum of a quantized tensor's serialized section.
pub fn quantized_checksum(q: &QuantizedTensor) -> u64 {
    digest_u64(&Sha256::digest(encode_quantized(q)))
}

/// One named section of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub enum Section {
    Matrix(Matrix),
    Quantized(QuantizedTensor),
    Mask(PruneMask),
    Adapter { update: LowRankUpdate, base_checksum: u64 },
    Meta(String),
}

impl Section {
    fn kind(&self) -> u8 {
        match self {
            Section::Matrix(_) => 1,
            Section::Quantized(_) => 2,
            Section::Mask(_) => 3,
            Section::Adapter { .. } => 4,
            Section::Meta(_) => 5,
        }
    }

    fn encode(&self) -> Vec<u8> {
        match self {
            Section::Matrix(m) => encode_matrix(m),
            Section::Quantized(q) => encode_quantized(q),
            Section::Mask(m) => encode_mask(m),
            Section::Adapter { update, base_checksum } => encode_adapter(update, *base_checksum),
            Section::Meta(text) => text.as_bytes().to_vec(),
        }
    }

    fn decode(kind: u8, payload: &[u8]) -> Result<Section> {
        Ok(match kind {
            1 => Section::Matrix(decode_matrix(payload)?),
            2 => Section::Quantized(decode_quantized(payload)?),
            3 => Section::Mask(decode_mask(payload)?),
            4 => {
                let (update, base_checksum) = decode_adapter(payload)?;
                Section::Adapter { update, base_checksum }
            }
            5 => Section::Meta(
                String::from_utf8(payload.to_vec()).map_err(|_| Error::format("metadata section is not UTF-8"))?,
            ),
            other => return Err(Error::format(format!("unknown section kind {other}"))),
        })
    }
}

/// Ordered collection of named sections.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    sections: Vec<(String, Section)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a section; names must be unique.
    pub fn push(&mut self, name: impl Into<String>, section: Section) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::consistency(format!("duplicate checkpoint section '{name}'")));
        }
        self.sections.push((name, section));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn sections(&self) -> impl Iterator<Item = (&str, &Section)> {
        self.sections.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn len(&self) -> usize {
        self.sections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_header(&mut out, b"PFCK");
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, section) in &self.sections {
            out.push(section.kind());
            put_string(&mut out, name);
            let payload = section.encode();
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(b"PFCK")?;
        let count = r.u32()?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let kind = r.u8()?;
            let name = r.string()?;
            let len = usize::try_from(r.u64()?).map_err(|_| Error::format("section too large"))?;
            let payload = r.take(len)?;
            let section =
                Section::decode(kind, payload).map_err(|e| Error::format(format!("section '{name}': {e}")))?;
            ckpt.push(name, section)?;
        }
        r.finish()?;
        Ok(ckpt)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds a full-precision adapter from a base matrix section and an
    /// adapter section, refusing a base whose checksum differs from the one
    /// recorded at training time.
    pub fn load_adapter(&self, base_name: &str, adapter_name: &str) -> Result<LoraAdapter> {
        let base = match self.get(base_name) {
            Some(Section::Matrix(m)) => m.clone(),
            Some(_) => return Err(Error::format(format!("section '{base_name}' is not a matrix"))),
            None => return Err(Error::format(format!("missing section '{base_name}'"))),
        };
        let (update, recorded) = match self.get(adapter_name) {
            Some(Section::Adapter { update, base_checksum }) => (update.clone(), *base_checksum),
            Some(_) => return Err(Error::format(format!("section '{adapter_name}' is not an adapter"))),
            None => return Err(Error::format(format!("missing section '{adapter_name}'"))),
        };
        if base.checksum() != recorded {
            return Err(Error::consistency(format!(
                "base '{base_name}' checksum {:016x} does not match adapter record {recorded:016x}",
                base.checksum()
            )));
        }
        LoraAdapter::new(base, update)
    }
}
