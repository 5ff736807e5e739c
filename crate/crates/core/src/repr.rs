//! Layer-wise representation container and the `LRP1` file format.
//!
//! Layout, all integers unsigned 32-bit little-endian:
//!
//! ```text
//! "LRP1" | version = 1 | id_len | id bytes (UTF-8) | L | T | D | L*T*D f32 LE
//! ```
//!
//! Values are stored layer-major, then frame, then dimension.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const LRP_MAGIC: [u8; 4] = *b"LRP1";
pub const LRP_VERSION: u32 = 1;

/// Frozen hidden states of one utterance: `num_layers x num_frames x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerwiseRepr {
    utterance_id: String,
    num_layers: usize,
    num_frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl LayerwiseRepr {
    pub fn new(
        utterance_id: impl Into<String>,
        num_layers: usize,
        num_frames: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let repr = Self {
            utterance_id: utterance_id.into(),
            num_layers,
            num_frames,
            dim,
            data,
        };
        repr.validate()?;
        Ok(repr)
    }

    /// Checks shape and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_frames == 0 || self.dim == 0 {
            return Err(Error::InvalidRepr(format!(
                "{}: zero-sized shape {}x{}x{}",
                self.utterance_id, self.num_layers, self.num_frames, self.dim
            )));
        }
        let expected = self
            .num_layers
            .checked_mul(self.num_frames)
            .and_then(|n| n.checked_mul(self.dim))
            .ok_or_else(|| Error::InvalidRepr("shape overflows".into()))?;
        if self.data.len() != expected {
            return Err(Error::InvalidRepr(format!(
                "{}: expected {} values, got {}",
                self.utterance_id,
                expected,
                self.data.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "representation {}",
                self.utterance_id
            )));
        }
        Ok(())
    }

    pub fn utterance_id(&self) -> &str {
        &self.utterance_id
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// One layer as a `T x D` slice.
    pub fn layer(&self, layer: usize) -> &[f32] {
        let stride = self.num_frames * self.dim;
        &self.data[layer * stride..(layer + 1) * stride]
    }

    /// One layer widened to f64.
    pub fn layer_matrix(&self, layer: usize) -> Matrix {
        let values = self.layer(layer).iter().map(|&v| f64::from(v)).collect();
        Matrix::from_vec(self.num_frames, self.dim, values).expect("layer shape is consistent")
    }

    pub fn encoded_len(&self) -> usize {
        4 + 4 + 4 + self.utterance_id.len() + 12 + 4 * self.data.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&LRP_MAGIC);
        out.extend_from_slice(&LRP_VERSION.to_le_bytes());
        out.extend_from_slice(&to_u32(self.utterance_id.len())?.to_le_bytes());
        out.extend_from_slice(self.utterance_id.as_bytes());
        for n in [self.num_layers, self.num_frames, self.dim] {
            out.extend_from_slice(&to_u32(n)?.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let magic = cur.array::<4>()?;
        if magic != LRP_MAGIC {
            return Err(Error::BadMagic {
                expected: LRP_MAGIC,
                found: magic,
            });
        }
        let version = cur.u32()?;
        if version != LRP_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let id_len = cur.u32()? as usize;
        let id = String::from_utf8(cur.take(id_len)?.to_vec())
            .map_err(|e| Error::InvalidRepr(format!("utterance id is not UTF-8: {e}")))?;
        let num_layers = cur.u32()? as usize;
        let num_frames = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let count = num_layers
            .checked_mul(num_frames)
            .and_then(|n| n.checked_mul(dim))
            .ok_or_else(|| Error::InvalidRepr("shape overflows".into()))?;
        let payload = cur.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::InvalidRepr("shape overflows".into()))?,
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        cur.finish()?;
        Self::new(id, num_layers, num_frames, dim, data)
    }
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidRepr(format!("{n} does not fit in u32")))
}

/// Writes `repr` to `path`. Nothing is written when the repr is invalid.
pub fn write_lrp(path: impl AsRef<Path>, repr: &LayerwiseRepr) -> Result<()> {
    let path = path.as_ref();
    let bytes = repr.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_lrp(path: impl AsRef<Path>) -> Result<LayerwiseRepr> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    LayerwiseRepr::from_bytes(&bytes)
}

/// Bounds-checked little-endian reader shared by the binary formats.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(Error::TrailingBytes(n)),
        }
    }
}
