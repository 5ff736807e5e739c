//! `SVS1` checkpoint container.
//!
//! ```text
//! "SVS1" | version u32 = 1
//! config: mode u32 (0 regression, 1 classification)
//!         repr_source u32 (0 weighted sum, 1 last layer)
//!         use_adapter u32 (0/1)
//!         L, D, H_a, H_1, K as u32
//! tensors, f64 LE, declaration order:
//!         layer_logits [L]
//!         adapter weight [H_a x D], adapter bias [H_a]   (only with adapter)
//!         hidden weight [H_1 x D'], hidden bias [H_1]
//!         output weight [K x H_1], output bias [K]
//! ```
//!
//! All integers are little-endian. Weights are stored output-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig, ModelDims, ModelParams, ReprSource};
use crate::repr::Cursor;

pub const SVS_MAGIC: [u8; 4] = *b"SVS1";
pub const SVS_VERSION: u32 = 1;
const HEADER_LEN: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        params.check_compatible(&config)?;
        if !params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_compatible(&self.config)?;
        if !self.params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        let cfg = &self.config;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.params.num_params());
        out.extend_from_slice(&SVS_MAGIC);
        let header = [
            SVS_VERSION,
            match cfg.mode {
                Mode::Regression => 0,
                Mode::Classification => 1,
            },
            match cfg.repr_source {
                ReprSource::WeightedSum => 0,
                ReprSource::LastLayer => 1,
            },
            u32::from(cfg.use_adapter),
        ];
        for v in header {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let d = &cfg.dims;
        for n in [
            d.num_layers,
            d.dim,
            d.adapter_dim,
            d.hidden_dim,
            d.num_outputs,
        ] {
            let n = u32::try_from(n)
                .map_err(|_| Error::InvalidConfig(format!("dimension {n} exceeds u32")))?;
            out.extend_from_slice(&n.to_le_bytes());
        }
        for t in self.params.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let magic = cur.array::<4>()?;
        if magic != SVS_MAGIC {
            return Err(Error::BadMagic {
                expected: SVS_MAGIC,
                found: magic,
            });
        }
        let version = cur.u32()?;
        if version != SVS_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mode = match cur.u32()? {
            0 => Mode::Regression,
            1 => Mode::Classification,
            v => return Err(Error::InvalidConfig(format!("unknown mode tag {v}"))),
        };
        let repr_source = match cur.u32()? {
            0 => ReprSource::WeightedSum,
            1 => ReprSource::LastLayer,
            v => return Err(Error::InvalidConfig(format!("unknown repr source tag {v}"))),
        };
        let use_adapter = match cur.u32()? {
            0 => false,
            1 => true,
            v => return Err(Error::InvalidConfig(format!("bad adapter flag {v}"))),
        };
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = cur.u32()? as usize;
        }
        let config = ModelConfig {
            mode,
            repr_source,
            use_adapter,
            dims: ModelDims {
                num_layers: dims[0],
                dim: dims[1],
                adapter_dim: dims[2],
                hidden_dim: dims[3],
                num_outputs: dims[4],
            },
        };
        config.validate()?;
        let mut params = ModelParams::zeros(&config);
        let count = params.num_params();
        // bounds check before reading element by element
        let needed = count
            .checked_mul(8)
            .ok_or_else(|| Error::InvalidConfig("parameter count overflows".into()))?;
        let remaining = bytes.len() - HEADER_LEN;
        if needed > remaining {
            return Err(Error::Truncated {
                needed,
                available: remaining,
            });
        }
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v = cur.f64()?;
            }
        }
        cur.finish()?;
        Checkpoint::new(config, params)
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::new(Mode::Classification, ReprSource::WeightedSum, true, 3, 4)
            .with_widths(5, 6);
        let mut params = ModelParams::init(&cfg, 8);
        params.layer_logits = vec![0.5, -1.25, 3.0];
        Checkpoint::new(cfg, params).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SVS1");
        let words: Vec<u32> = bytes[4..40]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(words, [1, 1, 0, 1, 3, 4, 5, 6, 4]);
        assert_eq!(bytes.len(), 40 + 8 * sample().params.num_params());
        assert_eq!(&bytes[40..48], &0.5f64.to_le_bytes());
    }

    #[test]
    fn roundtrip_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::UnsupportedVersion(9))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..20]),
            Err(Error::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&long),
            Err(Error::TrailingBytes(1))
        ));
        let mut nan = bytes;
        nan[40..48].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&nan),
            Err(Error::NonFinite(_))
        ));
    }
}
