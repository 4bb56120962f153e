//! Checkpoints of the three candidate models and their on-disk format.
//!
//! Binary layout, version 1, all integers and floats little-endian:
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 4     | magic `SSCK`                            |
//! | 2     | format version (`1`)                    |
//! | 1     | strategy: 0 = bmuf, 1 = ma, 2 = ema     |
//! | 8     | block index (u64)                       |
//! | 8     | epoch position (f64)                    |
//! | 8     | parameter count `n` (u64)               |
//! | 8·n   | parameters (f64)                        |

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::ParamVector;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSCK";
pub const CHECKPOINT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 8 + 8 + 8;

/// Which candidate model a checkpoint or evaluation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Bmuf,
    Ma,
    Ema,
}

impl Strategy {
    /// Fixed reporting order.
    pub const ALL: [Strategy; 3] = [Strategy::Bmuf, Strategy::Ma, Strategy::Ema];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Bmuf => "bmuf",
            Strategy::Ma => "ma",
            Strategy::Ema => "ema",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(code: u8) -> Option<Self> {
        Strategy::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub strategy: Strategy,
    /// Number of synchronizations completed when the checkpoint was taken.
    pub block: u64,
    /// Fractional epoch position, e.g. `1.25`.
    pub epoch: f64,
    pub params: ParamVector,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.strategy.code());
        out.extend_from_slice(&self.block.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in self.params.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Checkpoint(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let strategy = Strategy::from_code(bytes[6])
            .ok_or_else(|| Error::Checkpoint(format!("unknown strategy code {}", bytes[6])))?;
        let word = |at: usize| -> [u8; 8] { bytes[at..at + 8].try_into().expect("8-byte slice") };
        let block = u64::from_le_bytes(word(7));
        let epoch = f64::from_le_bytes(word(15));
        let len = u64::from_le_bytes(word(23)) as usize;
        let body = &bytes[HEADER_LEN..];
        if Some(body.len()) != len.checked_mul(8) {
            return Err(Error::Checkpoint(format!(
                "header declares {len} parameters but body holds {} bytes",
                body.len()
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Checkpoint {
            strategy,
            block,
            epoch,
            params: ParamVector::new(values),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Conventional file name, e.g. `ema-000128.ckpt`.
    pub fn file_name(&self) -> String {
        format!("{}-{:06}.ckpt", self.strategy, self.block)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use proptest::prelude::*;

    #[test]
    fn rejects_corrupt_input() {
        let ck = Checkpoint {
            strategy: Strategy::Ma,
            block: 3,
            epoch: 0.75,
            params: ParamVector::new(vec![1.0, 2.0]),
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[6] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn strategy_names() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("sgd".parse::<Strategy>().is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint {
            strategy: Strategy::Ema,
            block: 128,
            epoch: 2.25,
            params: ParamVector::new(vec![-0.0, 1e-310, 3.5]),
        };
        let path = dir.path().join(ck.file_name());
        assert!(path.ends_with("ema-000128.ckpt"));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert!(back.params.bit_eq(&ck.params));
        assert_eq!(back.block, 128);
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            code in 0u8..3,
            block in any::<u64>(),
            epoch in 0f64..100.,
            values in proptest::collection::vec(any::<f64>(), 0..64),
        ) {
            let ck = Checkpoint {
                strategy: Strategy::from_code(code).unwrap(),
                block,
                epoch,
                params: ParamVector::new(values),
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert!(back.params.bit_eq(&ck.params));
            prop_assert_eq!((back.strategy, back.block, back.epoch.to_bits()), (ck.strategy, ck.block, ck.epoch.to_bits()));
        }
    }
}
