//! Model file format.
//!
//! ```text
//! "FLOA"                      4 bytes magic
//! version                     u16 LE (= 1)
//! arch text length            u32 LE
//! arch text                   UTF-8, canonical form
//! parameter count             u64 LE
//! parameters                  count x f32 LE
//! ```

use thiserror::Error;

use super::arch::ArchDescriptor;
use super::params::ModelParams;
use super::NnError;

pub const MAGIC: [u8; 4] = *b"FLOA";
pub const VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelFileError {
    #[error("bad magic {0:02x?}, expected \"FLOA\"")]
    BadMagic([u8; 4]),
    #[error("unsupported model file version {0} (expected {VERSION})")]
    UnsupportedVersion(u16),
    #[error("model file truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("architecture text is not valid UTF-8")]
    ArchEncoding,
    #[error("invalid architecture in model file: {0}")]
    InvalidArch(String),
    #[error("architecture implies {implied} parameters but file declares {declared}")]
    LengthMismatch { declared: u64, implied: usize },
    #[error("{0} trailing bytes after parameters")]
    TrailingBytes(usize),
}

pub fn serialize_params(params: &ModelParams) -> Vec<u8> {
    let arch = params.arch().to_string();
    let mut out = Vec::with_capacity(4 + 2 + 4 + arch.len() + 8 + params.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(arch.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelFileError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(ModelFileError::Truncated {
                needed: self.pos + n,
                available: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ModelFileError> {
        Ok(self.take(N)?.try_into().expect("take returns N bytes"))
    }
}

pub fn deserialize_params(bytes: &[u8]) -> Result<ModelParams, ModelFileError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.array::<4>()?;
    if magic != MAGIC {
        return Err(ModelFileError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(ModelFileError::UnsupportedVersion(version));
    }
    let arch_len = u32::from_le_bytes(r.array()?) as usize;
    let arch_text =
        std::str::from_utf8(r.take(arch_len)?).map_err(|_| ModelFileError::ArchEncoding)?;
    let arch: ArchDescriptor = arch_text
        .parse()
        .map_err(|e: NnError| ModelFileError::InvalidArch(e.to_string()))?;
    let implied = arch
        .param_count()
        .map_err(|e| ModelFileError::InvalidArch(e.to_string()))?;
    let declared = u64::from_le_bytes(r.array()?);
    if declared != implied as u64 {
        return Err(ModelFileError::LengthMismatch { declared, implied });
    }
    let raw = r.take(implied * 4)?;
    if r.pos != bytes.len() {
        return Err(ModelFileError::TrailingBytes(bytes.len() - r.pos));
    }
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    Ok(ModelParams::new(arch, values).expect("length checked above"))
}
