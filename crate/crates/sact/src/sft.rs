//! `SFT1` tensor files: the 8-byte magic `SACTFT1\0`, one JSON header line
//! `{"shape":[...],"dtype":"f64"}`, then the values as little-endian f64.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use sact_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{io, IoError, Result};

pub const MAGIC: &[u8; 8] = b"SACTFT1\0";
const MAX_HEADER: u64 = 1 << 16;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
}

pub fn write_tensor(mut w: impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    let header = Header {
        shape: t.shape().to_vec(),
        dtype: "f64".into(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()
}

/// Why a stream failed to parse, without a path attached.
#[derive(Debug)]
pub enum ParseError {
    Header(String),
    Data(String),
    Io(std::io::Error),
}

pub fn read_tensor(mut r: impl BufRead) -> std::result::Result<Tensor, ParseError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| ParseError::Header("file shorter than the magic".into()))?;
    if &magic != MAGIC {
        return Err(ParseError::Header(format!("bad magic {magic:?}")));
    }
    let mut line = Vec::new();
    (&mut r)
        .take(MAX_HEADER)
        .read_until(b'\n', &mut line)
        .map_err(ParseError::Io)?;
    if line.pop() != Some(b'\n') {
        return Err(ParseError::Header("header line is not terminated".into()));
    }
    let header: Header =
        serde_json::from_slice(&line).map_err(|e| ParseError::Header(e.to_string()))?;
    if header.dtype != "f64" {
        return Err(ParseError::Header(format!("unsupported dtype {:?}", header.dtype)));
    }
    let n = header
        .shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|n| n.checked_mul(8).is_some())
        .ok_or_else(|| ParseError::Header(format!("shape {:?} overflows", header.shape)))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(ParseError::Io)?;
    if bytes.len() != n * 8 {
        return Err(ParseError::Data(format!(
            "shape {:?} needs {} bytes, found {}",
            header.shape,
            n * 8,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(header.shape, data).map_err(|e| ParseError::Data(e.to_string()))
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    let f = File::create(path).map_err(io(path))?;
    write_tensor(BufWriter::new(f), t).map_err(io(path))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(io(path))?;
    read_tensor(BufReader::new(f)).map_err(|e| match e {
        ParseError::Header(reason) => IoError::MalformedHeader {
            path: path.into(),
            reason,
        },
        ParseError::Data(reason) => IoError::MalformedData {
            path: path.into(),
            reason,
        },
        ParseError::Io(source) => IoError::Io {
            path: path.into(),
            source,
        },
    })
}
