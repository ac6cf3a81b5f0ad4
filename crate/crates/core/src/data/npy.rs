//! Reader and writer for a subset of the NPY v1.0 container: little-endian
//! `u1`, `f4` and `f8` payloads in C order.
//!
//! Layout: the magic `\x93NUMPY`, version bytes `1 0`, a little-endian `u16`
//! header length, then an ASCII Python dict literal with exactly the keys
//! `descr`, `fortran_order` and `shape`, space padded so that the payload
//! starts on a 64-byte boundary and terminated by `\n`.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
const PREAMBLE: usize = 10;
const ALIGN: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum NpyError {
    #[error("bad magic bytes at offset {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported format version {major}.{minor} at offset {offset}")]
    UnsupportedVersion { major: u8, minor: u8, offset: usize },
    #[error("malformed header at offset {offset}: {reason}")]
    BadHeader { offset: usize, reason: String },
    #[error("unsupported dtype `{descr}` at offset {offset}")]
    UnsupportedDtype { descr: String, offset: usize },
    #[error("fortran-ordered arrays are not supported (header at offset {offset})")]
    FortranOrder { offset: usize },
    #[error("payload truncated at offset {offset}: expected {expected} bytes, found {found}")]
    Truncated { offset: usize, expected: usize, found: usize },
    #[error("{extra} unexpected trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("value {value} at index {index} is not representable as {dtype}")]
    Unrepresentable { value: f64, index: usize, dtype: Dtype },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    U1,
    F4,
    F8,
}

impl Dtype {
    pub fn itemsize(self) -> usize {
        match self {
            Dtype::U1 => 1,
            Dtype::F4 => 4,
            Dtype::F8 => 8,
        }
    }

    fn descr(self) -> &'static str {
        match self {
            Dtype::U1 => "|u1",
            Dtype::F4 => "<f4",
            Dtype::F8 => "<f8",
        }
    }

    fn from_descr(s: &str) -> Option<Self> {
        match s {
            "|u1" | "<u1" => Some(Dtype::U1),
            "<f4" => Some(Dtype::F4),
            "<f8" => Some(Dtype::F8),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "u1" => Some(Dtype::U1),
            "f4" => Some(Dtype::F4),
            "f8" => Some(Dtype::F8),
            other => Self::from_descr(other),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::U1 => "u1",
            Dtype::F4 => "f4",
            Dtype::F8 => "f8",
        })
    }
}

/// Parsed header dictionary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Offset of the first payload byte.
    pub data_offset: usize,
}

#[derive(Debug, PartialEq)]
enum Value {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

struct DictParser<'a> {
    src: &'a [u8],
    pos: usize,
    base: usize,
}

impl DictParser<'_> {
    fn err(&self, reason: impl Into<String>) -> NpyError {
        NpyError::BadHeader {
            offset: self.base + self.pos,
            reason: reason.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && matches!(self.src[self.pos], b' ' | b'\t' | b'\n' | b'\r') {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), NpyError> {
        match self.peek() {
            Some(x) if x == c => {
                self.pos += 1;
                Ok(())
            }
            Some(x) => Err(self.err(format!("expected `{}`, found `{}`", c as char, x.escape_ascii()))),
            None => Err(self.err(format!("expected `{}`, found end of header", c as char))),
        }
    }

    fn string(&mut self) -> Result<String, NpyError> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(self.err("expected a quoted string")),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos >= self.src.len() {
            return Err(self.err("unterminated string"));
        }
        let s = std::str::from_utf8(&self.src[start..self.pos])
            .map_err(|_| self.err("string is not valid UTF-8"))?
            .to_string();
        self.pos += 1;
        Ok(s)
    }

    fn integer(&mut self) -> Result<usize, NpyError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected a non-negative integer"));
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("integer out of range"))
    }

    fn value(&mut self) -> Result<Value, NpyError> {
        match self.peek() {
            Some(b'\'' | b'"') => self.string().map(Value::Str),
            Some(b'(') => {
                self.pos += 1;
                let mut dims = Vec::new();
                loop {
                    if self.peek() == Some(b')') {
                        self.pos += 1;
                        break;
                    }
                    dims.push(self.integer()?);
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b')') => {}
                        _ => return Err(self.err("expected `,` or `)` in shape tuple")),
                    }
                }
                Ok(Value::Tuple(dims))
            }
            Some(_) => {
                for (word, v) in [("True", true), ("False", false)] {
                    if self.src[self.pos..].starts_with(word.as_bytes()) {
                        self.pos += word.len();
                        return Ok(Value::Bool(v));
                    }
                }
                Err(self.err("expected a string, tuple or boolean"))
            }
            None => Err(self.err("unexpected end of header")),
        }
    }

    fn dict(&mut self) -> Result<Vec<(String, Value, usize)>, NpyError> {
        self.expect(b'{')?;
        let mut out = Vec::new();
        loop {
            if self.peek() == Some(b'}') {
                self.pos += 1;
                break;
            }
            let at = self.base + self.pos;
            let key = self.string()?;
            self.expect(b':')?;
            let v = self.value()?;
            out.push((key, v, at));
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'}') => {}
                _ => return Err(self.err("expected `,` or `}` after dict entry")),
            }
        }
        if self.peek().is_some() {
            return Err(self.err("unexpected content after header dict"));
        }
        Ok(out)
    }
}

/// Parses the preamble and header dictionary of an NPY buffer.
pub fn parse_header(bytes: &[u8]) -> Result<Header, NpyError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(NpyError::BadMagic { offset: 0 });
    }
    if bytes.len() < PREAMBLE {
        return Err(NpyError::Truncated {
            offset: bytes.len(),
            expected: PREAMBLE,
            found: bytes.len(),
        });
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(NpyError::UnsupportedVersion { major, minor, offset: 6 });
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_offset = PREAMBLE + header_len;
    if bytes.len() < data_offset {
        return Err(NpyError::Truncated {
            offset: bytes.len(),
            expected: header_len,
            found: bytes.len() - PREAMBLE,
        });
    }
    let mut parser = DictParser {
        src: &bytes[PREAMBLE..data_offset],
        pos: 0,
        base: PREAMBLE,
    };
    let entries = parser.dict()?;

    let (mut dtype, mut fortran, mut shape) = (None, None, None);
    for (key, value, at) in entries {
        let bad = |reason: &str| NpyError::BadHeader {
            offset: at,
            reason: reason.to_string(),
        };
        match (key.as_str(), value) {
            ("descr", Value::Str(d)) if dtype.is_none() => {
                dtype = Some(Dtype::from_descr(&d).ok_or(NpyError::UnsupportedDtype { descr: d, offset: at })?);
            }
            ("fortran_order", Value::Bool(b)) if fortran.is_none() => {
                if b {
                    return Err(NpyError::FortranOrder { offset: at });
                }
                fortran = Some(b);
            }
            ("shape", Value::Tuple(dims)) if shape.is_none() => shape = Some(dims),
            ("descr" | "fortran_order" | "shape", _) => return Err(bad("duplicate key or wrongly typed value")),
            (other, _) => return Err(bad(&format!("unexpected key `{other}`"))),
        }
    }
    let missing = |k: &str| NpyError::BadHeader {
        offset: PREAMBLE,
        reason: format!("missing key `{k}`"),
    };
    let dtype = dtype.ok_or_else(|| missing("descr"))?;
    fortran.ok_or_else(|| missing("fortran_order"))?;
    let shape = shape.ok_or_else(|| missing("shape"))?;
    if shape.contains(&0) {
        return Err(NpyError::BadHeader {
            offset: PREAMBLE,
            reason: "zero-length axes are not supported".into(),
        });
    }
    Ok(Header { dtype, shape, data_offset })
}

/// Decodes an in-memory NPY buffer into an `f64` tensor.
pub fn parse_npy(bytes: &[u8]) -> Result<Tensor, NpyError> {
    let header = parse_header(bytes)?;
    let numel = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(header.dtype.itemsize()).map(|b| (n, b)));
    let Some((numel, nbytes)) = numel else {
        return Err(NpyError::BadHeader {
            offset: PREAMBLE,
            reason: "shape overflows".into(),
        });
    };
    let payload = &bytes[header.data_offset..];
    if payload.len() < nbytes {
        return Err(NpyError::Truncated {
            offset: bytes.len(),
            expected: nbytes,
            found: payload.len(),
        });
    }
    if payload.len() > nbytes {
        return Err(NpyError::TrailingBytes {
            offset: header.data_offset + nbytes,
            extra: payload.len() - nbytes,
        });
    }
    let values: Vec<f64> = match header.dtype {
        Dtype::U1 => payload.iter().map(|&b| f64::from(b)).collect(),
        Dtype::F4 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        Dtype::F8 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    debug_assert_eq!(values.len(), numel);
    let shape = if header.shape.is_empty() { vec![1] } else { header.shape };
    Tensor::new(shape, values).map_err(|e| NpyError::BadHeader {
        offset: PREAMBLE,
        reason: e.to_string(),
    })
}

/// Encodes a tensor; `u1` requires integral values in `[0, 255]`.
pub fn encode_npy(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>, NpyError> {
    let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    let shape = if dims.len() == 1 { format!("({},)", dims[0]) } else { format!("({})", dims.join(", ")) };
    let mut dict = format!("{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}", dtype.descr(), shape);
    let unpadded = PREAMBLE + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    dict.extend(std::iter::repeat(' ').take(pad));
    dict.push('\n');
    let header_len = u16::try_from(dict.len()).map_err(|_| NpyError::BadHeader {
        offset: PREAMBLE,
        reason: "header longer than 65535 bytes".into(),
    })?;

    let mut out = Vec::with_capacity(PREAMBLE + dict.len() + t.numel() * dtype.itemsize());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    for (index, &v) in t.data().iter().enumerate() {
        match dtype {
            Dtype::U1 => {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(NpyError::Unrepresentable { value: v, index, dtype });
                }
                out.push(v as u8);
            }
            Dtype::F4 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F8 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn read_npy(path: impl AsRef<Path>) -> Result<Tensor, NpyError> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| NpyError::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_npy(&bytes)
}

pub fn write_npy(path: impl AsRef<Path>, t: &Tensor, dtype: Dtype) -> Result<(), NpyError> {
    let bytes = encode_npy(t, dtype)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| NpyError::Io(format!("{}: {e}", path.as_ref().display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f8_round_trip_is_bit_exact() {
        let t = Tensor::matrix(2, 3, vec![0.1, -2.5, 1e-300, f64::MAX, -0.0, 3.0]).unwrap();
        let back = parse_npy(&encode_npy(&t, Dtype::F8).unwrap()).unwrap();
        assert_eq!(back.shape(), t.shape());
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn header_is_aligned_and_newline_terminated() {
        let t = Tensor::zeros(&[3, 4, 5]);
        let bytes = encode_npy(&t, Dtype::F4).unwrap();
        let header = parse_header(&bytes).unwrap();
        assert_eq!(header.data_offset % 64, 0);
        assert_eq!(bytes[header.data_offset - 1], b'\n');
        assert_eq!(bytes.len() - header.data_offset, 60 * 4);
    }

    #[test]
    fn u1_widens() {
        let t = Tensor::vector(vec![0.0, 255.0]).unwrap();
        let bytes = encode_npy(&t, Dtype::U1).unwrap();
        assert_eq!(parse_npy(&bytes).unwrap().data(), &[0.0, 255.0]);
        assert!(matches!(
            encode_npy(&Tensor::vector(vec![1.5]).unwrap(), Dtype::U1),
            Err(NpyError::Unrepresentable { index: 0, .. })
        ));
    }

    fn replace_bytes(src: &[u8], from: &[u8], to: &[u8]) -> Vec<u8> {
        let at = src.windows(from.len()).position(|w| w == from).expect("pattern present");
        let mut out = src.to_vec();
        out[at..at + to.len()].copy_from_slice(to);
        out
    }

    #[test]
    fn distinct_rejections() {
        let good = encode_npy(&Tensor::zeros(&[2, 2]), Dtype::F8).unwrap();

        let mut bad = good.clone();
        bad[1] = b'X';
        assert_eq!(parse_npy(&bad), Err(NpyError::BadMagic { offset: 0 }));

        let fortran = replace_bytes(&good, b"False", b"True ");
        assert!(matches!(parse_npy(&fortran), Err(NpyError::FortranOrder { .. })));

        let big_endian = replace_bytes(&good, b"<f8", b">f8");
        assert!(matches!(parse_npy(&big_endian), Err(NpyError::UnsupportedDtype { .. })));

        assert!(matches!(parse_npy(&good[..good.len() - 3]), Err(NpyError::Truncated { .. })));

        let mut v2 = good.clone();
        v2[6] = 2;
        assert!(matches!(parse_npy(&v2), Err(NpyError::UnsupportedVersion { major: 2, .. })));
    }

    #[test]
    fn one_dimensional_shape_literal() {
        let bytes = encode_npy(&Tensor::vector(vec![1.0, 2.0]).unwrap(), Dtype::F8).unwrap();
        assert!(String::from_utf8_lossy(&bytes).contains("'shape': (2,)"));
    }

    #[test]
    fn scalar_shape_reads_as_single_value() {
        let bytes = encode_npy(&Tensor::scalar(4.0), Dtype::F8).unwrap();
        let bytes = replace_bytes(&bytes, b"(1,)", b"()  ");
        let t = parse_npy(&bytes).unwrap();
        assert_eq!(t.shape(), &[1]);
        assert_eq!(t.item(), 4.0);
    }
}
