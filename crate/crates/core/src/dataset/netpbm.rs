//! Binary netpbm codecs: P6 (RGB) and P5 (grayscale), 8-bit only.

use std::io::Write;

use crate::error::{Error, Result};

/// Decoded raster: `channels` interleaved bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        text.parse().map_err(|_| Error::Parse {
            offset: start,
            message: format!("{what} {text} is out of range"),
        })
    }
}

/// Parses a P5 or P6 file; `expect` is the magic, `b"P5"` or `b"P6"`.
pub fn decode(bytes: &[u8], expect: &[u8; 2]) -> Result<Raster> {
    let mut c = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != expect {
        return Err(c.err(format!(
            "expected magic {}",
            String::from_utf8_lossy(expect)
        )));
    }
    c.pos = 2;
    if !bytes
        .get(2)
        .is_some_and(|b| b.is_ascii_whitespace() || *b == b'#')
    {
        return Err(c.err("expected whitespace after magic"));
    }
    let width = c.number("width")?;
    let height = c.number("height")?;
    c.skip_space();
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: maxval_at,
            message: format!("maxval {maxval} unsupported (only 255)"),
        });
    }
    if width == 0 || height == 0 {
        return Err(c.err("zero-sized image"));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.err("expected single whitespace before raster")),
    }
    let channels = if expect == b"P6" { 3 } else { 1 };
    let need = width * height * channels;
    let data = &bytes[c.pos..];
    if data.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("raster truncated: {} of {need} bytes", data.len()),
        });
    }
    if data.len() > need {
        return Err(Error::Parse {
            offset: c.pos + need,
            message: format!("{} trailing bytes after raster", data.len() - need),
        });
    }
    Ok(Raster {
        width,
        height,
        channels,
        data: data.to_vec(),
    })
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 3 { "P6" } else { "P5" };
    let mut out = Vec::with_capacity(r.data.len() + 20);
    let _ = write!(out, "{magic}\n{} {}\n255\n", r.width, r.height);
    out.extend_from_slice(&r.data);
    out
}
