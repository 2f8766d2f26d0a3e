//! Line-oriented parsing helpers for the versioned text model formats.
//!
//! All text formats in the toolkit are whitespace-separated lines; parse
//! errors report the byte offset of the offending line.

use crate::error::{Error, Result};

pub struct LineParser<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> LineParser<'a> {
    pub fn new(text: &'a str) -> Self {
        Self { text, pos: 0 }
    }

    /// Byte offset of the next unread line.
    pub fn offset(&self) -> usize {
        self.pos
    }

    /// Next non-empty line, trimmed. `None` at end of input.
    pub fn next_line(&mut self) -> Option<(usize, &'a str)> {
        while self.pos < self.text.len() {
            let start = self.pos;
            let rest = &self.text[start..];
            let end = rest.find('\n').map(|i| start + i).unwrap_or(self.text.len());
            self.pos = end + 1;
            let line = self.text[start..end].trim();
            if !line.is_empty() {
                return Some((start, line));
            }
        }
        None
    }

    pub fn expect_line(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let at = self.offset();
        self.next_line()
            .ok_or_else(|| Error::parse(at, format!("unexpected end of file, expected {what}")))
    }

    /// Next line split into whitespace-separated fields, checking the first
    /// field equals `keyword`.
    pub fn expect_fields(&mut self, keyword: &str) -> Result<(usize, Vec<&'a str>)> {
        let (at, line) = self.expect_line(keyword)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first() != Some(&keyword) {
            return Err(Error::parse(
                at,
                format!("expected `{keyword}`, found `{}`", fields.first().unwrap_or(&"")),
            ));
        }
        Ok((at, fields))
    }
}

pub fn parse_usize(at: usize, s: &str, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::parse(at, format!("invalid {what} `{s}`")))
}

pub fn parse_f64(at: usize, s: &str, what: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::parse(at, format!("invalid {what} `{s}`")))?;
    if !v.is_finite() {
        return Err(Error::parse(at, format!("non-finite {what} `{s}`")));
    }
    Ok(v)
}

pub fn parse_f64_row(at: usize, line: &str, expected: usize, what: &str) -> Result<Vec<f64>> {
    let row: Vec<f64> = line
        .split_whitespace()
        .map(|s| parse_f64(at, s, what))
        .collect::<Result<_>>()?;
    if row.len() != expected {
        return Err(Error::parse(
            at,
            format!("expected {expected} {what} values, found {}", row.len()),
        ));
    }
    Ok(row)
}

/// Format a float row with shortest round-trip representation.
pub fn fmt_f64_row(row: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&format!("{v}"));
    }
    s
}

/// Cursor over binary payloads with offset-carrying errors.
pub struct ByteParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteParser<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(
                self.pos,
                format!("truncated file: expected {n} more bytes for {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn read_u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn read_u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn read_f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        let v = f64::from_le_bytes(b.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::parse(self.pos - 8, format!("non-finite {what}")));
        }
        Ok(v)
    }

    pub fn read_f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.read_f64(what)).collect()
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
