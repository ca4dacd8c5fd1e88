//! Minimal binary netpbm support: P6 color images and P5 gray images,
//! both with maxval 255. Parse failures carry the file name and the byte
//! offset where reading stopped.

use std::io::{Read, Write};

use crate::error::{Error, Result};

fn write_header(out: &mut impl Write, path: &str, magic: &str, w: usize, h: usize) -> Result<()> {
    out.write_all(format!("{magic}\n{w} {h}\n255\n").as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Writes an interleaved-RGB byte buffer as binary PPM.
pub fn write_ppm(out: &mut impl Write, path: &str, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), 3 * w * h);
    write_header(out, path, "P6", w, h)?;
    out.write_all(rgb).map_err(|e| Error::io(path, e))
}

/// Writes a gray byte buffer as binary PGM.
pub fn write_pgm(out: &mut impl Write, path: &str, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    assert_eq!(gray.len(), w * h);
    write_header(out, path, "P5", w, h)?;
    out.write_all(gray).map_err(|e| Error::io(path, e))
}

struct HeaderReader<'r, R: Read> {
    inner: &'r mut R,
    path: &'r str,
    offset: u64,
}

impl<R: Read> HeaderReader<'_, R> {
    fn byte(&mut self) -> Result<Option<u8>> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(None),
            Ok(_) => {
                self.offset += 1;
                Ok(Some(b[0]))
            }
            Err(e) => Err(Error::io(self.path, e)),
        }
    }

    /// Reads one whitespace-delimited token, skipping `#` comment lines.
    fn token(&mut self) -> Result<String> {
        let mut tok = String::new();
        loop {
            let Some(b) = self.byte()? else {
                if tok.is_empty() {
                    return Err(Error::parse(self.path, self.offset, "unexpected end of header"));
                }
                return Ok(tok);
            };
            if b == b'#' && tok.is_empty() {
                while let Some(c) = self.byte()? {
                    if c == b'\n' {
                        break;
                    }
                }
                continue;
            }
            if b.is_ascii_whitespace() {
                if tok.is_empty() {
                    continue;
                }
                return Ok(tok);
            }
            tok.push(b as char);
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        tok.parse().map_err(|_| {
            Error::parse(self.path, self.offset, format!("bad {what}: {tok:?}"))
        })
    }
}

fn read_netpbm(
    input: &mut impl Read,
    path: &str,
    magic: &str,
    samples_per_pixel: usize,
) -> Result<(usize, usize, Vec<u8>)> {
    let mut header = HeaderReader {
        inner: input,
        path,
        offset: 0,
    };
    let tok = header.token()?;
    if tok != magic {
        return Err(Error::parse(
            path,
            header.offset,
            format!("expected {magic}, found {tok:?}"),
        ));
    }
    let w = header.number("width")?;
    let h = header.number("height")?;
    let maxval = header.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(Error::parse(path, header.offset, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(Error::parse(
            path,
            header.offset,
            format!("unsupported maxval {maxval}"),
        ));
    }
    // The maxval token's trailing whitespace byte was already consumed.
    let mut offset = header.offset;
    let mut data = vec![0u8; samples_per_pixel * w * h];
    let mut filled = 0;
    while filled < data.len() {
        match input.read(&mut data[filled..]) {
            Ok(0) => {
                return Err(Error::parse(
                    path,
                    offset,
                    format!("payload truncated: {} of {} bytes", filled, data.len()),
                ));
            }
            Ok(n) => {
                filled += n;
                offset += n as u64;
            }
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    Ok((w, h, data))
}

/// Reads a binary PPM into `(width, height, interleaved RGB)`.
pub fn read_ppm(input: &mut impl Read, path: &str) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(input, path, "P6", 3)
}

/// Reads a binary PGM into `(width, height, gray)`.
pub fn read_pgm(input: &mut impl Read, path: &str) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(input, path, "P5", 1)
}
