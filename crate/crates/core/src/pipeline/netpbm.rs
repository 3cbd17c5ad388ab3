//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::quantize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Netpbm {
    Gray,
    Rgb,
}

impl Netpbm {
    fn magic(self) -> &'static str {
        match self {
            Netpbm::Gray => "P5",
            Netpbm::Rgb => "P6",
        }
    }

    fn channels(self) -> usize {
        match self {
            Netpbm::Gray => 1,
            Netpbm::Rgb => 3,
        }
    }
}

struct Header {
    kind: Netpbm,
    width: usize,
    height: usize,
    payload_start: usize,
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

fn parse_header(bytes: &[u8], label: &str) -> Result<Header> {
    let bad = |reason: &str| Error::BadHeader {
        path: label.to_string(),
        reason: reason.to_string(),
    };
    let magic = bytes.get(..2).unwrap_or(bytes);
    let kind = match magic {
        b"P5" => Netpbm::Gray,
        b"P6" => Netpbm::Rgb,
        _ => {
            return Err(Error::UnsupportedMagic {
                path: label.to_string(),
                magic: String::from_utf8_lossy(magic).into_owned(),
            })
        }
    };
    let mut pos = 2;
    let mut number = |what: &str| -> Result<u64> {
        let tok = token(bytes, &mut pos).ok_or_else(|| bad(&format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                bad(&format!(
                    "{what} `{}` is not a number",
                    String::from_utf8_lossy(tok)
                ))
            })
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval {
            path: label.to_string(),
            maxval: maxval.min(u32::MAX as u64) as u32,
        });
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("no whitespace after maxval")),
    }
    Ok(Header {
        kind,
        width: width as usize,
        height: height as usize,
        payload_start: pos,
    })
}

/// Decodes a P5 or P6 buffer; `label` names the source in errors.
pub fn decode(bytes: &[u8], label: &str) -> Result<Image> {
    let h = parse_header(bytes, label)?;
    let expected = h.width * h.height * h.kind.channels();
    let payload = &bytes[h.payload_start..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            path: label.to_string(),
            expected,
            found: payload.len(),
        });
    }
    let data = payload[..expected]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Image::new(h.width, h.height, h.kind.channels(), data)
}

fn decode_kind(bytes: &[u8], label: &str, want: Netpbm) -> Result<Image> {
    if bytes.get(..2) != Some(want.magic().as_bytes()) {
        return Err(Error::UnsupportedMagic {
            path: label.to_string(),
            magic: String::from_utf8_lossy(bytes.get(..2).unwrap_or(bytes)).into_owned(),
        });
    }
    decode(bytes, label)
}

/// Canonical encoding: `P5`/`P6`, one header line per field, round-half-up
/// 8-bit samples.
pub fn encode(img: &Image) -> Vec<u8> {
    let kind = if img.is_gray() {
        Netpbm::Gray
    } else {
        Netpbm::Rgb
    };
    let mut out = format!("{}\n{} {}\n255\n", kind.magic(), img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v) as u8));
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

pub fn load_pgm(path: &Path) -> Result<Image> {
    decode_kind(&read(path)?, &path.display().to_string(), Netpbm::Gray)
}

pub fn load_ppm(path: &Path) -> Result<Image> {
    decode_kind(&read(path)?, &path.display().to_string(), Netpbm::Rgb)
}

/// Loads either flavour.
pub fn load_netpbm(path: &Path) -> Result<Image> {
    decode(&read(path)?, &path.display().to_string())
}

pub fn save_pgm(path: &Path, img: &Image) -> Result<()> {
    img.require_gray()?;
    Ok(fs::write(path, encode(img))?)
}

pub fn save_ppm(path: &Path, img: &Image) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::ChannelCount {
            expected: 3,
            found: img.channels(),
        });
    }
    Ok(fs::write(path, encode(img))?)
}

/// Writes PGM or PPM depending on the channel count.
pub fn save_netpbm(path: &Path, img: &Image) -> Result<()> {
    Ok(fs::write(path, encode(img))?)
}
