//! Binary PGM (P5) frame dumps and bitmap loading.

use std::fs;
use std::path::Path;

use super::{EventFrame, Geometry};
use crate::error::{Error, Result};

/// 8-bit grayscale bitmap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub geometry: Geometry,
    pub pixels: Vec<u8>,
}

/// Maps -1 to 0, 0 to 128 and +1 to 255.
pub fn frame_to_pgm(frame: &EventFrame) -> Vec<u8> {
    let g = frame.geometry();
    let mut out = format!("P5\n{} {}\n255\n", g.width, g.height).into_bytes();
    out.extend(frame.cells().iter().map(|&c| match c {
        -1 => 0u8,
        0 => 128,
        _ => 255,
    }));
    out
}

pub fn write_frame_pgm(path: impl AsRef<Path>, frame: &EventFrame) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, frame_to_pgm(frame)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P5\n{} {}\n255\n", image.geometry.width, image.geometry.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}

fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let bad = |msg: &str| Error::InvalidValue(format!("PGM: {msg}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("only binary P5 is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if max == 0 || max > 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated raster"))?;
    Ok(GrayImage {
        geometry: Geometry::new(w, h),
        pixels: raster.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_dump_maps_polarities_to_gray_levels() {
        let mut f = EventFrame::zeros(Geometry::new(3, 1));
        f.set(0, 0, -1);
        f.set(2, 0, 1);
        let bytes = frame_to_pgm(&f);
        assert_eq!(&bytes[..11], b"P5\n3 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255]);
        let img = parse_pgm(&bytes).unwrap();
        assert_eq!(img.pixels, vec![0, 128, 255]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = parse_pgm(b"P5\n# made by hand\n2 2\n255\n\x01\x02\x03\x04").unwrap();
        assert_eq!(img.geometry, Geometry::new(2, 2));
        assert_eq!(img.pixels, vec![1, 2, 3, 4]);
        assert!(parse_pgm(b"P2\n2 2\n255\n").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x01").is_err());
    }
}
