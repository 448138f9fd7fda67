//! Binary PPM/PGM input and label-map output.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::archive::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use crate::train::IGNORE_LABEL;

/// Class index to RGB colour.
pub type Palette = BTreeMap<u32, [u8; 3]>;

/// `H x W` class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelImage {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelImage {
    /// Every index must be below `classes` or equal to the ignore label.
    pub fn new(height: usize, width: usize, labels: Vec<u32>, classes: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "{} labels for a {height}x{width} image",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes && l != IGNORE_LABEL) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(LabelImage { height, width, labels })
    }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::UnsupportedFormat("not a PNM file".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::UnsupportedFormat("malformed PNM header".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::UnsupportedFormat("malformed PNM header".into()));
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        offset: pos + 1,
    })
}

fn raster<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    if h.maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "maxval {} (only 255 is supported)",
            h.maxval
        )));
    }
    let n = h.width * h.height * channels;
    bytes
        .get(h.offset..h.offset + n)
        .ok_or_else(|| Error::UnsupportedFormat(format!("raster shorter than {n} bytes")))
}

/// Decodes a binary P6 image to a normalized `1 x 3 x H x W` tensor.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(Error::UnsupportedFormat(format!(
            "{} (only binary P6 is supported)",
            String::from_utf8_lossy(&h.magic)
        )));
    }
    let px = raster(bytes, &h, 3)?;
    let plane = h.width * h.height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for (c, &v) in rgb.iter().enumerate() {
            data[c * plane + i] = ((v as f32 / 255.0) - 0.5) / 0.5;
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h.height, h.width), data)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Encodes 8-bit RGB pixels as P6.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// P6 through `palette` (unlisted classes become black), or P5 with the raw
/// indices when there is no palette.
pub fn encode_label_map(labels: &LabelImage, palette: Option<&Palette>) -> Result<Vec<u8>> {
    let (w, h) = (labels.width, labels.height);
    match palette {
        Some(p) => {
            let rgb: Vec<u8> = labels
                .labels
                .iter()
                .flat_map(|l| p.get(l).copied().unwrap_or([0, 0, 0]))
                .collect();
            Ok(encode_ppm(w, h, &rgb))
        }
        None => {
            let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
            for &l in &labels.labels {
                out.push(
                    u8::try_from(l)
                        .map_err(|_| Error::UnsupportedFormat(format!("label {l} does not fit an 8-bit map")))?,
                );
            }
            Ok(out)
        }
    }
}

pub fn write_label_map(labels: &LabelImage, palette: Option<&Palette>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_label_map(labels, palette)?)
}

/// Reads a P5 index map written without a palette.
pub fn decode_label_map(bytes: &[u8]) -> Result<LabelImage> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(Error::UnsupportedFormat("label maps are read from binary P5".into()));
    }
    let px = raster(bytes, &h, 1)?;
    Ok(LabelImage {
        height: h.height,
        width: h.width,
        labels: px.iter().map(|&v| v as u32).collect(),
    })
}

pub fn read_label_map(path: &Path) -> Result<LabelImage> {
    decode_label_map(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Parses lines of `class_index R G B`; blank lines and `#` comments are
/// skipped.
pub fn parse_palette(text: &str) -> Result<Palette> {
    let mut out = Palette::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let nums: Vec<u32> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::UnsupportedFormat(format!("palette line {}: `{line}`", n + 1)))?;
        match nums.as_slice() {
            &[idx, r, g, b] if r < 256 && g < 256 && b < 256 => {
                out.insert(idx, [r as u8, g as u8, b as u8]);
            }
            _ => {
                return Err(Error::UnsupportedFormat(format!(
                    "palette line {}: expected `index R G B`",
                    n + 1
                )))
            }
        }
    }
    Ok(out)
}

pub fn read_palette(path: &Path) -> Result<Palette> {
    parse_palette(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mid_gray_normalizes_near_zero() {
        let bytes = encode_ppm(2, 2, &[128; 12]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 2, 2));
        let want = ((128.0f32 / 255.0) - 0.5) / 0.5;
        assert!(t.data().iter().all(|&v| v == want));
        assert!((want - 0.0039).abs() < 1e-4);
    }

    #[test]
    fn channels_are_planar() {
        let t = decode_ppm(&encode_ppm(2, 1, &[255, 0, 0, 0, 0, 255])).unwrap();
        assert_eq!(t.data(), &[1.0, -1.0, -1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6 # made by hand\n1 # w\n1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 0]);
        assert_eq!(decode_ppm(&bytes).unwrap().data(), &[-1.0, 1.0, -1.0]);
    }

    #[test]
    fn ascii_and_short_inputs_are_rejected() {
        assert!(matches!(
            decode_ppm(b"P3\n1 1\n255\n0 0 0\n"),
            Err(Error::UnsupportedFormat(_))
        ));
        assert!(matches!(
            decode_ppm(b"P6\n2 2\n255\n\0\0"),
            Err(Error::UnsupportedFormat(_))
        ));
        assert!(matches!(
            decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(Error::UnsupportedFormat(_))
        ));
        assert!(matches!(decode_ppm(b"GIF89a"), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn missing_file_is_io_failure() {
        assert!(matches!(
            read_ppm(Path::new("/nonexistent/x.ppm")),
            Err(Error::IoFailure { .. })
        ));
    }

    #[test]
    fn label_map_round_trip_without_palette() {
        let labels = LabelImage::new(2, 3, vec![0, 1, 2, 255, 18, 3], 19).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.pgm");
        write_label_map(&labels, None, &path).unwrap();
        assert_eq!(read_label_map(&path).unwrap(), labels);
    }

    #[test]
    fn label_map_with_palette_is_rgb() {
        let labels = LabelImage::new(1, 2, vec![1, 0], 2).unwrap();
        let pal = parse_palette("# classes\n0 10 20 30\n1 255 0 0\n\n").unwrap();
        let bytes = encode_label_map(&labels, Some(&pal)).unwrap();
        assert_eq!(bytes, encode_ppm(2, 1, &[255, 0, 0, 10, 20, 30]));
    }

    #[test]
    fn label_invariant_is_enforced() {
        assert!(matches!(
            LabelImage::new(1, 1, vec![5], 4),
            Err(Error::LabelOutOfRange { label: 5, classes: 4 })
        ));
        assert!(LabelImage::new(1, 2, vec![0], 4).is_err());
    }

    #[test]
    fn palette_errors() {
        assert!(parse_palette("0 1 2").is_err());
        assert!(parse_palette("0 1 2 300").is_err());
        assert!(parse_palette("a b c d").is_err());
    }
}
