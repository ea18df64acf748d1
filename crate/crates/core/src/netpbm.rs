//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{LdagError, Result};
use crate::image::{Image, Mask};

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(LdagError::format(0, "file too short for a netpbm magic number"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments between fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(LdagError::format(pos as u64, "expected an unsigned header integer"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| LdagError::format(start as u64, "header integer out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(LdagError::format(pos as u64, "missing whitespace after maxval")),
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        data_offset: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8]> {
    if header.maxval != 255 {
        return Err(LdagError::format(
            header.data_offset as u64,
            format!("unsupported maxval {} (only 255)", header.maxval),
        ));
    }
    if header.width == 0 || header.height == 0 {
        return Err(LdagError::format(2, "zero image extent"));
    }
    let need = header.width * header.height * channels;
    let have = bytes.len() - header.data_offset;
    if have < need {
        return Err(LdagError::format(
            bytes.len() as u64,
            format!("truncated pixel data: expected {need} bytes, found {have}"),
        ));
    }
    Ok(&bytes[header.data_offset..header.data_offset + need])
}

/// Decode a P5 file into raw 8-bit samples.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let header = parse_header(bytes)?;
    if &header.magic != b"P5" {
        return Err(LdagError::format(0, "not a binary PGM (P5)"));
    }
    let data = payload(bytes, &header, 1)?.to_vec();
    Ok((header.width, header.height, data))
}

pub fn encode_pgm(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let header = parse_header(bytes)?;
    if &header.magic != b"P6" {
        return Err(LdagError::format(0, "not a binary PPM (P6)"));
    }
    let data = payload(bytes, &header, 3)?.to_vec();
    Image::new(header.width, header.height, data)
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.data());
    out
}

/// Masks are stored as 0 (background) and 255 (foreground); anything else is rejected.
pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let (w, h, data) = decode_pgm(bytes)?;
    let header_len = bytes.len() - data.len();
    let mut bits = Vec::with_capacity(data.len());
    for (i, &v) in data.iter().enumerate() {
        match v {
            0 => bits.push(0),
            255 => bits.push(1),
            other => {
                return Err(LdagError::format(
                    (header_len + i) as u64,
                    format!("mask sample {other} is neither 0 nor 255"),
                ))
            }
        }
    }
    Mask::new(w, h, bits)
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let data: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    encode_pgm(mask.width(), mask.height(), &data)
}

/// Quantize a `[0, 1]` map to 8 bits as `round(255 * p)`.
pub fn encode_unit_map(width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    let data: Vec<u8> = values
        .iter()
        .map(|&p| (255.0 * p.clamp(0.0, 1.0)).round() as u8)
        .collect();
    encode_pgm(width, height, &data)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| LdagError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| LdagError::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    decode_mask(&read(path.as_ref())?)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    write(path.as_ref(), &encode_mask(mask))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    decode_ppm(&read(path.as_ref())?)
}

pub fn write_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    write(path.as_ref(), &encode_ppm(image))
}

pub fn write_unit_map(path: impl AsRef<Path>, width: usize, height: usize, values: &[f32]) -> Result<()> {
    write(path.as_ref(), &encode_unit_map(width, height, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_round_trip() {
        let mask = Mask::new(3, 2, vec![1, 0, 0, 1, 1, 0]).unwrap();
        assert_eq!(decode_mask(&encode_mask(&mask)).unwrap(), mask);
    }

    #[test]
    fn image_round_trip() {
        let data: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7) as u8).collect();
        let image = Image::new(4, 3, data).unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&image)).unwrap(), image);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        assert_eq!(decode_mask(&bytes).unwrap().data(), &[0, 1]);
    }

    #[test]
    fn mask_with_grey_sample_is_rejected_at_its_offset() {
        let bytes = encode_pgm(2, 1, &[0, 128]);
        match decode_mask(&bytes) {
            Err(LdagError::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 1),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn maxval_other_than_255_is_rejected() {
        let mut bytes = b"P5\n1 1\n15\n".to_vec();
        bytes.push(3);
        assert!(matches!(decode_pgm(&bytes), Err(LdagError::Format { .. })));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode_pgm(4, 4, &[0; 16]);
        assert!(matches!(
            decode_pgm(&bytes[..bytes.len() - 3]),
            Err(LdagError::Format { .. })
        ));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let image = Image::filled(1, 1, [1, 2, 3]);
        assert!(decode_pgm(&encode_ppm(&image)).is_err());
        assert!(decode_ppm(b"P3\n1 1\n255\n1 2 3").is_err());
    }

    #[test]
    fn unit_map_quantization() {
        let bytes = encode_unit_map(3, 1, &[0.0, 0.5, 1.0]);
        let (_, _, data) = decode_pgm(&bytes).unwrap();
        assert_eq!(data, vec![0, 128, 255]);
    }
}
