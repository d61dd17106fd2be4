//! Encoders and decoders for the on-disk formats: PFM depth maps, 8-bit PNG
//! images and plain-text pose lists.

use std::io::Cursor;

use image::{ImageEncoder, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::Pose6D;
use crate::tensor::Tensor;

/// Largest accepted image side, to bound allocations on hostile input.
pub const MAX_IMAGE_SIDE: usize = 1 << 14;

/// Encodes a `[1, 1, H, W]` tensor as a little-endian grayscale PFM.
/// Values are stored as `f32`; rows run bottom to top as the format requires.
pub fn encode_pfm(t: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = t.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::shape("encode_pfm", format!("need [1, 1, H, W], got {:?}", t.shape())));
    }
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(t.data()[y * w + x] as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits off one whitespace-delimited header token.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("PFM", "truncated header"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::format("PFM", "header is not ASCII"))
}

/// Decodes a grayscale (`Pf`) or color (`PF`) PFM into `[1, C, H, W]`,
/// rows top to bottom. Either byte order is accepted.
pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let channels = match header_token(bytes, &mut pos)? {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::format("PFM", format!("bad magic {other:?}"))),
    };
    let dim = |tok: &str| -> Result<usize> {
        let v: usize = tok.parse().map_err(|_| Error::format("PFM", format!("bad dimension {tok:?}")))?;
        if v == 0 || v > MAX_IMAGE_SIDE {
            return Err(Error::format("PFM", format!("dimension {v} out of range")));
        }
        Ok(v)
    };
    let w = dim(header_token(bytes, &mut pos)?)?;
    let h = dim(header_token(bytes, &mut pos)?)?;
    let scale: f64 = header_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::format("PFM", "bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format("PFM", format!("scale {scale} must be nonzero")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("PFM", "missing raster"));
    }
    pos += 1;
    let count = w * h * channels;
    let raster = &bytes[pos..];
    if raster.len() != count * 4 {
        return Err(Error::format("PFM", format!("raster has {} bytes, need {}", raster.len(), count * 4)));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; count];
    for (i, chunk) in raster.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, rest) = (i / (w * channels), i % (w * channels));
        let (x, ch) = (rest / channels, rest % channels);
        let y = h - 1 - row;
        data[(ch * h + y) * w + x] = v as f64;
    }
    Tensor::new([1, channels, h, w], data)
}

/// Encodes a `[1, 3, H, W]` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = t.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape("encode_png", format!("need [1, 3, H, W], got {:?}", t.shape())));
    }
    let plane = h * w;
    let mut raw = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for ch in 0..3 {
            raw.push((t.data()[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(
        &raw,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(out)
}

/// Decodes a PNG of any color type into a `[1, 3, H, W]` tensor in `[0, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let mut reader = image::ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Png);
    let mut limits = image::Limits::default();
    limits.max_image_width = Some(MAX_IMAGE_SIDE as u32);
    limits.max_image_height = Some(MAX_IMAGE_SIDE as u32);
    limits.max_alloc = Some(256 << 20);
    reader.limits(limits);
    let img: RgbImage = reader.decode()?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = px.0[ch] as f64 / 255.0;
        }
    }
    Tensor::new([1, 3, h, w], data)
}

/// One row of a pose file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseRecord {
    pub frame: usize,
    pub pose: Pose6D,
}

/// Rows `frame_idx tx ty tz rx ry rz`, one per line. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn format_poses(records: &[PoseRecord]) -> String {
    let mut s = String::from("# frame_idx tx ty tz rx ry rz\n");
    for r in records {
        let v = r.pose.to_array();
        s.push_str(&format!("{} {} {} {} {} {} {}\n", r.frame, v[0], v[1], v[2], v[3], v[4], v[5]));
    }
    s
}

/// Parses the output of [`format_poses`]. Blank lines and lines starting
/// with `#` are skipped.
pub fn parse_poses(text: &str) -> Result<Vec<PoseRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |d: String| Error::format("pose file", format!("line {}: {d}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(bad(format!("expected 7 fields, got {}", fields.len())));
        }
        let frame: usize = fields[0].parse().map_err(|_| bad(format!("bad frame index {:?}", fields[0])))?;
        let mut v = [0.0; 6];
        for (slot, tok) in v.iter_mut().zip(&fields[1..]) {
            *slot = tok.parse().map_err(|_| bad(format!("bad number {tok:?}")))?;
        }
        let pose = Pose6D::from_array(v).map_err(|e| bad(e.to_string()))?;
        out.push(PoseRecord { frame, pose });
    }
    Ok(out)
}
