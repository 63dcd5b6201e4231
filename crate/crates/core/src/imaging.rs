//! Dense float images, bilinear crop-and-resize, grayscale conversion and
//! PNG/PPM input/output.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Largest pixel count accepted by the decoders.
pub const MAX_PIXELS: usize = 1 << 26;

/// Row-major `height × width × channels` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x{channels} image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(width, height, channels, vec![value; width * height * channels])
    }

    /// Builds an RGB image from 8-bit interleaved samples.
    pub fn from_rgb8(width: usize, height: usize, data: &[u8]) -> Result<Self> {
        let pixels = data.iter().map(|&v| f64::from(v) / 255.0).collect();
        Image::new(width, height, 3, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn frame(&self) -> BBox {
        BBox::frame(self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Samples quantized to 8 bits with round-to-nearest.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Samples `region` into an `out_w × out_h` image with bilinear interpolation.
///
/// Pixel centres sit at half-integer coordinates; samples beyond the last
/// row or column repeat the edge.
pub fn crop_resize(img: &Image, region: &BBox, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "output size must be positive, got {out_w}x{out_h}"
        )));
    }
    if !region.within_image(img.width, img.height, 1e-9) {
        return Err(Error::OutOfBounds {
            region: region.as_array(),
            width: img.width,
            height: img.height,
        });
    }
    let ch = img.channels;
    let sx = region.w / out_w as f64;
    let sy = region.h / out_h as f64;
    let xs: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|ox| taps(region.x + (ox as f64 + 0.5) * sx - 0.5, img.width))
        .collect();
    let mut out = Vec::with_capacity(out_w * out_h * ch);
    for oy in 0..out_h {
        let (y0, y1, fy) = taps(region.y + (oy as f64 + 0.5) * sy - 0.5, img.height);
        let row0 = &img.pixels[y0 * img.width * ch..(y0 + 1) * img.width * ch];
        let row1 = &img.pixels[y1 * img.width * ch..(y1 + 1) * img.width * ch];
        for &(x0, x1, fx) in &xs {
            for c in 0..ch {
                let top = row0[x0 * ch + c] * (1.0 - fx) + row0[x1 * ch + c] * fx;
                let bot = row1[x0 * ch + c] * (1.0 - fx) + row1[x1 * ch + c] * fx;
                out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Image {
        width: out_w,
        height: out_h,
        channels: ch,
        pixels: out,
    })
}

// Neighbouring sample indices and the blend factor toward the second one.
fn taps(pos: f64, len: usize) -> (usize, usize, f64) {
    let max = (len - 1) as f64;
    let p = pos.clamp(0.0, max);
    let i0 = p.floor();
    let frac = p - i0;
    let i0 = i0 as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, frac)
}

/// Replaces every channel with the luminance `0.299 R + 0.587 G + 0.114 B`.
///
/// The result keeps three channels.
pub fn to_grayscale(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::Shape(format!(
            "grayscale conversion needs an RGB image, got {} channels",
            img.channels
        )));
    }
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for px in img.pixels.chunks_exact(3) {
        let (r, g, b) = (px[0], px[1], px[2]);
        let lum = if r == g && g == b {
            r
        } else {
            (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0)
        };
        pixels.extend_from_slice(&[lum, lum, lum]);
    }
    Ok(Image {
        width: img.width,
        height: img.height,
        channels: 3,
        pixels,
    })
}

/// Reads a PNG or PPM/PGM file; the format is sniffed from the content.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Decodes PNG or binary/ASCII PNM bytes.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(bytes)
    } else if bytes.first() == Some(&b'P') {
        decode_pnm(bytes)
    } else {
        Err(Error::Decode("unrecognised image format".into()))
    }
}

/// Writes an image as 8-bit PNG, or as PPM/PGM when the extension says so.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_pnm = matches!(path.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm" | "pnm"));
    let bytes = if is_pnm { encode_pnm(img) } else { encode_png(img)? };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), img.width as u32, img.height as u32);
        enc.set_color(if img.channels == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Decode(format!("png encode: {e}")))?;
        writer
            .write_image_data(&img.to_u8())
            .map_err(|e| Error::Decode(format!("png encode: {e}")))?;
    }
    Ok(out)
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| Error::Decode(format!("png: {e}")))?;
    let (width, height) = {
        let info = reader.info();
        (info.width as usize, info.height as usize)
    };
    if width.saturating_mul(height) > MAX_PIXELS {
        return Err(Error::Decode(format!("png too large: {width}x{height}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode("png: output size overflow".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Decode(format!("png: {e}")))?;
    let data = &buf[..frame.buffer_size()];
    let (color, _) = reader.output_color_type();
    let (channels, keep): (usize, usize) = match color {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::Decode("png: unexpanded palette".into())),
    };
    let stride = frame.line_size;
    let mut pixels = Vec::with_capacity(width * height * keep);
    for row in data.chunks(stride).take(height) {
        for px in row[..width * channels].chunks_exact(channels) {
            pixels.extend(px[..keep].iter().map(|&v| f64::from(v) / 255.0));
        }
    }
    Image::new(width, height, keep, pixels)
}

fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_u8());
    out
}

struct PnmHeader<'a> {
    rest: &'a [u8],
}

impl<'a> PnmHeader<'a> {
    fn skip_space_and_comments(&mut self) {
        loop {
            match self.rest.first() {
                Some(b) if b.is_ascii_whitespace() => self.rest = &self.rest[1..],
                Some(b'#') => {
                    let end = self.rest.iter().position(|&b| b == b'\n').unwrap_or(self.rest.len());
                    self.rest = &self.rest[end..];
                }
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let len = self.rest.iter().take_while(|b| b.is_ascii_digit()).count();
        if len == 0 || len > 9 {
            return Err(Error::Decode("pnm: malformed header number".into()));
        }
        let text = std::str::from_utf8(&self.rest[..len]).expect("ascii digits");
        self.rest = &self.rest[len..];
        Ok(text.parse().expect("at most nine digits"))
    }
}

fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 {
        return Err(Error::Decode("pnm: truncated magic".into()));
    }
    let (channels, binary) = match &bytes[..2] {
        b"P2" => (1, false),
        b"P3" => (3, false),
        b"P5" => (1, true),
        b"P6" => (3, true),
        _ => return Err(Error::Decode("pnm: unsupported magic".into())),
    };
    let mut header = PnmHeader { rest: &bytes[2..] };
    let width = header.number()?;
    let height = header.number()?;
    let maxval = header.number()?;
    if width == 0 || height == 0 || width.saturating_mul(height) > MAX_PIXELS {
        return Err(Error::Decode(format!("pnm: bad dimensions {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Decode(format!("pnm: bad maxval {maxval}")));
    }
    let count = width * height * channels;
    let scale = maxval as f64;
    let mut pixels = Vec::with_capacity(count);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        match header.rest.first() {
            Some(b) if b.is_ascii_whitespace() => {}
            _ => return Err(Error::Decode("pnm: missing raster separator".into())),
        }
        let raster = &header.rest[1..];
        let sample_bytes = if maxval > 255 { 2 } else { 1 };
        if raster.len() < count * sample_bytes {
            return Err(Error::Decode("pnm: truncated raster".into()));
        }
        for s in raster[..count * sample_bytes].chunks_exact(sample_bytes) {
            let v = if sample_bytes == 2 {
                usize::from(u16::from_be_bytes([s[0], s[1]]))
            } else {
                usize::from(s[0])
            };
            if v > maxval {
                return Err(Error::Decode("pnm: sample exceeds maxval".into()));
            }
            pixels.push(v as f64 / scale);
        }
    } else {
        for _ in 0..count {
            let v = header.number()?;
            if v > maxval {
                return Err(Error::Decode("pnm: sample exceeds maxval".into()));
            }
            pixels.push(v as f64 / scale);
        }
    }
    Image::new(width, height, channels, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rgb(width: usize, height: usize, f: impl Fn(usize, usize, usize) -> f64) -> Image {
        let mut px = Vec::new();
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    px.push(f(x, y, c));
                }
            }
        }
        Image::new(width, height, 3, px).unwrap()
    }

    #[test]
    fn identity_crop() {
        let img = rgb(7, 5, |x, y, c| ((x * 31 + y * 17 + c * 7) % 11) as f64 / 10.0);
        let out = crop_resize(&img, &img.frame(), 7, 5).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(13, 9, 3, 0.375).unwrap();
        let region = BBox::new(1.3, 2.7, 8.1, 5.2).unwrap();
        let out = crop_resize(&img, &region, 17, 4).unwrap();
        assert!(out.pixels().iter().all(|&v| v == 0.375));
    }

    #[test]
    fn checkerboard_to_single_pixel() {
        let img = rgb(2, 2, |x, y, _| ((x + y) % 2) as f64);
        let out = crop_resize(&img, &img.frame(), 1, 1).unwrap();
        assert_eq!(out.pixels(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn crop_rejects_out_of_bounds_region() {
        let img = Image::filled(10, 10, 3, 0.0).unwrap();
        let region = BBox::new(5.0, 5.0, 6.0, 2.0).unwrap();
        assert!(matches!(
            crop_resize(&img, &region, 4, 4),
            Err(Error::OutOfBounds { .. })
        ));
        assert!(crop_resize(&img, &img.frame(), 0, 4).is_err());
    }

    #[test]
    fn grayscale_examples() {
        let gray = Image::filled(2, 2, 3, 0.42).unwrap();
        assert_eq!(to_grayscale(&gray).unwrap(), gray);
        let red = rgb(1, 1, |_, _, c| if c == 0 { 1.0 } else { 0.0 });
        assert_eq!(to_grayscale(&red).unwrap().pixels(), &[0.299; 3]);
        let blue = rgb(1, 1, |_, _, c| if c == 2 { 1.0 } else { 0.0 });
        assert_eq!(to_grayscale(&blue).unwrap().pixels(), &[0.114; 3]);
    }

    #[test]
    fn grayscale_requires_rgb() {
        let img = Image::filled(2, 2, 1, 0.5).unwrap();
        assert!(matches!(to_grayscale(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn image_invariants_enforced() {
        assert!(Image::new(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = rgb(9, 4, |x, y, c| ((x * 13 + y * 29 + c * 3) % 256) as f64 / 255.0);
        for name in ["a.png", "a.ppm"] {
            let path = dir.path().join(name);
            save_image(&img, &path).unwrap();
            assert_eq!(load_image(&path).unwrap(), img);
        }
    }

    #[test]
    fn ascii_ppm_with_comments() {
        let text = b"P3\n# a comment\n2 1\n# another\n255\n255 0 0  0 0 255\n";
        let img = decode_image(text).unwrap();
        assert_eq!(img.pixels(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_ppm() {
        let mut bytes = b"P6 1 1 65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x00, 0x00, 0x80, 0x00]);
        let img = decode_image(&bytes).unwrap();
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(0, 0, 1), 0.0);
    }

    #[test]
    fn malformed_inputs_rejected() {
        for bad in [
            &b""[..],
            b"GIF89a",
            b"P6\n2 2\n255\n\x00\x00",
            b"P6\n0 2\n255\n",
            b"P3\n1 1\n255\n256 0 0",
            b"P7\n1 1\n255\n",
            b"\x89PNG\r\n\x1a\n\x00\x00",
        ] {
            assert!(decode_image(bad).is_err(), "{bad:?}");
        }
        assert!(matches!(load_image("/nonexistent/x.png"), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn crop_output_in_range_and_grayscale_idempotent(
            seed in 0u64..1000,
            rx in 0.0..0.5f64, ry in 0.0..0.5f64, rw in 0.1..0.5f64, rh in 0.1..0.5f64,
            ow in 1usize..20, oh in 1usize..20,
        ) {
            let img = rgb(16, 12, |x, y, c| {
                let h = (seed as usize).wrapping_mul(2654435761) ^ (x * 73856093) ^ (y * 19349663) ^ (c * 83492791);
                (h % 1000) as f64 / 999.0
            });
            let region = BBox::new(rx * 16.0, ry * 12.0, rw * 16.0, rh * 12.0).unwrap();
            let out = crop_resize(&img, &region, ow, oh).unwrap();
            prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            let g = to_grayscale(&out).unwrap();
            prop_assert_eq!(to_grayscale(&g).unwrap(), g);
        }

        #[test]
        fn save_load_within_one_level(values in proptest::collection::vec(0.0..=1.0f64, 12)) {
            let img = Image::new(2, 2, 3, values).unwrap();
            let back = decode_image(&encode_png(&img).unwrap()).unwrap();
            for (a, b) in img.pixels().iter().zip(back.pixels()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }
}
