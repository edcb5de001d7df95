//! Raster images and the small set of pixel operations every tool builds on:
//! decoding (PNG, binary PPM), PNG encoding, bilinear resize, luma conversion
//! and min-max quantization of real-valued fields.

use std::fs::File;
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("decode error: {0}")]
    Decode(String),
    #[error("encode error: {0}")]
    Encode(String),
    #[error("field contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// An 8-bit image stored row-major, interleaved when `channels == 3`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Raster {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidRaster(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(ImagingError::InvalidRaster(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(ImagingError::InvalidRaster(format!(
                "expected {expected} samples, got {}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn gray(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, data)
    }

    pub fn rgb(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 3, data)
    }

    pub fn filled(width: u32, height: u32, channels: u8, value: u8) -> Result<Self> {
        let len = width as usize * height as usize * channels as usize;
        Self::new(width, height, channels, vec![value; len])
    }

    /// Builds a grayscale raster from a per-pixel function of `(x, y)`.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u8) -> Result<Self> {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::gray(width, height, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn is_gray(&self) -> bool {
        self.channels == 1
    }

    /// Sample at `(x, y)` in channel `c`. Panics when out of bounds.
    pub fn get(&self, x: u32, y: u32, c: u8) -> u8 {
        let idx = (y as usize * self.width as usize + x as usize) * self.channels as usize
            + c as usize;
        self.data[idx]
    }

    /// Crops the half-open pixel rectangle `[x0, x1) x [y0, y1)`.
    pub fn crop(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Raster> {
        if x0 >= x1 || y0 >= y1 || x1 > self.width || y1 > self.height {
            return Err(ImagingError::InvalidRaster(format!(
                "crop rectangle ({x0},{y0})-({x1},{y1}) outside {}x{}",
                self.width, self.height
            )));
        }
        let ch = self.channels as usize;
        let mut data = Vec::with_capacity((x1 - x0) as usize * (y1 - y0) as usize * ch);
        for y in y0..y1 {
            let start = (y as usize * self.width as usize + x0 as usize) * ch;
            let end = (y as usize * self.width as usize + x1 as usize) * ch;
            data.extend_from_slice(&self.data[start..end]);
        }
        Raster::new(x1 - x0, y1 - y0, self.channels, data)
    }

    /// Lower-case hex SHA-256 over the geometry header and the samples.
    pub fn sha256_hex(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.width.to_le_bytes());
        hasher.update(self.height.to_le_bytes());
        hasher.update([self.channels]);
        hasher.update(&self.data);
        hex::encode(hasher.finalize())
    }
}

/// Real-valued single-channel field, the intermediate between transforms and
/// rendered rasters.
#[derive(Debug, Clone, PartialEq)]
pub struct RealField {
    width: u32,
    height: u32,
    values: Vec<f64>,
}

impl RealField {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidRaster(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if values.len() != width as usize * height as usize {
            return Err(ImagingError::InvalidRaster(format!(
                "expected {} values, got {}",
                width as usize * height as usize,
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: u32, height: u32) -> Result<Self> {
        Self::new(width, height, vec![0.0; width as usize * height as usize])
    }

    /// Grayscale raster samples as reals. RGB inputs are converted to luma first.
    pub fn from_raster(img: &Raster) -> RealField {
        let gray = to_grayscale(img);
        RealField {
            width: gray.width,
            height: gray.height,
            values: gray.data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn at(&self, x: u32, y: u32) -> f64 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: f64) {
        self.values[y as usize * self.width as usize + x as usize] = v;
    }

    /// Sample with coordinates clamped to the border (edge replication).
    pub fn at_clamped(&self, x: i64, y: i64) -> f64 {
        let x = x.clamp(0, self.width as i64 - 1) as u32;
        let y = y.clamp(0, self.height as i64 - 1) as u32;
        self.at(x, y)
    }
}

/// Decodes a PNG or binary PPM/PGM (P6/P5) file, sniffing the format from its
/// magic bytes.
pub fn load_image(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| ImagingError::Io {
            path: path.display().to_string(),
            source,
        })?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<Raster> {
    const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";
    if bytes.starts_with(PNG_MAGIC) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes)
    } else {
        Err(ImagingError::Decode(
            "unsupported format (expected PNG or binary PPM/PGM)".into(),
        ))
    }
}

fn decode_png(bytes: &[u8]) -> Result<Raster> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    // STRIP_16 keeps the most significant byte of 16-bit samples.
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| ImagingError::Decode(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImagingError::Decode("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ImagingError::Decode(e.to_string()))?;
    buf.truncate(info.buffer_size());
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImagingError::Decode(format!(
            "unexpected bit depth after expansion: {:?}",
            info.bit_depth
        )));
    }

    let (w, h) = (info.width, info.height);
    let (channels, data) = match info.color_type {
        png::ColorType::Grayscale => (1, buf),
        png::ColorType::Rgb => (3, buf),
        png::ColorType::GrayscaleAlpha => (1, buf.chunks_exact(2).map(|p| p[0]).collect()),
        png::ColorType::Rgba => (
            3,
            buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        ),
        png::ColorType::Indexed => {
            return Err(ImagingError::Decode("palette was not expanded".into()))
        }
    };
    Raster::new(w, h, channels, data)
}

fn decode_pnm(bytes: &[u8]) -> Result<Raster> {
    let channels: u8 = if &bytes[..2] == b"P6" { 3 } else { 1 };
    let mut pos = 2;
    let mut header = [0u32; 3];
    for slot in header.iter_mut() {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(ImagingError::Decode("malformed PNM header".into()));
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImagingError::Decode("malformed PNM header number".into()))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(ImagingError::Decode("missing PNM header terminator".into()));
    }
    pos += 1;

    let [w, h, maxval] = header;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(ImagingError::Decode(format!(
            "invalid PNM geometry {w}x{h} maxval {maxval}"
        )));
    }
    let count = w as usize * h as usize * channels as usize;
    let body = &bytes[pos..];
    let data: Vec<u8> = if maxval < 256 {
        if body.len() < count {
            return Err(ImagingError::Decode("truncated PNM raster".into()));
        }
        body[..count]
            .iter()
            .map(|&v| {
                if maxval == 255 {
                    v
                } else {
                    ((v.min(maxval as u8) as f64) * 255.0 / maxval as f64).round() as u8
                }
            })
            .collect()
    } else {
        if body.len() < count * 2 {
            return Err(ImagingError::Decode("truncated PNM raster".into()));
        }
        // big-endian 16-bit samples; keep the high byte
        body[..count * 2].chunks_exact(2).map(|p| p[0]).collect()
    };
    Raster::new(w, h, channels, data)
}

/// Writes `img` as an 8-bit lossless PNG.
pub fn encode_png(img: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| ImagingError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    write_png(img, &mut w)?;
    w.flush().map_err(io_err)
}

pub fn encode_png_bytes(img: &Raster) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_png(img, &mut out)?;
    Ok(out)
}

fn write_png<W: Write>(img: &Raster, w: W) -> Result<()> {
    let mut encoder = png::Encoder::new(w, img.width, img.height);
    encoder.set_color(if img.channels == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| ImagingError::Encode(e.to_string()))?;
    writer
        .write_image_data(&img.data)
        .map_err(|e| ImagingError::Encode(e.to_string()))?;
    writer
        .finish()
        .map_err(|e| ImagingError::Encode(e.to_string()))
}

/// Bilinear resize with half-pixel-centred sampling: the source coordinate of
/// destination pixel `d` is `(d + 0.5) * src/dst - 0.5`, clamped to the border.
///
/// Panics if `w` or `h` is zero.
pub fn resize_bilinear(img: &Raster, w: u32, h: u32) -> Raster {
    assert!(w >= 1 && h >= 1, "target dimensions must be positive");
    if w == img.width && h == img.height {
        return img.clone();
    }
    let xs = axis_samples(img.width, w);
    let ys = axis_samples(img.height, h);
    let ch = img.channels as usize;
    let mut data = Vec::with_capacity(w as usize * h as usize * ch);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..img.channels {
                let p00 = img.get(x0, y0, c) as f64;
                let p10 = img.get(x1, y0, c) as f64;
                let p01 = img.get(x0, y1, c) as f64;
                let p11 = img.get(x1, y1, c) as f64;
                let top = p00 * (1.0 - fx) + p10 * fx;
                let bottom = p01 * (1.0 - fx) + p11 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Raster {
        width: w,
        height: h,
        channels: img.channels,
        data,
    }
}

/// For every destination index: (left source index, right source index, weight of right).
fn axis_samples(src: u32, dst: u32) -> Vec<(u32, u32, f64)> {
    let scale = src as f64 / dst as f64;
    let max = (src - 1) as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let i0 = s.floor();
            let i1 = (i0 + 1.0).min(max);
            (i0 as u32, i1 as u32, s - i0)
        })
        .collect()
}

/// BT.601 luma. Grayscale input is returned unchanged.
pub fn to_grayscale(img: &Raster) -> Raster {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| {
            let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Raster {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    }
}

/// Linearly maps the field's range onto 0..=255. A constant field renders as
/// all zeros.
pub fn quantize_minmax(f: &RealField) -> Result<Raster> {
    if let Some(i) = f.values.iter().position(|v| !v.is_finite()) {
        return Err(ImagingError::NonFinite(i));
    }
    let (min, max) = f
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let data = if max > min {
        let range = max - min;
        f.values
            .iter()
            .map(|&v| (255.0 * (v - min) / range).round().clamp(0.0, 255.0) as u8)
            .collect()
    } else {
        vec![0; f.values.len()]
    };
    Raster::gray(f.width, f.height, data)
}
