//! The six visual tools an annotator or policy can call on a face crop.
//!
//! Every tool maps a [`Raster`] to a rendered [`Raster`] of the same
//! geometry. All tools except zoom-in render a single grayscale channel.

mod fft;
mod haar;
mod hog;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::imaging::{quantize_minmax, resize_bilinear, to_grayscale, ImagingError, Raster, RealField};

pub use fft::{fft2d, ifft2d, log_magnitude_spectrum, next_pow2, ComplexField};
pub use haar::{haar_bands, HaarBands};
pub use hog::{hog_descriptor, HogDescriptor, HOG_BINS, HOG_CELL};

/// Reference side length that bounding-box size limits are measured against.
pub const REFERENCE_SIDE: f64 = 224.0;
/// Smallest zoom window, in pixels of a [`REFERENCE_SIDE`] image.
pub const MIN_BOX_PIXELS: f64 = 8.0;

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("unknown tool `{0}`")]
    InvalidTool(String),
    #[error("invalid arguments for {tool}: {reason}")]
    InvalidArgument { tool: ToolId, reason: String },
    #[error("image too small for {tool}: {width}x{height}, need at least {min}x{min}")]
    ImageTooSmall {
        tool: ToolId,
        width: u32,
        height: u32,
        min: u32,
    },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

pub type Result<T> = std::result::Result<T, ToolError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ToolId {
    #[serde(rename = "ZoomInTool")]
    ZoomIn,
    #[serde(rename = "LBPTool")]
    Lbp,
    #[serde(rename = "FFTTool")]
    Fft,
    #[serde(rename = "WaveletTransformTool")]
    Wavelet,
    #[serde(rename = "EdgeDetectionTool")]
    EdgeDetection,
    #[serde(rename = "HOGTool")]
    Hog,
}

impl ToolId {
    pub const ALL: [ToolId; 6] = [
        ToolId::ZoomIn,
        ToolId::Lbp,
        ToolId::Fft,
        ToolId::Wavelet,
        ToolId::EdgeDetection,
        ToolId::Hog,
    ];

    /// The tool name used in tool-call payloads.
    pub fn wire_name(self) -> &'static str {
        match self {
            ToolId::ZoomIn => "ZoomInTool",
            ToolId::Lbp => "LBPTool",
            ToolId::Fft => "FFTTool",
            ToolId::Wavelet => "WaveletTransformTool",
            ToolId::EdgeDetection => "EdgeDetectionTool",
            ToolId::Hog => "HOGTool",
        }
    }

    pub fn from_wire(name: &str) -> Option<ToolId> {
        ToolId::ALL.into_iter().find(|t| t.wire_name() == name)
    }

    /// Position in [`ToolId::ALL`], used to index per-tool weight vectors.
    pub fn index(self) -> usize {
        ToolId::ALL.iter().position(|&t| t == self).unwrap()
    }

    pub fn has_expert(self) -> bool {
        self != ToolId::ZoomIn
    }
}

impl fmt::Display for ToolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.wire_name())
    }
}

impl FromStr for ToolId {
    type Err = ToolError;

    fn from_str(s: &str) -> Result<Self> {
        ToolId::from_wire(s).ok_or_else(|| ToolError::InvalidTool(s.to_string()))
    }
}

/// A tool invocation: tool plus its JSON arguments object.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolCall {
    pub tool: ToolId,
    pub arguments: Map<String, Value>,
}

impl ToolCall {
    pub fn new(tool: ToolId) -> Self {
        Self {
            tool,
            arguments: Map::new(),
        }
    }

    pub fn zoom(bbox: [f64; 4]) -> Self {
        let mut arguments = Map::new();
        arguments.insert("bbox".into(), serde_json::json!(bbox));
        Self {
            tool: ToolId::ZoomIn,
            arguments,
        }
    }

    /// Canonical `{"name":…,"arguments":…}` payload.
    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("name".into(), Value::String(self.tool.wire_name().into()));
        obj.insert("arguments".into(), Value::Object(self.arguments.clone()));
        Value::Object(obj)
    }

    /// Compact JSON text of [`ToolCall::to_json`] with `name` first.
    pub fn to_json_string(&self) -> String {
        format!(
            "{{\"name\":{},\"arguments\":{}}}",
            Value::String(self.tool.wire_name().into()),
            Value::Object(self.arguments.clone())
        )
    }
}

/// Normalized bounding box for the zoom-in tool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl BBox {
    /// Clamps the corners into `[0, 1]` and rejects boxes that are out of
    /// order or smaller than 8x8 pixels on a 224x224 image.
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let bad = |reason: String| ToolError::InvalidArgument {
            tool: ToolId::ZoomIn,
            reason,
        };
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(bad("bbox coordinates must be finite".into()));
        }
        let [x0, y0, x1, y1] = [x0, y0, x1, y1].map(|v| v.clamp(0.0, 1.0));
        if x0 >= x1 || y0 >= y1 {
            return Err(bad(format!(
                "bbox ({x0}, {y0}, {x1}, {y1}) is empty or out of order"
            )));
        }
        // small tolerance so that exactly-8px boxes like (0, 0, 8/224, 8/224) pass
        let min = MIN_BOX_PIXELS - 1e-9;
        if (x1 - x0) * REFERENCE_SIDE < min || (y1 - y0) * REFERENCE_SIDE < min {
            return Err(bad(format!(
                "bbox ({x0}, {y0}, {x1}, {y1}) is smaller than {MIN_BOX_PIXELS}x{MIN_BOX_PIXELS} px"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// Half-open pixel rectangle `(x0, y0, x1, y1)` covered on a `w`x`h` image.
    pub fn pixel_rect(&self, w: u32, h: u32) -> (u32, u32, u32, u32) {
        let px0 = ((self.x0 * w as f64).floor() as u32).min(w - 1);
        let py0 = ((self.y0 * h as f64).floor() as u32).min(h - 1);
        let px1 = ((self.x1 * w as f64).ceil() as u32).clamp(px0 + 1, w);
        let py1 = ((self.y1 * h as f64).ceil() as u32).clamp(py0 + 1, h);
        (px0, py0, px1, py1)
    }
}

/// Validates a tool's argument object without running the tool. Returns the
/// parsed box for zoom-in.
pub fn validate_arguments(tool: ToolId, args: &Map<String, Value>) -> Result<Option<BBox>> {
    let bad = |reason: String| ToolError::InvalidArgument { tool, reason };
    match tool {
        ToolId::ZoomIn => {
            if let Some(extra) = args.keys().find(|k| *k != "bbox") {
                return Err(bad(format!("unexpected argument `{extra}`")));
            }
            let raw = args
                .get("bbox")
                .ok_or_else(|| bad("missing `bbox`".into()))?;
            let coords: Vec<f64> = raw
                .as_array()
                .map(|a| a.iter().filter_map(Value::as_f64).collect())
                .unwrap_or_default();
            if coords.len() != 4 || raw.as_array().map(Vec::len) != Some(4) {
                return Err(bad("`bbox` must be an array of four numbers".into()));
            }
            BBox::new(coords[0], coords[1], coords[2], coords[3]).map(Some)
        }
        _ => match args.keys().next() {
            Some(k) => Err(bad(format!("takes no arguments, got `{k}`"))),
            None => Ok(None),
        },
    }
}

/// Crops the box and scales it back up to the input's dimensions.
pub fn zoom_in(img: &Raster, bbox: &BBox) -> Result<Raster> {
    let (x0, y0, x1, y1) = bbox.pixel_rect(img.width(), img.height());
    let crop = img.crop(x0, y0, x1, y1)?;
    Ok(resize_bilinear(&crop, img.width(), img.height()))
}

fn require_min(tool: ToolId, img: &Raster, min: u32) -> Result<()> {
    if img.width() < min || img.height() < min {
        return Err(ToolError::ImageTooSmall {
            tool,
            width: img.width(),
            height: img.height(),
            min,
        });
    }
    Ok(())
}

/// 8-neighbour, radius-1 local binary pattern.
///
/// Neighbours are read clockwise from the top-left; the top-left neighbour
/// is the most significant bit, and a bit is set when the neighbour is at
/// least as bright as the centre. The one-pixel frame is left at zero.
pub fn lbp_map(img: &Raster) -> Result<Raster> {
    require_min(ToolId::Lbp, img, 3)?;
    let gray = to_grayscale(img);
    let (w, h) = (gray.width() as i64, gray.height() as i64);
    const OFFSETS: [(i64, i64); 8] = [
        (-1, -1),
        (0, -1),
        (1, -1),
        (1, 0),
        (1, 1),
        (0, 1),
        (-1, 1),
        (-1, 0),
    ];
    let px = |x: i64, y: i64| gray.data()[(y * w + x) as usize];
    let mut out = vec![0u8; (w * h) as usize];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let center = px(x, y);
            let code = OFFSETS.iter().fold(0u8, |acc, &(dx, dy)| {
                (acc << 1) | u8::from(px(x + dx, y + dy) >= center)
            });
            out[(y * w + x) as usize] = code;
        }
    }
    Ok(Raster::gray(gray.width(), gray.height(), out)?)
}

/// Centred log-magnitude spectrum, rendered at the input's dimensions.
pub fn fft_spectrum(img: &Raster) -> Result<Raster> {
    let field = RealField::from_raster(img);
    let spectrum = log_magnitude_spectrum(&field)?;
    let rendered = quantize_minmax(&spectrum)?;
    Ok(resize_bilinear(&rendered, img.width(), img.height()))
}

/// Single-level Haar decomposition laid out as a 2x2 mosaic:
/// approximation top-left, then the column-detail, row-detail and diagonal
/// bands, each quantized on its own.
pub fn haar_wavelet(img: &Raster) -> Result<Raster> {
    let field = RealField::from_raster(img);
    let bands = haar_bands(&field)?;
    let (bw, bh) = (bands.ll.width(), bands.ll.height());
    let mut canvas = vec![0u8; (2 * bw * 2 * bh) as usize];
    let tiles = [
        (&bands.ll, 0, 0),
        (&bands.lh, bw, 0),
        (&bands.hl, 0, bh),
        (&bands.hh, bw, bh),
    ];
    for (band, ox, oy) in tiles {
        let q = quantize_minmax(band)?;
        for y in 0..bh {
            for x in 0..bw {
                canvas[((oy + y) * 2 * bw + ox + x) as usize] = q.get(x, y, 0);
            }
        }
    }
    let mosaic = Raster::gray(2 * bw, 2 * bh, canvas)?;
    // odd inputs were padded by one row/column; drop it again
    if mosaic.width() != img.width() || mosaic.height() != img.height() {
        return Ok(mosaic.crop(0, 0, img.width(), img.height())?);
    }
    Ok(mosaic)
}

/// Absolute response of the 4-neighbour Laplacian with edge replication.
pub fn laplacian_field(img: &Raster) -> Result<RealField> {
    require_min(ToolId::EdgeDetection, img, 3)?;
    let f = RealField::from_raster(img);
    let mut out = RealField::zeros(f.width(), f.height())?;
    for y in 0..f.height() as i64 {
        for x in 0..f.width() as i64 {
            let v = f.at_clamped(x, y - 1)
                + f.at_clamped(x - 1, y)
                + f.at_clamped(x + 1, y)
                + f.at_clamped(x, y + 1)
                - 4.0 * f.at_clamped(x, y);
            out.set(x as u32, y as u32, v.abs());
        }
    }
    Ok(out)
}

pub fn laplacian_edge(img: &Raster) -> Result<Raster> {
    Ok(quantize_minmax(&laplacian_field(img)?)?)
}

/// HOG features and their star-glyph rendering.
pub fn hog_render(img: &Raster) -> Result<(Vec<f64>, Raster)> {
    require_min(ToolId::Hog, img, 2 * HOG_CELL)?;
    let desc = hog_descriptor(img)?;
    let rendering = quantize_minmax(&desc.render(img.width(), img.height())?)?;
    Ok((desc.features, rendering))
}

/// Runs a tool call against an image, validating the arguments first.
pub fn dispatch(call: &ToolCall, img: &Raster) -> Result<Raster> {
    let bbox = validate_arguments(call.tool, &call.arguments)?;
    match call.tool {
        ToolId::ZoomIn => zoom_in(img, &bbox.unwrap_or_else(BBox::full)),
        ToolId::Lbp => lbp_map(img),
        ToolId::Fft => fft_spectrum(img),
        ToolId::Wavelet => haar_wavelet(img),
        ToolId::EdgeDetection => laplacian_edge(img),
        ToolId::Hog => hog_render(img).map(|(_, r)| r),
    }
}

/// Parses a `{"name": …, "arguments": …}` payload and dispatches it.
pub fn dispatch_json(payload: &Value, img: &Raster) -> Result<Raster> {
    let name = payload
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| ToolError::InvalidTool(payload.to_string()))?;
    let tool: ToolId = name.parse()?;
    let arguments = match payload.get("arguments") {
        None => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(other) => {
            return Err(ToolError::InvalidArgument {
                tool,
                reason: format!("`arguments` must be an object, got {other}"),
            })
        }
    };
    dispatch(&ToolCall { tool, arguments }, img)
}
