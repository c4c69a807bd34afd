//! Binary Netpbm I/O (P6 color, P5 grayscale) and the conversions
//! between 8-bit pixels and the real-valued tensors the pipeline uses.
//!
//! Only maxval 255 is accepted. Decoding is strict: short files,
//! trailing bytes, and malformed headers are rejected with the byte
//! offset where parsing stopped, and no input can panic the decoder.
//!
//! Loaded color pixels sit on the 2^-8 grid (value/256), which keeps
//! mean subtraction in the separation step exact. Saliency maps use the
//! full [0,1] range (value/255) to match the 8-bit metric quantization.

use std::path::Path;

use crate::error::PipelineError;
use crate::metrics::{GroundTruthMask, SaliencyMap};
use crate::tensor::Tensor;

/// Mask pixels at or above this level count as foreground.
pub const MASK_THRESHOLD: u8 = 128;

/// Interleaved 8-bit image, 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self, PipelineError> {
        if channels != 1 && channels != 3 {
            return Err(PipelineError::invalid(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(PipelineError::invalid(format!(
                "{}x{}x{channels} image needs {} bytes, got {}",
                width,
                height,
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(Image { width, height, channels, pixels })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Cursor<'a> {
    fn fail(&self, what: impl Into<String>) -> PipelineError {
        PipelineError::format(self.origin, self.pos, what)
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Consumes whitespace and '#' comments between header tokens.
    fn skip_separators(&mut self) {
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(c) = self.peek() {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn decimal(&mut self, what: &str) -> Result<usize, PipelineError> {
        self.skip_separators();
        let start = self.pos;
        let mut value = 0usize;
        while let Some(b) = self.peek() {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add(usize::from(b - b'0')))
                .ok_or_else(|| self.fail(format!("{what} overflows")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.fail(format!("expected decimal {what}")));
        }
        Ok(value)
    }
}

/// Parses P6/P5 bytes; `origin` names the source in error messages.
pub fn decode(bytes: &[u8], origin: &str) -> Result<Image, PipelineError> {
    let mut cur = Cursor { bytes, pos: 0, origin };
    let channels = match bytes {
        [b'P', b'6', ..] => 3,
        [b'P', b'5', ..] => 1,
        _ => return Err(cur.fail("bad magic, expected P6 or P5")),
    };
    cur.pos = 2;
    let width = cur.decimal("width")?;
    let height = cur.decimal("height")?;
    let maxval = cur.decimal("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.fail(format!("degenerate dimensions {width}x{height}")));
    }
    if maxval != 255 {
        return Err(cur.fail(format!("unsupported maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    match cur.peek() {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.fail("expected single whitespace before pixel data")),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| cur.fail("dimensions overflow"))?;
    let available = bytes.len() - cur.pos;
    if available < expected {
        return Err(PipelineError::format(
            origin,
            bytes.len(),
            format!("pixel data truncated, need {expected} bytes, have {available}"),
        ));
    }
    if available > expected {
        return Err(PipelineError::format(
            origin,
            cur.pos + expected,
            format!("{} trailing bytes after pixel data", available - expected),
        ));
    }
    let pixels = bytes[cur.pos..].to_vec();
    Ok(Image { width, height, channels, pixels })
}

pub fn encode(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn load(path: &Path) -> Result<Image, PipelineError> {
    let name = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(&name, e))?;
    decode(&bytes, &name)
}

pub fn save(path: &Path, img: &Image) -> Result<(), PipelineError> {
    std::fs::write(path, encode(img)).map_err(|e| PipelineError::io(path.display().to_string(), e))
}

// ── Conversions ─────────────────────────────────────────────────────────

/// RGB image to a [3, H, W] tensor on the 2^-8 grid.
pub fn to_tensor(img: &Image) -> Result<Tensor, PipelineError> {
    if img.channels != 3 {
        return Err(PipelineError::invalid("expected a 3-channel image"));
    }
    let plane = img.width * img.height;
    let mut values = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            values[c * plane + p] = f64::from(img.pixels[p * 3 + c]) / 256.0;
        }
    }
    Ok(Tensor::from_vec(vec![3, img.height, img.width], values)?)
}

/// [3, H, W] tensor (values in [0,1)) back to 8-bit RGB.
pub fn from_tensor(t: &Tensor) -> Result<Image, PipelineError> {
    let dims = t.dims();
    if dims.len() != 3 || dims[0] != 3 {
        return Err(PipelineError::invalid(format!("expected [3, H, W] tensor, got {dims:?}")));
    }
    let (h, w) = (dims[1], dims[2]);
    let plane = h * w;
    let mut pixels = vec![0u8; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let v = (t.values()[c * plane + p] * 256.0).round().clamp(0.0, 255.0);
            pixels[p * 3 + c] = v as u8;
        }
    }
    Image::new(w, h, 3, pixels)
}

/// Grayscale image to a binary mask; levels >= 128 are foreground.
pub fn to_mask(img: &Image) -> Result<GroundTruthMask, PipelineError> {
    if img.channels != 1 {
        return Err(PipelineError::invalid("expected a 1-channel mask"));
    }
    let values = img.pixels.iter().map(|p| f64::from(*p >= MASK_THRESHOLD)).collect();
    Ok(GroundTruthMask::new(img.height, img.width, values)?)
}

/// Grayscale image to a saliency map on the full [0,1] range.
pub fn to_map(img: &Image) -> Result<SaliencyMap, PipelineError> {
    if img.channels != 1 {
        return Err(PipelineError::invalid("expected a 1-channel map"));
    }
    let values = img.pixels.iter().map(|p| f64::from(*p) / 255.0).collect();
    Ok(SaliencyMap::new(img.height, img.width, values)?)
}

/// Real-valued map in [0,1] to an 8-bit grayscale image.
pub fn from_map(values: &[f64], height: usize, width: usize) -> Result<Image, PipelineError> {
    if values.len() != height * width {
        return Err(PipelineError::invalid("map length does not match dimensions"));
    }
    let pixels = values.iter().map(|v| crate::metrics::quantize8(v.clamp(0.0, 1.0))).collect();
    Image::new(width, height, 1, pixels)
}
