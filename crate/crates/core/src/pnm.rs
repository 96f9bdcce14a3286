//! Binary PGM (P5) and PPM (P6) images with maxval 255.
//!
//! Pixels map to `[0, 1]` as `byte / 255`; writing uses `round(255·x)` after
//! clamping. Tensors are `C×H×W` with `C = 1` for P5 and `C = 3` for P6.

use std::fs;
use std::path::Path;

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum PnmError {
    #[error("image io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported maxval {0} (only 255)")]
    Maxval(u32),
    #[error("truncated pixel data: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("cannot encode tensor of shape {0:?} (need 1×H×W or 3×H×W)")]
    Shape(Vec<usize>),
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, PnmError> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PnmError::Header(format!("expected {what}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, PnmError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(PnmError::Header("expected magic P5 or P6".into())),
    };
    let mut cur = Cursor { buf: bytes, pos: 2 };
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(PnmError::Header(format!("empty image {width}×{height}")));
    }
    if maxval != 255 {
        return Err(PnmError::Maxval(maxval));
    }
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(PnmError::Header("missing whitespace after maxval".into())),
    }
    let need = width * height * channels;
    let px = &bytes[cur.pos..];
    if px.len() < need {
        return Err(PnmError::Truncated {
            need,
            have: px.len(),
        });
    }
    // interleaved HWC on disk, planar CHW in memory
    let t = Tensor::from_fn([channels, height, width], |i| {
        let c = i / (height * width);
        let p = i % (height * width);
        px[p * channels + c] as f64 / 255.0
    });
    Ok(t)
}

pub fn encode(img: &Tensor) -> Result<Vec<u8>, PnmError> {
    let (c, h, w) = match img.shape() {
        &[c, h, w] if c == 1 || c == 3 => (c, h, w),
        &[h, w] => (1, h, w),
        s => return Err(PnmError::Shape(s.to_vec())),
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    for p in 0..h * w {
        for ch in 0..c {
            let v = img.data()[ch * h * w + p].clamp(0.0, 1.0);
            out.push((255.0 * v).round() as u8);
        }
    }
    Ok(out)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor, PnmError> {
    decode(&fs::read(path)?)
}

pub fn save_image(path: impl AsRef<Path>, img: &Tensor) -> Result<(), PnmError> {
    fs::write(path, encode(img)?)?;
    Ok(())
}

/// File extension matching the encoding of a `C×H×W` tensor.
pub fn extension_for(img: &Tensor) -> &'static str {
    if img.shape().first() == Some(&3) && img.ndim() == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

/// Lays `C×H×W` images side by side with a one-pixel white separator.
pub fn tile_horizontal(items: &[Tensor]) -> Tensor {
    let (c, h, w) = (items[0].shape()[0], items[0].shape()[1], items[0].shape()[2]);
    let n = items.len();
    let total_w = n * w + n.saturating_sub(1);
    let mut out = Tensor::ones([c, h, total_w]);
    for (k, img) in items.iter().enumerate() {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[(ch * h + y) * total_w + k * (w + 1) + x] =
                        img.data()[(ch * h + y) * w + x];
                }
            }
        }
    }
    out
}
