use super::{BBox, Modality};
use crate::error::{Error, Result};

/// Three-channel image, row-major, channels last, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Data(format!(
                "{width}x{height}x3 image cannot hold {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("image values must lie in [0, 1]".into()));
        }
        Ok(Image { width, height, data })
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }

    /// Quantizes back to 8 bits; exact inverse of [`Image::from_rgb8`].
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }
}

/// Six-channel packed image (`H×W×6`) plus the modality it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedInput {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub modality: Modality,
}

impl UnifiedInput {
    pub fn zeros(width: usize, height: usize, modality: Modality) -> Self {
        UnifiedInput { width, height, pixels: vec![0.0; width * height * 6], modality }
    }

    /// Channel group 0 (channels 0..3) or 1 (channels 3..6) as an image.
    pub fn extract(&self, group: usize) -> Image {
        assert!(group < 2, "unified input has two channel groups");
        let data = self
            .pixels
            .chunks_exact(6)
            .flat_map(|p| p[group * 3..group * 3 + 3].iter().copied())
            .collect();
        Image { width: self.width, height: self.height, data }
    }

    /// Same pixels with one channel group copied over both halves.
    pub fn replicate_group(&self, group: usize) -> UnifiedInput {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for p in self.pixels.chunks_exact(6) {
            let g = &p[group * 3..group * 3 + 3];
            pixels.extend_from_slice(g);
            pixels.extend_from_slice(g);
        }
        UnifiedInput { pixels, ..self.clone() }
    }

    fn sample(&self, x: f64, y: f64, out: &mut [f32]) {
        // bilinear, zero outside the image; (x, y) in pixel-index coordinates
        let x0 = x.floor();
        let y0 = y.floor();
        let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
        let (x0, y0) = (x0 as i64, y0 as i64);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let (px, py) = (x0 + dx, y0 + dy);
                let w = wx * wy;
                if w == 0.0 || px < 0 || py < 0 || px >= self.width as i64 || py >= self.height as i64 {
                    continue;
                }
                let base = (py as usize * self.width + px as usize) * 6;
                for (o, v) in out.iter_mut().zip(&self.pixels[base..base + 6]) {
                    *o += w * v;
                }
            }
        }
    }
}

/// Affine map between crop coordinates and image coordinates:
/// `image = origin + crop * scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropMapping {
    pub origin_x: f64,
    pub origin_y: f64,
    pub scale: f64,
}

impl CropMapping {
    pub fn to_image(&self, b: &BBox) -> BBox {
        BBox {
            x: self.origin_x + b.x * self.scale,
            y: self.origin_y + b.y * self.scale,
            w: b.w * self.scale,
            h: b.h * self.scale,
        }
    }

    pub fn to_crop(&self, b: &BBox) -> BBox {
        BBox {
            x: (b.x - self.origin_x) / self.scale,
            y: (b.y - self.origin_y) / self.scale,
            w: b.w / self.scale,
            h: b.h / self.scale,
        }
    }
}

/// Samples a square region of side `side` centered on `(cx, cy)` into an
/// `out_size × out_size` unified input. Area outside the image is zero.
/// Returns the crop, the crop→image mapping and whether any padding was used.
pub fn crop_resize(
    input: &UnifiedInput,
    cx: f64,
    cy: f64,
    side: f64,
    out_size: usize,
) -> Result<(UnifiedInput, CropMapping, bool)> {
    if !(side > 0.0 && side.is_finite()) || out_size == 0 {
        return Err(Error::Parameter(format!("invalid crop side {side} / size {out_size}")));
    }
    let mapping = CropMapping {
        origin_x: cx - side / 2.0,
        origin_y: cy - side / 2.0,
        scale: side / out_size as f64,
    };
    let padded = mapping.origin_x < 0.0
        || mapping.origin_y < 0.0
        || mapping.origin_x + side > input.width as f64
        || mapping.origin_y + side > input.height as f64;

    let mut pixels = vec![0.0f32; out_size * out_size * 6];
    for v in 0..out_size {
        let y = mapping.origin_y + (v as f64 + 0.5) * mapping.scale - 0.5;
        for u in 0..out_size {
            let x = mapping.origin_x + (u as f64 + 0.5) * mapping.scale - 0.5;
            let base = (v * out_size + u) * 6;
            input.sample(x, y, &mut pixels[base..base + 6]);
        }
    }
    Ok((
        UnifiedInput { width: out_size, height: out_size, pixels, modality: input.modality },
        mapping,
        padded,
    ))
}
