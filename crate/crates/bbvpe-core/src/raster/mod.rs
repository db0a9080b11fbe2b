//! In-memory RGB rasters and the image operations the prompt renderer needs:
//! decode/encode, Gaussian blur, crop, bilinear resize, and shape overlays.

use std::fmt;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

mod draw;
mod filter;

pub use draw::{draw_overlay, OverlayShape};
pub use filter::{gaussian_blur, resize_bilinear};

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("region ({x0},{y0})..({x1},{y1}) out of bounds for {width}x{height} image")]
    RegionOutOfBounds { x0: u32, y0: u32, x1: u32, y1: u32, width: u32, height: u32 },
    #[error("pixel buffer length {got} does not match {width}x{height}x3")]
    BufferSize { got: usize, width: u32, height: u32 },
    #[error("codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// An sRGB color with 8-bit channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Color {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl Color {
    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Color { r, g, b }
    }
}

/// An axis-aligned pixel rectangle: `x0,y0` inclusive, `x1,y1` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RectRegion {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl RectRegion {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        RectRegion { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    /// Checks that the region is non-empty and lies inside a `width`x`height` image.
    pub fn validate(&self, width: u32, height: u32) -> Result<(), RasterError> {
        if self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height {
            Ok(())
        } else {
            Err(RasterError::RegionOutOfBounds {
                x0: self.x0,
                y0: self.y0,
                x1: self.x1,
                y1: self.y1,
                width,
                height,
            })
        }
    }

    /// Smallest region covering both `self` and `other`.
    pub fn union(&self, other: &RectRegion) -> RectRegion {
        RectRegion {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// A row-major interleaved RGB8 image. Dimensions are always nonzero and the
/// pixel buffer length is exactly `width * height * 3`.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageRaster {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl fmt::Debug for ImageRaster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageRaster({}x{}, digest {})", self.width, self.height, &self.digest_hex()[..12])
    }
}

impl ImageRaster {
    /// Creates an image filled with `fill`.
    pub fn new(width: u32, height: u32, fill: Color) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::InvalidParameter("image dimensions must be nonzero".into()));
        }
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..(width as usize * height as usize) {
            pixels.extend_from_slice(&[fill.r, fill.g, fill.b]);
        }
        Ok(ImageRaster { width, height, pixels })
    }

    /// Wraps an existing interleaved RGB buffer.
    pub fn from_pixels(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::InvalidParameter("image dimensions must be nonzero".into()));
        }
        if pixels.len() != width as usize * height as usize * 3 {
            return Err(RasterError::BufferSize { got: pixels.len(), width, height });
        }
        Ok(ImageRaster { width, height, pixels })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn full_region(&self) -> RectRegion {
        RectRegion::new(0, 0, self.width, self.height)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.pixels
    }

    fn index(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn get(&self, x: u32, y: u32) -> Color {
        let i = self.index(x, y);
        Color::new(self.pixels[i], self.pixels[i + 1], self.pixels[i + 2])
    }

    pub fn set(&mut self, x: u32, y: u32, color: Color) {
        let i = self.index(x, y);
        self.pixels[i] = color.r;
        self.pixels[i + 1] = color.g;
        self.pixels[i + 2] = color.b;
    }

    /// SHA-256 over a dimension header plus the pixel bytes. Identifies the
    /// raster content everywhere a stable image reference is needed.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.width.to_le_bytes());
        hasher.update(self.height.to_le_bytes());
        hasher.update(&self.pixels);
        hasher.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }
}

/// Copies the pixels of `region` into a new image.
pub fn crop_region(img: &ImageRaster, region: &RectRegion) -> Result<ImageRaster, RasterError> {
    region.validate(img.width, img.height)?;
    let (w, h) = (region.width(), region.height());
    let mut pixels = Vec::with_capacity(w as usize * h as usize * 3);
    for y in region.y0..region.y1 {
        let start = img.index(region.x0, y);
        let end = img.index(region.x1 - 1, y) + 3;
        pixels.extend_from_slice(&img.pixels[start..end]);
    }
    ImageRaster::from_pixels(w, h, pixels)
}

/// Decodes a PNG or JPEG file.
pub fn load_image(path: &Path) -> Result<ImageRaster, RasterError> {
    let img = image::open(path)?.into_rgb8();
    ImageRaster::from_pixels(img.width(), img.height(), img.into_raw())
}

/// Decodes PNG or JPEG bytes.
pub fn decode_bytes(bytes: &[u8]) -> Result<ImageRaster, RasterError> {
    let img = image::load_from_memory(bytes)?.into_rgb8();
    ImageRaster::from_pixels(img.width(), img.height(), img.into_raw())
}

/// Encodes the image as a file; format follows the extension (`.png`, `.jpg`, `.jpeg`).
pub fn save_image(img: &ImageRaster, path: &Path) -> Result<(), RasterError> {
    to_buffer(img).save(path)?;
    Ok(())
}

/// Encodes the image as PNG bytes (lossless round-trip for RGB8).
pub fn encode_png(img: &ImageRaster) -> Result<Vec<u8>, RasterError> {
    let mut out = Vec::new();
    to_buffer(img).write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}

fn to_buffer(img: &ImageRaster) -> image::RgbImage {
    image::RgbImage::from_raw(img.width, img.height, img.pixels.clone())
        .expect("raster buffer length is validated at construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn gradient(width: u32, height: u32) -> ImageRaster {
        let mut img = ImageRaster::new(width, height, Color::new(0, 0, 0)).unwrap();
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, Color::new((x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x + y) * 29 % 256) as u8));
            }
        }
        img
    }

    #[test]
    fn constructors_reject_bad_shapes() {
        assert!(ImageRaster::new(0, 4, Color::new(0, 0, 0)).is_err());
        assert!(ImageRaster::from_pixels(2, 2, vec![0; 11]).is_err());
        assert!(ImageRaster::from_pixels(2, 2, vec![0; 12]).is_ok());
    }

    #[test]
    fn region_validation() {
        assert!(RectRegion::new(0, 0, 4, 4).validate(4, 4).is_ok());
        assert!(RectRegion::new(0, 0, 5, 4).validate(4, 4).is_err());
        assert!(RectRegion::new(2, 2, 2, 4).validate(4, 4).is_err());
        assert!(RectRegion::new(3, 1, 2, 4).validate(4, 4).is_err());
    }

    #[test]
    fn crop_copies_expected_pixels() {
        let img = gradient(4, 3);
        let out = crop_region(&img, &RectRegion::new(1, 0, 3, 2)).unwrap();
        assert_eq!((out.width(), out.height()), (2, 2));
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(out.get(x, y), img.get(x + 1, y));
            }
        }
        assert!(crop_region(&img, &RectRegion::new(1, 0, 5, 2)).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = gradient(5, 4);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.set(2, 2, Color::new(9, 9, 9));
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest_hex().len(), 64);
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let img = gradient(9, 7);
        let bytes = encode_png(&img).unwrap();
        let back = decode_bytes(&bytes).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn file_round_trip_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = gradient(6, 6);
        save_image(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }
}
