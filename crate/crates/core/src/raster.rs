//! Lossless raster payloads (PNG) shared by prompts, sandbox results and trajectories.

use std::io::Cursor;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use image::{ImageFormat, ImageReader, Rgb, RgbImage};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("invalid base64 payload: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("undecodable image: {0}")]
    Decode(String),
    #[error("image has zero extent ({width}x{height})")]
    Empty { width: u32, height: u32 },
    #[error("declared {declared:?} but payload decodes to {actual:?}")]
    DimensionMismatch {
        declared: (u32, u32),
        actual: (u32, u32),
    },
}

/// An encoded PNG together with its pixel dimensions.
///
/// The payload is reference counted so cloning a raster into many trajectories
/// of the same group does not copy the bytes.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    png: Arc<[u8]>,
    width: u32,
    height: u32,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("bytes", &self.png.len())
            .finish()
    }
}

impl RasterImage {
    /// Wraps PNG bytes, reading dimensions from the header.
    pub fn from_png(bytes: impl Into<Arc<[u8]>>) -> Result<Self, RasterError> {
        let png: Arc<[u8]> = bytes.into();
        let (width, height) = ImageReader::with_format(Cursor::new(&png[..]), ImageFormat::Png)
            .into_dimensions()
            .map_err(|e| RasterError::Decode(e.to_string()))?;
        if width == 0 || height == 0 {
            return Err(RasterError::Empty { width, height });
        }
        Ok(Self { png, width, height })
    }

    /// Wraps PNG bytes and checks them against dimensions declared by a peer.
    pub fn from_png_declared(
        bytes: impl Into<Arc<[u8]>>,
        width: u32,
        height: u32,
    ) -> Result<Self, RasterError> {
        let image = Self::from_png(bytes)?;
        if (image.width, image.height) != (width, height) {
            return Err(RasterError::DimensionMismatch {
                declared: (width, height),
                actual: (image.width, image.height),
            });
        }
        Ok(image)
    }

    pub fn from_base64(encoded: &str) -> Result<Self, RasterError> {
        Self::from_png(BASE64.decode(encoded.trim())?)
    }

    /// A single-color image. Used by the fake sandbox and fixtures.
    pub fn solid(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let img = RgbImage::from_pixel(width.max(1), height.max(1), Rgb(rgb));
        Self::encode(&img)
    }

    fn encode(img: &RgbImage) -> Self {
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)
            .expect("PNG encoding into memory cannot fail");
        Self {
            png: out.into_inner().into(),
            width: img.width(),
            height: img.height(),
        }
    }

    /// Resamples to the requested size. Returns a clone when the size is unchanged.
    pub fn resized(&self, width: u32, height: u32) -> Result<Self, RasterError> {
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let decoded = image::load_from_memory_with_format(&self.png, ImageFormat::Png)
            .map_err(|e| RasterError::Decode(e.to_string()))?
            .to_rgb8();
        let resized = image::imageops::resize(
            &decoded,
            width.max(1),
            height.max(1),
            image::imageops::FilterType::Triangle,
        );
        Ok(Self::encode(&resized))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn png_bytes(&self) -> &[u8] {
        &self.png
    }

    pub fn to_base64(&self) -> String {
        BASE64.encode(&self.png)
    }
}

impl Serialize for RasterImage {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_base64())
    }
}

impl<'de> Deserialize<'de> for RasterImage {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let encoded = String::deserialize(d)?;
        RasterImage::from_base64(&encoded).map_err(serde::de::Error::custom)
    }
}
