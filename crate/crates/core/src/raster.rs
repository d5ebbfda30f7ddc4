//! Dense 8-bit images shared by the tile, feature and SIFT pipelines.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("pixel buffer has {actual} bytes, expected {expected}")]
    BadLength { expected: usize, actual: usize },
    #[error("channel count {0} not supported (1 or 3)")]
    BadChannels(u8),
    #[error("crop {x},{y} {width}x{height} outside {img_width}x{img_height} image")]
    CropOutOfBounds {
        x: u32,
        y: u32,
        width: u32,
        height: u32,
        img_width: u32,
        img_height: u32,
    },
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("image encode failed: {0}")]
    Encode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RasterError {
    pub fn kind(&self) -> &'static str {
        match self {
            RasterError::BadLength { .. } => "BadLength",
            RasterError::BadChannels(_) => "BadChannels",
            RasterError::CropOutOfBounds { .. } => "CropOutOfBounds",
            RasterError::Decode(_) => "DecodeError",
            RasterError::Encode(_) => "EncodeError",
            RasterError::Io(_) => "IoError",
        }
    }
}

/// Row-major `u8` image with one (gray) or three (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self, RasterError> {
        if channels != 1 && channels != 3 {
            return Err(RasterError::BadChannels(channels));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(RasterError::BadLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, pixel: &[u8]) -> Result<Self, RasterError> {
        let channels = pixel.len() as u8;
        if channels != 1 && channels != 3 {
            return Err(RasterError::BadChannels(channels));
        }
        let data = pixel
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * channels as usize)
            .collect();
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_gray_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> u8) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
        }
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

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    /// Channel values of pixel `(x, y)`.
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.data[i..i + c]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, value: &[u8]) {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        self.data[i..i + c].copy_from_slice(value);
    }

    /// ITU-R 601 luminance `0.299 R + 0.587 G + 0.114 B` of every pixel,
    /// unrounded. Gray images are returned as-is.
    pub fn luminance(&self) -> Vec<f64> {
        match self.channels {
            1 => self.data.iter().map(|&v| f64::from(v)).collect(),
            _ => self
                .data
                .chunks_exact(3)
                .map(|p| {
                    0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
                })
                .collect(),
        }
    }

    pub fn to_gray(&self) -> RasterImage {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .luminance()
            .into_iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn to_rgb(&self) -> RasterImage {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    pub fn crop(
        &self,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    ) -> Result<RasterImage, RasterError> {
        if x.checked_add(width).is_none_or(|r| r > self.width)
            || y.checked_add(height).is_none_or(|b| b > self.height)
        {
            return Err(RasterError::CropOutOfBounds {
                x,
                y,
                width,
                height,
                img_width: self.width,
                img_height: self.height,
            });
        }
        let c = self.channels as usize;
        let mut data = Vec::with_capacity(width as usize * height as usize * c);
        for row in y..y + height {
            let start = (row as usize * self.width as usize + x as usize) * c;
            data.extend_from_slice(&self.data[start..start + width as usize * c]);
        }
        Ok(RasterImage {
            width,
            height,
            channels: self.channels,
            data,
        })
    }

    /// Copies `src` into this image with its top-left corner at `(x, y)`,
    /// clipping whatever falls outside.
    pub fn paste(&mut self, src: &RasterImage, x: u32, y: u32) {
        let c = self.channels as usize;
        let src = if src.channels == self.channels {
            std::borrow::Cow::Borrowed(src)
        } else if self.channels == 3 {
            std::borrow::Cow::Owned(src.to_rgb())
        } else {
            std::borrow::Cow::Owned(src.to_gray())
        };
        let w = src.width.min(self.width.saturating_sub(x)) as usize;
        for row in 0..src.height.min(self.height.saturating_sub(y)) {
            let dst = ((y + row) as usize * self.width as usize + x as usize) * c;
            let s = row as usize * src.width as usize * c;
            self.data[dst..dst + w * c].copy_from_slice(&src.data[s..s + w * c]);
        }
    }

    /// Bilinear resample to `width × height`.
    pub fn resize(&self, width: u32, height: u32) -> RasterImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let dynamic = self.to_dynamic();
        let resized = dynamic.resize_exact(width, height, image::imageops::FilterType::Triangle);
        Self::from_dynamic(resized, self.channels == 1)
    }

    pub fn decode(bytes: &[u8]) -> Result<RasterImage, RasterError> {
        let img = image::load_from_memory(bytes).map_err(|e| RasterError::Decode(e.to_string()))?;
        Ok(Self::from_dynamic(img, false))
    }

    pub fn open(path: &Path) -> Result<RasterImage, RasterError> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes)
    }

    /// PNG encoding of the image.
    pub fn encode_png(&self) -> Result<Vec<u8>, RasterError> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_dynamic()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| RasterError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }

    fn to_dynamic(&self) -> DynamicImage {
        match self.channels {
            1 => DynamicImage::ImageLuma8(
                GrayImage::from_raw(self.width, self.height, self.data.clone())
                    .expect("length checked at construction"),
            ),
            _ => DynamicImage::ImageRgb8(
                RgbImage::from_raw(self.width, self.height, self.data.clone())
                    .expect("length checked at construction"),
            ),
        }
    }

    /// Decoded images are normalized to 8-bit RGB unless `keep_gray` is set
    /// and the source is already single channel.
    fn from_dynamic(img: DynamicImage, keep_gray: bool) -> RasterImage {
        if keep_gray {
            if let DynamicImage::ImageLuma8(g) = img {
                let (w, h) = g.dimensions();
                return RasterImage {
                    width: w,
                    height: h,
                    channels: 1,
                    data: g.into_raw(),
                };
            }
        }
        let rgb: ImageBuffer<Rgb<u8>, Vec<u8>> = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        RasterImage {
            width: w,
            height: h,
            channels: 3,
            data: rgb.into_raw(),
        }
    }
}

impl From<GrayImage> for RasterImage {
    fn from(img: ImageBuffer<Luma<u8>, Vec<u8>>) -> Self {
        let (w, h) = img.dimensions();
        RasterImage {
            width: w,
            height: h,
            channels: 1,
            data: img.into_raw(),
        }
    }
}
