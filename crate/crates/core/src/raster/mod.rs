//! Pixel buffers, SVG rasterization and the edge-map pipeline.

mod edges;
mod render;
mod resample;

pub(crate) use edges::gaussian_kernel;
pub use edges::{canny_edges, canny_pipeline, dilate, gaussian_blur, EdgeParams};
pub use render::{render_svg, Rasterizer, RenderError, RenderSpec, ResvgRasterizer};
pub use resample::{resample_bilinear, resize_shortest_side};

use serde::{Deserialize, Serialize};
use std::io::Cursor;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("invalid image shape {width}x{height}x{channels}")]
    InvalidShape {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("data length {actual} does not match {expected}")]
    DataLength { expected: usize, actual: usize },
    #[error("pixel value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major image with values in `[0, 1]`, one or three channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, RasterError> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(RasterError::InvalidShape {
                width,
                height,
                channels,
            });
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(RasterError::DataLength {
                expected,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(RasterError::OutOfRange { index, value });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Every pixel set to `value` in every channel.
    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
        .expect("valid filled image")
    }

    pub fn filled_rgb(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(width, height, 3, |_, _, c| rgb[c])
    }

    /// Builds an image from `f(x, y, channel)`; values are clamped into `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(width, height, channels, data).expect("valid generated image")
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &RasterImage) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Single-channel images are returned unchanged.
    pub fn to_grayscale(&self) -> RasterImage {
        to_grayscale(self)
    }

    /// Replicates a gray image into three channels.
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

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, RasterError> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        let mut out = Vec::new();
        image::ImageEncoder::write_image(
            image::codecs::png::PngEncoder::new(&mut out),
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
        )?;
        Ok(out)
    }

    /// Decodes a PNG. Gray inputs stay single-channel; anything with alpha is
    /// composited over white.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, RasterError> {
        let decoded = image::ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Png)
            .decode()?;
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        match decoded {
            image::DynamicImage::ImageLuma8(g) => {
                let data = g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
                Self::new(w, h, 1, data)
            }
            other => {
                let rgba = other.into_rgba8();
                let mut data = Vec::with_capacity(w * h * 3);
                for px in rgba.pixels() {
                    let a = px[3] as f64 / 255.0;
                    for c in 0..3 {
                        data.push((px[c] as f64 / 255.0 * a + (1.0 - a)).clamp(0.0, 1.0));
                    }
                }
                Self::new(w, h, 3, data)
            }
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, RasterError> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }

    pub(crate) fn from_parts_unchecked(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        RasterImage {
            width,
            height,
            channels,
            data,
        }
    }
}

/// Rec. 601 luma: `0.299 R + 0.587 G + 0.114 B`.
pub fn to_grayscale(img: &RasterImage) -> RasterImage {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| (0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]).clamp(0.0, 1.0))
        .collect();
    RasterImage {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    }
}
