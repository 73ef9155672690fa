//! Frames and masks: planar `f32` images plus 8-bit PNG storage.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Planar (`c×h×w`) float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Invalid(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            [1, self.channels, self.height, self.width],
            self.data
                .iter()
                .map(|&v| T::from_f64_lossy(v as f64))
                .collect(),
        )
        .expect("image dims")
    }

    /// Batch entry `index` of a `[n,c,h,w]` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Self {
        let [_, c, h, w] = t.shape();
        let len = c * h * w;
        Self {
            channels: c,
            height: h,
            width: w,
            data: t.data()[index * len..(index + 1) * len]
                .iter()
                .map(|v| v.as_f64() as f32)
                .collect(),
        }
    }

    fn to_u8(v: f32) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    fn encode_png(&self) -> Result<Vec<u8>> {
        let (h, w) = (self.height as u32, self.width as u32);
        let mut out = Cursor::new(Vec::new());
        let plane = self.height * self.width;
        let res = match self.channels {
            1 => GrayImage::from_fn(w, h, |x, y| {
                image::Luma([Self::to_u8(self.data[y as usize * self.width + x as usize])])
            })
            .write_to(&mut out, ImageFormat::Png),
            3 => RgbImage::from_fn(w, h, |x, y| {
                let i = y as usize * self.width + x as usize;
                image::Rgb([
                    Self::to_u8(self.data[i]),
                    Self::to_u8(self.data[plane + i]),
                    Self::to_u8(self.data[2 * plane + i]),
                ])
            })
            .write_to(&mut out, ImageFormat::Png),
            c => return Err(Error::Invalid(format!("cannot store {c}-channel image"))),
        };
        res.map_err(|source| Error::Image {
            path: "<memory>".into(),
            source,
        })?;
        Ok(out.into_inner())
    }

    fn decode_png(bytes: &[u8], channels: usize, origin: &Path) -> Result<Self> {
        let img =
            image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|source| {
                Error::Image {
                    path: origin.to_path_buf(),
                    source,
                }
            })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = match channels {
            1 => img
                .to_luma8()
                .into_raw()
                .into_iter()
                .map(|v| v as f32 / 255.0)
                .collect(),
            3 => {
                let raw = img.to_rgb8().into_raw();
                let mut planar = vec![0.0; 3 * h * w];
                for (i, px) in raw.chunks_exact(3).enumerate() {
                    for c in 0..3 {
                        planar[c * h * w + i] = px[c] as f32 / 255.0;
                    }
                }
                planar
            }
            c => return Err(Error::Invalid(format!("cannot load {c}-channel image"))),
        };
        Image::new(channels, h, w, data)
    }

    fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    fn read_png(path: &Path, channels: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes, channels, path)
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Self {
        Self {
            data: self
                .data
                .iter()
                .map(|&v| Self::to_u8(v) as f32 / 255.0)
                .collect(),
            ..self.clone()
        }
    }
}

macro_rules! planar_newtype {
    ($name:ident, $channels:expr) => {
        impl $name {
            pub fn height(&self) -> usize {
                self.0.height
            }

            pub fn width(&self) -> usize {
                self.0.width
            }

            pub fn dims(&self) -> (usize, usize) {
                self.0.dims()
            }

            pub fn data(&self) -> &[f32] {
                &self.0.data
            }

            pub fn image(&self) -> &Image {
                &self.0
            }

            pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
                self.0.to_tensor()
            }

            pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
                self.0.encode_png()
            }

            pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
                self.0.write_png(path.as_ref())
            }

            pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
                Self::try_from_image(Image::decode_png(bytes, $channels, Path::new("<memory>"))?)
            }

            pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
                Self::try_from_image(Image::read_png(path.as_ref(), $channels)?)
            }
        }
    };
}

/// RGB video frame, values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame(Image);

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Ok(Self(Image::new(3, height, width, data)?))
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self(Image {
            channels: 3,
            height,
            width,
            data: vec![value; 3 * height * width],
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self(Image {
            channels: 3,
            height,
            width,
            data,
        })
    }

    pub fn try_from_image(image: Image) -> Result<Self> {
        if image.channels != 3 {
            return Err(Error::Invalid(format!(
                "frame needs 3 channels, got {}",
                image.channels
            )));
        }
        if image.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("frame".into()));
        }
        Ok(Self(image))
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<Self> {
        Self::try_from_image(Image::from_tensor(t, index))
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.0.at(c, y, x)
    }

    pub fn quantized(&self) -> Self {
        Self(self.0.quantized())
    }

    pub fn into_data(self) -> Vec<f32> {
        self.0.data
    }
}

planar_newtype!(Frame, 3);

/// Binary corruption mask (`1` marks corrupted pixels).
#[derive(Clone, Debug, PartialEq)]
pub struct Mask(Image);

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid("mask values must be 0 or 1".into()));
        }
        Ok(Self(Image::new(1, height, width, data)?))
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self(Image {
            channels: 1,
            height,
            width,
            data: vec![0.0; height * width],
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self(Image {
            channels: 1,
            height,
            width,
            data: vec![1.0; height * width],
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(if f(y, x) { 1.0 } else { 0.0 });
            }
        }
        Self(Image {
            channels: 1,
            height,
            width,
            data,
        })
    }

    /// Accepts a one-channel image; values at or above one half become `1`.
    pub fn try_from_image(image: Image) -> Result<Self> {
        if image.channels != 1 {
            return Err(Error::Invalid(format!(
                "mask needs 1 channel, got {}",
                image.channels
            )));
        }
        let data = image
            .data
            .iter()
            .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
            .collect();
        Ok(Self(Image { data, ..image }))
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.0.data[y * self.0.width + x] == 1.0
    }

    pub fn count(&self) -> usize {
        self.0.data.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.0.data.len().max(1) as f64
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

planar_newtype!(Mask, 1);

/// Soft blending weights in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMask(Image);

impl AlphaMask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::try_from_image(Image::new(1, height, width, data)?)
    }

    pub fn try_from_image(image: Image) -> Result<Self> {
        if image.channels != 1 {
            return Err(Error::Invalid("alpha needs 1 channel".into()));
        }
        if image.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("alpha values must lie in [0,1]".into()));
        }
        Ok(Self(image))
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.0.data[y * self.0.width + x]
    }

    pub fn quantized(&self) -> Self {
        Self(self.0.quantized())
    }
}

planar_newtype!(AlphaMask, 1);

/// Network mask output before binarization, values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask(Image);

impl SoftMask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::try_from_image(Image::new(1, height, width, data)?)
    }

    pub fn try_from_image(image: Image) -> Result<Self> {
        if image.channels != 1 {
            return Err(Error::Invalid("soft mask needs 1 channel".into()));
        }
        if image.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("soft mask values must lie in [0,1]".into()));
        }
        Ok(Self(image))
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<Self> {
        Self::try_from_image(Image::from_tensor(t, index))
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.0.data[y * self.0.width + x]
    }
}

planar_newtype!(SoftMask, 1);

impl From<&Mask> for SoftMask {
    fn from(m: &Mask) -> Self {
        Self(m.0.clone())
    }
}
