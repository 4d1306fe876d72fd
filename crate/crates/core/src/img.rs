//! Planar float image and single-channel field buffers.
//!
//! `Image` stores channels-first (`[c][y][x]`) f32 data, the layout shared
//! with network tensors (batch size 1). Values are nominally in [0, 1];
//! 8-bit quantization happens only in the PNG codec helpers.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channels-first f32 image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut img = Image::zeros(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    img.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        img
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.channels == other.channels
            && self.height == other.height
            && self.width == other.width
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.channels, self.height, self.width]
    }

    /// View as an NCHW tensor with batch size 1.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("image buffer length matches its shape")
    }

    /// Take the first (only) batch element of an NCHW tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 {
            return Err(Error::invalid("Image::from_tensor", "batch size must be 1"));
        }
        Ok(Image {
            channels: c,
            height: h,
            width: w,
            data: t.data().to_vec(),
        })
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Image {
        assert!(y0 + h <= self.height && x0 + w <= self.width);
        Image::from_fn(self.channels, h, w, |c, y, x| self.at(c, y0 + y, x0 + x))
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &Image) -> Result<Image> {
        if !self.same_size(other) {
            return Err(Error::ShapeMismatch {
                op: "Image::add",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn scale(&self, factor: f32) -> Image {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Grow to 3 channels by replication (used for grayscale inputs).
    pub fn promote_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image::from_fn(3, self.height, self.width, |_, y, x| self.at(0, y, x))
    }

    /// Replicate-pad on the bottom/right so both dimensions become multiples
    /// of `align`. Returns the padded image and the original size.
    pub fn pad_to_multiple(&self, align: usize) -> (Image, usize, usize) {
        let h = self.height.div_ceil(align) * align;
        let w = self.width.div_ceil(align) * align;
        if h == self.height && w == self.width {
            return (self.clone(), self.height, self.width);
        }
        let padded = Image::from_fn(self.channels, h, w, |c, y, x| {
            self.at(c, y.min(self.height - 1), x.min(self.width - 1))
        });
        (padded, self.height, self.width)
    }
}

/// Single-channel f32 plane (depth maps, defocus maps).
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Field {
    pub fn zeros(height: usize, width: usize) -> Self {
        Field {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Field {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut out = Field::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                out.data[y * width + x] = f(y, x);
            }
        }
        out
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut f32 {
        &mut self.data[y * self.width + x]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// 8-bit quantization used when images hit disk: round(clamp(v)·255).
#[inline]
pub fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
pub fn dequantize8(v: u8) -> f32 {
    v as f32 / 255.0
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    if img.channels != 3 && img.channels != 1 {
        return Err(Error::invalid(
            "write_png",
            format!("only 1- or 3-channel images supported, got {}", img.channels),
        ));
    }
    let w = img.width as u32;
    let h = img.height as u32;
    let mut out = image::RgbImage::new(w, h);
    for y in 0..img.height {
        for x in 0..img.width {
            let px = if img.channels == 3 {
                [
                    quantize8(img.at(0, y, x)),
                    quantize8(img.at(1, y, x)),
                    quantize8(img.at(2, y, x)),
                ]
            } else {
                let v = quantize8(img.at(0, y, x));
                [v, v, v]
            };
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out.save(path).map_err(|source| Error::Image {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_png(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|source| Error::Image {
        path: path.display().to_string(),
        source,
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Image::from_fn(3, h, w, |c, y, x| {
        dequantize8(rgb.get_pixel(x as u32, y as u32).0[c])
    }))
}
