//! Dense channel-major image tensors.
//!
//! All image data in the crate flows through [`Tensor`], stored as
//! `channels × height × width` in row-major order with `f64` samples.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "buffer of {} values cannot hold {channels}x{height}x{width}",
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

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Extracts channel `c` as a single-channel tensor.
    pub fn channel(&self, c: usize) -> Tensor {
        Tensor {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.plane(c).to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Samples channel `c` at a fractional position, clamping to the border.
    pub fn bilinear(&self, c: usize, y: f64, x: f64) -> f64 {
        let ymax = (self.height - 1) as f64;
        let xmax = (self.width - 1) as f64;
        let y = y.clamp(0.0, ymax);
        let x = x.clamp(0.0, xmax);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
        let bottom = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize using pixel-center alignment.
    pub fn resize(&self, height: usize, width: usize) -> Tensor {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Tensor::from_fn(self.channels, height, width, |c, y, x| {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            self.bilinear(c, src_y, src_x)
        })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Dimension(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Tensor::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, top + y, left + x)
        }))
    }

    /// Stacks single- or multi-channel tensors of equal spatial size.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("no tensors to concatenate".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::Dimension(format!(
                    "cannot stack {}x{} with {h}x{w}",
                    p.height, p.width
                )));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(channels, h, w, data)
    }

    pub fn load_png(path: &Path) -> Result<Tensor> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let t = match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                Tensor::from_fn(1, h as usize, w as usize, |_, y, x| {
                    g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
                })
            }
            _ => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                Tensor::from_fn(3, h as usize, w as usize, |c, y, x| {
                    rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
                })
            }
        };
        Ok(t)
    }

    /// Writes a 1- or 3-channel tensor as an 8-bit PNG, clamping to [0,1].
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => {
                let img: GrayImage =
                    ImageBuffer::from_fn(w, h, |x, y| Luma([q(self.get(0, y as usize, x as usize))]));
                img.save(path)
            }
            3 => {
                let img: RgbImage = ImageBuffer::from_fn(w, h, |x, y| {
                    let (x, y) = (x as usize, y as usize);
                    Rgb([q(self.get(0, y, x)), q(self.get(1, y, x)), q(self.get(2, y, x))])
                });
                img.save(path)
            }
            n => {
                return Err(Error::Dimension(format!(
                    "cannot write a {n}-channel tensor as PNG"
                )))
            }
        };
        res.map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
