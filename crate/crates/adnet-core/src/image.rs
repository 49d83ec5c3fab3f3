//! Floating-point image buffer in [0,1] with PNG I/O and tensor conversion.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// H x W x C image, interleaved row-major, values in [0,1]. C is 1 or 3.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::dimension("image channels", &[channels], "1 or 3"));
        }
        if data.len() != height * width * channels {
            return Err(Error::dimension(
                "image data",
                &[data.len()],
                format!("{}x{}x{} = {}", height, width, channels, height * width * channels),
            ));
        }
        Ok(ImageBuffer {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| *v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Luma grayscale (0.299 R + 0.587 G + 0.114 B); identity for 1-channel.
    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = vec![0.0f32; self.height * self.width];
        for i in 0..self.height * self.width {
            let r = self.data[i * 3];
            let g = self.data[i * 3 + 1];
            let b = self.data[i * 3 + 2];
            out[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        }
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 1,
            data: out,
        }
    }

    /// Replicate a single channel into RGB; identity for 3-channel.
    pub fn expand3(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let mut out = vec![0.0f32; self.height * self.width * 3];
        for i in 0..self.height * self.width {
            out[i * 3] = self.data[i];
            out[i * 3 + 1] = self.data[i];
            out[i * 3 + 2] = self.data[i];
        }
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 3,
            data: out,
        }
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// (1, C, H, W) tensor view of the image.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let hw = self.height * self.width;
        let mut out = vec![T::ZERO; self.channels * hw];
        for c in 0..self.channels {
            for i in 0..hw {
                out[c * hw + i] = T::from_f64(self.data[i * self.channels + c] as f64);
            }
        }
        Tensor::constant(out, &[1, self.channels, self.height, self.width])
            .expect("image tensor shape")
    }

    /// First batch element of a (1, C, H, W) tensor, clamped to [0,1].
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<ImageBuffer> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 || (s[1] != 1 && s[1] != 3) {
            return Err(Error::dimension("from_tensor", &s, "(1, 1|3, H, W)"));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let hw = h * w;
        let d = t.data();
        let mut out = vec![0.0f32; c * hw];
        for ci in 0..c {
            for i in 0..hw {
                out[i * c + ci] = (d[ci * hw + i].to_f64() as f32).clamp(0.0, 1.0);
            }
        }
        ImageBuffer::new(h, w, c, out)
    }

    /// Reflect-pad (mirror, edge not repeated) on the bottom/right so both
    /// extents become multiples of `m`. Returns the padded image and the
    /// original extents for a later [`ImageBuffer::crop`].
    pub fn pad_to_multiple(&self, m: usize) -> Result<(ImageBuffer, usize, usize)> {
        let ph = (m - self.height % m) % m;
        let pw = (m - self.width % m) % m;
        if ph >= self.height || pw >= self.width {
            return Err(Error::dimension(
                "pad_to_multiple",
                &[self.height, self.width],
                format!("extents > padding ({}, {})", ph, pw),
            ));
        }
        if ph == 0 && pw == 0 {
            return Ok((self.clone(), self.height, self.width));
        }
        let (nh, nw) = (self.height + ph, self.width + pw);
        let mut out = ImageBuffer::zeros(nh, nw, self.channels)?;
        for y in 0..nh {
            let sy = if y < self.height { y } else { 2 * self.height - 2 - y };
            for x in 0..nw {
                let sx = if x < self.width { x } else { 2 * self.width - 2 - x };
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(sy, sx, c));
                }
            }
        }
        Ok((out, self.height, self.width))
    }

    pub fn crop(&self, h: usize, w: usize) -> Result<ImageBuffer> {
        self.crop_at(0, 0, h, w)
    }

    pub fn crop_at(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImageBuffer> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::dimension(
                "crop",
                &[y0 + h, x0 + w],
                format!("within {}x{}", self.height, self.width),
            ));
        }
        let mut out = ImageBuffer::zeros(h, w, self.channels)?;
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(y0 + y, x0 + x, c));
                }
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> ImageBuffer {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> ImageBuffer {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(self.height - 1 - y, x, c));
                }
            }
        }
        out
    }

    /// Rotate 90 degrees counterclockwise; square images only.
    pub fn rot90(&self) -> Result<ImageBuffer> {
        if self.height != self.width {
            return Err(Error::dimension(
                "rot90",
                &[self.height, self.width],
                "square image",
            ));
        }
        let n = self.height;
        let mut out = self.clone();
        for y in 0..n {
            for x in 0..n {
                for c in 0..self.channels {
                    out.set(n - 1 - x, y, c, self.get(y, x, c));
                }
            }
        }
        Ok(out)
    }

    pub fn load_png(path: &Path) -> Result<ImageBuffer> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Environment(format!("cannot read {}: {}", path.display(), e)))?;
        Self::decode_png(&bytes)
            .map_err(|e| Error::Environment(format!("cannot decode {}: {}", path.display(), e)))
    }

    /// Decode PNG (or any supported raster) bytes into [0,1] floats.
    pub fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| Error::Format { offset: 0, message: format!("image decode: {}", e) })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w == 0 || h == 0 {
            return Err(Error::Format { offset: 0, message: "empty image".into() });
        }
        match img.color().channel_count() {
            1 | 2 => {
                let gray = img.to_luma8();
                let data: Vec<f32> = gray.as_raw().iter().map(|v| *v as f32 / 255.0).collect();
                ImageBuffer::new(h, w, 1, data)
            }
            _ => {
                let rgb = img.to_rgb8();
                let data: Vec<f32> = rgb.as_raw().iter().map(|v| *v as f32 / 255.0).collect();
                ImageBuffer::new(h, w, 3, data)
            }
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.channels {
            1 => {
                let raw: Vec<u8> = self.data.iter().map(|v| quant(*v)).collect();
                let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
                    .expect("image dims");
                img.save(path)
                    .map_err(|e| Error::Environment(format!("cannot write {}: {}", path.display(), e)))
            }
            _ => {
                let raw: Vec<u8> = self.data.iter().map(|v| quant(*v)).collect();
                let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
                    .expect("image dims");
                img.save(path)
                    .map_err(|e| Error::Environment(format!("cannot write {}: {}", path.display(), e)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip() {
        let data: Vec<f32> = (0..2 * 3 * 3).map(|i| (i as f32) / 20.0).collect();
        let img = ImageBuffer::new(2, 3, 3, data).unwrap();
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), vec![1, 3, 2, 3]);
        let back = ImageBuffer::from_tensor(&t).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn gray_luma_weights() {
        let img = ImageBuffer::new(1, 1, 3, vec![1.0, 0.5, 0.25]).unwrap();
        let g = img.to_gray();
        let expect = 0.299 + 0.587 * 0.5 + 0.114 * 0.25;
        assert!((g.get(0, 0, 0) - expect).abs() < 1e-6);
    }

    #[test]
    fn pad_to_multiple_and_crop_inverse() {
        let data: Vec<f32> = (0..10 * 11).map(|i| (i % 7) as f32 / 7.0).collect();
        let img = ImageBuffer::new(10, 11, 1, data).unwrap();
        let (padded, h, w) = img.pad_to_multiple(8).unwrap();
        assert_eq!(padded.height() % 8, 0);
        assert_eq!(padded.width() % 8, 0);
        let back = padded.crop(h, w).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn png_roundtrip_of_binary_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bw.png");
        let mut img = ImageBuffer::zeros(8, 8, 1).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                img.set(y, x, 0, ((x + y) % 2) as f32);
            }
        }
        img.save_png(&path).unwrap();
        let back = ImageBuffer::load_png(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn decode_garbage_is_rejected() {
        assert!(matches!(
            ImageBuffer::decode_png(&[0x89, 0x50, 0x4e, 0x47, 0x00]),
            Err(Error::Format { .. })
        ));
    }
}
