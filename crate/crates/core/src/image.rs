//! RGB images and binary masks with 8-bit PNG storage.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{ProcapError, Result};

/// `H x W x 3` image with channel values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(height, width);
        for px in img.data.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(ProcapError::DimensionMismatch(format!(
                "image buffer of {} values for {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                img.set(y, x, f(y, x));
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_valid(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Round every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect() }
    }

    /// Bilinear resample to a new size (pixel-centre aligned).
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if [height, width] == self.dims() {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Self::from_fn(height, width, |y, x| {
            self.sample_bilinear((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy)
        })
    }

    /// Bilinear sample at continuous coordinates `(u, v)` where pixel
    /// `(x, y)` covers `[x, x+1) x [y, y+1)`; neighbours clamp to the edge.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> [f64; 3] {
        let fx = (u - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (v - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let (a, b, c, d) = (self.pixel(y0, x0), self.pixel(y0, x1), self.pixel(y1, x0), self.pixel(y1, x1));
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = a[k] * (1.0 - tx) + b[k] * tx;
            let bot = c[k] * (1.0 - tx) + d[k] * tx;
            out[k] = top * (1.0 - ty) + bot * ty;
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(y, x);
                img.put_pixel(x as u32, y as u32, Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]));
            }
        }
        img.save(path).map_err(|e| image_err(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(ProcapError::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Self::from_vec(h, w, data)
    }
}

/// `H x W` map with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x) as u8;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        });
        img.save(path).map_err(|e| image_err(path, e))
    }

    /// Load a single-channel mask; every value must be 0 or 255.
    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(ProcapError::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut m = Self::new(h, w);
        for (i, &v) in img.as_raw().iter().enumerate() {
            match v {
                0 => {}
                255 => m.data[i] = 1,
                other => {
                    return Err(ProcapError::MaskNotBinary { path: path.to_path_buf(), value: other as f64 / 255.0 })
                }
            }
        }
        Ok(m)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_err(path: &Path, e: image::ImageError) -> ProcapError {
    match e {
        image::ImageError::IoError(io) => ProcapError::io(path, io),
        other => ProcapError::Image { path: path.to_path_buf(), message: other.to_string() },
    }
}
