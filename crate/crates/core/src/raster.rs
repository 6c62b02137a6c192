//! Frames, masks and the resampling helpers shared by every model.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::nn::FeatureMap;

pub const MIN_SIDE: usize = 16;
pub const MAX_LONG_SIDE: usize = 1920;
pub const MAX_SHORT_SIDE: usize = 1080;
pub const DEFAULT_MASK_THRESHOLD: u8 = 128;

/// An 8-bit RGB raster, row-major, three interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::InvalidFrame(format!(
                "{width}x{height} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if width.max(height) > MAX_LONG_SIDE || width.min(height) > MAX_SHORT_SIDE {
            return Err(Error::InvalidFrame(format!(
                "{width}x{height} exceeds {MAX_LONG_SIDE}x{MAX_SHORT_SIDE}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::InvalidFrame(format!(
                "expected {} RGB bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, rgb.repeat(width * height))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        Self::new(img.width() as usize, img.height() as usize, img.into_raw())
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("validated dimensions");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_png(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }

    /// Bilinear resample to `size × size`, channels scaled to `[-1, 1]`.
    pub fn to_feature_map(&self, size: usize) -> FeatureMap {
        let n = self.width * self.height;
        let mut data = Vec::with_capacity(3 * size * size);
        for c in 0..3 {
            let plane: Vec<f32> = (0..n).map(|i| self.pixels[i * 3 + c] as f32).collect();
            let resized = resize_bilinear(&plane, self.width, self.height, size, size);
            data.extend(resized.into_iter().map(|v| v / 127.5 - 1.0));
        }
        FeatureMap::from_vec(3, size, size, data)
    }

    /// Copy of this frame with every pixel where `keep` is false replaced by `fill`.
    pub fn masked(&self, keep: &Mask, fill: [u8; 3]) -> Result<Frame> {
        check_dims(self.dims(), keep.dims())?;
        let mut out = self.clone();
        for (i, on) in keep.binary().into_iter().enumerate() {
            if !on {
                out.pixels[i * 3..i * 3 + 3].copy_from_slice(&fill);
            }
        }
        Ok(out)
    }
}

/// Single-channel region map aligned to a frame; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    values: Vec<u8>,
    threshold: u8,
}

impl Mask {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "mask expects {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            threshold: DEFAULT_MASK_THRESHOLD,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0; width * height],
            threshold: DEFAULT_MASK_THRESHOLD,
        }
    }

    pub fn from_binary(width: usize, height: usize, on: &[bool]) -> Result<Self> {
        Self::new(width, height, on.iter().map(|&b| if b { 255 } else { 0 }).collect())
    }

    /// Probabilities in `[0, 1]` scaled to bytes; binarizes at 0.5.
    pub fn from_probabilities(width: usize, height: usize, probs: &[f32]) -> Result<Self> {
        Self::new(
            width,
            height,
            probs
                .iter()
                .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        )
    }

    pub fn with_threshold(mut self, threshold: u8) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn threshold(&self) -> u8 {
        self.threshold
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.values[y * self.width + x] = v;
    }

    pub fn binary(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v >= self.threshold).collect()
    }

    pub fn area(&self) -> usize {
        self.values.iter().filter(|&&v| v >= self.threshold).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Binary 0/1 plane resampled to `size × size`.
    pub fn to_plane(&self, size: usize) -> Vec<f32> {
        let plane: Vec<f32> = self
            .binary()
            .into_iter()
            .map(|b| if b { 1.0 } else { 0.0 })
            .collect();
        if self.width == size && self.height == size {
            return plane;
        }
        resize_bilinear(&plane, self.width, self.height, size, size)
            .into_iter()
            .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
            .collect()
    }

    /// Shift the binary content by `(dx, dy)`; pixels moved off-canvas are dropped.
    pub fn translated(&self, dx: isize, dy: isize) -> Mask {
        let mut out = Mask::empty(self.width, self.height).with_threshold(self.threshold);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(x, y);
                if v == 0 {
                    continue;
                }
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height {
                    out.set(nx as usize, ny as usize, v);
                }
            }
        }
        out
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        Self::new(img.width() as usize, img.height() as usize, img.into_raw())
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, self.values.clone())
            .expect("validated dimensions");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_png(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }
}

pub(crate) fn check_dims(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    assert_eq!(src.len(), sw * sh);
    if sw == dw && sh == dh {
        return src.to_vec();
    }
    let axis = |d: usize, s: usize| -> Vec<(usize, usize, f32)> {
        let scale = s as f32 / d as f32;
        (0..d)
            .map(|i| {
                let pos = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (s - 1) as f32);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(s - 1);
                (lo, hi, pos - lo as f32)
            })
            .collect()
    };
    let xs = axis(dw, sw);
    let ys = axis(dh, sh);
    let mut out = Vec::with_capacity(dw * dh);
    for &(y0, y1, fy) in &ys {
        let r0 = &src[y0 * sw..][..sw];
        let r1 = &src[y1 * sw..][..sw];
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}
