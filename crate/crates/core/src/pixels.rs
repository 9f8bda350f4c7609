//! Real-valued RGB pixel grids and their 8-bit PNG representation.

use crate::error::Result;
use crate::tensor::Tensor;
use std::path::Path;

/// Channel-major `3 × H × W` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl PixelGrid {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), 3 * height * width, "pixel buffer size");
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Number of pixel locations where any channel differs.
    pub fn count_changed(&self, other: &PixelGrid) -> usize {
        assert_eq!((self.height, self.width), (other.height, other.width));
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (y, x)))
            .filter(|&(y, x)| (0..3).any(|c| self.get(c, y, x) != other.get(c, y, x)))
            .count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 3, self.height, self.width], self.data.clone())
    }

    /// Round to the nearest 8-bit level, as stored on disk.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            let (x, y) = (x as usize, y as usize);
            *px = image::Rgb([
                to_u8(self.get(0, y, x)),
                to_u8(self.get(1, y, x)),
                to_u8(self.get(2, y, x)),
            ]);
        }
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::filled(h, w, 0.0);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px.0[c] as f64 / 255.0);
            }
        }
        Ok(out)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Stack images into an `[N, 3, H, W]` tensor.
pub fn stack(images: &[&PixelGrid]) -> Tensor {
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        assert_eq!((img.height, img.width), (h, w), "stacked images differ in size");
        data.extend_from_slice(&img.data);
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}
