use std::path::Path;

use image::GrayImage;

use crate::DataError;

/// A `{0,1}` mask stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl BinaryImage {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryImage {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    /// Any nonzero value becomes 1.
    pub fn from_values(height: usize, width: usize, values: &[u8]) -> Result<Self, DataError> {
        if values.len() != height * width {
            return Err(DataError::Invalid(format!(
                "{} pixel values for a {height}x{width} image",
                values.len()
            )));
        }
        Ok(BinaryImage {
            height,
            width,
            pixels: values.iter().map(|&v| u8::from(v > 0)).collect(),
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut img = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                img.pixels[y * width + x] = u8::from(f(y, x));
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

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.pixels[y * self.width + x] = u8::from(on);
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    /// Inclusive-exclusive `(y0, y1, x0, x1)` of the foreground, if any.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    y0 = y0.min(y);
                    y1 = y1.max(y + 1);
                    x0 = x0.min(x);
                    x1 = x1.max(x + 1);
                }
            }
        }
        (y0 != usize::MAX).then_some((y0, y1, x0, x1))
    }

    /// Number of differing pixels. Panics on a size mismatch.
    pub fn diff_count(&self, other: &BinaryImage) -> usize {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "image sizes differ"
        );
        self.pixels
            .iter()
            .zip(&other.pixels)
            .filter(|(a, b)| a != b)
            .count()
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) {
                255
            } else {
                0
            }])
        })
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        BinaryImage {
            height: h,
            width: w,
            pixels: img.as_raw().iter().map(|&v| u8::from(v > 0)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let img = image::open(path).map_err(|e| DataError::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Ok(Self::from_gray(&img.to_luma8()))
    }

    /// Write as PNG (or PGM for a `.pgm` extension).
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        self.to_gray().save(path).map_err(|e| DataError::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarizes_any_nonzero() {
        let img = BinaryImage::from_values(1, 3, &[0, 128, 255]).unwrap();
        assert_eq!(img.pixels(), &[0, 1, 1]);
    }

    #[test]
    fn bounding_box_of_blob() {
        let img = BinaryImage::from_fn(10, 8, |y, x| (2..5).contains(&y) && (3..7).contains(&x));
        assert_eq!(img.bounding_box(), Some((2, 5, 3, 7)));
        assert_eq!(BinaryImage::new(4, 4).bounding_box(), None);
    }

    #[test]
    fn png_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = BinaryImage::from_fn(6, 5, |y, x| (x + y) % 3 == 0);
        for name in ["a.png", "a.pgm"] {
            let p = dir.path().join(name);
            img.save(&p).unwrap();
            assert_eq!(BinaryImage::load(&p).unwrap(), img);
        }
    }
}
