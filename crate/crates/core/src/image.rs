//! In-memory images with values in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    /// Row-major, channels interleaved.
    data: Vec<f32>,
}

impl Image {
    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::ChannelCount {
                expected: 1,
                found: channels,
            });
        }
        if width * height * channels != data.len() {
            return Err(Error::invalid(
                "image",
                format!(
                    "{width}x{height}x{channels} needs {} values, got {}",
                    width * height * channels,
                    data.len()
                ),
            ));
        }
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn gray(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(width, height, 1, data)
    }

    pub fn gray_from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::gray(width, height, data).expect("length matches by construction")
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
        .expect("length matches by construction")
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

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn is_gray(&self) -> bool {
        self.channels == 1
    }

    pub fn require_gray(&self) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::ChannelCount {
                expected: 1,
                found: self.channels,
            });
        }
        Ok(())
    }

    pub fn require_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                lhs: self.dims(),
                rhs: other.dims(),
            });
        }
        Ok(())
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Gray image as a `1 x 1 x H x W` tensor.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        self.require_gray()?;
        Tensor::new(
            &[1, 1, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
    }

    /// Stacks equally sized gray images into an `N x 1 x H x W` tensor.
    pub fn batch_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("batch_tensor", "empty batch"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            img.require_gray()?;
            first.require_same_dims(img)?;
            data.extend(img.data.iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::new(&[images.len(), 1, first.height, first.width], data)
    }

    /// Gray image from plane `index` of an `N x 1 x H x W` tensor; values
    /// are clamped into `[0, 1]`.
    pub fn from_tensor_plane<T: Real>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if c != 1 || index >= n {
            return Err(Error::invalid(
                "from_tensor_plane",
                format!("plane {index} of shape {:?}", t.shape()),
            ));
        }
        let plane = &t.data()[index * h * w..(index + 1) * h * w];
        Self::gray(
            w,
            h,
            plane.iter().map(|v| v.to_f64_lossy() as f32).collect(),
        )
    }

    /// Extracts channel `c` as a gray image.
    pub fn channel(&self, c: usize) -> Result<Image> {
        if c >= self.channels {
            return Err(Error::ChannelCount {
                expected: c + 1,
                found: self.channels,
            });
        }
        let data = self
            .data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect();
        Image::gray(self.width, self.height, data)
    }

    /// Interleaves three gray planes into an RGB image.
    pub fn from_planes(planes: [&Image; 3]) -> Result<Image> {
        for p in &planes {
            p.require_gray()?;
            planes[0].require_same_dims(p)?;
        }
        let (w, h) = planes[0].dims();
        let mut data = Vec::with_capacity(w * h * 3);
        for i in 0..w * h {
            for p in &planes {
                data.push(p.data[i]);
            }
        }
        Image::new(w, h, 3, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_clamped() {
        let img = Image::gray(2, 1, vec![-0.5, 1.5]).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_channel_count_and_length() {
        assert!(Image::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(Image::gray(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn planes_round_trip() {
        let rgb = Image::new(2, 1, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let planes: Vec<Image> = (0..3).map(|c| rgb.channel(c).unwrap()).collect();
        assert_eq!(planes[1].data(), &[0.2, 0.5]);
        let back = Image::from_planes([&planes[0], &planes[1], &planes[2]]).unwrap();
        assert_eq!(back, rgb);
    }

    #[test]
    fn tensor_layout_is_row_major() {
        let img = Image::gray_from_fn(3, 2, |x, y| (y * 3 + x) as f32 / 10.0);
        let t = img.to_tensor::<f32>().unwrap();
        assert_eq!(t.shape(), &[1, 1, 2, 3]);
        assert_eq!(Image::from_tensor_plane(&t, 0).unwrap(), img);
    }
}
