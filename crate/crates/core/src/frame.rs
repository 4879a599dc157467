use std::path::Path;

use vdeblur_autograd::{Real, Tensor};

use crate::error::{Error, Result};

/// One RGB image with planar `f32` channels, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Frame {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; Self::CHANNELS * width * height] }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, data: vec![value; Self::CHANNELS * width * height] }
    }

    /// Builds a frame from a function of `(channel, x, y)`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut frame = Self::new(width, height);
        for c in 0..Self::CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    frame.data[(c * height + y) * width + x] = f(c, x, y);
                }
            }
        }
        frame
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * width * height {
            return Err(Error::Dimension(format!(
                "{} values cannot form a {width}x{height} RGB frame",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &Frame) -> bool {
        self.dims() == other.dims()
    }

    pub fn ensure_same_dims(&self, other: &Frame, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn clamped(&self) -> Frame {
        Frame { width: self.width, height: self.height, data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Rec. 601 luma, used by the flow estimator.
    pub fn luma(&self) -> Vec<f32> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter().zip(g).zip(b).map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b).collect()
    }

    pub fn max_abs_diff(&self, other: &Frame) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn mean_abs_diff(&self, other: &Frame) -> f64 {
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| f64::from((a - b).abs())).sum();
        s / self.data.len() as f64
    }

    pub fn mse(&self, other: &Frame) -> f64 {
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| f64::from(a - b).powi(2)).sum();
        s / self.data.len() as f64
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Frame {
        Frame {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect(),
        }
    }

    /// `[1, 3, h, w]` tensor view of the frame.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, Self::CHANNELS, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(f64::from(v))).collect(),
        )
        .expect("frame buffer matches its shape")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Frame> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != Self::CHANNELS {
            return Err(Error::Dimension(format!("tensor {:?} is not a single RGB frame", t.shape())));
        }
        Ok(Frame { width: w, height: h, data: t.data().iter().map(|v| v.as_f64() as f32).collect() })
    }

    pub fn load_png(path: &Path) -> Result<Frame> {
        let img = image::open(path)
            .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut frame = Frame::new(w, h);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..Self::CHANNELS {
                frame.set(c, x as usize, y as usize, f32::from(px[c]) / 255.0);
            }
        }
        Ok(frame)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        });
        img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
    }
}

/// Writes a single-channel map (values in `[0, 1]`) as a grayscale PNG.
pub fn save_gray_png(width: usize, height: usize, values: &[f32], path: &Path) -> Result<()> {
    let img = image::GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([(values[y as usize * width + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let f = Frame::from_fn(5, 4, |c, x, y| (c * 20 + y * 5 + x) as f32 / 60.0);
        let t = f.to_tensor::<f64>();
        assert_eq!(t.shape(), [1, 3, 4, 5]);
        assert_eq!(Frame::from_tensor(&t).unwrap(), f);
    }

    #[test]
    fn quantization_error_bounded() {
        let f = Frame::from_fn(7, 3, |c, x, y| ((c + 3 * x + 11 * y) as f32 * 0.0137).fract());
        assert!(f.quantized().max_abs_diff(&f) <= 0.5 / 255.0 + 1e-7);
    }

    #[test]
    fn from_planar_checks_length() {
        assert!(Frame::from_planar(2, 2, vec![0.0; 11]).is_err());
    }
}
