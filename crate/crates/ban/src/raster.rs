//! Image rasters, class masks, and the bilinear resampling core.
//!
//! One bilinear routine serves every resize in the crate: input-resolution
//! adaptation for the frozen encoder, position-embedding interpolation,
//! the bridging residual resize, and head upsampling. Convention:
//! half-pixel centers (`src = (dst + 0.5) * in/out - 0.5`) with
//! clamp-to-edge, coordinates computed in f64. At equal sizes the weights
//! degenerate to (1, 0) on integer coordinates, so resizing to the native
//! resolution is bit-identical.

use ndarray::{Array2, Array3};
use std::path::Path;

use crate::error::{Error, Result};

/// An image as channels x height x width, f32 in [0, 1] for decoded files.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub data: Array3<f32>,
}

impl Raster {
    pub fn new(data: Array3<f32>) -> Self {
        Raster { data }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Raster {
            data: Array3::zeros((channels, height, width)),
        }
    }

    /// Decode an RGB image file into a [3, H, W] raster scaled to [0, 1].
    pub fn open(path: impl AsRef<Path>) -> Result<Raster> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((3, h as usize, w as usize));
        for (x, y, pixel) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c, y as usize, x as usize)] = pixel.0[c] as f32 / 255.0;
            }
        }
        Ok(Raster { data })
    }

    /// Encode to an RGB PNG, clamping to [0, 1].
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if self.channels() != 3 {
            return Err(Error::shape(format!(
                "raster save expects 3 channels, got {}",
                self.channels()
            )));
        }
        let (h, w) = (self.height(), self.width());
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|c| {
                    (self.data[(c, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8
                });
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// A single-channel class-index mask. 255 is reserved as ignore.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub data: Array2<u8>,
}

impl Mask {
    pub fn new(data: Array2<u8>) -> Self {
        Mask { data }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Mask> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let mut data = Array2::zeros((h as usize, w as usize));
        for (x, y, pixel) in img.enumerate_pixels() {
            data[(y as usize, x as usize)] = pixel.0[0];
        }
        Ok(Mask { data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w) = (self.height(), self.width());
        let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([self.data[(y as usize, x as usize)]])
        });
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Per-output-index taps for one axis of a bilinear resize: output index i
/// reads `w0*in[lo] + w1*in[hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisTap {
    pub lo: usize,
    pub hi: usize,
    pub w0: f32,
    pub w1: f32,
}

/// Half-pixel-center bilinear taps along one axis.
pub fn bilinear_axis_taps(in_len: usize, out_len: usize) -> Vec<AxisTap> {
    assert!(in_len >= 1 && out_len >= 1);
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = (i as f64 + 0.5) * scale - 0.5;
            let src = src.max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = (src - lo as f64).clamp(0.0, 1.0);
            AxisTap {
                lo,
                hi,
                w0: (1.0 - frac) as f32,
                w1: frac as f32,
            }
        })
        .collect()
}

/// Bilinear resize of a single plane to `out_h` x `out_w`.
pub fn resize_plane(plane: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (in_h, in_w) = plane.dim();
    if in_h == out_h && in_w == out_w {
        return plane.clone();
    }
    let rows = bilinear_axis_taps(in_h, out_h);
    let cols = bilinear_axis_taps(in_w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let r = rows[i];
        let c = cols[j];
        r.w0 * (c.w0 * plane[(r.lo, c.lo)] + c.w1 * plane[(r.lo, c.hi)])
            + r.w1 * (c.w0 * plane[(r.hi, c.lo)] + c.w1 * plane[(r.hi, c.hi)])
    })
}

/// Bilinear resize of a [C, H, W] volume, channel by channel.
pub fn resize_chw(vol: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, in_h, in_w) = vol.dim();
    if in_h == out_h && in_w == out_w {
        return vol.clone();
    }
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        let plane = vol.index_axis(ndarray::Axis(0), ch).to_owned();
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&resize_plane(&plane, out_h, out_w));
    }
    out
}

/// Resize a raster to `target` x `target` so the frozen encoder sees its
/// pretraining resolution while the change branch keeps the native crop.
/// Identity (same allocation contents, bit-exact) when already square at
/// the target size.
pub fn aris_resize(image: &Raster, target: usize) -> Result<Raster> {
    if target == 0 {
        return Err(Error::config("aris target resolution must be positive"));
    }
    if image.height() == 0 || image.width() == 0 {
        return Err(Error::shape("aris input raster has an empty dimension"));
    }
    Ok(Raster::new(resize_chw(&image.data, target, target)))
}
