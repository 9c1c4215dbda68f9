//! Paired augmentation: geometric transforms apply one sampled transform to
//! every tensor of a sample; photometric jitter touches images only, with
//! one parameter draw shared by both temporal phases.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::data::LoadedSample;
use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};

/// Photometric jitter ranges (segmentation-toolkit convention).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhotometricConfig {
    #[serde(default = "default_brightness")]
    pub brightness_delta: f32,
    #[serde(default = "default_contrast")]
    pub contrast_range: (f32, f32),
    #[serde(default = "default_contrast")]
    pub saturation_range: (f32, f32),
    #[serde(default = "default_hue")]
    pub hue_delta_deg: f32,
}

fn default_brightness() -> f32 {
    32.0 / 255.0
}

fn default_contrast() -> (f32, f32) {
    (0.5, 1.5)
}

fn default_hue() -> f32 {
    18.0
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        PhotometricConfig {
            brightness_delta: default_brightness(),
            contrast_range: default_contrast(),
            saturation_range: default_contrast(),
            hue_delta_deg: default_hue(),
        }
    }
}

/// Augmentation settings for one run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub crop_size: usize,
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
    #[serde(default)]
    pub photometric: Option<PhotometricConfig>,
}

fn default_flip_prob() -> f64 {
    0.5
}

fn crop_raster(r: &Raster, top: usize, left: usize, size: usize) -> Raster {
    Raster::new(
        r.data
            .slice(ndarray::s![.., top..top + size, left..left + size])
            .to_owned(),
    )
}

fn crop_mask(m: &Mask, top: usize, left: usize, size: usize) -> Mask {
    Mask::new(
        m.data
            .slice(ndarray::s![top..top + size, left..left + size])
            .to_owned(),
    )
}

/// Crop every tensor of the sample at one sampled offset so the pair stays
/// registered. A crop at the full image size is the identity at (0, 0).
pub fn random_crop_pair(
    sample: &LoadedSample,
    size: usize,
    rng: &mut ChaCha12Rng,
) -> Result<LoadedSample> {
    let (h, w) = (sample.t1.height(), sample.t1.width());
    if size == 0 || size > h || size > w {
        return Err(Error::config(format!(
            "crop size {size} does not fit a {h}x{w} image"
        )));
    }
    let top = if h == size { 0 } else { rng.random_range(0..=h - size) };
    let left = if w == size { 0 } else { rng.random_range(0..=w - size) };
    Ok(LoadedSample {
        t1: crop_raster(&sample.t1, top, left, size),
        t2: crop_raster(&sample.t2, top, left, size),
        label: crop_mask(&sample.label, top, left, size),
        semantic: sample.semantic.as_ref().map(|(a, b)| {
            (crop_mask(a, top, left, size), crop_mask(b, top, left, size))
        }),
    })
}

pub fn flip_h_raster(r: &Raster) -> Raster {
    let (c, h, w) = r.data.dim();
    Raster::new(Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
        r.data[(ci, y, w - 1 - x)]
    }))
}

pub fn flip_v_raster(r: &Raster) -> Raster {
    let (c, h, w) = r.data.dim();
    Raster::new(Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
        r.data[(ci, h - 1 - y, x)]
    }))
}

pub fn flip_h_mask(m: &Mask) -> Mask {
    let (h, w) = m.data.dim();
    Mask::new(Array2::from_shape_fn((h, w), |(y, x)| m.data[(y, w - 1 - x)]))
}

pub fn flip_v_mask(m: &Mask) -> Mask {
    let (h, w) = m.data.dim();
    Mask::new(Array2::from_shape_fn((h, w), |(y, x)| m.data[(h - 1 - y, x)]))
}

fn flip_all(sample: &LoadedSample, horizontal: bool) -> LoadedSample {
    let (fr, fm): (fn(&Raster) -> Raster, fn(&Mask) -> Mask) = if horizontal {
        (flip_h_raster, flip_h_mask)
    } else {
        (flip_v_raster, flip_v_mask)
    };
    LoadedSample {
        t1: fr(&sample.t1),
        t2: fr(&sample.t2),
        label: fm(&sample.label),
        semantic: sample.semantic.as_ref().map(|(a, b)| (fm(a), fm(b))),
    }
}

/// Horizontal then vertical flip, each drawn with `flip_prob`, applied
/// jointly to images and masks.
pub fn flip_pair(sample: &LoadedSample, flip_prob: f64, rng: &mut ChaCha12Rng) -> LoadedSample {
    let mut out = sample.clone();
    if rng.random_bool(flip_prob) {
        out = flip_all(&out, true);
    }
    if rng.random_bool(flip_prob) {
        out = flip_all(&out, false);
    }
    out
}

pub fn apply_brightness(r: &Raster, delta: f32) -> Raster {
    Raster::new(r.data.mapv(|v| (v + delta).clamp(0.0, 1.0)))
}

pub fn apply_contrast(r: &Raster, factor: f32) -> Raster {
    Raster::new(r.data.mapv(|v| (v * factor).clamp(0.0, 1.0)))
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn map_hsv(r: &Raster, f: impl Fn(f32, f32, f32) -> (f32, f32, f32)) -> Raster {
    let (c, h, w) = r.data.dim();
    assert_eq!(c, 3, "hsv ops need rgb rasters");
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let (hh, ss, vv) = rgb_to_hsv(r.data[(0, y, x)], r.data[(1, y, x)], r.data[(2, y, x)]);
            let (nr, ng, nb) = f(hh, ss, vv);
            out[(0, y, x)] = nr.clamp(0.0, 1.0);
            out[(1, y, x)] = ng.clamp(0.0, 1.0);
            out[(2, y, x)] = nb.clamp(0.0, 1.0);
        }
    }
    Raster::new(out)
}

pub fn apply_saturation(r: &Raster, factor: f32) -> Raster {
    map_hsv(r, |h, s, v| hsv_to_rgb(h, (s * factor).clamp(0.0, 1.0), v))
}

pub fn apply_hue(r: &Raster, delta_deg: f32) -> Raster {
    map_hsv(r, |h, s, v| hsv_to_rgb(h + delta_deg, s, v))
}

/// Photometric jitter on both images with one shared parameter draw; masks
/// are never touched. Each sub-transform fires with probability 1/2.
pub fn photometric_pair(
    sample: &LoadedSample,
    cfg: &PhotometricConfig,
    rng: &mut ChaCha12Rng,
) -> LoadedSample {
    let mut ops: Vec<Box<dyn Fn(&Raster) -> Raster>> = Vec::new();
    if rng.random_bool(0.5) {
        let d = rng.random_range(-cfg.brightness_delta..=cfg.brightness_delta);
        ops.push(Box::new(move |r| apply_brightness(r, d)));
    }
    if rng.random_bool(0.5) {
        let f = rng.random_range(cfg.contrast_range.0..=cfg.contrast_range.1);
        ops.push(Box::new(move |r| apply_contrast(r, f)));
    }
    if rng.random_bool(0.5) {
        let f = rng.random_range(cfg.saturation_range.0..=cfg.saturation_range.1);
        ops.push(Box::new(move |r| apply_saturation(r, f)));
    }
    if rng.random_bool(0.5) {
        let d = rng.random_range(-cfg.hue_delta_deg..=cfg.hue_delta_deg);
        ops.push(Box::new(move |r| apply_hue(r, d)));
    }
    let mut t1 = sample.t1.clone();
    let mut t2 = sample.t2.clone();
    for op in &ops {
        t1 = op(&t1);
        t2 = op(&t2);
    }
    LoadedSample {
        t1,
        t2,
        label: sample.label.clone(),
        semantic: sample.semantic.clone(),
    }
}

/// Full train-time augmentation: crop, flip, photometric.
pub fn augment_sample(
    sample: &LoadedSample,
    cfg: &AugmentConfig,
    rng: &mut ChaCha12Rng,
) -> Result<LoadedSample> {
    let mut out = random_crop_pair(sample, cfg.crop_size, rng)?;
    out = flip_pair(&out, cfg.flip_prob, rng);
    if let Some(ph) = &cfg.photometric {
        out = photometric_pair(&out, ph, rng);
    }
    Ok(out)
}
