//! Sliding-window inference over large rasters, and throughput measurement.
//!
//! Overlapping windows accumulate logits with per-pixel coverage counts and
//! are averaged before the argmax, so the result is independent of window
//! visitation order.

use ndarray::{Array2, Array3};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::BanModel;
use crate::raster::{Mask, Raster};

/// Window origins along one axis: stride steps from 0, with a final window
/// clamped to end exactly at the edge.
pub fn window_starts(total: usize, window: usize, stride: usize) -> Vec<usize> {
    if window >= total {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&s| s + window < total + stride && s + window <= total)
        .collect();
    if starts.last().map(|&s| s + window) != Some(total) {
        starts.push(total - window);
    }
    starts
}

/// Accumulate per-window logits produced by `eval_window(y0, x0)` into an
/// averaged [K, H, W] map. Every pixel must be covered at least once.
pub fn slide_accumulate<F>(
    h: usize,
    w: usize,
    k: usize,
    window: usize,
    stride: usize,
    mut eval_window: F,
) -> Result<Array3<f32>>
where
    F: FnMut(usize, usize) -> Result<Array3<f32>>,
{
    if window == 0 || window > h || window > w {
        return Err(Error::config(format!(
            "window {window} does not fit a {h}x{w} image"
        )));
    }
    if stride == 0 || stride > window {
        return Err(Error::config(format!(
            "stride {stride} must lie in [1, window {window}]"
        )));
    }
    let mut sum = Array3::<f32>::zeros((k, h, w));
    let mut coverage = Array2::<u32>::zeros((h, w));
    for &y0 in &window_starts(h, window, stride) {
        for &x0 in &window_starts(w, window, stride) {
            let logits = eval_window(y0, x0)?;
            if logits.dim() != (k, window, window) {
                return Err(Error::shape(format!(
                    "window logits have shape {:?}, expected [{k}, {window}, {window}]",
                    logits.dim()
                )));
            }
            for c in 0..k {
                for y in 0..window {
                    for x in 0..window {
                        sum[(c, y0 + y, x0 + x)] += logits[(c, y, x)];
                    }
                }
            }
            for y in 0..window {
                for x in 0..window {
                    coverage[(y0 + y, x0 + x)] += 1;
                }
            }
        }
    }
    if coverage.iter().any(|&c| c == 0) {
        return Err(Error::numeric(
            "sliding-window coverage gap: some pixel was never visited",
        ));
    }
    for c in 0..k {
        for y in 0..h {
            for x in 0..w {
                sum[(c, y, x)] /= coverage[(y, x)] as f32;
            }
        }
    }
    Ok(sum)
}

/// Per-pixel argmax with lowest-index tie-break.
pub fn argmax_mask(logits: &Array3<f32>) -> Mask {
    let (k, h, w) = logits.dim();
    Mask::new(Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        let mut best_v = logits[(0, y, x)];
        for c in 1..k {
            if logits[(c, y, x)] > best_v {
                best_v = logits[(c, y, x)];
                best = c;
            }
        }
        best as u8
    }))
}

fn crop(r: &Raster, y0: usize, x0: usize, size: usize) -> Raster {
    Raster::new(
        r.data
            .slice(ndarray::s![.., y0..y0 + size, x0..x0 + size])
            .to_owned(),
    )
}

/// Averaged change logits of a bi-temporal pair under sliding windows.
pub fn sliding_window_logits(
    model: &BanModel,
    x1: &Raster,
    x2: &Raster,
    window: usize,
    stride: usize,
) -> Result<Array3<f32>> {
    if x1.data.dim() != x2.data.dim() {
        return Err(Error::shape("bi-temporal pair differs in size".to_string()));
    }
    let (h, w) = (x1.height(), x1.width());
    slide_accumulate(h, w, 2, window, stride, |y0, x0| {
        let logits = model.forward(&crop(x1, y0, x0, window), &crop(x2, y0, x0, window))?;
        let out = logits
            .change
            .data()
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        Ok(out)
    })
}

/// Sliding-window change mask.
pub fn sliding_window_infer(
    model: &BanModel,
    x1: &Raster,
    x2: &Raster,
    window: usize,
    stride: usize,
) -> Result<Mask> {
    Ok(argmax_mask(&sliding_window_logits(model, x1, x2, window, stride)?))
}

/// SCD outputs: change mask plus both per-phase semantic masks.
pub struct ScdPrediction {
    pub change: Mask,
    pub sem_t1: Mask,
    pub sem_t2: Mask,
}

pub fn sliding_window_infer_scd(
    model: &BanModel,
    x1: &Raster,
    x2: &Raster,
    window: usize,
    stride: usize,
) -> Result<ScdPrediction> {
    let k = model.spec.num_semantic_classes;
    let (h, w) = (x1.height(), x1.width());
    // one pass per output head keeps the accumulation core simple
    let change = sliding_window_logits(model, x1, x2, window, stride)?;
    let mut sem = Vec::new();
    for phase in 0..2 {
        let logits = slide_accumulate(h, w, k, window, stride, |y0, x0| {
            let out = model.forward(&crop(x1, y0, x0, window), &crop(x2, y0, x0, window))?;
            let (s1, s2) = out
                .semantic
                .as_ref()
                .ok_or_else(|| Error::config("model has no semantic heads"))?;
            let t = if phase == 0 { s1 } else { s2 };
            let data = t
                .data()
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap()
                .to_owned();
            Ok(data)
        })?;
        sem.push(argmax_mask(&logits));
    }
    let sem_t2 = sem.pop().unwrap();
    let sem_t1 = sem.pop().unwrap();
    Ok(ScdPrediction {
        change: argmax_mask(&change),
        sem_t1,
        sem_t2,
    })
}

/// Wall-clock throughput of sliding-window inference after one warmup run.
pub fn fps_benchmark(
    model: &BanModel,
    resolution: usize,
    n_images: usize,
    window: usize,
    stride: usize,
    seed: u64,
) -> Result<f64> {
    if n_images == 0 {
        return Err(Error::config("fps benchmark needs n_images > 0"));
    }
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut pair = || {
        Raster::new(Array3::from_shape_fn((3, resolution, resolution), |_| {
            rng.random_range(0.0f32..1.0)
        }))
    };
    let (x1, x2) = (pair(), pair());
    sliding_window_infer(model, &x1, &x2, window, stride)?; // warmup
    let start = Instant::now();
    for _ in 0..n_images {
        sliding_window_infer(model, &x1, &x2, window, stride)?;
    }
    Ok(n_images as f64 / start.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn starts_cover_and_clamp() {
        assert_eq!(window_starts(8, 8, 4), vec![0]);
        assert_eq!(window_starts(10, 4, 4), vec![0, 4, 6]);
        assert_eq!(window_starts(12, 4, 4), vec![0, 4, 8]);
        assert_eq!(window_starts(13, 4, 2), vec![0, 2, 4, 6, 8, 9]);
    }

    #[test]
    fn degenerate_window_equals_single_eval() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let full = Array3::from_shape_fn((2, 6, 6), |_| rng.random_range(-1.0f32..1.0));
        let got = slide_accumulate(6, 6, 2, 6, 6, |y0, x0| {
            assert_eq!((y0, x0), (0, 0));
            Ok(full.clone())
        })
        .unwrap();
        assert_eq!(got, full);
    }

    /// Pixel-local "model": logits depend only on absolute pixel position,
    /// so any correct accumulation reproduces the full map exactly.
    #[test]
    fn pixel_local_windows_stitch_exactly() {
        let field = Array3::from_shape_fn((2, 12, 10), |(c, y, x)| {
            (c as f32 + 1.0) * (y as f32 * 10.0 + x as f32)
        });
        let got = slide_accumulate(12, 10, 2, 4, 2, |y0, x0| {
            Ok(Array3::from_shape_fn((2, 4, 4), |(c, y, x)| {
                field[(c, y0 + y, x0 + x)]
            }))
        })
        .unwrap();
        for (a, b) in got.iter().zip(field.iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    /// Brute-force accumulation oracle with overlap averaging.
    #[test]
    fn averaged_logits_match_explicit_accumulation() {
        let (h, w, window, stride) = (10usize, 10usize, 4usize, 3usize);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        // window response depends on the window origin, forcing real overlap
        let mut responses = std::collections::HashMap::new();
        for &y0 in &window_starts(h, window, stride) {
            for &x0 in &window_starts(w, window, stride) {
                responses.insert(
                    (y0, x0),
                    Array3::from_shape_fn((2, window, window), |_| rng.random_range(-1.0f32..1.0)),
                );
            }
        }
        let got = slide_accumulate(h, w, 2, window, stride, |y0, x0| {
            Ok(responses[&(y0, x0)].clone())
        })
        .unwrap();
        let mut sum = Array3::<f32>::zeros((2, h, w));
        let mut cover = Array2::<f32>::zeros((h, w));
        for (&(y0, x0), r) in &responses {
            for c in 0..2 {
                for y in 0..window {
                    for x in 0..window {
                        sum[(c, y0 + y, x0 + x)] += r[(c, y, x)];
                    }
                }
            }
            for y in 0..window {
                for x in 0..window {
                    cover[(y0 + y, x0 + x)] += 1.0;
                }
            }
        }
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let want = sum[(c, y, x)] / cover[(y, x)];
                    assert!((got[(c, y, x)] - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        let logits = Array3::from_shape_fn((3, 1, 2), |(c, _, x)| {
            if x == 0 {
                0.5 // all classes tie
            } else {
                c as f32
            }
        });
        let mask = argmax_mask(&logits);
        assert_eq!(mask.data[(0, 0)], 0);
        assert_eq!(mask.data[(0, 1)], 2);
    }

    #[test]
    fn bad_window_and_stride_are_config_errors() {
        let f = |_, _| Ok(Array3::<f32>::zeros((2, 4, 4)));
        assert!(slide_accumulate(3, 3, 2, 4, 4, f).is_err());
        let f = |_, _| Ok(Array3::<f32>::zeros((2, 4, 4)));
        assert!(slide_accumulate(8, 8, 2, 4, 5, f).is_err());
        let f = |_, _| Ok(Array3::<f32>::zeros((2, 4, 4)));
        assert!(slide_accumulate(8, 8, 2, 4, 0, f).is_err());
    }
}
