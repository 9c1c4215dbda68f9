//! Synthetic bi-temporal pairs with inserted-square changes, for overfit
//! sanity runs, fixtures, and demos.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::path::Path;

use crate::data::{LoadedSample, SampleRecord, Split};
use crate::error::Result;
use crate::raster::{resize_plane, Mask, Raster};

/// Smooth low-frequency background plus light pixel noise.
fn background(rng: &mut ChaCha12Rng, side: usize) -> Raster {
    let coarse = 4usize;
    let mut data = Array3::zeros((3, side, side));
    for c in 0..3 {
        let low = Array2::from_shape_fn((coarse, coarse), |_| rng.random_range(0.2f32..0.8));
        let up = resize_plane(&low, side, side);
        for y in 0..side {
            for x in 0..side {
                data[(c, y, x)] = (up[(y, x)] + rng.random_range(-0.03f32..0.03)).clamp(0.0, 1.0);
            }
        }
    }
    Raster::new(data)
}

/// One pair: t2 is t1 with 1..=3 contrasting squares inserted; the label
/// marks the squares.
pub fn synthetic_pair(rng: &mut ChaCha12Rng, side: usize) -> LoadedSample {
    let t1 = background(rng, side);
    let mut t2 = t1.clone();
    let mut label = Array2::<u8>::zeros((side, side));
    let squares = rng.random_range(1..=3);
    for _ in 0..squares {
        let size = rng.random_range(side / 8..=side / 3).max(2);
        let top = rng.random_range(0..=side - size);
        let left = rng.random_range(0..=side - size);
        let color = [
            rng.random_range(0.0f32..1.0),
            rng.random_range(0.0f32..1.0),
            rng.random_range(0.0f32..1.0),
        ];
        for y in top..top + size {
            for x in left..left + size {
                for c in 0..3 {
                    t2.data[(c, y, x)] = color[c];
                }
                label[(y, x)] = 1;
            }
        }
    }
    LoadedSample {
        t1,
        t2,
        label: Mask::new(label),
        semantic: None,
    }
}

/// Deterministic in-memory dataset.
pub fn synthetic_samples(n: usize, side: usize, seed: u64) -> Vec<LoadedSample> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n).map(|_| synthetic_pair(&mut rng, side)).collect()
}

/// SCD variant: phase-1 semantics quantize the background into `classes`
/// bands; inserted squares take a class-correlated color so the phase-2
/// semantics are learnable.
pub fn synthetic_scd_pair(rng: &mut ChaCha12Rng, side: usize, classes: usize) -> LoadedSample {
    assert!(classes >= 2);
    let t1 = background(rng, side);
    let mut sem1 = Array2::<u8>::zeros((side, side));
    for y in 0..side {
        for x in 0..side {
            let lum = (t1.data[(0, y, x)] + t1.data[(1, y, x)] + t1.data[(2, y, x)]) / 3.0;
            sem1[(y, x)] = ((lum * classes as f32) as usize).min(classes - 1) as u8;
        }
    }
    let mut t2 = t1.clone();
    let mut sem2 = sem1.clone();
    let mut label = Array2::<u8>::zeros((side, side));
    let squares = rng.random_range(1..=3);
    for _ in 0..squares {
        let size = rng.random_range(side / 8..=side / 3).max(2);
        let top = rng.random_range(0..=side - size);
        let left = rng.random_range(0..=side - size);
        let class = rng.random_range(1..classes) as u8;
        // class-correlated palette: hue from the class index
        let base = class as f32 / classes as f32;
        let color = [base, 1.0 - base, 0.5 * base + 0.25];
        for y in top..top + size {
            for x in left..left + size {
                for c in 0..3 {
                    t2.data[(c, y, x)] = color[c];
                }
                sem2[(y, x)] = class;
                label[(y, x)] = 1;
            }
        }
    }
    LoadedSample {
        t1,
        t2,
        label: Mask::new(label),
        semantic: Some((Mask::new(sem1), Mask::new(sem2))),
    }
}

pub fn synthetic_scd_samples(n: usize, side: usize, classes: usize, seed: u64) -> Vec<LoadedSample> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| synthetic_scd_pair(&mut rng, side, classes))
        .collect()
}

/// Write a synthetic dataset in the standard folder convention and return
/// its records. PNG encoding quantizes values to 8 bits.
pub fn write_synthetic_dataset(
    root: impl AsRef<Path>,
    n: usize,
    side: usize,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    let root = root.as_ref();
    for sub in ["t1", "t2", "label"] {
        std::fs::create_dir_all(root.join(sub))
            .map_err(|e| crate::error::Error::io(root.join(sub), e))?;
    }
    let samples = synthetic_samples(n, side, seed);
    let mut records = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let name = format!("pair{i:04}.png");
        let (p1, p2, pl) = (
            root.join("t1").join(&name),
            root.join("t2").join(&name),
            root.join("label").join(&name),
        );
        s.t1.save(&p1)?;
        s.t2.save(&p2)?;
        s.label.save(&pl)?;
        records.push(SampleRecord {
            name,
            path_t1: p1,
            path_t2: p2,
            path_label: pl,
            path_sem_t1: None,
            path_sem_t2: None,
            split: Split::Train,
        });
    }
    Ok(records)
}
