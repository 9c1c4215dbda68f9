//! Bi-temporal dataset ingestion and splitting.
//!
//! Folder convention under a dataset root:
//!
//! ```text
//! root/
//!   t1/<name>.png       first-phase images
//!   t2/<name>.png       second-phase images
//!   label/<name>.png    change masks (class indices, 0/1 for BCD)
//!   sem_t1/<name>.png   optional per-phase semantic masks (SCD)
//!   sem_t2/<name>.png
//!   splits/train.txt    optional split manifests, one file name per line;
//!   splits/val.txt      unlisted records default to train
//!   splits/test.txt
//! ```
//!
//! Scanning validates existence and pairing only; decoding (and the
//! equal-size invariant within a record) happens at load time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One bi-temporal sample on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub name: String,
    pub path_t1: PathBuf,
    pub path_t2: PathBuf,
    pub path_label: PathBuf,
    pub path_sem_t1: Option<PathBuf>,
    pub path_sem_t2: Option<PathBuf>,
    pub split: Split,
}

/// Decoded sample.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub t1: Raster,
    pub t2: Raster,
    pub label: Mask,
    pub semantic: Option<(Mask, Mask)>,
}

fn list_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Discover records under `root` by the documented folder convention, in
/// lexicographic file-name order. Orphan files (present in one phase
/// directory but missing elsewhere) make the whole scan fail with every
/// orphan listed.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::data(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    let t1 = list_files(&root.join("t1"))?;
    let t2 = list_files(&root.join("t2"))?;
    let label = list_files(&root.join("label"))?;
    let sem_t1 = root.join("sem_t1").is_dir().then(|| list_files(&root.join("sem_t1"))).transpose()?;
    let sem_t2 = root.join("sem_t2").is_dir().then(|| list_files(&root.join("sem_t2"))).transpose()?;
    if sem_t1.is_some() != sem_t2.is_some() {
        return Err(Error::data(
            "sem_t1 and sem_t2 must both be present or both absent".to_string(),
        ));
    }

    let mut names: Vec<&String> = t1.keys().collect();
    for k in t2.keys().chain(label.keys()) {
        if !t1.contains_key(k) {
            names.push(k);
        }
    }
    names.sort();
    names.dedup();

    let mut orphans = Vec::new();
    let mut records = Vec::new();
    for name in names {
        let here = [
            ("t1", t1.get(name)),
            ("t2", t2.get(name)),
            ("label", label.get(name)),
        ];
        let missing: Vec<&str> = here
            .iter()
            .filter(|(_, p)| p.is_none())
            .map(|(d, _)| *d)
            .collect();
        if !missing.is_empty() {
            orphans.push(format!("{name} (missing in {})", missing.join(", ")));
            continue;
        }
        let (path_sem_t1, path_sem_t2) = match (&sem_t1, &sem_t2) {
            (Some(s1), Some(s2)) => {
                let (a, b) = (s1.get(name), s2.get(name));
                if a.is_none() || b.is_none() {
                    orphans.push(format!("{name} (missing semantic mask)"));
                    continue;
                }
                (Some(a.unwrap().clone()), Some(b.unwrap().clone()))
            }
            _ => (None, None),
        };
        records.push(SampleRecord {
            name: name.clone(),
            path_t1: t1[name].clone(),
            path_t2: t2[name].clone(),
            path_label: label[name].clone(),
            path_sem_t1,
            path_sem_t2,
            split: Split::Train,
        });
    }
    if !orphans.is_empty() {
        return Err(Error::data(format!(
            "unpaired dataset files: {}",
            orphans.join("; ")
        )));
    }
    Ok(records)
}

/// Apply `splits/{train,val,test}.txt` manifests when present. Listed names
/// must exist; unlisted records keep the train split.
pub fn apply_split_manifests(records: &mut [SampleRecord], root: impl AsRef<Path>) -> Result<()> {
    let dir = root.as_ref().join("splits");
    if !dir.is_dir() {
        return Ok(());
    }
    let mut by_name: BTreeMap<String, usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_name.insert(r.name.clone(), i);
    }
    for (file, split) in [
        ("train.txt", Split::Train),
        ("val.txt", Split::Val),
        ("test.txt", Split::Test),
    ] {
        let path = dir.join(file);
        if !path.is_file() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for line in text.lines() {
            let name = line.trim();
            if name.is_empty() {
                continue;
            }
            let idx = by_name.get(name).ok_or_else(|| {
                Error::data(format!("split manifest {file} names unknown record {name}"))
            })?;
            records[*idx].split = split;
        }
    }
    Ok(())
}

/// Decode a record; all tensors within it must share a spatial size.
pub fn load_sample(record: &SampleRecord) -> Result<LoadedSample> {
    let t1 = Raster::open(&record.path_t1)?;
    let t2 = Raster::open(&record.path_t2)?;
    let label = Mask::open(&record.path_label)?;
    let size = (t1.height(), t1.width());
    for (what, hw) in [
        ("t2", (t2.height(), t2.width())),
        ("label", (label.height(), label.width())),
    ] {
        if hw != size {
            return Err(Error::data(format!(
                "{}: {what} is {}x{} but t1 is {}x{}",
                record.name, hw.0, hw.1, size.0, size.1
            )));
        }
    }
    let semantic = match (&record.path_sem_t1, &record.path_sem_t2) {
        (Some(p1), Some(p2)) => {
            let s1 = Mask::open(p1)?;
            let s2 = Mask::open(p2)?;
            for (what, hw) in [
                ("sem_t1", (s1.height(), s1.width())),
                ("sem_t2", (s2.height(), s2.width())),
            ] {
                if hw != size {
                    return Err(Error::data(format!(
                        "{}: {what} is {}x{} but t1 is {}x{}",
                        record.name, hw.0, hw.1, size.0, size.1
                    )));
                }
            }
            Some((s1, s2))
        }
        _ => None,
    };
    Ok(LoadedSample {
        t1,
        t2,
        label,
        semantic,
    })
}

/// Deterministic seeded subset of round(fraction * n) records for training
/// with partial labels; the withheld complement is excluded from training.
pub fn label_fraction_split(
    records: &[SampleRecord],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!(
            "label fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let n = records.len();
    let take = (fraction * n as f64).round() as usize;
    if take == 0 {
        return Err(Error::data(format!(
            "label fraction {fraction} of {n} records selects nothing"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut labeled: Vec<SampleRecord> = order[..take].iter().map(|&i| records[i].clone()).collect();
    let mut withheld: Vec<SampleRecord> = order[take..].iter().map(|&i| records[i].clone()).collect();
    labeled.sort_by(|a, b| a.name.cmp(&b.name));
    withheld.sort_by(|a, b| a.name.cmp(&b.name));
    Ok((labeled, withheld))
}

/// Seeded three-way split by fractions (e.g. 0.6/0.2/0.2 for a 3:1:1 ratio).
pub fn ratio_split(
    records: &mut [SampleRecord],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<()> {
    let (ft, fv, fe) = fractions;
    if ft <= 0.0 || fv < 0.0 || fe < 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (ft * n as f64).round() as usize;
    let n_val = (fv * n as f64).round() as usize;
    for (rank, &idx) in order.iter().enumerate() {
        records[idx].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(())
}
