//! Benchmark ingestion, deterministic splits and preprocessing.
//!
//! Layout on disk: `<root>/<dataset>/images/*.{png,jpg}` with masks of the
//! same stem under `<root>/<dataset>/masks/`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io;
use crate::kernels;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 352;
const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dataset {
    KvasirSEG,
    ClinicDB,
    ColonDB,
    Endoscene,
    ETIS,
}

impl Dataset {
    pub const ALL: [Dataset; 5] = [
        Dataset::KvasirSEG,
        Dataset::ClinicDB,
        Dataset::ColonDB,
        Dataset::Endoscene,
        Dataset::ETIS,
    ];

    /// Directory names accepted under the data root, canonical first.
    pub fn dir_names(self) -> &'static [&'static str] {
        match self {
            Dataset::KvasirSEG => &["Kvasir-SEG", "Kvasir"],
            Dataset::ClinicDB => &["CVC-ClinicDB", "ClinicDB"],
            Dataset::ColonDB => &["CVC-ColonDB", "ColonDB"],
            Dataset::Endoscene => &["CVC-300", "EndoScene", "Endoscene"],
            Dataset::ETIS => &["ETIS-LaribPolypDB", "ETIS"],
        }
    }

    pub fn name(self) -> &'static str {
        self.dir_names()[0]
    }

    /// `(train, seen_test)` sizes for the two training pools.
    pub fn train_split(self) -> Option<(usize, usize)> {
        match self {
            Dataset::KvasirSEG => Some((900, 100)),
            Dataset::ClinicDB => Some((550, 62)),
            _ => None,
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dataset::ALL
            .into_iter()
            .find(|d| {
                d.dir_names().iter().any(|n| n.eq_ignore_ascii_case(s))
                    || format!("{d:?}").eq_ignore_ascii_case(s)
            })
            .ok_or_else(|| Error::Invalid(format!("unknown dataset `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    SeenTest,
    UnseenTest,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::SeenTest => "seen_test",
            Split::UnseenTest => "unseen_test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "seen_test" => Ok(Split::SeenTest),
            "unseen_test" => Ok(Split::UnseenTest),
            _ => Err(Error::Invalid(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub dataset: Dataset,
    pub split: Option<Split>,
}

impl SampleRecord {
    pub fn basename(&self) -> String {
        file_name(&self.image_path)
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir.to_path_buf()));
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if !path.is_file() || !EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        out.insert(stem, path);
    }
    Ok(out)
}

/// Resolve the directory of `name` under `root`.
pub fn dataset_dir(root: &Path, name: Dataset) -> Result<PathBuf> {
    name.dir_names()
        .iter()
        .map(|d| root.join(d))
        .find(|p| p.is_dir())
        .ok_or_else(|| Error::MissingDirectory(root.join(name.name())))
}

/// Image/mask path pairs of a directory holding `images/` and `masks/`,
/// sorted by image file name. Files without a partner are reported.
pub fn load_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir.to_path_buf()));
    }
    let images = list_images(&dir.join("images"))?;
    let masks = list_images(&dir.join("masks"))?;
    let mut orphans: Vec<String> = images
        .iter()
        .filter(|(stem, _)| !masks.contains_key(*stem))
        .map(|(_, p)| file_name(p))
        .chain(
            masks
                .iter()
                .filter(|(stem, _)| !images.contains_key(*stem))
                .map(|(_, p)| format!("masks/{}", file_name(p))),
        )
        .collect();
    if !orphans.is_empty() {
        orphans.sort();
        return Err(Error::Orphans {
            dir: dir.to_path_buf(),
            orphans,
        });
    }
    let mut pairs: Vec<(PathBuf, PathBuf)> = images
        .into_iter()
        .map(|(stem, image)| (image, masks[&stem].clone()))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    pairs.sort_by_key(|(image, _)| file_name(image));
    Ok(pairs)
}

/// One record per image/mask pair, sorted by image file name.
pub fn load_dataset(root: &Path, name: Dataset) -> Result<Vec<SampleRecord>> {
    let dir = dataset_dir(root, name)?;
    Ok(load_pairs(&dir)?
        .into_iter()
        .map(|(image_path, mask_path)| SampleRecord {
            image_path,
            mask_path,
            dataset: name,
            split: None,
        })
        .collect())
}

/// Assign splits: a seeded shuffle of each training pool (taken in sorted
/// order) puts the first 900 Kvasir-SEG / 550 ClinicDB records in `train`
/// and the remainder in `seen_test`; every other dataset is `unseen_test`.
pub fn make_splits(mut records: Vec<SampleRecord>, seed: u64) -> Result<Vec<SampleRecord>> {
    records.sort_by(|a, b| (a.dataset, a.basename()).cmp(&(b.dataset, b.basename())));
    for ds in Dataset::ALL {
        let idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].dataset == ds).collect();
        match ds.train_split() {
            None => {
                for i in idx {
                    records[i].split = Some(Split::UnseenTest);
                }
            }
            Some((train, test)) => {
                if idx.is_empty() {
                    continue;
                }
                if idx.len() < train + test {
                    return Err(Error::Cardinality {
                        dataset: ds.to_string(),
                        expected: train + test,
                        found: idx.len(),
                    });
                }
                let mut order = idx.clone();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                for (rank, &i) in order.iter().enumerate() {
                    records[i].split = Some(if rank < train { Split::Train } else { Split::SeenTest });
                }
            }
        }
    }
    Ok(records)
}

/// Write the split manifest as `dataset,basename,split` CSV.
pub fn write_manifest(records: &[SampleRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dataset", "basename", "split"])?;
    for r in records {
        let split = r.split.map(Split::as_str).unwrap_or("");
        w.write_record([r.dataset.name(), &r.basename(), split])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Deserialize)]
struct ManifestRow {
    dataset: String,
    basename: String,
    split: String,
}

/// Read a manifest and resolve its rows against the datasets under `root`.
pub fn read_manifest(path: &Path, root: &Path) -> Result<Vec<SampleRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut loaded: BTreeMap<Dataset, BTreeMap<String, SampleRecord>> = BTreeMap::new();
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let row: ManifestRow = row?;
        let ds: Dataset = row.dataset.parse()?;
        if !loaded.contains_key(&ds) {
            let recs = load_dataset(root, ds)?;
            loaded.insert(ds, recs.into_iter().map(|r| (r.basename(), r)).collect());
        }
        let mut rec = loaded[&ds]
            .get(&row.basename)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("manifest entry {}/{} not found", ds, row.basename)))?;
        rec.split = Some(row.split.parse()?);
        out.push(rec);
    }
    Ok(out)
}

/// A preprocessed pair: image `3×S×S` in `[0, 1]`, mask `1×S×S` in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Tensor,
    pub mask: Tensor,
}

/// Decode, resize (bilinear image, nearest mask) and binarize at 0.5.
pub fn preprocess(record: &SampleRecord, size: usize) -> Result<Sample> {
    preprocess_files(&record.image_path, &record.mask_path, size)
}

/// [`preprocess`] for a bare image/mask path pair.
pub fn preprocess_files(image_path: &Path, mask_path: &Path, size: usize) -> Result<Sample> {
    let (img, h, w) = image_io::load_rgb(image_path)?;
    let (mask, mh, mw) = image_io::load_gray(mask_path)?;
    let image = kernels::bilinear_resize(&img, 3, (h, w), (size, size));
    let mask: Vec<f64> = kernels::nearest_resize(&mask, 1, (mh, mw), (size, size))
        .into_iter()
        .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    Ok(Sample {
        name: file_name(image_path),
        image: Tensor::from_vec(&[3, size, size], image)?,
        mask: Tensor::from_vec(&[1, size, size], mask)?,
    })
}

fn transform_planes(t: &Tensor, f: impl Fn(usize, usize, usize) -> (usize, usize)) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; t.len()];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = f(y, x, h);
                out[(ci * h + y) * w + x] = t.data()[(ci * h + sy) * w + sx];
            }
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}

/// Random horizontal/vertical flip and 90° rotation (square inputs only),
/// applied identically to image and mask.
pub fn augment(sample: &Sample, rng: &mut ChaCha8Rng) -> Sample {
    let mut out = sample.clone();
    let w = sample.image.shape()[2];
    if rng.random_bool(0.5) {
        let f = move |y: usize, x: usize, _| (y, w - 1 - x);
        out.image = transform_planes(&out.image, f);
        out.mask = transform_planes(&out.mask, f);
    }
    if rng.random_bool(0.5) {
        let f = |y: usize, x: usize, h: usize| (h - 1 - y, x);
        out.image = transform_planes(&out.image, f);
        out.mask = transform_planes(&out.mask, f);
    }
    if sample.image.shape()[1] == w && rng.random_bool(0.5) {
        let f = move |y: usize, x: usize, _| (x, w - 1 - y);
        out.image = transform_planes(&out.image, f);
        out.mask = transform_planes(&out.mask, f);
    }
    out
}

/// Stack samples into `B×3×S×S` images and `B×1×S×S` masks.
pub fn make_batch(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}
