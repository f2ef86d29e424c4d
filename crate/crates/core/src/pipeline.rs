//! Prepared-dataset directories: generation and loading.
//!
//! A directory written by [`gen_data`] holds `train.tspm`, `test.tspm` and
//! `val.tspm` (raw, unnormalized pairs), `splits.tsv` and `dataset.meta`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{
    build_pairs, load_dir, normalize, read_pairs, synth_dataset, write_pairs, write_splits,
    ModalityTransform, NormStats, PatchPair, Split, SplitPairs,
};
use crate::error::{Error, Result};

/// Where image pairs come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth {
        n_images: usize,
        size: usize,
        transform: ModalityTransform,
    },
    Dir(PathBuf),
}

impl DataSource {
    pub fn is_synthetic(&self) -> bool {
        matches!(self, DataSource::Synth { .. })
    }
}

pub const META_FILE: &str = "dataset.meta";
pub const SPLITS_FILE: &str = "splits.tsv";

pub fn split_file(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.tspm", split.name()))
}

/// Per-split counts of a prepared dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSummary {
    /// Indexed like [`Split::ALL`]: train, test, val.
    pub images: [usize; 3],
    pub positives: [usize; 3],
    pub negatives: [usize; 3],
}

impl DatasetSummary {
    pub fn of(pairs: &SplitPairs) -> Self {
        let mut s = DatasetSummary {
            images: [0; 3],
            positives: [0; 3],
            negatives: [0; 3],
        };
        for (k, split) in Split::ALL.into_iter().enumerate() {
            s.images[k] = pairs.assignment.iter().filter(|&&a| a == split).count();
            let p = pairs.get(split);
            s.positives[k] = p.iter().filter(|p| p.label == 1).count();
            s.negatives[k] = p.len() - s.positives[k];
        }
        s
    }

    pub fn pairs(&self) -> [usize; 3] {
        [0, 1, 2].map(|k| self.positives[k] + self.negatives[k])
    }

    /// Counts laid out as train / test / validation columns.
    pub fn table(&self, name: &str) -> String {
        let rows: [(&str, [usize; 3]); 4] = [
            (name, self.pairs()),
            ("  positives", self.positives),
            ("  negatives", self.negatives),
            ("  source images", self.images),
        ];
        let mut s = format!(
            "{:<16}{:>14}{:>14}{:>18}\n",
            "Dataset", "Train (70%)", "Test (20%)", "Validation (10%)"
        );
        for (label, v) in rows {
            let _ = writeln!(s, "{label:<16}{:>14}{:>14}{:>18}", v[0], v[1], v[2]);
        }
        s
    }
}

/// Builds the pair splits for `source` and writes them under `out`.
pub fn gen_data(source: &DataSource, seed: u64, out: &Path) -> Result<DatasetSummary> {
    let images = match source {
        DataSource::Synth {
            n_images,
            size,
            transform,
        } => synth_dataset(*n_images, *size, *transform, seed)?,
        DataSource::Dir(root) => load_dir(root)?,
    };
    let pairs = build_pairs(&images, seed)?;
    fs::create_dir_all(out)?;
    for split in Split::ALL {
        write_pairs(&split_file(out, split), pairs.get(split))?;
    }
    let rows: Vec<(String, Split)> = images
        .iter()
        .zip(&pairs.assignment)
        .map(|(img, &s)| (img.id.clone(), s))
        .collect();
    write_splits(&out.join(SPLITS_FILE), &rows)?;
    let meta = match source {
        DataSource::Synth {
            n_images,
            size,
            transform,
        } => format!(
            "source = synth\nimages = {n_images}\nsize = {size}\ntransform = {transform}\nseed = {seed}\n"
        ),
        DataSource::Dir(root) => format!(
            "source = dir\nimages = {}\npath = {}\nseed = {seed}\n",
            images.len(),
            root.display()
        ),
    };
    fs::write(out.join(META_FILE), meta)?;
    Ok(DatasetSummary::of(&pairs))
}

/// Whether the prepared directory was generated synthetically.
pub fn is_synthetic(dir: &Path) -> Result<bool> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Ingestion {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if k.trim() == "source" {
                return match v.trim() {
                    "synth" => Ok(true),
                    "dir" => Ok(false),
                    other => Err(Error::Ingestion {
                        path,
                        msg: format!("unknown source `{other}`"),
                    }),
                };
            }
        }
    }
    Err(Error::Ingestion {
        path,
        msg: "missing `source` entry".into(),
    })
}

/// Normalized splits ready for training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<PatchPair>,
    pub test: Vec<PatchPair>,
    pub val: Vec<PatchPair>,
    /// Computed on the training split.
    pub stats: NormStats,
    pub synthetic: bool,
}

impl Prepared {
    /// Normalizes every split with statistics of the training split.
    pub fn new(pairs: SplitPairs, synthetic: bool) -> Result<Self> {
        let SplitPairs {
            mut train,
            mut test,
            mut val,
            ..
        } = pairs;
        let stats = NormStats::compute(&train)?;
        for split in [&mut train, &mut test, &mut val] {
            normalize(split, &stats);
        }
        Ok(Prepared {
            train,
            test,
            val,
            stats,
            synthetic,
        })
    }

    pub fn get(&self, split: Split) -> &[PatchPair] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
            Split::Val => &self.val,
        }
    }
}

/// Reads a directory written by [`gen_data`].
pub fn load_prepared(dir: &Path) -> Result<Prepared> {
    let synthetic = is_synthetic(dir)?;
    let pairs = SplitPairs {
        train: read_pairs(&split_file(dir, Split::Train))?,
        test: read_pairs(&split_file(dir, Split::Test))?,
        val: read_pairs(&split_file(dir, Split::Val))?,
        assignment: Vec::new(),
    };
    Prepared::new(pairs, synthetic)
}

/// One split of a prepared directory, normalized with `stats`.
pub fn load_split(dir: &Path, split: Split, stats: &NormStats) -> Result<Vec<PatchPair>> {
    let mut pairs = read_pairs(&split_file(dir, split))?;
    normalize(&mut pairs, stats);
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let src = DataSource::Synth {
            n_images: 20,
            size: 128,
            transform: ModalityTransform::Invert,
        };
        let s = gen_data(&src, 5, dir.path()).unwrap();
        assert_eq!(s.images, [14, 4, 2]);
        // 4 cells per image; train is augmented 4×.
        assert_eq!(s.positives, [14 * 4 * 4, 4 * 4, 2 * 4]);
        assert_eq!(s.positives, s.negatives);
        assert!(is_synthetic(dir.path()).unwrap());
        let p = load_prepared(dir.path()).unwrap();
        assert_eq!(p.train.len(), s.pairs()[0]);
        assert_eq!(load_split(dir.path(), Split::Val, &p.stats).unwrap(), p.val);
        let t = s.table("synth");
        assert!(t.starts_with("Dataset"));
        assert_eq!(t.lines().count(), 5);
    }

    #[test]
    fn missing_meta_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_prepared(dir.path()),
            Err(Error::Ingestion { .. })
        ));
    }
}
