//! Samples, manifests, image files, folds, metrics and the synthetic set.

mod images;
mod manifest;
mod metrics;
mod synth;

pub use images::{normalize_image, read_image, write_image, ImageFormat};
pub use manifest::{binarize_intensity, LabelKind, Manifest, ManifestRow};
pub use metrics::{f1_from_counts, f1_per_au, F1Report};
pub use synth::{generate_synthetic, GroupStats, SyntheticSpec};

use std::collections::BTreeSet;

use crate::au_region::LandmarkSet;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]` pixel values in `[0, 1]`.
    pub image: Tensor,
    pub au_labels: Vec<u8>,
    pub landmarks: LandmarkSet,
    pub subject_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub aus: Vec<u32>,
    pub landmark_count: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subjects(&self) -> Vec<String> {
        self.samples
            .iter()
            .map(|s| s.subject_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            aus: self.aus.clone(),
            landmark_count: self.landmark_count,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Check label and landmark lengths against the declared layout.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.au_labels.len() != self.aus.len() {
                return Err(Error::Data(format!(
                    "sample {i}: {} labels for {} AUs",
                    s.au_labels.len(),
                    self.aus.len()
                )));
            }
            if s.landmarks.len() != self.landmark_count {
                return Err(Error::Data(format!(
                    "sample {i}: {} landmarks, expected {}",
                    s.landmarks.len(),
                    self.landmark_count
                )));
            }
            if s.subject_id.is_empty() {
                return Err(Error::Data(format!("sample {i}: empty subject id")));
            }
            if let Some(&bad) = s.au_labels.iter().find(|&&y| y > 1) {
                return Err(Error::Data(format!("sample {i}: label {bad} is not 0 or 1")));
            }
        }
        Ok(())
    }
}

/// One `(train, test)` pair of sample indices.
pub type Split = (Vec<usize>, Vec<usize>);

/// Partition subjects (not samples) into `k` folds of sizes differing by at
/// most one; fold `i` is the test set of split `i`.
pub fn kfold_subject_exclusive(subject_ids: &[String], k: usize, seed: u64) -> Result<Vec<Split>> {
    let mut subjects: Vec<&str> = subject_ids
        .iter()
        .map(String::as_str)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if k < 2 {
        return Err(Error::Data(format!("need k >= 2 folds, got {k}")));
    }
    if subjects.len() < k {
        return Err(Error::Data(format!(
            "{} distinct subjects cannot fill {k} folds",
            subjects.len()
        )));
    }
    SeededRng::new(seed).split("folds").shuffle(&mut subjects);
    let fold_of: std::collections::HashMap<&str, usize> = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| (*s, i % k))
        .collect();
    Ok((0..k)
        .map(|f| {
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for (i, s) in subject_ids.iter().enumerate() {
                if fold_of[s.as_str()] == f {
                    test.push(i);
                } else {
                    train.push(i);
                }
            }
            (train, test)
        })
        .collect())
}

/// Mirror an image left to right; landmarks are mirrored and re-indexed.
pub fn flip_sample(s: &Sample) -> Result<Sample> {
    let shape = s.image.shape().to_vec();
    let w = shape[2];
    let mut data = s.image.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Ok(Sample {
        image: Tensor::new(&shape, data)?,
        au_labels: s.au_labels.clone(),
        landmarks: s.landmarks.mirrored()?,
        subject_id: s.subject_id.clone(),
    })
}

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Write every image under `dir/images` and the manifest to `dir/manifest.csv`.
pub fn write_dataset(ds: &Dataset, dir: &std::path::Path, format: ImageFormat) -> Result<Manifest> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let shape = match ds.samples.first() {
        Some(s) => (s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]),
        None => return Err(Error::Data("cannot write an empty dataset".into())),
    };
    let mut rows = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let rel = format!("images/{i:06}.{}", format.extension());
        write_image(&dir.join(&rel), &s.image)?;
        rows.push(ManifestRow {
            path: rel,
            subject_id: s.subject_id.clone(),
            labels: s.au_labels.clone(),
            landmarks: s.landmarks.coords().to_vec(),
        });
    }
    let m = Manifest {
        dataset: ds.name.clone(),
        aus: ds.aus.clone(),
        landmark_count: ds.landmark_count,
        image_shape: shape,
        label_kind: LabelKind::Binary,
        rows,
    };
    m.write(&dir.join(MANIFEST_FILE))?;
    Ok(m)
}
