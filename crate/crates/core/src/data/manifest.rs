//! Dataset index file.
//!
//! ```text
//! # dataset=synthetic
//! # aus=1;2;4
//! # landmarks=49
//! # image=1x96x96
//! path,subject_id,au_labels,landmarks
//! images/000000.png,S00,1;0;1,0.2:0.3;0.25:0.31;...
//! ```
//!
//! The third column is `au_labels` for 0/1 occurrence labels or
//! `au_intensities` for raw 0-5 intensities, which are binarized on load.

use std::path::Path;

use super::images::read_image;
use super::{Dataset, Sample};
use crate::au_region::LandmarkSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    Binary,
    Intensity,
}

impl LabelKind {
    fn column(self) -> &'static str {
        match self {
            LabelKind::Binary => "au_labels",
            LabelKind::Intensity => "au_intensities",
        }
    }
}

/// Occurrence from a 0-5 intensity: present iff intensity is at least 2.
pub fn binarize_intensity(raw: u8) -> Result<u8> {
    match raw {
        0..=1 => Ok(0),
        2..=5 => Ok(1),
        _ => Err(Error::Data(format!("AU intensity {raw} outside 0..=5"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    /// Relative to the manifest's directory.
    pub path: String,
    pub subject_id: String,
    pub labels: Vec<u8>,
    pub landmarks: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub dataset: String,
    pub aus: Vec<u32>,
    pub landmark_count: usize,
    /// `(C, H, W)`.
    pub image_shape: (usize, usize, usize),
    pub label_kind: LabelKind,
    pub rows: Vec<ManifestRow>,
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(';')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Data(format!("bad {what} entry `{p}`")))
        })
        .collect()
}

impl Manifest {
    pub fn to_csv(&self) -> Result<String> {
        let (c, h, w) = self.image_shape;
        let mut out = format!(
            "# dataset={}\n# aus={}\n# landmarks={}\n# image={c}x{h}x{w}\n",
            self.dataset,
            join(&self.aus),
            self.landmark_count
        );
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("manifest encoding: {e}"));
        wtr.write_record(["path", "subject_id", self.label_kind.column(), "landmarks"])
            .map_err(csv_err)?;
        for r in &self.rows {
            let lms = join(r.landmarks.iter().map(|p| format!("{}:{}", p[0], p[1])));
            wtr.write_record([r.path.as_str(), r.subject_id.as_str(), &join(&r.labels), &lms])
                .map_err(csv_err)?;
        }
        let body = wtr
            .into_inner()
            .map_err(|e| Error::Data(format!("manifest encoding: {e}")))?;
        out.push_str(std::str::from_utf8(&body).expect("csv writes UTF-8"));
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut dataset = None;
        let mut aus = None;
        let mut landmark_count = None;
        let mut image_shape = None;
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            let Some((k, v)) = line.trim_start_matches('#').trim().split_once('=') else {
                continue;
            };
            let v = v.trim();
            match k.trim() {
                "dataset" => dataset = Some(v.to_string()),
                "aus" => aus = Some(parse_list::<u32>(v, "AU")?),
                "landmarks" => {
                    landmark_count = Some(v.parse().map_err(|_| Error::Data(format!("bad landmark count `{v}`")))?)
                }
                "image" => {
                    let dims: Vec<usize> = v
                        .split('x')
                        .map(|d| d.parse().map_err(|_| Error::Data(format!("bad image shape `{v}`"))))
                        .collect::<Result<_>>()?;
                    if dims.len() != 3 {
                        return Err(Error::Data(format!("image shape `{v}` needs CxHxW")));
                    }
                    image_shape = Some((dims[0], dims[1], dims[2]));
                }
                other => return Err(Error::Data(format!("unknown manifest key `{other}`"))),
            }
        }
        let missing = |k: &str| Error::Data(format!("manifest lacks `# {k}=` line"));
        let aus = aus.ok_or_else(|| missing("aus"))?;
        let landmark_count = landmark_count.ok_or_else(|| missing("landmarks"))?;
        let image_shape = image_shape.ok_or_else(|| missing("image"))?;

        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| Error::Data(format!("manifest header: {e}")))?;
        let label_kind = match headers.get(2) {
            Some("au_labels") => LabelKind::Binary,
            Some("au_intensities") => LabelKind::Intensity,
            other => {
                return Err(Error::Data(format!(
                    "third manifest column must be au_labels or au_intensities, got {other:?}"
                )))
            }
        };
        if headers.len() != 4 || &headers[0] != "path" || &headers[1] != "subject_id" || &headers[3] != "landmarks" {
            return Err(Error::Data(format!("unexpected manifest header {headers:?}")));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("manifest row {i}: {e}")))?;
            let labels: Vec<u8> = parse_list(&rec[2], "label")?;
            if labels.len() != aus.len() {
                return Err(Error::Data(format!(
                    "manifest row {i}: {} labels for {} AUs",
                    labels.len(),
                    aus.len()
                )));
            }
            let landmarks = rec[3]
                .split(';')
                .filter(|p| !p.is_empty())
                .map(|p| {
                    let (x, y) = p
                        .split_once(':')
                        .ok_or_else(|| Error::Data(format!("manifest row {i}: landmark `{p}` is not x:y")))?;
                    let parse = |s: &str| {
                        s.parse::<f64>()
                            .map_err(|_| Error::Data(format!("manifest row {i}: bad coordinate `{s}`")))
                    };
                    Ok([parse(x)?, parse(y)?])
                })
                .collect::<Result<Vec<_>>>()?;
            if landmarks.len() != landmark_count {
                return Err(Error::Data(format!(
                    "manifest row {i}: {} landmarks, expected {landmark_count}",
                    landmarks.len()
                )));
            }
            if rec[1].is_empty() {
                return Err(Error::Data(format!("manifest row {i}: empty subject id")));
            }
            rows.push(ManifestRow {
                path: rec[0].to_string(),
                subject_id: rec[1].to_string(),
                labels,
                landmarks,
            });
        }
        Ok(Self {
            dataset: dataset.unwrap_or_default(),
            aus,
            landmark_count,
            image_shape,
            label_kind,
            rows,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Read every image next to the manifest and binarize labels if needed.
    pub fn load(path: &Path) -> Result<Dataset> {
        let m = Self::read(path)?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let samples = m
            .rows
            .iter()
            .map(|r| {
                let labels = match m.label_kind {
                    LabelKind::Binary => {
                        if let Some(&bad) = r.labels.iter().find(|&&v| v > 1) {
                            return Err(Error::Data(format!("{}: label {bad} is not 0 or 1", r.path)));
                        }
                        r.labels.clone()
                    }
                    LabelKind::Intensity => r.labels.iter().map(|&v| binarize_intensity(v)).collect::<Result<_>>()?,
                };
                Ok(Sample {
                    image: read_image(&dir.join(&r.path), m.image_shape)?,
                    au_labels: labels,
                    landmarks: LandmarkSet::new(r.landmarks.clone()),
                    subject_id: r.subject_id.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset {
            name: m.dataset,
            aus: m.aus,
            landmark_count: m.landmark_count,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }
}
