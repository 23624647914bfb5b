//! Synthetic faces with planted AU co-occurrence and exclusion structure.
//!
//! Each image is a flat face patch with a dark dot per landmark and one
//! bright Gaussian blob per active AU at its center. Members of an active
//! group all fire, with blob amplitude shrinking along the group order.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::images::ImageFormat;
use super::{Dataset, Sample};
use crate::au_region::{template, AuCenterTable, LandmarkSet};
use crate::error::{Error, Result};
use crate::model::BP4D_AUS;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub dataset: String,
    pub aus: Vec<u32>,
    pub landmark_count: usize,
    /// Co-occurrence groups; members outside `aus` are ignored.
    pub groups: Vec<Vec<u32>>,
    /// Activation probability per group (one value applies to all).
    pub group_prob: Vec<f64>,
    /// Pairs that never fire together; each member fires with `base_prob`.
    pub exclusions: Vec<(u32, u32)>,
    /// Occurrence probability of every AU outside the groups.
    pub base_prob: f64,
    /// Amplitude factor between consecutive members of a group.
    pub attenuation: f64,
    pub samples: usize,
    pub subjects: usize,
    /// `(H, W)`.
    pub image_size: (usize, usize),
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Per-subject landmark shift standard deviation (normalized units).
    pub subject_jitter: f64,
    /// Per-sample, per-landmark standard deviation (normalized units).
    pub sample_jitter: f64,
    pub blob_sigma: f64,
    pub blob_amplitude: f64,
    pub landmark_amplitude: f64,
    pub image_format: ImageFormat,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dataset: "synthetic".into(),
            aus: BP4D_AUS.to_vec(),
            landmark_count: 49,
            groups: vec![vec![1, 2, 5], vec![4, 7, 9]],
            group_prob: vec![0.3],
            exclusions: vec![(12, 15)],
            base_prob: 0.3,
            attenuation: 0.6,
            samples: 3000,
            subjects: 12,
            image_size: (96, 96),
            noise: 0.1,
            subject_jitter: 0.015,
            sample_jitter: 0.004,
            blob_sigma: 2.5,
            blob_amplitude: 0.08,
            landmark_amplitude: 0.25,
            image_format: ImageFormat::Png,
        }
    }
}

/// Groups and exclusion pairs restricted to the AU list, as indices into it.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub groups: Vec<Vec<usize>>,
    pub group_prob: Vec<f64>,
    pub exclusions: Vec<(usize, usize)>,
}

impl SyntheticSpec {
    /// Check the spec and resolve groups against the AU list.
    pub fn resolve(&self) -> Result<GroupStats> {
        let err = |m: String| Err(Error::Spec(m));
        if self.aus.is_empty() {
            return err("AU list is empty".into());
        }
        if self.samples == 0 || self.subjects == 0 {
            return err("samples and subjects must be positive".into());
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return err("image size must be positive".into());
        }
        let probs_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !probs_ok(self.base_prob) || self.group_prob.iter().any(|&p| !probs_ok(p)) {
            return err("probabilities must lie in [0, 1]".into());
        }
        if self.group_prob.len() != 1 && self.group_prob.len() != self.groups.len() {
            return err(format!(
                "{} group probabilities for {} groups",
                self.group_prob.len(),
                self.groups.len()
            ));
        }
        if self.noise < 0.0 || self.subject_jitter < 0.0 || self.sample_jitter < 0.0 || self.blob_sigma <= 0.0 {
            return err("noise, jitter and blob width must be non-negative".into());
        }
        let mut seen = BTreeSet::new();
        for g in &self.groups {
            for &au in g {
                if !seen.insert(au) {
                    return err(format!("AU{au} belongs to more than one group"));
                }
            }
        }
        let mut excl_seen = BTreeSet::new();
        for &(a, b) in &self.exclusions {
            if a == b {
                return err(format!("exclusion pair ({a}, {b}) repeats one AU"));
            }
            for au in [a, b] {
                if seen.contains(&au) {
                    return err(format!("AU{au} is both grouped and in an exclusion pair"));
                }
                if !excl_seen.insert(au) {
                    return err(format!("AU{au} appears in more than one exclusion pair"));
                }
            }
        }
        if !self.exclusions.is_empty() && 2.0 * self.base_prob > 1.0 {
            return err(format!("base_prob {} too large for exclusive pairs", self.base_prob));
        }
        let idx = |au: u32| self.aus.iter().position(|&a| a == au);
        let mut groups = Vec::new();
        let mut group_prob = Vec::new();
        for (gi, g) in self.groups.iter().enumerate() {
            let members: Vec<usize> = g.iter().filter_map(|&au| idx(au)).collect();
            if !members.is_empty() {
                groups.push(members);
                group_prob.push(self.group_prob[if self.group_prob.len() == 1 { 0 } else { gi }]);
            }
        }
        let exclusions = self
            .exclusions
            .iter()
            .filter_map(|&(a, b)| Some((idx(a)?, idx(b)?)))
            .collect();
        template(self.landmark_count).map_err(|e| Error::Spec(e.to_string()))?;
        AuCenterTable::default_for(self.landmark_count)
            .and_then(|t| t.validate(&self.aus, self.landmark_count))
            .map_err(|e| Error::Spec(e.to_string()))?;
        Ok(GroupStats {
            groups,
            group_prob,
            exclusions,
        })
    }
}

fn sample_labels(stats: &GroupStats, n_au: usize, base: f64, rng: &mut SeededRng) -> Vec<u8> {
    let mut labels = vec![0u8; n_au];
    let mut assigned = vec![false; n_au];
    for (g, &p) in stats.groups.iter().zip(&stats.group_prob) {
        let on = rng.bernoulli(p);
        for &k in g {
            labels[k] = on as u8;
            assigned[k] = true;
        }
    }
    for &(a, b) in &stats.exclusions {
        let u = rng.uniform();
        labels[a] = (u < base) as u8;
        labels[b] = (u >= base && u < 2.0 * base) as u8;
        assigned[a] = true;
        assigned[b] = true;
    }
    for k in 0..n_au {
        if !assigned[k] {
            labels[k] = rng.bernoulli(base) as u8;
        }
    }
    labels
}

/// Add `amp · exp(-d² / 2σ²)` around `(x, y)` (normalized) within 3σ.
fn splat(img: &mut [f64], size: (usize, usize), center: (f64, f64), sigma: f64, amp: f64) {
    let (h, w) = size;
    let (cx, cy) = (center.0 * w as f64 - 0.5, center.1 * h as f64 - 0.5);
    let r = (3.0 * sigma).ceil() as isize;
    let (x0, y0) = (cx.round() as isize, cy.round() as isize);
    for yy in (y0 - r).max(0)..=(y0 + r).min(h as isize - 1) {
        for xx in (x0 - r).max(0)..=(x0 + r).min(w as isize - 1) {
            let d2 = (xx as f64 - cx).powi(2) + (yy as f64 - cy).powi(2);
            img[yy as usize * w + xx as usize] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
}

struct Subject {
    id: String,
    shift: (f64, f64),
    background: f64,
}

/// Render `spec.samples` images. Subject `i % subjects` owns sample `i`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let stats = spec.resolve()?;
    let root = SeededRng::new(seed).split("synthetic");
    let base = template(spec.landmark_count)?;
    let table = AuCenterTable::default_for(spec.landmark_count)?;
    let width = format!("{}", spec.subjects - 1).len().max(2);
    let subjects: Vec<Subject> = (0..spec.subjects)
        .map(|s| {
            let mut r = root.split_index("subject", s as u64);
            Subject {
                id: format!("S{s:0width$}"),
                shift: (spec.subject_jitter * r.normal(), spec.subject_jitter * r.normal()),
                background: 0.35 + 0.15 * r.uniform(),
            }
        })
        .collect();
    let (h, w) = spec.image_size;
    let mut label_rng = root.split("labels");
    let mut samples = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let subj = &subjects[i % spec.subjects];
        let labels = sample_labels(&stats, spec.aus.len(), spec.base_prob, &mut label_rng);
        let mut r = root.split_index("sample", i as u64);
        let lms = LandmarkSet::new(
            base.coords()
                .iter()
                .map(|p| {
                    [
                        p[0] + subj.shift.0 + spec.sample_jitter * r.normal(),
                        p[1] + subj.shift.1 + spec.sample_jitter * r.normal(),
                    ]
                })
                .collect(),
        );
        let mut img = vec![subj.background; h * w];
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                let e = ((nx - 0.5 - subj.shift.0) / 0.4).powi(2) + ((ny - 0.55 - subj.shift.1) / 0.48).powi(2);
                img[y * w + x] += 0.12 / (1.0 + (12.0 * (e - 1.0)).exp());
            }
        }
        for p in lms.coords() {
            splat(&mut img, (h, w), (p[0], p[1]), 1.0, -spec.landmark_amplitude);
        }
        let centers = table.centers(&lms, &spec.aus)?;
        let mut amp = vec![spec.blob_amplitude; spec.aus.len()];
        for g in &stats.groups {
            for (j, &k) in g.iter().enumerate() {
                amp[k] *= spec.attenuation.powi(j as i32);
            }
        }
        for (k, &on) in labels.iter().enumerate() {
            if on == 1 {
                splat(&mut img, (h, w), centers[k], spec.blob_sigma, amp[k]);
            }
        }
        if spec.noise > 0.0 {
            img.iter_mut().for_each(|v| *v += spec.noise * r.normal());
        }
        let img = img.into_iter().map(|v| spec.image_format.quantize(v)).collect();
        samples.push(Sample {
            image: Tensor::new(&[1, h, w], img)?,
            au_labels: labels,
            landmarks: lms,
            subject_id: subj.id.clone(),
        });
    }
    Ok(Dataset {
        name: spec.dataset.clone(),
        aus: spec.aus.clone(),
        landmark_count: spec.landmark_count,
        samples,
    })
}
