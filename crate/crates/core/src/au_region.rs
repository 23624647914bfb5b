//! Landmark prediction, AU centers and local AU feature crops.

use serde::{Deserialize, Serialize};

use crate::backbone::{feat_conv_forward, init_featconv};
use crate::error::{Error, Result};
use crate::params::{Forward, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Mode, Var};
use crate::tensor::Tensor;

pub const LANDMARK_HEAD: &str = "au_region.landmarks";
pub const REFINE: &str = "au_region.refine";

/// `L` points in normalized `(x, y)` image coordinates, clamped to `[0,1]²`.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    coords: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(coords: Vec<[f64; 2]>) -> Self {
        let coords = coords
            .into_iter()
            .map(|[x, y]| [x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)])
            .collect();
        Self { coords }
    }

    /// From interleaved `x0, y0, x1, y1, ...`.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::Data(format!("odd landmark value count {}", flat.len())));
        }
        Ok(Self::new(flat.chunks(2).map(|p| [p[0], p[1]]).collect()))
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn flat(&self) -> Vec<f64> {
        self.coords.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    /// Mirror about the vertical axis and reorder so indices keep their
    /// anatomical meaning.
    pub fn mirrored(&self) -> Result<Self> {
        let perm = mirror_permutation(self.len())?;
        Ok(Self::new(
            perm.iter()
                .map(|&j| [1.0 - self.coords[j][0], self.coords[j][1]])
                .collect(),
        ))
    }
}

// Neutral frontal face, 49 points: brows 0-9, nose 10-18, eyes 19-30,
// outer lips 31-42, inner lips 43-48.
const TEMPLATE_49: [[f64; 2]; 49] = [
    [0.20, 0.30], [0.26, 0.27], [0.32, 0.26], [0.38, 0.27], [0.44, 0.29],
    [0.56, 0.29], [0.62, 0.27], [0.68, 0.26], [0.74, 0.27], [0.80, 0.30],
    [0.50, 0.38], [0.50, 0.44], [0.50, 0.50], [0.50, 0.56],
    [0.42, 0.60], [0.46, 0.61], [0.50, 0.62], [0.54, 0.61], [0.58, 0.60],
    [0.26, 0.40], [0.30, 0.375], [0.35, 0.375], [0.40, 0.40], [0.35, 0.415], [0.30, 0.415],
    [0.60, 0.40], [0.65, 0.375], [0.70, 0.375], [0.74, 0.40], [0.70, 0.415], [0.65, 0.415],
    [0.36, 0.74], [0.40, 0.71], [0.45, 0.69], [0.50, 0.70], [0.55, 0.69], [0.60, 0.71],
    [0.64, 0.74], [0.60, 0.78], [0.55, 0.80], [0.50, 0.81], [0.45, 0.80], [0.40, 0.78],
    [0.41, 0.74], [0.50, 0.73], [0.59, 0.74], [0.55, 0.76], [0.50, 0.765], [0.45, 0.76],
];

const MIRROR_49: [usize; 49] = [
    9, 8, 7, 6, 5, 4, 3, 2, 1, 0,
    10, 11, 12, 13,
    18, 17, 16, 15, 14,
    28, 27, 26, 25, 30, 29,
    22, 21, 20, 19, 24, 23,
    37, 36, 35, 34, 33, 32, 31, 42, 41, 40, 39, 38,
    45, 44, 43, 48, 47, 46,
];

/// Jaw contour points prepended for the 66-point layout.
const JAW_17: usize = 17;

fn jaw_point(i: usize) -> [f64; 2] {
    let t = i as f64 / (JAW_17 - 1) as f64;
    let angle = std::f64::consts::PI * t;
    [0.5 - 0.36 * angle.cos(), 0.35 + 0.62 * angle.sin()]
}

/// Canonical landmark positions for a 49- or 66-point layout.
pub fn template(landmark_count: usize) -> Result<LandmarkSet> {
    match landmark_count {
        49 => Ok(LandmarkSet::new(TEMPLATE_49.to_vec())),
        66 => {
            let mut pts: Vec<[f64; 2]> = (0..JAW_17).map(jaw_point).collect();
            pts.extend_from_slice(&TEMPLATE_49);
            Ok(LandmarkSet::new(pts))
        }
        l => Err(Error::Config(format!("no landmark template for L = {l} (use 49 or 66)"))),
    }
}

pub fn mirror_permutation(landmark_count: usize) -> Result<Vec<usize>> {
    match landmark_count {
        49 => Ok(MIRROR_49.to_vec()),
        66 => {
            let mut p: Vec<usize> = (0..JAW_17).rev().collect();
            p.extend(MIRROR_49.iter().map(|&j| j + JAW_17));
            Ok(p)
        }
        l => Err(Error::Config(format!("no mirror layout for L = {l}"))),
    }
}

/// One AU center: weighted mean of landmarks plus a fixed offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuCenterRule {
    pub au: u32,
    pub landmarks: Vec<usize>,
    /// Affine weights; equal weights when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub offset: (f64, f64),
}

impl AuCenterRule {
    fn new(au: u32, landmarks: &[usize], offset: (f64, f64)) -> Self {
        Self {
            au,
            landmarks: landmarks.to_vec(),
            weights: None,
            offset,
        }
    }

    pub fn evaluate(&self, lms: &LandmarkSet) -> Result<(f64, f64)> {
        let n = self.landmarks.len();
        if n == 0 {
            return Err(Error::Config(format!("AU{} rule references no landmarks", self.au)));
        }
        let weights = match &self.weights {
            Some(w) if w.len() == n => w.clone(),
            Some(w) => {
                return Err(Error::Config(format!(
                    "AU{} rule has {} weights for {n} landmarks",
                    self.au,
                    w.len()
                )))
            }
            None => vec![1.0 / n as f64; n],
        };
        let (mut x, mut y) = self.offset;
        for (&idx, w) in self.landmarks.iter().zip(weights) {
            let p = lms.coords.get(idx).ok_or_else(|| {
                Error::Config(format!(
                    "AU{} rule references landmark {idx} but only {} exist",
                    self.au,
                    lms.len()
                ))
            })?;
            x += w * p[0];
            y += w * p[1];
        }
        Ok((x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AuCenterTable {
    pub rules: Vec<AuCenterRule>,
}

impl AuCenterTable {
    /// Default rules for the 49-point layout, shifted by 17 for 66 points.
    pub fn default_for(landmark_count: usize) -> Result<Self> {
        let shift = match landmark_count {
            49 => 0,
            66 => JAW_17,
            l => return Err(Error::Config(format!("no default AU-center table for L = {l}"))),
        };
        let r = |au, idx: &[usize], off| {
            let idx: Vec<usize> = idx.iter().map(|i| i + shift).collect();
            AuCenterRule::new(au, &idx, off)
        };
        Ok(Self {
            rules: vec![
                r(1, &[4], (0.0, -0.04)),
                r(2, &[0, 1], (0.0, -0.04)),
                r(4, &[4, 5], (0.0, 0.0)),
                r(5, &[26, 27], (0.0, -0.02)),
                r(6, &[29, 30], (0.0, 0.08)),
                r(7, &[23, 24], (0.0, 0.0)),
                r(9, &[11, 12], (0.0, 0.0)),
                r(10, &[33, 35], (0.0, -0.03)),
                r(12, &[31], (-0.03, -0.03)),
                r(14, &[37], (0.04, 0.0)),
                r(15, &[31], (-0.02, 0.05)),
                r(17, &[40], (0.0, 0.10)),
                r(23, &[36, 38], (0.0, 0.0)),
                r(24, &[44, 47], (0.0, 0.0)),
                r(25, &[40, 44], (0.0, 0.0)),
                r(26, &[40], (0.0, 0.06)),
            ],
        })
    }

    pub fn rule(&self, au: u32) -> Result<&AuCenterRule> {
        self.rules
            .iter()
            .find(|r| r.au == au)
            .ok_or_else(|| Error::Config(format!("no AU-center rule for AU{au}")))
    }

    /// Every AU has exactly one rule and all indices are below `landmark_count`.
    pub fn validate(&self, aus: &[u32], landmark_count: usize) -> Result<()> {
        for &au in aus {
            let n = self.rules.iter().filter(|r| r.au == au).count();
            if n != 1 {
                return Err(Error::Config(format!("AU{au} has {n} center rules (need 1)")));
            }
            let rule = self.rule(au)?;
            if let Some(&bad) = rule.landmarks.iter().find(|&&i| i >= landmark_count) {
                return Err(Error::Config(format!(
                    "AU{au} rule references landmark {bad} with L = {landmark_count}"
                )));
            }
        }
        Ok(())
    }

    /// Normalized `(x, y)` center per AU in `aus` order.
    pub fn centers(&self, lms: &LandmarkSet, aus: &[u32]) -> Result<Vec<(f64, f64)>> {
        aus.iter().map(|&au| self.rule(au)?.evaluate(lms)).collect()
    }
}

pub fn au_centers_from_landmarks(
    lms: &LandmarkSet,
    table: &AuCenterTable,
    aus: &[u32],
) -> Result<Vec<(f64, f64)>> {
    table.centers(lms, aus)
}

/// Grid cell whose extent contains `v`, i.e. the nearest cell center.
pub fn grid_cell(v: f64, extent: usize) -> usize {
    ((v.clamp(0.0, 1.0) * extent as f64).floor() as usize).min(extent - 1)
}

/// Top-left cell of a `crop` window centered on `center` and shifted to fit
/// inside a `map` grid. Coordinates are `(x, y)`; the result is `(row, col)`.
pub fn window_origin(
    center: (f64, f64),
    map: (usize, usize),
    crop: (usize, usize),
) -> Result<(usize, usize)> {
    if crop.0 > map.0 || crop.1 > map.1 || crop.0 == 0 || crop.1 == 0 {
        return Err(Error::Config(format!(
            "crop {}x{} does not fit feature map {}x{}",
            crop.0, crop.1, map.0, map.1
        )));
    }
    let fit = |v: f64, extent: usize, size: usize| {
        let cell = grid_cell(v, extent) as isize;
        (cell - (size / 2) as isize).clamp(0, (extent - size) as isize) as usize
    };
    Ok((fit(center.1, map.0, crop.0), fit(center.0, map.1, crop.1)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    pub landmark_count: usize,
    /// `(h, w)` window on the global feature map.
    pub crop: (usize, usize),
    pub d_au: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            landmark_count: 49,
            crop: (6, 6),
            d_au: 64,
        }
    }
}

/// Per-AU vectors in a fixed AU order; the value is `[N, n_au, d_au]`.
#[derive(Clone, Debug)]
pub struct AUFeatureSet {
    pub features: Var,
    pub au_ids: Vec<u32>,
}

pub fn refine_prefix(au: u32) -> String {
    format!("{REFINE}.au{au}")
}

pub fn init(
    cfg: &RegionConfig,
    aus: &[u32],
    head: (usize, usize, usize),
    store: &mut ParamStore,
    rng: &SeededRng,
) {
    let (c, h, w) = head;
    store.init_linear(rng, LANDMARK_HEAD, c * h * w, 2 * cfg.landmark_count);
    let pooled = c * (cfg.crop.0 / 2) * (cfg.crop.1 / 2);
    for &au in aus {
        let p = refine_prefix(au);
        init_featconv(store, rng, &p, c, c);
        store.init_linear(rng, &format!("{p}.proj"), pooled, cfg.d_au);
    }
}

/// Flatten → linear → sigmoid, reshaped to `[N, L, 2]`.
pub fn predict_landmarks(fwd: &mut Forward<'_>, landmark_feature: Var, landmark_count: usize) -> Result<Var> {
    let shape = fwd.tape.shape(landmark_feature).to_vec();
    let n = shape[0];
    let flat = fwd.tape.reshape(landmark_feature, &[n, shape[1..].iter().product()])?;
    let logits = fwd.linear(flat, LANDMARK_HEAD)?;
    let p = fwd.tape.sigmoid(logits);
    fwd.tape.reshape(p, &[n, landmark_count, 2])
}

/// Read the rows of a `[N, L, 2]` prediction as landmark sets.
pub fn landmark_sets(value: &Tensor) -> Vec<LandmarkSet> {
    let per = value.shape()[1] * 2;
    value
        .data()
        .chunks(per)
        .map(|c| LandmarkSet::from_flat(c).expect("even length"))
        .collect()
}

/// Cut one window per AU and sample, refine it, and stack the results.
pub fn crop_au_features(
    fwd: &mut Forward<'_>,
    global: Var,
    centers: &[Vec<(f64, f64)>],
    cfg: &RegionConfig,
    aus: &[u32],
    mode: Mode,
) -> Result<AUFeatureSet> {
    let shape = fwd.tape.shape(global).to_vec();
    let (n, hf, wf) = (shape[0], shape[2], shape[3]);
    if centers.len() != n {
        return Err(Error::dim("crop_au_features", format!("{} center rows for batch {n}", centers.len())));
    }
    let mut per_au = Vec::with_capacity(aus.len());
    for (k, &au) in aus.iter().enumerate() {
        let origins = centers
            .iter()
            .map(|row| window_origin(row[k], (hf, wf), cfg.crop))
            .collect::<Result<Vec<_>>>()?;
        let win = fwd.tape.windows(global, &origins, cfg.crop.0, cfg.crop.1)?;
        let p = refine_prefix(au);
        let refined = feat_conv_forward(fwd, &p, win, mode)?;
        let flat_len = fwd.tape.value(refined).len() / n;
        let flat = fwd.tape.reshape(refined, &[n, flat_len])?;
        let v = fwd.linear(flat, &format!("{p}.proj"))?;
        per_au.push(fwd.tape.reshape(v, &[n, 1, cfg.d_au])?);
    }
    let features = fwd.tape.concat(&per_au, 1)?;
    Ok(AUFeatureSet {
        features,
        au_ids: aus.to_vec(),
    })
}
