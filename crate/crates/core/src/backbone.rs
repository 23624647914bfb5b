//! Patch learning and FeatConv stacks.
//!
//! The input passes a shared convolution, is split into a grid of tiles that
//! each run through their own convolution branch, and is reassembled. Two
//! independent FeatConv stacks then produce the global facial feature and the
//! landmark feature from the shared patch features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Forward, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Mode, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// `(height, width)` in pixels.
    pub input_size: (usize, usize),
    pub input_channels: usize,
    /// `(rows, cols)` of independent patch branches.
    pub patch_grid: (usize, usize),
    pub patch_channels: usize,
    /// Output channels of each FeatConv stage; every stage halves H and W.
    pub featconv_channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: (96, 96),
            input_channels: 1,
            patch_grid: (2, 4),
            patch_channels: 16,
            featconv_channels: vec![16, 32],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        let (rows, cols) = self.patch_grid;
        if h == 0 || w == 0 || self.input_channels == 0 || self.patch_channels == 0 {
            return Err(Error::Config("backbone extents must be positive".into()));
        }
        if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by patch grid {rows}x{cols}"
            )));
        }
        if self.featconv_channels.is_empty() || self.featconv_channels.contains(&0) {
            return Err(Error::Config("at least one FeatConv stage with channels > 0".into()));
        }
        let (mut hh, mut ww) = (h, w);
        for stage in 0..self.featconv_channels.len() {
            if hh % 2 != 0 || ww % 2 != 0 || hh < 2 || ww < 2 {
                return Err(Error::Config(format!(
                    "FeatConv stage {stage} sees odd or unit extent {hh}x{ww}; \
                     input extents must be divisible by 2^{}",
                    self.featconv_channels.len()
                )));
            }
            hh /= 2;
            ww /= 2;
        }
        Ok(())
    }

    /// `(channels, height, width)` of both head outputs:
    /// `(last stage channels, H / 2^stages, W / 2^stages)`.
    pub fn head_shape(&self) -> (usize, usize, usize) {
        let s = self.featconv_channels.len() as u32;
        (
            *self.featconv_channels.last().unwrap(),
            self.input_size.0 >> s,
            self.input_size.1 >> s,
        )
    }

    pub fn tile_size(&self) -> (usize, usize) {
        (
            self.input_size.0 / self.patch_grid.0,
            self.input_size.1 / self.patch_grid.1,
        )
    }
}

pub const PATCH: &str = "backbone.patch";
pub const GLOBAL: &str = "backbone.global";
pub const LANDMARK: &str = "backbone.landmark";

pub fn tile_prefix(r: usize, c: usize) -> String {
    format!("{PATCH}.tile{r}_{c}")
}

/// Register one FeatConv block (conv, BN, PReLU twice) under `prefix`.
pub fn init_featconv(store: &mut ParamStore, rng: &SeededRng, prefix: &str, c_in: usize, c_out: usize) {
    store.init_conv_no_bias(rng, &format!("{prefix}.conv1"), c_in, c_out, 3);
    store.init_batch_norm(&format!("{prefix}.bn1"), c_out);
    store.init_prelu(&format!("{prefix}.act1"), c_out);
    store.init_conv_no_bias(rng, &format!("{prefix}.conv2"), c_out, c_out, 3);
    store.init_batch_norm(&format!("{prefix}.bn2"), c_out);
    store.init_prelu(&format!("{prefix}.act2"), c_out);
}

pub fn init(cfg: &BackboneConfig, store: &mut ParamStore, rng: &SeededRng) {
    store.init_conv(rng, &format!("{PATCH}.init"), cfg.input_channels, cfg.patch_channels, 3);
    store.init_prelu(&format!("{PATCH}.init_act"), cfg.patch_channels);
    for r in 0..cfg.patch_grid.0 {
        for c in 0..cfg.patch_grid.1 {
            let p = tile_prefix(r, c);
            store.init_conv(rng, &format!("{p}.conv"), cfg.patch_channels, cfg.patch_channels, 3);
            store.init_prelu(&format!("{p}.act"), cfg.patch_channels);
        }
    }
    for head in [GLOBAL, LANDMARK] {
        let mut c_in = cfg.patch_channels;
        for (i, &c_out) in cfg.featconv_channels.iter().enumerate() {
            init_featconv(store, rng, &format!("{head}.stage{i}"), c_in, c_out);
            c_in = c_out;
        }
    }
}

/// Shared conv, per-tile branches, reassembly. `image` is `[N,C,H,W]`.
pub fn patch_conv_forward(fwd: &mut Forward<'_>, cfg: &BackboneConfig, image: Var) -> Result<Var> {
    let shape = fwd.tape.shape(image).to_vec();
    if shape.len() != 4
        || shape[1] != cfg.input_channels
        || (shape[2], shape[3]) != cfg.input_size
    {
        return Err(Error::Config(format!(
            "image {shape:?} does not match backbone input {}x{}x{}",
            cfg.input_channels, cfg.input_size.0, cfg.input_size.1
        )));
    }
    let x = fwd.conv(image, &format!("{PATCH}.init"), 1, 1)?;
    let x = fwd.prelu(x, &format!("{PATCH}.init_act"))?;
    let (th, tw) = cfg.tile_size();
    let mut rows = Vec::with_capacity(cfg.patch_grid.0);
    for r in 0..cfg.patch_grid.0 {
        let band = if cfg.patch_grid.0 == 1 { x } else { fwd.tape.slice(x, 2, r * th, th)? };
        let mut tiles = Vec::with_capacity(cfg.patch_grid.1);
        for c in 0..cfg.patch_grid.1 {
            let tile = if cfg.patch_grid.1 == 1 { band } else { fwd.tape.slice(band, 3, c * tw, tw)? };
            let p = tile_prefix(r, c);
            let y = fwd.conv(tile, &format!("{p}.conv"), 1, 1)?;
            tiles.push(fwd.prelu(y, &format!("{p}.act"))?);
        }
        rows.push(if tiles.len() == 1 { tiles[0] } else { fwd.tape.concat(&tiles, 3)? });
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        fwd.tape.concat(&rows, 2)
    }
}

/// Conv→BN→PReLU twice, then 2×2 max pooling; halves both spatial extents.
pub fn feat_conv_forward(fwd: &mut Forward<'_>, prefix: &str, x: Var, mode: Mode) -> Result<Var> {
    let shape = fwd.tape.shape(x);
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!(
            "FeatConv `{prefix}` needs even spatial extents, got {h}x{w}"
        )));
    }
    let mut y = x;
    for i in 1..=2 {
        y = fwd.conv(y, &format!("{prefix}.conv{i}"), 1, 1)?;
        y = fwd.batch_norm(y, &format!("{prefix}.bn{i}"), mode)?;
        y = fwd.prelu(y, &format!("{prefix}.act{i}"))?;
    }
    fwd.tape.max_pool2d(y, 2, 2)
}

fn stack(fwd: &mut Forward<'_>, cfg: &BackboneConfig, head: &str, x: Var, mode: Mode) -> Result<Var> {
    let mut y = x;
    for i in 0..cfg.featconv_channels.len() {
        y = feat_conv_forward(fwd, &format!("{head}.stage{i}"), y, mode)?;
    }
    Ok(y)
}

/// `(global_feature, landmark_feature)` from shared patch features.
pub fn extract_heads(
    fwd: &mut Forward<'_>,
    cfg: &BackboneConfig,
    patch_features: Var,
    mode: Mode,
) -> Result<(Var, Var)> {
    let global = stack(fwd, cfg, GLOBAL, patch_features, mode)?;
    let landmark = stack(fwd, cfg, LANDMARK, patch_features, mode)?;
    Ok((global, landmark))
}

pub fn forward(fwd: &mut Forward<'_>, cfg: &BackboneConfig, image: Var, mode: Mode) -> Result<(Var, Var)> {
    let patches = patch_conv_forward(fwd, cfg, image)?;
    extract_heads(fwd, cfg, patches, mode)
}
