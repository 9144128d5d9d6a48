//! Full localization: coarse pose from descriptor retrieval, covisibility
//! clustering, and PnP-RANSAC; fine pose from masked photometric and
//! geometric analysis-by-synthesis refinement on the Gaussian map.

mod features;
mod pipeline;
mod pnp;
mod refine;

pub use features::{
    detect_keypoints, global_descriptor, match_keypoints_ncc, KeyPoint, NccMatch,
    GLOBAL_DESCRIPTOR_LEN,
};
pub use pipeline::{
    build_database, covisibility_cluster, localize, retrieve_knn, DbKeypoint,
    LocalizationDatabase, LocalizeConfig, LocalizeDiagnostics, ObservationGraph, ViewRecord,
};
pub use pnp::{pnp_ransac, Correspondences, PnpConfig, PnpResult};
pub use refine::{refine_pose, RefineDiagnostics, RefineQuery, RefineState};

pub use crate::img::PixelMask;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::{ImageGray, ImageRgb};

/// Mask thresholds: Scharr gradient magnitude, feature-box half-width in
/// pixels, and occupancy.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub tau_grad: f64,
    pub tau_fea: f64,
    pub tau_occ: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            tau_grad: 1.0,
            tau_fea: 10.0,
            tau_occ: 0.99,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_fea < 0.0 {
            return Err(Error::Config("tau_fea must be >= 0".into()));
        }
        if !(self.tau_occ > 0.0 && self.tau_occ < 1.0) {
            return Err(Error::Config("tau_occ must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Pose-refinement settings. Learning rates follow the reference value 0.01
/// for angular, translational, and brightness parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub lr_rotation: f64,
    pub lr_translation: f64,
    pub lr_brightness: f64,
    pub lambda_geo: f64,
    /// Per-iteration multiplicative decay applied to all learning rates;
    /// 1.0 keeps them constant.
    pub lr_decay: f64,
    pub max_iterations: u32,
    /// Stop once `|omega| + |v| / scene_scale` falls below this.
    pub step_tolerance: f64,
    pub mask: MaskConfig,
    /// Keypoint budget for the feature mask.
    pub max_keypoints: usize,
    /// When false, the combined mask is replaced by an all-ones mask.
    pub use_mask: bool,
    /// When false, the brightness parameters stay frozen at zero.
    pub optimize_brightness: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            lr_rotation: 0.01,
            lr_translation: 0.01,
            lr_brightness: 0.01,
            lambda_geo: 0.01,
            lr_decay: 0.995,
            max_iterations: 1000,
            step_tolerance: 1e-6,
            mask: MaskConfig::default(),
            max_keypoints: 400,
            use_mask: true,
            optimize_brightness: true,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_rotation <= 0.0 || self.lr_translation <= 0.0 || self.lr_brightness <= 0.0 {
            return Err(Error::Config("refinement learning rates must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must lie in (0, 1]".into()));
        }
        self.mask.validate()
    }
}

const SCHARR_X: [[f64; 3]; 3] = [[-3.0, 0.0, 3.0], [-10.0, 0.0, 10.0], [-3.0, 0.0, 3.0]];

/// Pixels whose Scharr gradient magnitude (on the 0-255 luma scale) exceeds
/// `tau_grad`. The 3x10x3 kernels are normalized by 1/32 per axis and the
/// border uses clamped-edge padding.
pub fn scharr_gradient_mask(image: &ImageRgb, tau_grad: f64) -> PixelMask {
    let gray = image.to_grayscale();
    let (w, h) = (gray.width, gray.height);
    let clamped = |x: i64, y: i64| -> f64 {
        let cx = x.clamp(0, w as i64 - 1) as u32;
        let cy = y.clamp(0, h as i64 - 1) as u32;
        gray[(cx, cy)]
    };
    PixelMask::from_fn(w, h, |x, y| {
        let mut gx = 0.0;
        let mut gy = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let v = clamped(x as i64 + dx, y as i64 + dy);
                gx += SCHARR_X[(dy + 1) as usize][(dx + 1) as usize] * v;
                // The y kernel is the transpose of the x kernel.
                gy += SCHARR_X[(dx + 1) as usize][(dy + 1) as usize] * v;
            }
        }
        gx /= 32.0;
        gy /= 32.0;
        (gx * gx + gy * gy).sqrt() > tau_grad
    })
}

/// Chebyshev boxes of half-width `tau_fea` around each keypoint, clipped to
/// the image bounds.
pub fn feature_mask(keypoints: &[KeyPoint], tau_fea: f64, width: u32, height: u32) -> PixelMask {
    let mut mask = PixelMask::new(width, height);
    let r = tau_fea.max(0.0).floor() as i64;
    for kp in keypoints {
        let (cx, cy) = (kp.x as i64, kp.y as i64);
        let x0 = (cx - r).max(0) as u32;
        let x1 = ((cx + r).min(width as i64 - 1)) as u32;
        let y0 = (cy - r).max(0) as u32;
        let y1 = ((cy + r).min(height as i64 - 1)) as u32;
        for y in y0..=y1 {
            for x in x0..=x1 {
                mask[(x, y)] = true;
            }
        }
    }
    mask
}

/// Pixels whose occupancy exceeds `tau_occ`: where the rendered map carries
/// enough splat mass to constrain the residual.
pub fn occupancy_mask(occupancy: &ImageGray, tau_occ: f64) -> PixelMask {
    PixelMask::from_fn(occupancy.width, occupancy.height, |x, y| {
        occupancy[(x, y)] > tau_occ
    })
}

/// `(grad OR fea) AND occ`, elementwise.
pub fn combine_masks(grad: &PixelMask, fea: &PixelMask, occ: &PixelMask) -> Result<PixelMask> {
    if grad.width != fea.width
        || grad.height != fea.height
        || grad.width != occ.width
        || grad.height != occ.height
    {
        return Err(Error::DimensionMismatch("mask sizes".into()));
    }
    Ok(PixelMask::from_fn(grad.width, grad.height, |x, y| {
        (grad[(x, y)] || fea[(x, y)]) && occ[(x, y)]
    }))
}

/// Per-pixel photometric residual `sum_ch |e^a C + b - C_bar|`.
pub fn photometric_residual(
    rendered: &ImageRgb,
    target: &ImageRgb,
    a: f64,
    b: f64,
) -> Result<ImageGray> {
    if !rendered.same_size(target) {
        return Err(Error::DimensionMismatch("photometric residual sizes".into()));
    }
    let ea = a.exp();
    Ok(ImageGray::from_fn(rendered.width, rendered.height, |x, y| {
        let c = rendered[(x, y)];
        let t = target[(x, y)];
        (0..3).map(|ch| (ea * c[ch] + b - t[ch]).abs()).sum()
    }))
}

/// Per-pixel depth residual `|D - D_bar|` where the reference depth is
/// valid (positive), 0 elsewhere.
pub fn geometric_residual(rendered: &ImageGray, target: &ImageGray) -> Result<ImageGray> {
    if !rendered.same_size(target) {
        return Err(Error::DimensionMismatch("geometric residual sizes".into()));
    }
    Ok(ImageGray::from_fn(rendered.width, rendered.height, |x, y| {
        let t = target[(x, y)];
        if t > 0.0 {
            (rendered[(x, y)] - t).abs()
        } else {
            0.0
        }
    }))
}
