//! Iterative pose refinement: analysis-by-synthesis alignment of a query
//! image against the Gaussian map, restricted to information-rich pixels.
//!
//! Each iteration renders at the current pose, rebuilds the combined mask
//! (the gradient and feature masks come from the query once; the occupancy
//! mask tracks the current render, since occupancy depends on the pose),
//! then takes one Adam step on the pose twist and the affine brightness
//! parameters. The pose with the lowest observed objective is returned.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::{apply_twist, CameraIntrinsics, Pose, Twist};
use crate::img::{ImageGray, ImageRgb, PixelMask};
use crate::optim::Adam;
use crate::render::{self, Reduction, ResidualSpec};
use crate::splat::GaussianMap;

use super::{
    combine_masks, detect_keypoints, feature_mask, occupancy_mask, scharr_gradient_mask,
    RefineConfig,
};

/// The query side of a refinement: an image and optionally its depth.
#[derive(Debug, Clone, Copy)]
pub struct RefineQuery<'a> {
    pub image: &'a ImageRgb,
    pub depth: Option<&'a ImageGray>,
}

/// Pose estimate plus affine brightness state during refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineState {
    pub pose: Pose,
    pub a: f64,
    pub b: f64,
    pub iteration: u32,
    pub last_objective: f64,
}

#[derive(Debug, Clone)]
pub struct RefineDiagnostics {
    /// Iterations actually run.
    pub iterations: u32,
    /// Lowest observed masked objective; the returned pose attains it.
    pub final_objective: f64,
    /// Masked pixel count at the last evaluation.
    pub masked_pixels: usize,
    /// Per-iteration objective values (each under that iteration's mask).
    pub objective_trace: Vec<f64>,
    pub masked_trace: Vec<usize>,
    /// True when the run stopped on the pose-step tolerance.
    pub converged_by_step: bool,
    /// Final optimizer state.
    pub state: RefineState,
}

/// Refines `initial` against the query by masked photometric (and, when
/// query depth exists, geometric) analysis-by-synthesis. Errors with
/// [`Error::EmptyMask`] if the combined mask ever goes empty, which signals
/// an initialization too far from the map or an empty render.
pub fn refine_pose(
    query: &RefineQuery,
    map: &GaussianMap,
    initial: &Pose,
    k: &CameraIntrinsics,
    config: &RefineConfig,
) -> Result<(Pose, RefineDiagnostics)> {
    config.validate()?;
    if query.image.width != k.width || query.image.height != k.height {
        return Err(Error::DimensionMismatch(format!(
            "query {}x{} vs camera {}x{}",
            query.image.width, query.image.height, k.width, k.height
        )));
    }
    if map.is_empty() {
        return Err(Error::EmptyMap);
    }

    // Query-side masks are pose-independent: compute once.
    let (grad_mask, fea_mask) = if config.use_mask {
        let grad = scharr_gradient_mask(query.image, config.mask.tau_grad);
        let keypoints = detect_keypoints(query.image, config.max_keypoints);
        let fea = feature_mask(&keypoints, config.mask.tau_fea, k.width, k.height);
        (grad, fea)
    } else {
        let all = PixelMask::filled(k.width, k.height, true);
        (all.clone(), all)
    };

    let mut pose = *initial;
    let mut a = 0.0f64;
    let mut b = 0.0f64;
    let mut adam_rot = Adam::new(config.lr_rotation, 3);
    let mut adam_trans = Adam::new(config.lr_translation, 3);
    let mut adam_brightness = Adam::new(config.lr_brightness, 2);

    let mut best: Option<(f64, Pose)> = None;
    let mut objective_trace = Vec::new();
    let mut masked_trace = Vec::new();
    let mut converged_by_step = false;
    let mut iterations = 0;

    let evaluate = |pose: &Pose,
                    a: f64,
                    b: f64,
                    with_gradients: bool|
     -> Result<(f64, usize, Option<[f64; 6]>, f64, f64)> {
        let prepared = render::prepare(map, pose, k)?;
        let out = render::rasterize_prepared(&prepared, k);
        let mask = if config.use_mask {
            let occ = occupancy_mask(&out.occupancy, config.mask.tau_occ);
            combine_masks(&grad_mask, &fea_mask, &occ)?
        } else {
            PixelMask::filled(k.width, k.height, true)
        };
        let masked = mask.count();
        if masked == 0 {
            return Err(Error::EmptyMask);
        }
        let spec = ResidualSpec::PoseRefinement {
            target: query.image,
            query_depth: query.depth,
            mask: &mask,
            a,
            b,
            lambda_geo: config.lambda_geo,
            reduction: Reduction::MeanOverMask,
        };
        let lg = render::evaluate_residual(&out, &spec)?;
        let twist = with_gradients
            .then(|| render::backward_prepared(&prepared, map, pose, k, &lg).0);
        Ok((lg.loss, masked, twist, lg.d_a, lg.d_b))
    };

    for iteration in 1..=config.max_iterations {
        iterations = iteration;
        let (objective, masked, twist, d_a, d_b) = evaluate(&pose, a, b, true)?;
        objective_trace.push(objective);
        masked_trace.push(masked);
        if best.as_ref().map_or(true, |(obj, _)| objective < *obj) {
            best = Some((objective, pose));
        }

        let decay = config.lr_decay.powi(iteration as i32 - 1);
        adam_rot.lr = config.lr_rotation * decay;
        adam_trans.lr = config.lr_translation * decay;
        adam_brightness.lr = config.lr_brightness * decay;

        let d_twist = twist.expect("gradients requested");
        let rot_delta = adam_rot.update(&d_twist[0..3]);
        let trans_delta = adam_trans.update(&d_twist[3..6]);
        if config.optimize_brightness {
            let ab_delta = adam_brightness.update(&[d_a, d_b]);
            a += ab_delta[0];
            b += ab_delta[1];
        }
        let omega = Vector3::new(rot_delta[0], rot_delta[1], rot_delta[2]);
        let v = Vector3::new(trans_delta[0], trans_delta[1], trans_delta[2]);
        pose = apply_twist(&pose, &Twist::new(omega, v));

        let step_norm = omega.norm() + v.norm() / map.scene_scale;
        if step_norm < config.step_tolerance {
            converged_by_step = true;
            break;
        }
    }

    // The loop scores poses before stepping; score the final pose too.
    let (final_objective, final_masked, _, _, _) = evaluate(&pose, a, b, false)?;
    objective_trace.push(final_objective);
    masked_trace.push(final_masked);
    if best.as_ref().map_or(true, |(obj, _)| final_objective < *obj) {
        best = Some((final_objective, pose));
    }

    let (best_objective, best_pose) = best.expect("at least one evaluation");
    let diagnostics = RefineDiagnostics {
        iterations,
        final_objective: best_objective,
        masked_pixels: final_masked,
        objective_trace,
        masked_trace,
        converged_by_step,
        state: RefineState {
            pose,
            a,
            b,
            iteration: iterations,
            last_objective: final_objective,
        },
    };
    Ok((best_pose, diagnostics))
}
