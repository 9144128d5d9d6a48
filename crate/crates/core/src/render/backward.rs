//! Analytic reverse-mode gradients through compositing, projection, and pose.
//!
//! The loss layer turns a render plus a residual specification into
//! per-pixel upstream gradients for color and depth (occupancy feeds masks
//! only and carries no gradient). The backward pass then chains those
//! through the compositing weights, the projected 2D Gaussians, and the
//! projection itself, producing gradients for the pose twist, the affine
//! brightness parameters, and every primitive parameter. Sorting and
//! culling are treated as locally constant.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pose};
use crate::img::{ImageGray, ImageRgb, PixelMask};
use crate::splat::{covariance, GaussianMap};

use super::{
    composite_pixel, prepare, projection_jacobian, rasterize_prepared, tile_rect, Contribution,
    Prepared, RenderOutput,
};

/// How a pose-refinement objective is reduced over the masked pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over the masked pixel count (objective comparable across masks).
    MeanOverMask,
    /// Plain sum over masked pixels.
    Sum,
}

/// Names the loss composition a gradient pass differentiates.
#[derive(Debug, Clone)]
pub enum ResidualSpec<'a> {
    /// Map-training objective:
    /// `w_rgb * mean|C - C_bar| + lambda_d * mean_{D_bar>0}|D - D_bar|
    ///  + lambda_reg * (1 - pearson(D, D_hat))`.
    /// Real views use `w_rgb = 1`; pseudo views regularize only
    /// (`w_rgb = 0`, no ground-truth depth).
    MapTraining {
        target: &'a ImageRgb,
        gt_depth: Option<&'a ImageGray>,
        est_depth: Option<&'a ImageGray>,
        lambda_d: f64,
        lambda_reg: f64,
        w_rgb: f64,
    },
    /// Masked pose-refinement objective:
    /// `red( sum_{p in M} sum_ch |e^a C + b - C_bar| + lambda_geo * [D_bar>0] |D - D_bar| )`.
    PoseRefinement {
        target: &'a ImageRgb,
        query_depth: Option<&'a ImageGray>,
        mask: &'a PixelMask,
        a: f64,
        b: f64,
        lambda_geo: f64,
        reduction: Reduction,
    },
}

/// Scalar loss plus upstream per-pixel gradients.
pub struct LossGrads {
    pub loss: f64,
    pub d_color: Vec<[f64; 3]>,
    pub d_depth: Vec<f64>,
    pub d_a: f64,
    pub d_b: f64,
    /// Pixels that entered the objective (mask cardinality for refinement,
    /// full pixel count for training).
    pub masked_pixels: usize,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Evaluates the residual spec on a finished render, producing the loss and
/// the gradients the rasterizer backward pass consumes.
pub fn evaluate_residual(render: &RenderOutput, spec: &ResidualSpec) -> Result<LossGrads> {
    let (w, h) = (render.color.width, render.color.height);
    let n_px = (w * h) as usize;
    let mut out = LossGrads {
        loss: 0.0,
        d_color: vec![[0.0; 3]; n_px],
        d_depth: vec![0.0; n_px],
        d_a: 0.0,
        d_b: 0.0,
        masked_pixels: n_px,
    };

    match spec {
        ResidualSpec::MapTraining {
            target,
            gt_depth,
            est_depth,
            lambda_d,
            lambda_reg,
            w_rgb,
        } => {
            if !render.color.same_size(target) {
                return Err(Error::DimensionMismatch(format!(
                    "render {}x{} vs target {}x{}",
                    w, h, target.width, target.height
                )));
            }
            if *w_rgb != 0.0 {
                let norm = w_rgb / (3.0 * n_px as f64);
                for (i, (c, t)) in render.color.pixels().iter().zip(target.pixels()).enumerate() {
                    for ch in 0..3 {
                        let e = c[ch] - t[ch];
                        out.loss += e.abs() * norm;
                        out.d_color[i][ch] = sign(e) * norm;
                    }
                }
            }
            if let Some(gt) = gt_depth {
                if !render.depth.same_size(gt) {
                    return Err(Error::DimensionMismatch("depth target size".into()));
                }
                if *lambda_d != 0.0 {
                    let n_valid = gt.values().iter().filter(|&&d| d > 0.0).count();
                    if n_valid > 0 {
                        let norm = lambda_d / n_valid as f64;
                        for (i, (d, t)) in
                            render.depth.values().iter().zip(gt.values()).enumerate()
                        {
                            if *t > 0.0 {
                                let e = d - t;
                                out.loss += e.abs() * norm;
                                out.d_depth[i] += sign(e) * norm;
                            }
                        }
                    }
                }
            }
            if let Some(est) = est_depth {
                if !render.depth.same_size(est) {
                    return Err(Error::DimensionMismatch("estimated depth size".into()));
                }
                if *lambda_reg != 0.0 {
                    add_pearson_term(render.depth.values(), est.values(), *lambda_reg, &mut out);
                }
            }
        }
        ResidualSpec::PoseRefinement {
            target,
            query_depth,
            mask,
            a,
            b,
            lambda_geo,
            reduction,
        } => {
            if !render.color.same_size(target) || !mask.same_size_as(w, h) {
                return Err(Error::DimensionMismatch(format!(
                    "render {}x{} vs target {}x{} vs mask {}x{}",
                    w, h, target.width, target.height, mask.width, mask.height
                )));
            }
            if let Some(d) = query_depth {
                if !render.depth.same_size(d) {
                    return Err(Error::DimensionMismatch("query depth size".into()));
                }
            }
            let count = mask.count();
            out.masked_pixels = count;
            let norm = match reduction {
                Reduction::MeanOverMask => {
                    if count == 0 {
                        return Ok(out);
                    }
                    1.0 / count as f64
                }
                Reduction::Sum => 1.0,
            };
            let ea = a.exp();
            for (i, m) in mask.values().iter().enumerate() {
                if !m {
                    continue;
                }
                let c = render.color.pixels()[i];
                let t = target.pixels()[i];
                for ch in 0..3 {
                    let v = ea * c[ch] + b - t[ch];
                    let s = sign(v);
                    out.loss += v.abs() * norm;
                    out.d_color[i][ch] = s * ea * norm;
                    out.d_a += s * ea * c[ch] * norm;
                    out.d_b += s * norm;
                }
                if let Some(dq) = query_depth {
                    let dbar = dq.values()[i];
                    if dbar > 0.0 {
                        let v = render.depth.values()[i] - dbar;
                        out.loss += lambda_geo * v.abs() * norm;
                        out.d_depth[i] = lambda_geo * sign(v) * norm;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `lambda * (1 - r)` over pixels where both depths are positive, with the
/// gradient flowing into the rendered depth. Fewer than 16 valid pixels or a
/// near-zero variance yields no signal.
fn add_pearson_term(rendered: &[f64], estimated: &[f64], lambda: f64, out: &mut LossGrads) {
    let valid: Vec<usize> = (0..rendered.len())
        .filter(|&i| rendered[i] > 0.0 && estimated[i] > 0.0)
        .collect();
    let n = valid.len();
    if n < 16 {
        return;
    }
    let nf = n as f64;
    let mean_x = valid.iter().map(|&i| rendered[i]).sum::<f64>() / nf;
    let mean_y = valid.iter().map(|&i| estimated[i]).sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for &i in &valid {
        let dx = rendered[i] - mean_x;
        let dy = estimated[i] - mean_y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx / nf < 1e-12 || syy / nf < 1e-12 {
        return;
    }
    let denom = (sxx * syy).sqrt();
    let r = sxy / denom;
    out.loss += lambda * (1.0 - r);
    let k = sxy / sxx;
    for &i in &valid {
        let dr = ((estimated[i] - mean_y) - k * (rendered[i] - mean_x)) / denom;
        out.d_depth[i] -= lambda * dr;
    }
}

/// Gradient of the objective with respect to the pose twist (rotation then
/// translation) and the affine brightness parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseGradients {
    pub d_twist: [f64; 6],
    pub d_a: f64,
    pub d_b: f64,
}

/// Per-primitive parameter gradients plus the positional-gradient magnitude
/// used by adaptive density control.
#[derive(Debug, Clone, PartialEq)]
pub struct MapGradients {
    pub d_position: Vec<Vector3<f64>>,
    /// Gradient with respect to a local axis-angle increment applied on the
    /// left of the primitive orientation.
    pub d_rotation: Vec<Vector3<f64>>,
    pub d_log_scales: Vec<Vector3<f64>>,
    pub d_opacity_logit: Vec<f64>,
    pub d_color: Vec<[f64; 3]>,
    pub positional_grad_magnitude: Vec<f64>,
}

impl MapGradients {
    fn zeros(n: usize) -> Self {
        MapGradients {
            d_position: vec![Vector3::zeros(); n],
            d_rotation: vec![Vector3::zeros(); n],
            d_log_scales: vec![Vector3::zeros(); n],
            d_opacity_logit: vec![0.0; n],
            d_color: vec![[0.0; 3]; n],
            positional_grad_magnitude: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_position.is_empty()
    }
}

/// Everything one differentiable rasterization produces.
pub struct GradientPass {
    pub render: RenderOutput,
    pub loss: f64,
    pub masked_pixels: usize,
    pub pose: PoseGradients,
    pub map: MapGradients,
}

/// Gradients of the loss with respect to one splat's projected-space
/// quantities, accumulated over the pixels it touches.
#[derive(Debug, Clone, Copy)]
struct ProjGrad {
    d_mean: Vector2<f64>,
    d_cov: Matrix2<f64>,
    d_depth: f64,
    d_alpha: f64,
    d_color: [f64; 3],
}

impl ProjGrad {
    fn zero() -> Self {
        ProjGrad {
            d_mean: Vector2::zeros(),
            d_cov: Matrix2::zeros(),
            d_depth: 0.0,
            d_alpha: 0.0,
            d_color: [0.0; 3],
        }
    }

    fn is_zero(&self) -> bool {
        self.d_mean == Vector2::zeros()
            && self.d_cov == Matrix2::zeros()
            && self.d_depth == 0.0
            && self.d_alpha == 0.0
            && self.d_color == [0.0; 3]
    }
}

/// Renders with the given residual spec and returns the render, the loss,
/// and analytic gradients for pose, brightness, and every primitive.
pub fn rasterize_with_gradients(
    map: &GaussianMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    spec: &ResidualSpec,
) -> Result<GradientPass> {
    let prepared = prepare(map, pose, k)?;
    let render = rasterize_prepared(&prepared, k);
    let loss_grads = evaluate_residual(&render, spec)?;
    let (pose_grads, map_grads) = backward_prepared(&prepared, map, pose, k, &loss_grads);
    Ok(GradientPass {
        render,
        loss: loss_grads.loss,
        masked_pixels: loss_grads.masked_pixels,
        pose: PoseGradients {
            d_twist: pose_grads,
            d_a: loss_grads.d_a,
            d_b: loss_grads.d_b,
        },
        map: map_grads,
    })
}

pub(crate) fn backward_prepared(
    prepared: &Prepared,
    map: &GaussianMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    upstream: &LossGrads,
) -> ([f64; 6], MapGradients) {
    let n_tiles = (prepared.tiles_x * prepared.tiles_y) as usize;
    // Per tile, gradients aligned with the tile's bin list. Tiles run in
    // parallel; the merge below walks them in fixed order.
    let tile_grads: Vec<Vec<ProjGrad>> = (0..n_tiles as u32)
        .into_par_iter()
        .map(|tile| backward_tile(prepared, k, tile, upstream))
        .collect();

    let mut proj_grads = vec![ProjGrad::zero(); prepared.splats.len()];
    for (tile, grads) in tile_grads.iter().enumerate() {
        for (pos, g) in grads.iter().enumerate() {
            if g.is_zero() {
                continue;
            }
            let splat_idx = prepared.bins[tile][pos] as usize;
            let acc = &mut proj_grads[splat_idx];
            acc.d_mean += g.d_mean;
            acc.d_cov += g.d_cov;
            acc.d_depth += g.d_depth;
            acc.d_alpha += g.d_alpha;
            for ch in 0..3 {
                acc.d_color[ch] += g.d_color[ch];
            }
        }
    }

    chain_to_parameters(prepared, map, pose, k, &proj_grads)
}

fn backward_tile(
    prepared: &Prepared,
    k: &CameraIntrinsics,
    tile: u32,
    upstream: &LossGrads,
) -> Vec<ProjGrad> {
    let bin = &prepared.bins[tile as usize];
    let mut grads = vec![ProjGrad::zero(); bin.len()];
    if bin.is_empty() {
        return grads;
    }
    let (x0, y0, x1, y1) = tile_rect(tile, prepared.tiles_x, k);
    let mut contributions: Vec<Contribution> = Vec::with_capacity(64);
    for y in y0..y1 {
        for x in x0..x1 {
            let idx = (y * k.width + x) as usize;
            let g_color = upstream.d_color[idx];
            let g_depth = upstream.d_depth[idx];
            if g_color == [0.0; 3] && g_depth == 0.0 {
                continue;
            }
            contributions.clear();
            composite_pixel(&prepared.splats, bin, x as f64, y as f64, |c| {
                contributions.push(*c);
            });
            // Reverse sweep: suffix holds sum over later terms of
            // w_k * (g_color . color_k + g_depth * depth_k), the part of the
            // loss that shrinks when this term's transmittance factor does.
            let mut suffix = 0.0;
            for c in contributions.iter().rev() {
                let s = &prepared.splats[c.splat as usize];
                let q = g_color[0] * s.color[0]
                    + g_color[1] * s.color[1]
                    + g_color[2] * s.color[2]
                    + g_depth * s.depth;
                let weight = c.alpha_prime * c.transmittance;
                let acc = &mut grads[c.bin_pos as usize];
                for ch in 0..3 {
                    acc.d_color[ch] += g_color[ch] * weight;
                }
                acc.d_depth += g_depth * weight;
                let d_alpha_prime = c.transmittance * q - suffix / (1.0 - c.alpha_prime);
                suffix += weight * q;
                if c.clamped {
                    continue;
                }
                acc.d_alpha += d_alpha_prime * c.gaussian;
                let d_gaussian = d_alpha_prime * s.alpha;
                let delta = Vector2::new(x as f64 - s.mean.x, y as f64 - s.mean.y);
                let maha = s.inv * delta;
                let common = d_gaussian * c.gaussian;
                acc.d_mean += maha * common;
                acc.d_cov += (maha * maha.transpose()) * (0.5 * common);
            }
        }
    }
    grads
}

fn skew_basis(axis: usize) -> Matrix3<f64> {
    match axis {
        0 => Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0),
        1 => Matrix3::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0),
        _ => Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    }
}

fn frob(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    a.zip_fold(b, 0.0, |acc, x, y| acc + x * y)
}

fn chain_to_parameters(
    prepared: &Prepared,
    map: &GaussianMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    proj_grads: &[ProjGrad],
) -> ([f64; 6], MapGradients) {
    let mut grads = MapGradients::zeros(map.len());
    let mut d_omega = Vector3::zeros();
    let mut d_v = Vector3::zeros();
    let w_mat = pose.rotation.to_matrix();

    for (splat, pg) in prepared.splats.iter().zip(proj_grads) {
        if pg.is_zero() {
            continue;
        }
        let prim = &map.primitives[splat.source];
        let x = pose.transform_point(&prim.position);
        let j = projection_jacobian(k, &x);
        let m = j * w_mat;
        let sigma = covariance(prim);

        // Sigma' = M Sigma M^T + dilation; mu' = project(X); d = X.z.
        let g_m = (pg.d_cov * m * sigma) * 2.0;
        let g_sigma = m.transpose() * pg.d_cov * m;
        let g_j = g_m * w_mat.transpose();
        let g_w = j.transpose() * g_m;

        let (fx, fy) = (k.fx, k.fy);
        let z2 = x.z * x.z;
        let z3 = z2 * x.z;
        let mut g_x = j.transpose() * pg.d_mean;
        g_x.x += g_j[(0, 2)] * (-fx / z2);
        g_x.y += g_j[(1, 2)] * (-fy / z2);
        g_x.z += g_j[(0, 0)] * (-fx / z2)
            + g_j[(0, 2)] * (2.0 * fx * x.x / z3)
            + g_j[(1, 1)] * (-fy / z2)
            + g_j[(1, 2)] * (2.0 * fy * x.y / z3);
        g_x.z += pg.d_depth;

        // Left-multiplicative pose increment: X -> R_delta X + t_delta,
        // W -> R_delta W.
        d_v += g_x;
        let b_mat = g_w * w_mat.transpose();
        d_omega += x.cross(&g_x)
            + Vector3::new(
                b_mat[(2, 1)] - b_mat[(1, 2)],
                b_mat[(0, 2)] - b_mat[(2, 0)],
                b_mat[(1, 0)] - b_mat[(0, 1)],
            );

        let gi = splat.source;
        grads.d_position[gi] += w_mat.transpose() * g_x;
        let r_g = prim.orientation.to_matrix();
        for axis in 0..3 {
            let e = skew_basis(axis);
            let p = e * sigma - sigma * e;
            grads.d_rotation[gi][axis] += frob(&g_sigma, &p);
            let col = r_g.column(axis);
            let quad = (g_sigma * col).dot(&col);
            grads.d_log_scales[gi][axis] += 2.0 * (2.0 * prim.log_scales[axis]).exp() * quad;
        }
        let alpha = splat.alpha;
        grads.d_opacity_logit[gi] += pg.d_alpha * alpha * (1.0 - alpha);
        for ch in 0..3 {
            grads.d_color[gi][ch] += pg.d_color[ch];
        }
    }

    for i in 0..grads.len() {
        grads.positional_grad_magnitude[i] = grads.d_position[i].norm();
    }

    (
        [d_omega.x, d_omega.y, d_omega.z, d_v.x, d_v.y, d_v.z],
        grads,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{apply_twist, Rotation, Twist};
    use crate::render::rasterize;
    use crate::splat::GaussianPrimitive;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(80.0, 80.0, 31.5, 31.5, 64, 64).unwrap()
    }

    fn random_scene(rng: &mut impl Rng, n: usize) -> GaussianMap {
        let primitives = (0..n)
            .map(|_| {
                let axis = Vector3::new(
                    rng.random_range(-1.0..1.0f64),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let axis = if axis.norm() < 1e-6 { Vector3::x() } else { axis };
                GaussianPrimitive {
                    position: Vector3::new(
                        rng.random_range(-0.45..0.45),
                        rng.random_range(-0.45..0.45),
                        rng.random_range(1.8..3.0),
                    ),
                    orientation: Rotation::from_axis_angle(&axis, rng.random_range(-3.0..3.0)),
                    log_scales: Vector3::new(
                        rng.random_range(-3.2..-2.2),
                        rng.random_range(-3.2..-2.2),
                        rng.random_range(-3.2..-2.2),
                    ),
                    opacity_logit: rng.random_range(-1.5..1.2),
                    color: [rng.random(), rng.random(), rng.random()],
                }
            })
            .collect();
        GaussianMap::new(primitives, 2.0)
    }

    fn shifted_target(map: &GaussianMap, k: &CameraIntrinsics, dx: f64) -> ImageRgb {
        let mut shifted = Pose::identity();
        shifted.translation.x += dx;
        rasterize(map, &shifted, k).unwrap().color
    }

    fn loss_at(map: &GaussianMap, pose: &Pose, k: &CameraIntrinsics, spec: &ResidualSpec) -> f64 {
        let render = rasterize(map, pose, k).unwrap();
        evaluate_residual(&render, spec).unwrap().loss
    }

    fn check_close(analytic: f64, fd: f64, what: &str) {
        let tol = 1e-8f64.max(1e-3 * analytic.abs().max(fd.abs()));
        assert!(
            (analytic - fd).abs() <= tol,
            "{what}: analytic {analytic} vs finite difference {fd}"
        );
    }

    /// Pixels whose compositing structure provably cannot change under the
    /// finite-difference step: every overlapping splat's falloff stays away
    /// from the alpha cutoff and clamp by `band`, consecutive contributor
    /// depths are separated, and the transmittance never grazes the
    /// early-stop threshold. Finite differences are only valid on the smooth
    /// piece of the objective, which this mask selects.
    fn boundary_safe_mask(map: &GaussianMap, pose: &Pose, k: &CameraIntrinsics, band: f64) -> PixelMask {
        use crate::render::{
            project_gaussian, Projected2DGaussian, ALPHA_CLAMP, ALPHA_CUTOFF, NEAR_PLANE_FACTOR,
            TRANSMITTANCE_EPS,
        };
        let near = NEAR_PLANE_FACTOR * map.scene_scale;
        let mut projs: Vec<(Projected2DGaussian, Matrix2<f64>)> = map
            .primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                project_gaussian(p, pose, k, near).map(|mut g| {
                    g.source = i;
                    let det = g.cov[(0, 0)] * g.cov[(1, 1)] - g.cov[(0, 1)] * g.cov[(1, 0)];
                    let inv = Matrix2::new(g.cov[(1, 1)], -g.cov[(0, 1)], -g.cov[(1, 0)], g.cov[(0, 0)]) / det;
                    (g, inv)
                })
            })
            .collect();
        projs.sort_by(|a, b| a.0.depth.total_cmp(&b.0.depth).then(a.0.source.cmp(&b.0.source)));

        PixelMask::from_fn(k.width, k.height, |x, y| {
            let pixel = Vector2::new(x as f64, y as f64);
            let mut transmittance = 1.0f64;
            let mut last_depth = f64::NEG_INFINITY;
            for (g, inv) in &projs {
                let delta = pixel - g.mean;
                let q = (delta.transpose() * inv * delta)[(0, 0)];
                let raw = g.alpha * (-0.5 * q).exp();
                if raw > ALPHA_CUTOFF / band && raw < ALPHA_CUTOFF * band {
                    return false;
                }
                if raw > ALPHA_CLAMP / band && raw < ALPHA_CLAMP * band {
                    return false;
                }
                if raw < ALPHA_CUTOFF {
                    continue;
                }
                if g.depth - last_depth < 1e-2 {
                    return false;
                }
                last_depth = g.depth;
                transmittance *= 1.0 - raw.min(ALPHA_CLAMP);
                if transmittance > TRANSMITTANCE_EPS / band && transmittance < TRANSMITTANCE_EPS * band {
                    return false;
                }
                if transmittance < TRANSMITTANCE_EPS {
                    break;
                }
            }
            true
        })
    }

    #[test]
    fn twist_gradient_exact_on_smooth_scene() {
        // A fat anisotropic splat whose cutoff ring lies far outside the
        // image: the objective is analytic everywhere, so central
        // differences must agree to high precision.
        let k = camera();
        let prim = GaussianPrimitive {
            position: Vector3::new(0.08, -0.05, 2.0),
            orientation: Rotation::from_axis_angle(&Vector3::new(1.0, 2.0, -0.5), 0.8),
            log_scales: Vector3::new(0.6f64.ln(), 0.9f64.ln(), 0.4f64.ln()),
            opacity_logit: crate::splat::logit(0.6),
            color: [0.8, 0.3, 0.5],
        };
        let map = GaussianMap::new(vec![prim], 2.0);
        let pose = Pose::new(
            Rotation::from_axis_angle(&Vector3::new(0.1, 1.0, 0.2), 0.05),
            Vector3::new(0.01, -0.02, 0.03),
        );
        // Targets offset from the nominal render keep every photometric and
        // depth residual strictly positive: no L1 kink can cross zero under
        // the finite-difference step, so the objective is analytic.
        let nominal = rasterize(&map, &pose, &k).unwrap();
        let mut target = nominal.color.clone();
        for px in target.pixels_mut() {
            for c in px.iter_mut() {
                *c -= 0.03;
            }
        }
        let mut depth_target = nominal.depth.clone();
        for v in depth_target.values_mut() {
            *v *= 0.95;
        }
        let mask = PixelMask::filled(64, 64, true);
        let spec = ResidualSpec::PoseRefinement {
            target: &target,
            query_depth: Some(&depth_target),
            mask: &mask,
            a: 0.02,
            b: 0.01,
            lambda_geo: 0.05,
            reduction: Reduction::MeanOverMask,
        };
        let pass = rasterize_with_gradients(&map, &pose, &k, &spec).unwrap();
        for i in 0..6 {
            let h = 1e-5;
            let mut xi = [0.0; 6];
            xi[i] = h;
            let plus = loss_at(&map, &apply_twist(&pose, &Twist::from_array(&xi)), &k, &spec);
            xi[i] = -h;
            let minus = loss_at(&map, &apply_twist(&pose, &Twist::from_array(&xi)), &k, &spec);
            let fd = (plus - minus) / (2.0 * h);
            let tol = 1e-9f64.max(1e-6 * fd.abs());
            assert!(
                (pass.pose.d_twist[i] - fd).abs() < tol,
                "twist[{i}]: analytic {} vs fd {fd}",
                pass.pose.d_twist[i]
            );
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradients() {
        let mut rng = StdRng::seed_from_u64(3);
        let k = camera();
        let map = random_scene(&mut rng, 30);
        let pose = Pose::identity();
        let target = rasterize(&map, &pose, &k).unwrap().color;
        let mask = PixelMask::filled(64, 64, true);
        let spec = ResidualSpec::PoseRefinement {
            target: &target,
            query_depth: None,
            mask: &mask,
            a: 0.0,
            b: 0.0,
            lambda_geo: 0.01,
            reduction: Reduction::MeanOverMask,
        };
        let pass = rasterize_with_gradients(&map, &pose, &k, &spec).unwrap();
        assert_eq!(pass.loss, 0.0);
        assert_eq!(pass.pose.d_twist, [0.0; 6]);
        assert_eq!(pass.pose.d_a, 0.0);
        assert_eq!(pass.pose.d_b, 0.0);
        for i in 0..map.len() {
            assert_eq!(pass.map.d_position[i], Vector3::zeros());
            assert_eq!(pass.map.d_opacity_logit[i], 0.0);
        }
    }

    #[test]
    fn twist_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let k = camera();
        let map = random_scene(&mut rng, 40);
        let target = shifted_target(&map, &k, 0.02);
        let pose = Pose::identity();
        let (a, b) = (0.03f64, -0.01);
        let mut mask = boundary_safe_mask(&map, &pose, &k, 1.5);
        // Also keep photometric residuals away from their L1 kink at zero.
        let nominal = rasterize(&map, &pose, &k).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let c = nominal.color[(x, y)];
                let t = target[(x, y)];
                for ch in 0..3 {
                    if (a.exp() * c[ch] + b - t[ch]).abs() < 5e-3 {
                        mask[(x, y)] = false;
                    }
                }
            }
        }
        assert!(mask.count() > 1500, "safe mask too small: {}", mask.count());
        let spec = ResidualSpec::PoseRefinement {
            target: &target,
            query_depth: None,
            mask: &mask,
            a,
            b,
            lambda_geo: 0.0,
            reduction: Reduction::MeanOverMask,
        };
        let pass = rasterize_with_gradients(&map, &pose, &k, &spec).unwrap();

        for i in 0..6 {
            let step = if i < 3 { 1e-4 } else { 1e-4 * map.scene_scale };
            let mut xi = [0.0; 6];
            xi[i] = step;
            let plus = loss_at(&map, &apply_twist(&pose, &Twist::from_array(&xi)), &k, &spec);
            xi[i] = -step;
            let minus = loss_at(&map, &apply_twist(&pose, &Twist::from_array(&xi)), &k, &spec);
            let fd = (plus - minus) / (2.0 * step);
            check_close(pass.pose.d_twist[i], fd, &format!("twist[{i}]"));
        }
        assert!(pass.pose.d_twist[3].abs() > 1e-6, "x-translation gradient should be live");
    }

    #[test]
    fn brightness_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(17);
        let k = camera();
        let map = random_scene(&mut rng, 40);
        let target = shifted_target(&map, &k, 0.015);
        let mask = PixelMask::filled(64, 64, true);
        let make_spec = |a: f64, b: f64| ResidualSpec::PoseRefinement {
            target: &target,
            query_depth: None,
            mask: &mask,
            a,
            b,
            lambda_geo: 0.0,
            reduction: Reduction::MeanOverMask,
        };
        let pose = Pose::identity();
        let (a0, b0) = (0.05, -0.02);
        let pass = rasterize_with_gradients(&map, &pose, &k, &make_spec(a0, b0)).unwrap();
        let h = 1e-5;
        let fd_a = (loss_at(&map, &pose, &k, &make_spec(a0 + h, b0))
            - loss_at(&map, &pose, &k, &make_spec(a0 - h, b0)))
            / (2.0 * h);
        let fd_b = (loss_at(&map, &pose, &k, &make_spec(a0, b0 + h))
            - loss_at(&map, &pose, &k, &make_spec(a0, b0 - h)))
            / (2.0 * h);
        check_close(pass.pose.d_a, fd_a, "d_a");
        check_close(pass.pose.d_b, fd_b, "d_b");
    }

    #[test]
    fn d_b_equals_sum_of_residual_signs() {
        let mut rng = StdRng::seed_from_u64(23);
        let k = camera();
        let map = random_scene(&mut rng, 25);
        let target = shifted_target(&map, &k, 0.01);
        let mask = PixelMask::filled(64, 64, true);
        let (a, b) = (0.1, 0.02);
        let spec = ResidualSpec::PoseRefinement {
            target: &target,
            query_depth: None,
            mask: &mask,
            a,
            b,
            lambda_geo: 0.0,
            reduction: Reduction::Sum,
        };
        let pose = Pose::identity();
        let pass = rasterize_with_gradients(&map, &pose, &k, &spec).unwrap();
        let render = rasterize(&map, &pose, &k).unwrap();
        let mut want = 0.0;
        for (c, t) in render.color.pixels().iter().zip(target.pixels()) {
            for ch in 0..3 {
                want += sign(a.exp() * c[ch] + b - t[ch]);
            }
        }
        assert!((pass.pose.d_b - want).abs() < 1e-9, "{} vs {}", pass.pose.d_b, want);
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(31);
        let k = camera();
        let map = random_scene(&mut rng, 25);
        let target = shifted_target(&map, &k, 0.02);
        let gt_depth = {
            let mut shifted = Pose::identity();
            shifted.translation.x += 0.02;
            rasterize(&map, &shifted, &k).unwrap().depth
        };
        let spec = ResidualSpec::MapTraining {
            target: &target,
            gt_depth: Some(&gt_depth),
            est_depth: None,
            lambda_d: 0.05,
            lambda_reg: 0.0,
            w_rgb: 1.0,
        };
        let pose = Pose::identity();
        let pass = rasterize_with_gradients(&map, &pose, &k, &spec).unwrap();

        let h = 1e-5;
        for &gi in &[0usize, 7, 19] {
            // Position.
            for axis in 0..3 {
                let mut plus = map.clone();
                plus.primitives[gi].position[axis] += h;
                let mut minus = map.clone();
                minus.primitives[gi].position[axis] -= h;
                let fd = (loss_at(&plus, &pose, &k, &spec) - loss_at(&minus, &pose, &k, &spec))
                    / (2.0 * h);
                check_close(pass.map.d_position[gi][axis], fd, &format!("pos[{gi}][{axis}]"));
            }
            // Orientation (left-increment axis-angle).
            for axis in 0..3 {
                let mut delta = Vector3::zeros();
                delta[axis] = h;
                let mut plus = map.clone();
                plus.primitives[gi].orientation =
                    Rotation::from_scaled_axis(&delta).compose(&map.primitives[gi].orientation);
                let mut minus = map.clone();
                minus.primitives[gi].orientation =
                    Rotation::from_scaled_axis(&(-delta)).compose(&map.primitives[gi].orientation);
                let fd = (loss_at(&plus, &pose, &k, &spec) - loss_at(&minus, &pose, &k, &spec))
                    / (2.0 * h);
                check_close(pass.map.d_rotation[gi][axis], fd, &format!("rot[{gi}][{axis}]"));
            }
            // Log-scales, opacity logit, color.
            for axis in 0..3 {
                let mut plus = map.clone();
                plus.primitives[gi].log_scales[axis] += h;
                let mut minus = map.clone();
                minus.primitives[gi].log_scales[axis] -= h;
                let fd = (loss_at(&plus, &pose, &k, &spec) - loss_at(&minus, &pose, &k, &spec))
                    / (2.0 * h);
                check_close(pass.map.d_log_scales[gi][axis], fd, &format!("ls[{gi}][{axis}]"));
            }
            {
                let mut plus = map.clone();
                plus.primitives[gi].opacity_logit += h;
                let mut minus = map.clone();
                minus.primitives[gi].opacity_logit -= h;
                let fd = (loss_at(&plus, &pose, &k, &spec) - loss_at(&minus, &pose, &k, &spec))
                    / (2.0 * h);
                check_close(pass.map.d_opacity_logit[gi], fd, &format!("logit[{gi}]"));
            }
            for ch in 0..3 {
                let mut plus = map.clone();
                plus.primitives[gi].color[ch] += h;
                let mut minus = map.clone();
                minus.primitives[gi].color[ch] -= h;
                let fd = (loss_at(&plus, &pose, &k, &spec) - loss_at(&minus, &pose, &k, &spec))
                    / (2.0 * h);
                check_close(pass.map.d_color[gi][ch], fd, &format!("color[{gi}][{ch}]"));
            }
        }
    }

    #[test]
    fn pearson_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(37);
        let k = camera();
        let map = random_scene(&mut rng, 30);
        let pose = Pose::identity();
        // Estimated depth: a slightly different view's depth, giving a
        // non-trivial correlation structure. Its support is restricted to
        // boundary-safe pixels with solidly positive rendered depth so the
        // valid-pixel set of the Pearson statistic cannot change under the
        // finite-difference step.
        let est = {
            let mut other = Pose::identity();
            other.translation.y += 0.03;
            let mut est = rasterize(&map, &other, &k).unwrap().depth;
            let nominal = rasterize(&map, &pose, &k).unwrap().depth;
            let safe = boundary_safe_mask(&map, &pose, &k, 1.5);
            for (i, v) in est.values_mut().iter_mut().enumerate() {
                if nominal.values()[i] < 1e-2 || !safe.values()[i] {
                    *v = 0.0;
                }
            }
            est
        };
        let spec = ResidualSpec::MapTraining {
            target: &rasterize(&map, &pose, &k).unwrap().color,
            gt_depth: None,
            est_depth: Some(&est),
            lambda_d: 0.0,
            lambda_reg: 0.01,
            w_rgb: 0.0,
        };
        let pass = rasterize_with_gradients(&map, &pose, &k, &spec).unwrap();
        assert!(pass.loss > 0.0, "pearson term should be live");

        let h = 1e-5;
        for i in 0..6 {
            let mut xi = [0.0; 6];
            xi[i] = h;
            let plus = loss_at(&map, &apply_twist(&pose, &Twist::from_array(&xi)), &k, &spec);
            xi[i] = -h;
            let minus = loss_at(&map, &apply_twist(&pose, &Twist::from_array(&xi)), &k, &spec);
            check_close(pass.pose.d_twist[i], (plus - minus) / (2.0 * h), &format!("pearson twist[{i}]"));
        }
    }

    #[test]
    fn masked_objective_only_sees_masked_pixels() {
        let mut rng = StdRng::seed_from_u64(41);
        let k = camera();
        let map = random_scene(&mut rng, 20);
        let target = shifted_target(&map, &k, 0.03);
        let pose = Pose::identity();
        let empty = PixelMask::new(64, 64);
        let spec = ResidualSpec::PoseRefinement {
            target: &target,
            query_depth: None,
            mask: &empty,
            a: 0.0,
            b: 0.0,
            lambda_geo: 0.0,
            reduction: Reduction::MeanOverMask,
        };
        let pass = rasterize_with_gradients(&map, &pose, &k, &spec).unwrap();
        assert_eq!(pass.masked_pixels, 0);
        assert_eq!(pass.loss, 0.0);
        assert_eq!(pass.pose.d_twist, [0.0; 6]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut rng = StdRng::seed_from_u64(43);
        let k = camera();
        let map = random_scene(&mut rng, 5);
        let wrong = ImageRgb::new(32, 32);
        let spec = ResidualSpec::MapTraining {
            target: &wrong,
            gt_depth: None,
            est_depth: None,
            lambda_d: 0.0,
            lambda_reg: 0.0,
            w_rgb: 1.0,
        };
        assert!(matches!(
            rasterize_with_gradients(&map, &Pose::identity(), &k, &spec),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
