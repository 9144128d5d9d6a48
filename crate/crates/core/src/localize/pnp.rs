//! Camera pose from 2D-3D correspondences: minimal P3P hypotheses inside a
//! RANSAC loop, the winner polished by Levenberg-Marquardt on its inliers.
//!
//! P3P follows the classical distance formulation: the three unknown
//! camera-to-point distances satisfy three law-of-cosines constraints whose
//! elimination yields a quartic. The quartic is assembled with explicit
//! polynomial arithmetic (no hand-expanded coefficients) and solved through
//! the companion matrix, each real root polished by Newton steps.

use nalgebra::{Matrix2x3, Matrix3, Matrix4, Matrix6, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{apply_twist, CameraIntrinsics, Pose, Rotation, Twist};

/// 2D pixel to 3D world-point correspondences.
#[derive(Debug, Clone, Default)]
pub struct Correspondences {
    pub items: Vec<(Vector2<f64>, Vector3<f64>)>,
}

impl Correspondences {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct PnpConfig {
    /// Reprojection inlier threshold in pixels.
    pub inlier_px: f64,
    pub max_iters: u32,
    /// Stop sampling once this inlier ratio is reached.
    pub early_exit_ratio: f64,
    pub seed: u64,
}

impl Default for PnpConfig {
    fn default() -> Self {
        PnpConfig {
            inlier_px: 3.0,
            max_iters: 1000,
            early_exit_ratio: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PnpResult {
    pub pose: Pose,
    /// Indices of inlier correspondences, ascending.
    pub inliers: Vec<usize>,
}

// -- small dense polynomials, coefficients lowest degree first --

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, x) in a.iter().enumerate() {
        out[i] += x;
    }
    for (i, y) in b.iter().enumerate() {
        out[i] += y;
    }
    out
}

fn poly_scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

fn poly_eval(a: &[f64], x: f64) -> f64 {
    a.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn poly_derivative(a: &[f64]) -> Vec<f64> {
    a.iter()
        .enumerate()
        .skip(1)
        .map(|(i, c)| i as f64 * c)
        .collect()
}

/// Real roots of a polynomial of degree <= 4 via the companion matrix,
/// polished with a few Newton steps.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let max_abs = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if max_abs == 0.0 {
        return Vec::new();
    }
    let mut c: Vec<f64> = coeffs.iter().map(|v| v / max_abs).collect();
    while c.len() > 1 && c.last().unwrap().abs() < 1e-12 {
        c.pop();
    }
    let degree = c.len() - 1;
    if degree == 0 {
        return Vec::new();
    }
    let lead = *c.last().unwrap();
    let monic: Vec<f64> = c[..degree].iter().map(|v| v / lead).collect();

    let eigen: Vec<(f64, f64)> = match degree {
        1 => vec![(-monic[0], 0.0)],
        2 => {
            let m = nalgebra::Matrix2::new(0.0, -monic[0], 1.0, -monic[1]);
            m.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect()
        }
        3 => {
            let m = Matrix3::new(
                0.0, 0.0, -monic[0], 1.0, 0.0, -monic[1], 0.0, 1.0, -monic[2],
            );
            m.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect()
        }
        _ => {
            let m = Matrix4::new(
                0.0, 0.0, 0.0, -monic[0], 1.0, 0.0, 0.0, -monic[1], 0.0, 1.0, 0.0, -monic[2],
                0.0, 0.0, 1.0, -monic[3],
            );
            m.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect()
        }
    };

    let deriv = poly_derivative(&c);
    let mut roots = Vec::new();
    for (re, im) in eigen {
        if im.abs() > 1e-6 * (1.0 + re.abs()) {
            continue;
        }
        let mut x = re;
        for _ in 0..3 {
            let f = poly_eval(&c, x);
            let fp = poly_eval(&deriv, x);
            if fp.abs() < 1e-14 {
                break;
            }
            x -= f / fp;
        }
        roots.push(x);
    }
    roots.sort_by(|a, b| a.total_cmp(b));
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    roots
}

/// P3P by distance elimination: up to four camera poses mapping the three
/// world points onto the three unit bearing vectors.
fn p3p(points: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<Pose> {
    let a2 = (points[1] - points[2]).norm_squared();
    let b2 = (points[0] - points[2]).norm_squared();
    let c2 = (points[0] - points[1]).norm_squared();
    if a2 < 1e-18 || b2 < 1e-18 || c2 < 1e-18 {
        return Vec::new();
    }
    let cos_a = bearings[1].dot(&bearings[2]);
    let cos_b = bearings[0].dot(&bearings[2]);
    let cos_c = bearings[0].dot(&bearings[1]);

    // With s2 = u s1, s3 = v s1 the law-of-cosines system reduces to two
    // quadratics in u parameterized by v:
    //   Q1: u^2 - 2 cos_a u v + v^2 - r_ab (1 + v^2 - 2 cos_b v) = 0
    //   Q2: u^2 - 2 cos_c u     + 1  - r_cb (1 + v^2 - 2 cos_b v) = 0
    // Subtracting gives u linear in v: u = n(v) / d(v); substituting into Q2
    // yields the quartic n^2 - 2 cos_c n d + (1 - r_cb w) d^2 = 0 where
    // w(v) = 1 + v^2 - 2 cos_b v.
    let r_ab = a2 / b2;
    let r_cb = c2 / b2;
    let w_poly = [1.0, -2.0 * cos_b, 1.0];

    // n(v) = (r_ab - r_cb) w(v) - v^2 + 1
    let n_poly = poly_add(
        &poly_scale(&w_poly, r_ab - r_cb),
        &[1.0, 0.0, -1.0],
    );
    // d(v) = 2 (cos_c - cos_a v)
    let d_poly = [2.0 * cos_c, -2.0 * cos_a];
    // residue(v) = 1 - r_cb w(v)
    let residue = poly_add(&[1.0], &poly_scale(&w_poly, -r_cb));

    let quartic = poly_add(
        &poly_add(
            &poly_mul(&n_poly, &n_poly),
            &poly_scale(&poly_mul(&n_poly, &d_poly), -2.0 * cos_c),
        ),
        &poly_mul(&residue, &poly_mul(&d_poly, &d_poly)),
    );

    let mut poses = Vec::new();
    for v in real_roots(&quartic) {
        if !(v.is_finite() && v > 0.0) {
            continue;
        }
        let w = 1.0 + v * v - 2.0 * cos_b * v;
        if w <= 1e-12 {
            continue;
        }
        let s1 = (b2 / w).sqrt();
        let d = poly_eval(&d_poly, v);
        let u = if d.abs() > 1e-9 {
            poly_eval(&n_poly, v) / d
        } else {
            // Fall back to Q2 when the linear elimination degenerates.
            let disc = cos_c * cos_c - (1.0 - r_cb * w);
            if disc < 0.0 {
                continue;
            }
            cos_c + disc.sqrt()
        };
        if !(u.is_finite() && u > 0.0) {
            continue;
        }
        let s2 = u * s1;
        let s3 = v * s1;
        let cam = [bearings[0] * s1, bearings[1] * s2, bearings[2] * s3];
        if let Some(pose) = absolute_orientation(points, &cam) {
            poses.push(pose);
        }
    }
    poses
}

/// Rigid alignment (Kabsch) of three world points onto camera-frame points:
/// the world-to-camera pose minimizing the squared fit error.
fn absolute_orientation(world: &[Vector3<f64>; 3], camera: &[Vector3<f64>; 3]) -> Option<Pose> {
    let w_centroid = (world[0] + world[1] + world[2]) / 3.0;
    let c_centroid = (camera[0] + camera[1] + camera[2]) / 3.0;
    let mut h = Matrix3::zeros();
    for i in 0..3 {
        h += (world[i] - w_centroid) * (camera[i] - c_centroid).transpose();
    }
    let svd = nalgebra::SVD::new(h, true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let mut s = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = v_t.transpose() * s * u.transpose();
    let rotation = Rotation::from_unit_quaternion(nalgebra::UnitQuaternion::from_matrix(&r));
    let translation = c_centroid - r * w_centroid;
    Some(Pose::new(rotation, translation))
}

fn bearing(k: &CameraIntrinsics, px: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new((px.x - k.cx) / k.fx, (px.y - k.cy) / k.fy, 1.0).normalize()
}

fn reprojection_error(pose: &Pose, k: &CameraIntrinsics, item: &(Vector2<f64>, Vector3<f64>)) -> f64 {
    let cam = pose.transform_point(&item.1);
    if cam.z <= 1e-9 {
        return f64::INFINITY;
    }
    (k.project(&cam) - item.0).norm()
}

fn triangle_area(points: &[Vector3<f64>; 3]) -> f64 {
    (points[1] - points[0]).cross(&(points[2] - points[0])).norm() * 0.5
}

/// Levenberg-Marquardt on the inlier set, minimizing squared reprojection
/// error over the pose twist.
fn lm_refine(
    pose: &Pose,
    corr: &Correspondences,
    inliers: &[usize],
    k: &CameraIntrinsics,
) -> Pose {
    let mut pose = *pose;
    let mut lambda = 1e-3;
    let mut last_cost = reprojection_cost(&pose, corr, inliers, k);
    for _ in 0..50 {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for &i in inliers {
            let (px, world) = &corr.items[i];
            let cam = pose.transform_point(world);
            if cam.z <= 1e-9 {
                continue;
            }
            let residual = k.project(&cam) - px;
            let z_inv = 1.0 / cam.z;
            let j_proj = Matrix2x3::new(
                k.fx * z_inv,
                0.0,
                -k.fx * cam.x * z_inv * z_inv,
                0.0,
                k.fy * z_inv,
                -k.fy * cam.y * z_inv * z_inv,
            );
            // d cam / d (omega, v) for a left-multiplicative twist.
            let mut j_pose = nalgebra::Matrix3x6::<f64>::zeros();
            let neg_skew = Matrix3::new(
                0.0, cam.z, -cam.y, -cam.z, 0.0, cam.x, cam.y, -cam.x, 0.0,
            );
            j_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&neg_skew);
            j_pose
                .fixed_view_mut::<3, 3>(0, 3)
                .copy_from(&Matrix3::identity());
            let j = j_proj * j_pose;
            jtj += j.transpose() * j;
            jtr += j.transpose() * residual;
        }
        let damped = jtj + Matrix6::identity() * lambda;
        let Some(step) = damped.lu().solve(&(-jtr)) else {
            break;
        };
        let candidate = apply_twist(
            &pose,
            &Twist::new(
                Vector3::new(step[0], step[1], step[2]),
                Vector3::new(step[3], step[4], step[5]),
            ),
        );
        let cost = reprojection_cost(&candidate, corr, inliers, k);
        if cost < last_cost {
            pose = candidate;
            last_cost = cost;
            lambda = (lambda * 0.5).max(1e-12);
            if step.norm() < 1e-14 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e8 {
                break;
            }
        }
    }
    pose
}

fn reprojection_cost(
    pose: &Pose,
    corr: &Correspondences,
    inliers: &[usize],
    k: &CameraIntrinsics,
) -> f64 {
    inliers
        .iter()
        .map(|&i| {
            let e = reprojection_error(pose, k, &corr.items[i]);
            if e.is_finite() {
                e * e
            } else {
                1e12
            }
        })
        .sum()
}

const MIN_INLIERS: usize = 6;

/// Robust pose from 2D-3D correspondences: P3P hypotheses from minimal
/// 4-point samples (the fourth point disambiguates), consensus scoring at
/// `inlier_px`, and LM refinement of the best consensus set. Deterministic
/// for a fixed seed.
pub fn pnp_ransac(
    corr: &Correspondences,
    k: &CameraIntrinsics,
    config: &PnpConfig,
) -> Result<PnpResult> {
    let n = corr.len();
    if n < 4 {
        return Err(Error::TooFewCorrespondences(n));
    }
    let bearings: Vec<Vector3<f64>> = corr.items.iter().map(|(px, _)| bearing(k, px)).collect();
    let scene_span = {
        let centroid = corr.items.iter().map(|(_, p)| *p).sum::<Vector3<f64>>() / n as f64;
        corr.items
            .iter()
            .map(|(_, p)| (p - centroid).norm_squared())
            .sum::<f64>()
            .sqrt()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(usize, Pose)> = None;
    for _ in 0..config.max_iters {
        let mut sample = [0usize; 4];
        for slot in 0..4 {
            loop {
                let cand = rng.random_range(0..n);
                if !sample[..slot].contains(&cand) {
                    sample[slot] = cand;
                    break;
                }
            }
        }
        let points = [
            corr.items[sample[0]].1,
            corr.items[sample[1]].1,
            corr.items[sample[2]].1,
        ];
        // Degenerate (collinear) minimal sets cannot constrain the pose.
        if triangle_area(&points) < 1e-9 * scene_span * scene_span {
            continue;
        }
        let sample_bearings = [bearings[sample[0]], bearings[sample[1]], bearings[sample[2]]];
        let fourth = &corr.items[sample[3]];
        let candidates = p3p(&points, &sample_bearings);
        let Some(pose) = candidates
            .into_iter()
            .min_by(|a, b| {
                reprojection_error(a, k, fourth).total_cmp(&reprojection_error(b, k, fourth))
            })
        else {
            continue;
        };
        let inlier_count = corr
            .items
            .iter()
            .filter(|item| reprojection_error(&pose, k, item) < config.inlier_px)
            .count();
        if best.as_ref().map_or(true, |(c, _)| inlier_count > *c) {
            best = Some((inlier_count, pose));
        }
        if inlier_count as f64 > config.early_exit_ratio * n as f64 {
            break;
        }
    }

    let Some((count, pose)) = best else {
        return Err(Error::PnpDegenerate);
    };
    if count < MIN_INLIERS {
        return Err(Error::PnpDegenerate);
    }

    let collect_inliers = |pose: &Pose| -> Vec<usize> {
        (0..n)
            .filter(|&i| reprojection_error(pose, k, &corr.items[i]) < config.inlier_px)
            .collect()
    };
    let mut inliers = collect_inliers(&pose);
    let mut refined = lm_refine(&pose, corr, &inliers, k);
    let grown = collect_inliers(&refined);
    if grown.len() > inliers.len() {
        refined = lm_refine(&refined, corr, &grown, k);
        inliers = collect_inliers(&refined);
    }
    if inliers.len() < MIN_INLIERS {
        return Err(Error::PnpDegenerate);
    }
    Ok(PnpResult {
        pose: refined,
        inliers,
    })
}
