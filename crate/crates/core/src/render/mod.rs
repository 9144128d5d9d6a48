//! Tile-based differentiable rasterization of a Gaussian map into color,
//! depth, and occupancy images.
//!
//! Pixels are sampled at integer coordinates. Projected Gaussians are
//! depth-sorted globally (ties by source index), composited front to back
//! per pixel, and processed in 16x16 tiles. Tiles render in parallel but
//! results merge in fixed tile order, so output is bit-identical at any
//! thread count.

mod backward;

pub use backward::{
    evaluate_residual, rasterize_with_gradients, GradientPass, LossGrads, MapGradients,
    PoseGradients, Reduction, ResidualSpec,
};
pub(crate) use backward::backward_prepared;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pose};
use crate::img::{ImageGray, ImageRgb};
use crate::splat::{covariance, GaussianMap, GaussianPrimitive};

pub const TILE_SIZE: u32 = 16;
/// Isotropic dilation added to every projected covariance, in pixels^2.
pub const COV_DILATION: f64 = 0.3;
/// Effective opacities are clamped to at most this value.
pub const ALPHA_CLAMP: f64 = 0.999;
/// Effective opacities below this are treated as zero.
pub const ALPHA_CUTOFF: f64 = 1.0 / 255.0;
/// Per-pixel compositing stops once transmittance drops below this.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
/// Near plane as a fraction of the scene scale.
pub const NEAR_PLANE_FACTOR: f64 = 0.01;
/// Projected footprints extend this many standard deviations.
pub const FOOTPRINT_SIGMAS: f64 = 3.0;

/// A Gaussian after projection into a view: 2D mean and covariance in pixel
/// units, camera-frame depth, base opacity, color, and the source index into
/// the map it came from.
#[derive(Debug, Clone)]
pub struct Projected2DGaussian {
    pub mean: Vector2<f64>,
    /// 2D covariance including dilation.
    pub cov: Matrix2<f64>,
    pub depth: f64,
    pub alpha: f64,
    pub color: [f64; 3],
    pub source: usize,
}

impl Projected2DGaussian {
    fn sigma_max(&self) -> f64 {
        let half_trace = 0.5 * (self.cov[(0, 0)] + self.cov[(1, 1)]);
        let det = self.cov[(0, 0)] * self.cov[(1, 1)] - self.cov[(0, 1)] * self.cov[(1, 0)];
        let lambda_max = half_trace + (half_trace * half_trace - det).max(0.0).sqrt();
        lambda_max.max(0.0).sqrt()
    }

    /// Radius of the footprint in pixels (3 sigma of the major axis); the
    /// culling rule tests this disk against the image rectangle.
    pub fn footprint_radius(&self) -> f64 {
        FOOTPRINT_SIGMAS * self.sigma_max()
    }

    /// Radius beyond which the effective opacity provably falls under
    /// [`ALPHA_CUTOFF`]; everything the compositor can see lies inside.
    /// Slightly wider than the 3-sigma footprint (up to ~3.33 sigma).
    pub fn cutoff_radius(&self) -> f64 {
        let a = self.alpha.min(ALPHA_CLAMP);
        if a < ALPHA_CUTOFF {
            return 0.0;
        }
        ((2.0 * (a / ALPHA_CUTOFF).ln()).max(0.0)).sqrt() * self.sigma_max()
    }
}

/// Jacobian of the pinhole projection at a camera-frame point.
pub(crate) fn projection_jacobian(k: &CameraIntrinsics, x: &Vector3<f64>) -> Matrix2x3<f64> {
    let z_inv = 1.0 / x.z;
    let z_inv2 = z_inv * z_inv;
    Matrix2x3::new(
        k.fx * z_inv,
        0.0,
        -k.fx * x.x * z_inv2,
        0.0,
        k.fy * z_inv,
        -k.fy * x.y * z_inv2,
    )
}

/// Projects one primitive into a view. Returns `None` when the primitive is
/// culled: behind the near plane, or its 3-sigma footprint misses the image.
pub fn project_gaussian(
    p: &GaussianPrimitive,
    pose: &Pose,
    k: &CameraIntrinsics,
    near_plane: f64,
) -> Option<Projected2DGaussian> {
    let x_cam = pose.transform_point(&p.position);
    if x_cam.z <= near_plane {
        return None;
    }
    let mean = k.project(&x_cam);
    let j = projection_jacobian(k, &x_cam);
    let w: Matrix3<f64> = pose.rotation.to_matrix();
    let m = j * w;
    let cov = m * covariance(p) * m.transpose() + Matrix2::identity() * COV_DILATION;
    let projected = Projected2DGaussian {
        mean,
        cov,
        depth: x_cam.z,
        alpha: p.opacity(),
        color: p.color,
        source: 0,
    };
    let r = projected.footprint_radius();
    let (w_px, h_px) = (k.width as f64 - 1.0, k.height as f64 - 1.0);
    if mean.x + r < 0.0 || mean.x - r > w_px || mean.y + r < 0.0 || mean.y - r > h_px {
        return None;
    }
    Some(projected)
}

/// Effective opacity of a projected Gaussian at a pixel:
/// `alpha * exp(-0.5 (p-mu)' inv(Sigma') (p-mu))`, clamped to
/// [`ALPHA_CLAMP`]; values below [`ALPHA_CUTOFF`] collapse to zero.
pub fn alpha_at(g: &Projected2DGaussian, pixel: &Vector2<f64>) -> f64 {
    let det = g.cov[(0, 0)] * g.cov[(1, 1)] - g.cov[(0, 1)] * g.cov[(1, 0)];
    if det <= 0.0 {
        return 0.0;
    }
    let inv = Matrix2::new(g.cov[(1, 1)], -g.cov[(0, 1)], -g.cov[(1, 0)], g.cov[(0, 0)]) / det;
    let delta = pixel - g.mean;
    let q = (delta.transpose() * inv * delta)[(0, 0)];
    let alpha = (g.alpha * (-0.5 * q).exp()).min(ALPHA_CLAMP);
    if alpha < ALPHA_CUTOFF {
        0.0
    } else {
        alpha
    }
}

/// One rasterization pass: color, depth, and occupancy images.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: ImageRgb,
    pub depth: ImageGray,
    pub occupancy: ImageGray,
}

/// Internal projected-splat record with cached inverse covariance.
#[derive(Debug, Clone)]
pub(crate) struct Splat {
    pub mean: Vector2<f64>,
    pub inv: Matrix2<f64>,
    pub radius: f64,
    pub depth: f64,
    pub alpha: f64,
    pub color: [f64; 3],
    pub source: usize,
}

/// Projection + global depth sort + tile binning, shared by the forward and
/// backward passes.
pub(crate) struct Prepared {
    pub splats: Vec<Splat>,
    pub tiles_x: u32,
    pub tiles_y: u32,
    /// Per tile: indices into `splats`, in global depth order.
    pub bins: Vec<Vec<u32>>,
}

pub(crate) fn prepare(map: &GaussianMap, pose: &Pose, k: &CameraIntrinsics) -> Result<Prepared> {
    if map.is_empty() {
        return Err(Error::EmptyMap);
    }
    let near_plane = NEAR_PLANE_FACTOR * map.scene_scale;
    let mut splats: Vec<Splat> = map
        .primitives
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let mut proj = project_gaussian(p, pose, k, near_plane)?;
            proj.source = i;
            let det =
                proj.cov[(0, 0)] * proj.cov[(1, 1)] - proj.cov[(0, 1)] * proj.cov[(1, 0)];
            if det <= 0.0 {
                return None;
            }
            let inv = Matrix2::new(
                proj.cov[(1, 1)],
                -proj.cov[(0, 1)],
                -proj.cov[(1, 0)],
                proj.cov[(0, 0)],
            ) / det;
            let radius = proj.cutoff_radius();
            if radius == 0.0 {
                return None;
            }
            Some(Splat {
                mean: proj.mean,
                inv,
                radius,
                depth: proj.depth,
                alpha: p.opacity(),
                color: p.color,
                source: i,
            })
        })
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source)));

    let tiles_x = k.width.div_ceil(TILE_SIZE);
    let tiles_y = k.height.div_ceil(TILE_SIZE);
    let mut bins = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    for (idx, s) in splats.iter().enumerate() {
        let x0 = ((s.mean.x - s.radius) / TILE_SIZE as f64).floor().max(0.0) as u32;
        let y0 = ((s.mean.y - s.radius) / TILE_SIZE as f64).floor().max(0.0) as u32;
        let x1 = (((s.mean.x + s.radius) / TILE_SIZE as f64).floor() as i64)
            .min(tiles_x as i64 - 1);
        let y1 = (((s.mean.y + s.radius) / TILE_SIZE as f64).floor() as i64)
            .min(tiles_y as i64 - 1);
        for ty in y0 as i64..=y1 {
            for tx in x0 as i64..=x1 {
                if tx >= 0 && ty >= 0 {
                    bins[(ty as u32 * tiles_x + tx as u32) as usize].push(idx as u32);
                }
            }
        }
    }
    Ok(Prepared {
        splats,
        tiles_x,
        tiles_y,
        bins,
    })
}

/// One front-to-back compositing term.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Contribution {
    /// Index into `Prepared::splats`.
    pub splat: u32,
    /// Position of the splat inside the tile's bin list.
    pub bin_pos: u32,
    pub alpha_prime: f64,
    /// Gaussian falloff value before multiplication by the base opacity.
    pub gaussian: f64,
    /// Transmittance *before* this term.
    pub transmittance: f64,
    pub clamped: bool,
}

/// Walks a pixel's contributor list front to back, invoking `visit` for each
/// retained term. Returns the final transmittance.
pub(crate) fn composite_pixel(
    splats: &[Splat],
    bin: &[u32],
    px: f64,
    py: f64,
    mut visit: impl FnMut(&Contribution),
) -> f64 {
    let mut transmittance = 1.0;
    for (bin_pos, &idx) in bin.iter().enumerate() {
        let s = &splats[idx as usize];
        let dx = px - s.mean.x;
        let dy = py - s.mean.y;
        if dx.abs() > s.radius || dy.abs() > s.radius {
            continue;
        }
        let q = s.inv[(0, 0)] * dx * dx + 2.0 * s.inv[(0, 1)] * dx * dy + s.inv[(1, 1)] * dy * dy;
        let gaussian = (-0.5 * q).exp();
        let raw = s.alpha * gaussian;
        let clamped = raw > ALPHA_CLAMP;
        let alpha_prime = if clamped { ALPHA_CLAMP } else { raw };
        if alpha_prime < ALPHA_CUTOFF {
            continue;
        }
        visit(&Contribution {
            splat: idx,
            bin_pos: bin_pos as u32,
            alpha_prime,
            gaussian,
            transmittance,
            clamped,
        });
        transmittance *= 1.0 - alpha_prime;
        if transmittance < TRANSMITTANCE_EPS {
            break;
        }
    }
    transmittance
}

struct TileRect {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

pub(crate) fn tile_rect(tile: u32, tiles_x: u32, k: &CameraIntrinsics) -> (u32, u32, u32, u32) {
    let tx = tile % tiles_x;
    let ty = tile / tiles_x;
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    (x0, y0, (x0 + TILE_SIZE).min(k.width), (y0 + TILE_SIZE).min(k.height))
}

/// Rasterizes the map into color, depth, and occupancy images.
pub fn rasterize(map: &GaussianMap, pose: &Pose, k: &CameraIntrinsics) -> Result<RenderOutput> {
    let prepared = prepare(map, pose, k)?;
    Ok(rasterize_prepared(&prepared, k))
}

pub(crate) fn rasterize_prepared(prepared: &Prepared, k: &CameraIntrinsics) -> RenderOutput {
    let n_tiles = (prepared.tiles_x * prepared.tiles_y) as usize;
    let tiles: Vec<(TileRect, Vec<[f64; 3]>, Vec<f64>, Vec<f64>)> = (0..n_tiles as u32)
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = tile_rect(tile, prepared.tiles_x, k);
            let w = (x1 - x0) as usize;
            let h = (y1 - y0) as usize;
            let mut color = vec![[0.0; 3]; w * h];
            let mut depth = vec![0.0; w * h];
            let mut occ = vec![0.0; w * h];
            let bin = &prepared.bins[tile as usize];
            for y in y0..y1 {
                for x in x0..x1 {
                    let local = ((y - y0) as usize) * w + (x - x0) as usize;
                    composite_pixel(&prepared.splats, bin, x as f64, y as f64, |c| {
                        let s = &prepared.splats[c.splat as usize];
                        let wgt = c.alpha_prime * c.transmittance;
                        for ch in 0..3 {
                            color[local][ch] += s.color[ch] * wgt;
                        }
                        depth[local] += s.depth * wgt;
                        occ[local] += wgt;
                    });
                }
            }
            (TileRect { x0, y0, x1, y1 }, color, depth, occ)
        })
        .collect();

    let mut out = RenderOutput {
        color: ImageRgb::new(k.width, k.height),
        depth: ImageGray::new(k.width, k.height),
        occupancy: ImageGray::new(k.width, k.height),
    };
    for (rect, color, depth, occ) in tiles {
        let w = (rect.x1 - rect.x0) as usize;
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                let local = ((y - rect.y0) as usize) * w + (x - rect.x0) as usize;
                out.color[(x, y)] = color[local];
                out.depth[(x, y)] = depth[local];
                out.occupancy[(x, y)] = occ[local];
            }
        }
    }
    out
}

/// A deterministic fingerprint of the compositing structure: which splats
/// contribute to which pixels, in what order, and whether they were clamped.
/// Two renders with equal fingerprints share the same smooth piece of the
/// piecewise-analytic rendering function, which is the precondition for
/// comparing analytic gradients against finite differences.
pub fn composition_structure(map: &GaussianMap, pose: &Pose, k: &CameraIntrinsics) -> Result<u64> {
    let prepared = prepare(map, pose, k)?;
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut feed = |v: u64| {
        hash ^= v;
        hash = hash.wrapping_mul(0x100000001b3);
    };
    for y in 0..k.height {
        for x in 0..k.width {
            let tile = (y / TILE_SIZE) * prepared.tiles_x + x / TILE_SIZE;
            feed(((y as u64) << 32) | x as u64);
            composite_pixel(
                &prepared.splats,
                &prepared.bins[tile as usize],
                x as f64,
                y as f64,
                |c| {
                    let source = prepared.splats[c.splat as usize].source as u64;
                    feed((source << 1) | c.clamped as u64);
                },
            );
        }
    }
    Ok(hash)
}
