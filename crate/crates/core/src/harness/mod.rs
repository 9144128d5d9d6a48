//! Synthetic scene generation, pose perturbation protocols, benchmark
//! execution, and report output.

mod benchmark;

pub use benchmark::{
    run_benchmark, write_report, BenchmarkMode, BenchmarkQuery, BenchmarkReport, QueryOutcome,
    Thresholds,
};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geom::{CameraIntrinsics, Pose, Rotation};
use crate::mapping::TrainView;
use crate::render::rasterize;
use crate::splat::{scene_scale_from_cameras, GaussianMap, GaussianPrimitive};

/// Color assignment for synthetic Gaussians.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorScheme {
    /// Independent uniform RGB per primitive.
    Random,
    /// A 3D checker pattern: axis-parity cells pick from an 8-color palette,
    /// giving gradient-rich renders.
    TexturedGrid,
}

/// Parameters of a synthetic scene: a blob of Gaussians watched by a camera
/// ring.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub primitive_count: usize,
    /// Side length of the box the primitives occupy, scene units.
    pub extent: f64,
    pub color_scheme: ColorScheme,
    pub camera_radius: f64,
    pub camera_height: f64,
    pub camera_count: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            primitive_count: 500,
            extent: 1.0,
            color_scheme: ColorScheme::TexturedGrid,
            camera_radius: 2.2,
            camera_height: 0.9,
            camera_count: 8,
            width: 128,
            height: 128,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitive_count == 0 || self.camera_count == 0 {
            return Err(crate::Error::Config(
                "primitive_count and camera_count must be at least 1".into(),
            ));
        }
        if !(self.extent > 0.0 && self.camera_radius > 0.0) {
            return Err(crate::Error::Config("extent and camera_radius must be positive".into()));
        }
        Ok(())
    }

    /// Intrinsics framing the blob from the ring distance.
    pub fn intrinsics(&self) -> CameraIntrinsics {
        let distance = (self.camera_radius.powi(2) + self.camera_height.powi(2)).sqrt();
        let blob_radius = 0.5 * self.extent * 3f64.sqrt() + 0.15 * self.extent;
        let f = 0.42 * f64::from(self.width.min(self.height)) * distance / blob_radius;
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }
}

/// World-to-camera pose looking from `eye` at `target` with +z world up;
/// the camera looks down its +z axis and image y points down.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let forward = (target - eye).normalize();
    let up = Vector3::z();
    let right = {
        let r = forward.cross(&up);
        if r.norm() < 1e-9 {
            // Looking straight up/down: pick any horizontal right.
            Vector3::x()
        } else {
            r.normalize()
        }
    };
    let down = forward.cross(&right);
    let r_wc = nalgebra::Matrix3::from_columns(&[right, down, forward]);
    let r_cw = r_wc.transpose();
    let rotation = Rotation::from_unit_quaternion(nalgebra::UnitQuaternion::from_matrix(&r_cw));
    let translation = -(r_cw * eye);
    Pose::new(rotation, translation)
}

/// Poses on the camera ring, evenly spaced, all looking at the blob center.
pub fn ring_poses(spec: &SceneSpec) -> Vec<Pose> {
    (0..spec.camera_count)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / spec.camera_count as f64;
            let eye = Vector3::new(
                spec.camera_radius * theta.cos(),
                spec.camera_radius * theta.sin(),
                spec.camera_height,
            );
            look_at(&eye, &Vector3::zeros())
        })
        .collect()
}

fn checker_color(position: &Vector3<f64>, extent: f64) -> [f64; 3] {
    let cell = extent / 3.0;
    let parity = |v: f64| ((v / cell).floor() as i64).rem_euclid(2) as f64;
    [
        0.12 + 0.76 * parity(position.x),
        0.12 + 0.76 * parity(position.y),
        0.12 + 0.76 * parity(position.z),
    ]
}

/// Generates the ground-truth map and one train view per ring camera, each
/// with the rendered image and oracle depth. Deterministic given the seed.
pub fn synth_scene(spec: &SceneSpec) -> Result<(GaussianMap, Vec<TrainView>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let half = spec.extent / 2.0;
    let base_sigma = spec.extent / (spec.primitive_count as f64).cbrt();

    let primitives: Vec<GaussianPrimitive> = (0..spec.primitive_count)
        .map(|_| {
            let position = Vector3::new(
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                rng.random_range(-half..half),
            );
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let axis = if axis.norm() < 1e-6 { Vector3::x() } else { axis };
            let orientation = Rotation::from_axis_angle(&axis, rng.random_range(0.0..std::f64::consts::PI));
            let log_scales = Vector3::new(
                (base_sigma * rng.random_range(0.6..1.4)).ln(),
                (base_sigma * rng.random_range(0.6..1.4)).ln(),
                (base_sigma * rng.random_range(0.6..1.4)).ln(),
            );
            let color = match spec.color_scheme {
                ColorScheme::Random => [rng.random(), rng.random(), rng.random()],
                ColorScheme::TexturedGrid => checker_color(&position, spec.extent),
            };
            GaussianPrimitive {
                position,
                orientation,
                log_scales,
                opacity_logit: crate::splat::logit(rng.random_range(0.55..0.95)),
                color,
            }
        })
        .collect();

    let poses = ring_poses(spec);
    let mut map = GaussianMap::new(primitives, 1.0);
    map.scene_scale = scene_scale_from_cameras(&poses, &map.centroid());
    let k = spec.intrinsics();

    let views = poses
        .iter()
        .map(|pose| {
            let out = rasterize(&map, pose, &k)?;
            Ok(TrainView {
                image: out.color,
                pose: *pose,
                intrinsics: k,
                gt_depth: Some(out.depth),
                est_depth: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok((map, views))
}

/// A colored point cloud sampled from a map's primitives — the stand-in for
/// a reconstruction-produced sparse cloud when seeding map training.
pub fn cloud_from_map(map: &GaussianMap) -> crate::splat::ColoredPointCloud {
    crate::splat::ColoredPointCloud {
        points: map.primitives.iter().map(|p| (p.position, p.color)).collect(),
    }
}

/// Held-out query views: a jittered ring interleaved with the training
/// cameras, rendered from the ground-truth map. Deterministic given the
/// spec seed.
pub fn query_ring_views(
    map: &GaussianMap,
    spec: &SceneSpec,
    count: usize,
) -> Result<Vec<TrainView>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x9e37_79b9));
    let k = spec.intrinsics();
    (0..count)
        .map(|i| {
            let theta = std::f64::consts::TAU * (i as f64 + 0.5) / count.max(1) as f64
                + rng.random_range(-0.1..0.1);
            let radius = spec.camera_radius * rng.random_range(0.92..1.08);
            let height = spec.camera_height * rng.random_range(0.85..1.15);
            let eye = Vector3::new(radius * theta.cos(), radius * theta.sin(), height);
            let pose = look_at(&eye, &Vector3::zeros());
            let out = rasterize(map, &pose, &k)?;
            Ok(TrainView {
                image: out.color,
                pose,
                intrinsics: k,
                gt_depth: Some(out.depth),
                est_depth: None,
            })
        })
        .collect()
}

/// Pose perturbation ranges: translation magnitude in scene units and
/// rotation angle in degrees, both sampled uniformly with uniform random
/// directions/axes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub translation_range: [f64; 2],
    pub rotation_range_deg: [f64; 2],
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: [f64; 2]| 0.0 <= r[0] && r[0] <= r[1];
        if !(ok(self.translation_range) && ok(self.rotation_range_deg)) {
            return Err(crate::Error::Config(
                "perturbation ranges must satisfy 0 <= lo <= hi".into(),
            ));
        }
        Ok(())
    }

    /// Small-margin protocol: translation up to a tenth of the scene scale,
    /// rotation up to 20 degrees.
    pub fn small(scene_scale: f64, seed: u64) -> Self {
        PerturbationSpec {
            translation_range: [0.0, 0.1 * scene_scale],
            rotation_range_deg: [0.0, 20.0],
            seed,
        }
    }

    /// Middle-margin protocol: translation in [0.1, 0.2] of the scene
    /// scale, rotation in [20, 40] degrees.
    pub fn middle(scene_scale: f64, seed: u64) -> Self {
        PerturbationSpec {
            translation_range: [0.1 * scene_scale, 0.2 * scene_scale],
            rotation_range_deg: [20.0, 40.0],
            seed,
        }
    }
}

fn uniform_sphere(rng: &mut impl Rng) -> Vector3<f64> {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vector3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Applies a random perturbation: the rotation offset composes on the left
/// of the pose rotation and the translation offset adds to the pose
/// translation, so `pose_error(perturbed, pose)` reproduces the sampled
/// magnitudes exactly. Deterministic given the spec seed.
pub fn perturb_pose(pose: &Pose, spec: &PerturbationSpec) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t_dir = uniform_sphere(&mut rng);
    let t_mag = rng.random_range(spec.translation_range[0]..=spec.translation_range[1]);
    let r_axis = uniform_sphere(&mut rng);
    let r_angle = rng
        .random_range(spec.rotation_range_deg[0]..=spec.rotation_range_deg[1])
        .to_radians();
    Pose {
        rotation: Rotation::from_axis_angle(&r_axis, r_angle).compose(&pose.rotation),
        translation: pose.translation + t_dir * t_mag,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::pose_error;

    #[test]
    fn synth_scene_is_deterministic() {
        let spec = SceneSpec {
            primitive_count: 40,
            width: 32,
            height: 32,
            camera_count: 3,
            ..Default::default()
        };
        let (map_a, views_a) = synth_scene(&spec).unwrap();
        let (map_b, views_b) = synth_scene(&spec).unwrap();
        assert_eq!(map_a.primitives, map_b.primitives);
        assert_eq!(map_a.scene_scale, map_b.scene_scale);
        for (a, b) in views_a.iter().zip(&views_b) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.gt_depth, b.gt_depth);
        }
    }

    #[test]
    fn ring_has_requested_count_and_geometry() {
        let spec = SceneSpec {
            camera_count: 8,
            ..Default::default()
        };
        let poses = ring_poses(&spec);
        assert_eq!(poses.len(), 8);
        let expected = (spec.camera_radius.powi(2) + spec.camera_height.powi(2)).sqrt();
        for pose in &poses {
            let center = pose.camera_center();
            assert!((center.norm() - expected).abs() < 1e-9);
            // Looking at the origin: the origin must sit on the +z axis.
            let origin_cam = pose.transform_point(&Vector3::zeros());
            assert!(origin_cam.x.abs() < 1e-9);
            assert!(origin_cam.y.abs() < 1e-9);
            assert!(origin_cam.z > 0.0);
        }
    }

    #[test]
    fn default_scene_fills_the_frame() {
        let spec = SceneSpec {
            primitive_count: 120,
            width: 64,
            height: 64,
            camera_count: 4,
            ..Default::default()
        };
        let (map, views) = synth_scene(&spec).unwrap();
        assert_eq!(map.len(), 120);
        for view in &views {
            let out = rasterize(&map, &view.pose, &view.intrinsics).unwrap();
            let covered = out
                .occupancy
                .values()
                .iter()
                .filter(|&&o| o > 0.5)
                .count();
            let frac = covered as f64 / (64.0 * 64.0);
            assert!(frac >= 0.3, "occupancy > 0.5 on only {:.1}% of pixels", 100.0 * frac);
        }
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let pose = look_at(&Vector3::new(2.0, 1.0, 1.0), &Vector3::zeros());
        let spec = PerturbationSpec {
            translation_range: [0.0, 0.0],
            rotation_range_deg: [0.0, 0.0],
            seed: 9,
        };
        let out = perturb_pose(&pose, &spec);
        let err = pose_error(&out, &pose);
        assert!(err.translation_err < 1e-15);
        assert!(err.rotation_err_deg < 1e-10);
    }

    #[test]
    fn perturbation_respects_ranges() {
        let pose = look_at(&Vector3::new(2.0, 1.0, 1.0), &Vector3::zeros());
        for seed in 0..500 {
            let spec = PerturbationSpec {
                translation_range: [0.0, 0.1],
                rotation_range_deg: [0.0, 20.0],
                seed,
            };
            let err = pose_error(&perturb_pose(&pose, &spec), &pose);
            assert!(err.translation_err <= 0.1 + 1e-12);
            assert!(err.rotation_err_deg <= 20.0 + 1e-9);
        }
        for seed in 0..200 {
            let spec = PerturbationSpec {
                translation_range: [0.1, 0.2],
                rotation_range_deg: [20.0, 40.0],
                seed,
            };
            let err = pose_error(&perturb_pose(&pose, &spec), &pose);
            assert!((0.1 - 1e-12..=0.2 + 1e-12).contains(&err.translation_err));
            assert!((20.0 - 1e-9..=40.0 + 1e-9).contains(&err.rotation_err_deg));
        }
    }

    #[test]
    fn perturbation_mean_translation_magnitude() {
        let pose = Pose::identity();
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|seed| {
                let spec = PerturbationSpec::small(1.0, seed);
                pose_error(&perturb_pose(&pose, &spec), &pose).translation_err
            })
            .sum::<f64>()
            / n as f64;
        assert!((0.045..=0.055).contains(&mean), "mean magnitude {mean}");
    }
}
