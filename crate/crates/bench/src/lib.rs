//! Shared fixtures for the pipeline benchmarks.

use splatloc::geom::{CameraIntrinsics, Pose};
use splatloc::harness::{synth_scene, SceneSpec};
use splatloc::mapping::TrainView;
use splatloc::splat::GaussianMap;

/// A mid-sized synthetic scene with its views and intrinsics.
pub fn fixture(primitives: usize, size: u32) -> (GaussianMap, Vec<TrainView>, CameraIntrinsics) {
    let spec = SceneSpec {
        primitive_count: primitives,
        width: size,
        height: size,
        camera_count: 4,
        seed: 42,
        ..Default::default()
    };
    let k = spec.intrinsics();
    let (map, views) = synth_scene(&spec).expect("scene generation");
    (map, views, k)
}

pub fn front_pose(views: &[TrainView]) -> Pose {
    views[0].pose
}
