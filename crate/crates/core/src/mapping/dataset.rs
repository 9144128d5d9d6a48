//! Dataset directory layout:
//!
//! ```text
//! <root>/
//!   images/<name>.png
//!   poses.json          # {"<name>": {"q": [w,x,y,z], "t": [x,y,z]}, ...}
//!   intrinsics.json     # {"fx": .., "fy": .., "cx": .., "cy": .., "width": .., "height": ..}
//!   depth/<name>.f32      (optional ground-truth depth)
//!   est_depth/<name>.f32  (optional estimated depth prior)
//! ```
//!
//! Views load sorted by name so downstream processing is deterministic.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pose};
use crate::img::{ImageGray, ImageRgb};
use crate::mapping::TrainView;

/// A named train view, as stored on disk.
#[derive(Debug, Clone)]
pub struct NamedView {
    pub name: String,
    pub view: TrainView,
}

pub fn load_dataset(root: &Path) -> Result<(Vec<NamedView>, CameraIntrinsics)> {
    let intrinsics_path = root.join("intrinsics.json");
    let intrinsics_text =
        fs::read_to_string(&intrinsics_path).map_err(|e| Error::io(&intrinsics_path, e))?;
    let intrinsics: CameraIntrinsics = serde_json::from_str(&intrinsics_text)
        .map_err(|e| Error::malformed("intrinsics.json", e.to_string()))?;
    intrinsics.validate()?;

    let poses_path = root.join("poses.json");
    let poses_text = fs::read_to_string(&poses_path).map_err(|e| Error::io(&poses_path, e))?;
    let poses: BTreeMap<String, Pose> = serde_json::from_str(&poses_text)
        .map_err(|e| Error::malformed("poses.json", e.to_string()))?;

    let mut views = Vec::with_capacity(poses.len());
    for (name, pose) in &poses {
        let image_path = root.join("images").join(format!("{name}.png"));
        let image = ImageRgb::load_png(&image_path)?;
        let gt_depth = load_optional_depth(&root.join("depth").join(format!("{name}.f32")))?;
        let est_depth =
            load_optional_depth(&root.join("est_depth").join(format!("{name}.f32")))?;
        let view = TrainView {
            image,
            pose: *pose,
            intrinsics,
            gt_depth,
            est_depth,
        };
        view.validate()?;
        views.push(NamedView {
            name: name.clone(),
            view,
        });
    }
    if views.is_empty() {
        return Err(Error::NoViews);
    }
    Ok((views, intrinsics))
}

fn load_optional_depth(path: &Path) -> Result<Option<ImageGray>> {
    if path.is_file() {
        Ok(Some(ImageGray::load_f32(path)?))
    } else {
        Ok(None)
    }
}

/// Writes views in the dataset layout. PNG quantizes colors to 8 bits and
/// the depth files quantize to f32.
pub fn save_dataset(root: &Path, views: &[NamedView], intrinsics: &CameraIntrinsics) -> Result<()> {
    let images_dir = root.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut poses = BTreeMap::new();
    for nv in views {
        nv.view.validate()?;
        poses.insert(nv.name.clone(), nv.view.pose);
        nv.view
            .image
            .save_png(&images_dir.join(format!("{}.png", nv.name)))?;
        if let Some(depth) = &nv.view.gt_depth {
            let dir = root.join("depth");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            depth.save_f32(&dir.join(format!("{}.f32", nv.name)))?;
        }
        if let Some(est) = &nv.view.est_depth {
            let dir = root.join("est_depth");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            est.save_f32(&dir.join(format!("{}.f32", nv.name)))?;
        }
    }
    let poses_path = root.join("poses.json");
    let poses_json = serde_json::to_string_pretty(&poses)
        .map_err(|e| Error::malformed("poses.json", e.to_string()))?;
    fs::write(&poses_path, poses_json).map_err(|e| Error::io(&poses_path, e))?;
    let intrinsics_path = root.join("intrinsics.json");
    let intrinsics_json = serde_json::to_string_pretty(intrinsics)
        .map_err(|e| Error::malformed("intrinsics.json", e.to_string()))?;
    fs::write(&intrinsics_path, intrinsics_json).map_err(|e| Error::io(&intrinsics_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Rotation;
    use nalgebra::Vector3;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let k = CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0, 16, 16).unwrap();
        let views: Vec<NamedView> = (0..3)
            .map(|i| NamedView {
                name: format!("view_{i:03}"),
                view: TrainView {
                    image: ImageRgb::from_fn(16, 16, |x, y| {
                        [x as f64 / 15.0, y as f64 / 15.0, i as f64 / 2.0]
                    }),
                    pose: Pose::new(
                        Rotation::from_axis_angle(&Vector3::y(), 0.1 * i as f64),
                        Vector3::new(i as f64, 0.0, 0.0),
                    ),
                    intrinsics: k,
                    gt_depth: (i == 0).then(|| ImageGray::from_fn(16, 16, |x, _| 1.0 + x as f64)),
                    est_depth: None,
                },
            })
            .collect();
        save_dataset(dir.path(), &views, &k).unwrap();
        let (loaded, k2) = load_dataset(dir.path()).unwrap();
        assert_eq!(k2, k);
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded[0].name, "view_000");
        assert!(loaded[0].view.gt_depth.is_some());
        assert!(loaded[1].view.gt_depth.is_none());
        for (a, b) in views.iter().zip(&loaded) {
            assert_eq!(a.name, b.name);
            let err = crate::geom::pose_error(&a.view.pose, &b.view.pose);
            assert!(err.translation_err < 1e-12);
            assert!(err.rotation_err_deg < 1e-10);
        }
    }

    #[test]
    fn missing_dataset_pieces_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).is_err());
        std::fs::write(dir.path().join("intrinsics.json"), "{not json").unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
