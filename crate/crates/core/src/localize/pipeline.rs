//! The hierarchical localization pipeline: global-descriptor retrieval,
//! covisibility clustering of the retrieved frames, per-cluster patch
//! matching and PnP-RANSAC for a coarse pose, then photometric refinement.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pose};
use crate::img::{ImageGray, ImageRgb};
use crate::render::rasterize;
use crate::splat::GaussianMap;

use super::features::{detect_keypoints, global_descriptor, match_keypoints_ncc, KeyPoint};
use super::pnp::{pnp_ransac, Correspondences, PnpConfig, PnpResult};
use super::refine::{refine_pose, RefineDiagnostics, RefineQuery};
use super::RefineConfig;

/// Which frames observe which 3D points. Point ids here are the merged
/// (place-level) ids used for covisibility, not correspondence indices.
#[derive(Debug, Clone, Default)]
pub struct ObservationGraph {
    pub observations: BTreeMap<u32, BTreeSet<u64>>,
}

impl ObservationGraph {
    pub fn frames(&self) -> impl Iterator<Item = u32> + '_ {
        self.observations.keys().copied()
    }
}

/// Connected components of the covisibility relation (sharing at least one
/// observed point) restricted to `frame_ids`. Clusters come back ordered by
/// descending size, ties by lowest contained frame id; frames within a
/// cluster ascend.
pub fn covisibility_cluster(
    graph: &ObservationGraph,
    frame_ids: &[u32],
) -> Result<Vec<Vec<u32>>> {
    for id in frame_ids {
        if !graph.observations.contains_key(id) {
            return Err(Error::UnknownFrame(*id));
        }
    }
    let n = frame_ids.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for i in 0..n {
        let obs_i = &graph.observations[&frame_ids[i]];
        for j in i + 1..n {
            let obs_j = &graph.observations[&frame_ids[j]];
            if obs_i.intersection(obs_j).next().is_some() {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[rj.max(ri)] = rj.min(ri);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(frame_ids[i]);
    }
    let mut clusters: Vec<Vec<u32>> = groups.into_values().collect();
    for c in &mut clusters {
        c.sort_unstable();
    }
    clusters.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    Ok(clusters)
}

/// The `k` database ids with the largest cosine similarity to the query
/// descriptor, ties broken by lower id. Returns fewer when the database is
/// smaller; an empty database is an error.
pub fn retrieve_knn(
    db: &[(u32, Vec<f64>)],
    query: &[f64],
    k: usize,
) -> Result<Vec<u32>> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let qnorm = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, u32)> = db
        .iter()
        .map(|(id, d)| {
            let dot: f64 = d.iter().zip(query).map(|(a, b)| a * b).sum();
            let dnorm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let sim = if qnorm > 0.0 && dnorm > 0.0 {
                dot / (qnorm * dnorm)
            } else {
                0.0
            };
            (sim, *id)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id).collect())
}

/// A database keypoint with a known 3D point.
#[derive(Debug, Clone, Copy)]
pub struct DbKeypoint {
    pub keypoint: KeyPoint,
    /// Index into [`LocalizationDatabase::points`].
    pub point_index: usize,
    /// Merged place-level id used by the observation graph.
    pub merged_id: u64,
}

/// One database view: image, pose, descriptor, and keypoints with 3D points.
#[derive(Debug, Clone)]
pub struct ViewRecord {
    pub id: u32,
    pub image: ImageRgb,
    pub pose: Pose,
    pub descriptor: Vec<f64>,
    pub keypoints: Vec<DbKeypoint>,
}

/// Everything localization needs besides the map itself.
#[derive(Debug, Clone)]
pub struct LocalizationDatabase {
    pub views: Vec<ViewRecord>,
    /// Exact per-keypoint 3D points (world frame).
    pub points: Vec<Vector3<f64>>,
    pub graph: ObservationGraph,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizeConfig {
    /// Retrieved nearest neighbors.
    pub retrieval_k: usize,
    /// Keypoint budget per image.
    pub max_keypoints: usize,
    /// Covisibility merge cell size as a fraction of the scene scale.
    pub covis_cell_factor: f64,
    pub pnp: PnpConfig,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        LocalizeConfig {
            retrieval_k: 5,
            max_keypoints: 400,
            covis_cell_factor: 0.05,
            pnp: PnpConfig::default(),
        }
    }
}

/// Builds the localization database from posed views. Each view's Harris
/// keypoints are lifted to 3D through the paired depth image (ground-truth
/// depth when available, otherwise depth rendered from the map), giving
/// per-keypoint world points that project exactly through their pixel. The
/// observation graph buckets those points into scene-scale grid cells so
/// frames looking at the same structure share ids.
pub fn build_database(
    views: &[(u32, ImageRgb, Pose)],
    depths: &[Option<ImageGray>],
    map: &GaussianMap,
    k: &CameraIntrinsics,
    config: &LocalizeConfig,
) -> Result<LocalizationDatabase> {
    assert_eq!(views.len(), depths.len());
    let cell = (config.covis_cell_factor * map.scene_scale).max(1e-9);
    let mut records = Vec::with_capacity(views.len());
    let mut points = Vec::new();
    let mut graph = ObservationGraph::default();
    let mut merged_ids: BTreeMap<(i64, i64, i64), u64> = BTreeMap::new();

    for ((id, image, pose), depth) in views.iter().zip(depths) {
        let rendered;
        let depth_image = match depth {
            Some(d) => d,
            None => {
                rendered = rasterize(map, pose, k)?.depth;
                &rendered
            }
        };
        let inverse = pose.inverse();
        let mut keypoints = Vec::new();
        let mut observed = BTreeSet::new();
        for kp in detect_keypoints(image, config.max_keypoints) {
            let z = depth_image[(kp.x, kp.y)];
            if z <= 0.0 {
                continue;
            }
            let cam = k.unproject(&kp.pixel(), z);
            let world = inverse.transform_point(&cam);
            let cell_key = (
                (world.x / cell).floor() as i64,
                (world.y / cell).floor() as i64,
                (world.z / cell).floor() as i64,
            );
            let next_id = merged_ids.len() as u64;
            let merged_id = *merged_ids.entry(cell_key).or_insert(next_id);
            let point_index = points.len();
            points.push(world);
            observed.insert(merged_id);
            keypoints.push(DbKeypoint {
                keypoint: kp,
                point_index,
                merged_id,
            });
        }
        graph.observations.insert(*id, observed);
        records.push(ViewRecord {
            id: *id,
            image: image.clone(),
            pose: *pose,
            descriptor: global_descriptor(image),
            keypoints,
        });
    }

    Ok(LocalizationDatabase {
        views: records,
        points,
        graph,
        intrinsics: *k,
    })
}

#[derive(Debug, Clone)]
pub struct LocalizeDiagnostics {
    pub retrieved: Vec<u32>,
    pub clusters: Vec<Vec<u32>>,
    /// Index of the cluster that produced the pose.
    pub winning_cluster: usize,
    pub matches: usize,
    pub pnp_inliers: usize,
    pub coarse_pose: Pose,
    pub fine_pose: Pose,
    pub refine: RefineDiagnostics,
}

/// Full hierarchical localization: retrieval, covisibility clustering,
/// per-cluster NCC matching and PnP-RANSAC (clusters traversed largest
/// first), then photometric refinement from the coarse estimate. Fails with
/// the per-cluster reasons when no cluster yields a pose.
pub fn localize(
    query: &RefineQuery,
    map: &GaussianMap,
    db: &LocalizationDatabase,
    config: &LocalizeConfig,
    refine_config: &RefineConfig,
) -> Result<(Pose, LocalizeDiagnostics)> {
    let k = &db.intrinsics;
    if query.image.width != k.width || query.image.height != k.height {
        return Err(Error::DimensionMismatch(format!(
            "query {}x{} vs database {}x{}",
            query.image.width, query.image.height, k.width, k.height
        )));
    }
    let descriptor_db: Vec<(u32, Vec<f64>)> = db
        .views
        .iter()
        .map(|v| (v.id, v.descriptor.clone()))
        .collect();
    let retrieved = retrieve_knn(&descriptor_db, &global_descriptor(query.image), config.retrieval_k)?;
    let clusters = covisibility_cluster(&db.graph, &retrieved)?;

    let query_keypoints = detect_keypoints(query.image, config.max_keypoints);
    let mut reasons = Vec::new();
    if query_keypoints.is_empty() {
        reasons.push("query image has no keypoints".to_string());
    }

    for (cluster_index, cluster) in clusters.iter().enumerate() {
        if query_keypoints.is_empty() {
            break;
        }
        let mut correspondences = Correspondences::default();
        let mut claimed: BTreeSet<usize> = BTreeSet::new();
        for frame_id in cluster {
            let view = db
                .views
                .iter()
                .find(|v| v.id == *frame_id)
                .expect("cluster frames come from the graph");
            let db_kps: Vec<KeyPoint> = view.keypoints.iter().map(|d| d.keypoint).collect();
            let matches =
                match_keypoints_ncc(query.image, &query_keypoints, &view.image, &db_kps);
            for m in matches {
                // One correspondence per query keypoint across the cluster.
                if !claimed.insert(m.query_index) {
                    continue;
                }
                let point = db.points[view.keypoints[m.db_index].point_index];
                correspondences
                    .items
                    .push((query_keypoints[m.query_index].pixel(), point));
            }
        }
        if correspondences.len() < 4 {
            reasons.push(format!(
                "cluster {cluster_index}: only {} matches",
                correspondences.len()
            ));
            continue;
        }
        let PnpResult { pose: coarse, inliers } =
            match pnp_ransac(&correspondences, k, &config.pnp) {
                Ok(r) => r,
                Err(e) => {
                    reasons.push(format!("cluster {cluster_index}: {e}"));
                    continue;
                }
            };
        let (fine, refine_diag) = refine_pose(query, map, &coarse, k, refine_config)?;
        let diagnostics = LocalizeDiagnostics {
            retrieved,
            clusters: clusters.clone(),
            winning_cluster: cluster_index,
            matches: correspondences.len(),
            pnp_inliers: inliers.len(),
            coarse_pose: coarse,
            fine_pose: fine,
            refine: refine_diag,
        };
        return Ok((fine, diagnostics));
    }

    Err(Error::LocalizationFailed { reasons })
}
