//! Benchmark execution: perturbation-initialized refinement or the full
//! pipeline over a query set, success rates and median errors, and the
//! report files.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::{pose_error, CameraIntrinsics, Pose};
use crate::img::{ImageGray, ImageRgb};
use crate::localize::{localize, refine_pose, LocalizationDatabase, LocalizeConfig, RefineConfig, RefineQuery};
use crate::splat::GaussianMap;

use super::{perturb_pose, PerturbationSpec};

/// Success thresholds: translation in scene units, rotation in degrees.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Thresholds {
    pub translation: f64,
    pub rotation_deg: f64,
}

/// One benchmark query: an image (optionally with depth) and its
/// ground-truth pose.
#[derive(Debug, Clone)]
pub struct BenchmarkQuery {
    pub id: u32,
    pub image: ImageRgb,
    pub depth: Option<ImageGray>,
    pub gt_pose: Pose,
}

/// What the benchmark exercises per query.
pub enum BenchmarkMode<'a> {
    /// Perturb the ground-truth pose per the ranges and refine back.
    /// Per-query perturbation seeds derive from the benchmark seed XOR the
    /// query index, so results are independent of scheduling.
    RefineOnly {
        translation_range: [f64; 2],
        rotation_range_deg: [f64; 2],
    },
    /// Retrieval, clustering, PnP-RANSAC, then refinement.
    FullPipeline {
        db: &'a LocalizationDatabase,
        config: &'a LocalizeConfig,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryOutcome {
    pub id: u32,
    pub t_err: Option<f64>,
    pub r_err: Option<f64>,
    pub success: bool,
    pub coarse_t_err: Option<f64>,
    pub coarse_r_err: Option<f64>,
    pub iters: u32,
    pub ms: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkReport {
    pub mode: String,
    pub thresholds: Thresholds,
    pub queries: usize,
    pub success_rate: f64,
    pub median_translation_err: Option<f64>,
    pub median_rotation_err: Option<f64>,
    pub failures: usize,
    pub mean_ms: f64,
    pub per_query: Vec<QueryOutcome>,
}

/// Median with even-count averaging; `None` on empty input.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// Runs every query through the chosen mode. Query failures are recorded as
/// non-successes and never abort the run. Deterministic given `seed` at any
/// thread count (timing fields aside).
pub fn run_benchmark(
    map: &GaussianMap,
    queries: &[BenchmarkQuery],
    mode: &BenchmarkMode,
    k: &CameraIntrinsics,
    thresholds: Thresholds,
    refine_config: &RefineConfig,
    seed: u64,
) -> Result<BenchmarkReport> {
    if queries.is_empty() {
        return Err(Error::Config("benchmark needs at least one query".into()));
    }

    let outcomes: Vec<QueryOutcome> = queries
        .par_iter()
        .enumerate()
        .map(|(index, query)| {
            let start = Instant::now();
            let refine_query = RefineQuery {
                image: &query.image,
                depth: query.depth.as_ref(),
            };
            let (result, coarse) = match mode {
                BenchmarkMode::RefineOnly {
                    translation_range,
                    rotation_range_deg,
                } => {
                    let spec = PerturbationSpec {
                        translation_range: *translation_range,
                        rotation_range_deg: *rotation_range_deg,
                        seed: seed ^ index as u64,
                    };
                    let initial = perturb_pose(&query.gt_pose, &spec);
                    (
                        refine_pose(&refine_query, map, &initial, k, refine_config)
                            .map(|(pose, diag)| (pose, diag.iterations)),
                        Some(initial),
                    )
                }
                BenchmarkMode::FullPipeline { db, config } => {
                    match localize(&refine_query, map, db, config, refine_config) {
                        Ok((pose, diag)) => {
                            let coarse = diag.coarse_pose;
                            (Ok((pose, diag.refine.iterations)), Some(coarse))
                        }
                        Err(e) => (Err(e), None),
                    }
                }
            };
            let ms = start.elapsed().as_secs_f64() * 1e3;
            let coarse_err = coarse.map(|c| pose_error(&c, &query.gt_pose));
            match result {
                Ok((pose, iters)) => {
                    let err = pose_error(&pose, &query.gt_pose);
                    let success = err.translation_err < thresholds.translation
                        && err.rotation_err_deg < thresholds.rotation_deg;
                    QueryOutcome {
                        id: query.id,
                        t_err: Some(err.translation_err),
                        r_err: Some(err.rotation_err_deg),
                        success,
                        coarse_t_err: coarse_err.map(|e| e.translation_err),
                        coarse_r_err: coarse_err.map(|e| e.rotation_err_deg),
                        iters,
                        ms,
                        error: None,
                    }
                }
                Err(e) => QueryOutcome {
                    id: query.id,
                    t_err: None,
                    r_err: None,
                    success: false,
                    coarse_t_err: coarse_err.map(|e| e.translation_err),
                    coarse_r_err: coarse_err.map(|e| e.rotation_err_deg),
                    iters: 0,
                    ms,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let successes = outcomes.iter().filter(|o| o.success).count();
    let t_errs: Vec<f64> = outcomes.iter().filter_map(|o| o.t_err).collect();
    let r_errs: Vec<f64> = outcomes.iter().filter_map(|o| o.r_err).collect();
    let failures = outcomes.iter().filter(|o| o.error.is_some()).count();
    let mean_ms = outcomes.iter().map(|o| o.ms).sum::<f64>() / outcomes.len() as f64;

    Ok(BenchmarkReport {
        mode: match mode {
            BenchmarkMode::RefineOnly { .. } => "refine-only".to_string(),
            BenchmarkMode::FullPipeline { .. } => "full-pipeline".to_string(),
        },
        thresholds,
        queries: outcomes.len(),
        success_rate: successes as f64 / outcomes.len() as f64,
        median_translation_err: median(&t_errs),
        median_rotation_err: median(&r_errs),
        failures,
        mean_ms,
        per_query: outcomes,
    })
}

/// Writes `report.json` and `per_query.csv` into `dir`. With
/// `include_timing` false all wall-clock fields are zeroed, making the
/// outputs byte-identical across reruns and thread counts.
pub fn write_report(report: &BenchmarkReport, dir: &Path, include_timing: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sanitized = report.clone();
    if !include_timing {
        sanitized.mean_ms = 0.0;
        for q in &mut sanitized.per_query {
            q.ms = 0.0;
        }
    }
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(&sanitized)
        .map_err(|e| Error::malformed("report.json", e.to_string()))?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    let mut csv = String::from("query_id,t_err,r_err,success,coarse_t_err,coarse_r_err,iters,ms\n");
    let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |x| x.to_string());
    for q in &sanitized.per_query {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            q.id,
            fmt(q.t_err),
            fmt(q.r_err),
            u8::from(q.success),
            fmt(q.coarse_t_err),
            fmt(q.coarse_r_err),
            q.iters,
            q.ms
        ));
    }
    let csv_path = dir.join("per_query.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))
}
