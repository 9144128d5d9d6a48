//! Scratch protocol probe (ignored by default; run explicitly).

use splatloc::geom::pose_error;
use splatloc::harness::{
    cloud_from_map, perturb_pose, query_ring_views, synth_scene, PerturbationSpec, SceneSpec,
};
use splatloc::localize::{refine_pose, RefineConfig, RefineQuery};
use splatloc::mapping::{train_map, TrainConfig};
use splatloc::render::{evaluate_residual, rasterize, Reduction, ResidualSpec};
use splatloc::img::{ImageRgb, PixelMask};
use splatloc::splat::init_from_points;

#[test]
#[ignore]
fn protocol_probe() {
    let spec = SceneSpec { seed: 20, ..Default::default() };
    let (gt_map, views) = synth_scene(&spec).unwrap();
    let k = spec.intrinsics();
    let cloud = cloud_from_map(&gt_map);
    let poses: Vec<_> = views.iter().map(|v| v.pose).collect();
    let initial = init_from_points(&cloud, &poses).unwrap();
    let mut tc = TrainConfig::default();
    tc.iterations = 1500;
    tc.seed = 20;
    let t0 = std::time::Instant::now();
    let (map, _) = train_map(&views, &initial, None, &tc).unwrap();
    eprintln!("trained: {} prims in {:.0}s", map.len(), t0.elapsed().as_secs_f64());

    // Queries with a gray background composited where the GT render is void.
    let queries: Vec<_> = query_ring_views(&gt_map, &spec, 12)
        .unwrap()
        .into_iter()
        .map(|v| {
            let out = rasterize(&gt_map, &v.pose, &k).unwrap();
            let mut img = out.color.clone();
            for (px, occ) in img.pixels_mut().iter_mut().zip(out.occupancy.values()) {
                for c in px.iter_mut() {
                    *c += (1.0 - occ) * 0.5;
                }
            }
            (img, v.pose)
        })
        .collect();

    let masked_cfg = RefineConfig { lr_decay: 0.999, ..Default::default() };
    let unmasked_cfg = RefineConfig { lr_decay: 0.999, use_mask: false, ..Default::default() };

    for (label, ranges) in [("small", PerturbationSpec::small(map.scene_scale, 0)), ("middle", PerturbationSpec::middle(map.scene_scale, 0))] {
        let mut mask_wins = 0;
        let mut masked_ok = 0;
        let mut unmasked_ok = 0;
        let t0 = std::time::Instant::now();
        for (i, (img, gt)) in queries.iter().enumerate() {
            let spec_i = PerturbationSpec { seed: 1000 + i as u64, ..ranges };
            let start = perturb_pose(gt, &spec_i);
            let q = RefineQuery { image: img, depth: None };
            let (pose_m, _dm) = refine_pose(&q, &map, &start, &k, &masked_cfg).unwrap();
            let (pose_u, _du) = refine_pose(&q, &map, &start, &k, &unmasked_cfg).unwrap();
            let em = pose_error(&pose_m, gt);
            let eu = pose_error(&pose_u, gt);
            let tau_t = 0.05 * map.scene_scale;
            if em.translation_err < tau_t && em.rotation_err_deg < 5.0 {
                masked_ok += 1;
            }
            if eu.translation_err < tau_t && eu.rotation_err_deg < 5.0 {
                unmasked_ok += 1;
            }
            // Common yardstick: full-frame objective at each final pose.
            let yardstick = |pose: &splatloc::geom::Pose| {
                let out = rasterize(&map, pose, &k).unwrap();
                let mask = PixelMask::filled(k.width, k.height, true);
                let spec = ResidualSpec::PoseRefinement {
                    target: img,
                    query_depth: None,
                    mask: &mask,
                    a: 0.0,
                    b: 0.0,
                    lambda_geo: 0.0,
                    reduction: Reduction::MeanOverMask,
                };
                evaluate_residual(&out, &spec).unwrap().loss
            };
            let (om, ou) = (yardstick(&pose_m), yardstick(&pose_u));
            if om <= ou {
                mask_wins += 1;
            }
            eprintln!(
                "[{label}] q{i}: masked {:.4}/{:.2}deg obj {:.5} | unmasked {:.4}/{:.2}deg obj {:.5}",
                em.translation_err, em.rotation_err_deg, om, eu.translation_err, eu.rotation_err_deg, ou
            );
        }
        eprintln!(
            "[{label}] masked ok {masked_ok}/12, unmasked ok {unmasked_ok}/12, mask wins {mask_wins}/12, {:.0}s",
            t0.elapsed().as_secs_f64()
        );
    }
}
