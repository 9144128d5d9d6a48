use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use splatloc::img::PixelMask;
use splatloc::localize::{
    detect_keypoints, pnp_ransac, refine_pose, scharr_gradient_mask, Correspondences, PnpConfig,
    RefineConfig, RefineQuery,
};
use splatloc::render::{rasterize, rasterize_with_gradients, Reduction, ResidualSpec};
use splatloc_bench::{fixture, front_pose};

fn bench_rasterize(c: &mut Criterion) {
    let (map, views, k) = fixture(500, 128);
    let pose = front_pose(&views);
    c.bench_function("rasterize_500_128", |b| {
        b.iter(|| black_box(rasterize(&map, &pose, &k).unwrap()))
    });
}

fn bench_gradients(c: &mut Criterion) {
    let (map, views, k) = fixture(500, 128);
    let pose = front_pose(&views);
    let target = &views[0].image;
    let mask = PixelMask::filled(k.width, k.height, true);
    let spec = ResidualSpec::PoseRefinement {
        target,
        query_depth: None,
        mask: &mask,
        a: 0.0,
        b: 0.0,
        lambda_geo: 0.01,
        reduction: Reduction::MeanOverMask,
    };
    c.bench_function("gradient_pass_500_128", |b| {
        b.iter(|| black_box(rasterize_with_gradients(&map, &pose, &k, &spec).unwrap()))
    });
}

fn bench_refine_step(c: &mut Criterion) {
    let (map, views, k) = fixture(500, 128);
    let pose = front_pose(&views);
    let config = RefineConfig {
        max_iterations: 1,
        ..Default::default()
    };
    let query = RefineQuery {
        image: &views[1].image,
        depth: None,
    };
    c.bench_function("refine_step_500_128", |b| {
        b.iter(|| black_box(refine_pose(&query, &map, &pose, &k, &config).unwrap()))
    });
}

fn bench_masks_and_features(c: &mut Criterion) {
    let (_, views, _) = fixture(300, 128);
    let image = &views[0].image;
    c.bench_function("scharr_mask_128", |b| {
        b.iter(|| black_box(scharr_gradient_mask(image, 1.0)))
    });
    c.bench_function("harris_keypoints_128", |b| {
        b.iter(|| black_box(detect_keypoints(image, 400)))
    });
}

fn bench_pnp(c: &mut Criterion) {
    let (map, views, k) = fixture(300, 128);
    let pose = front_pose(&views);
    // Exact correspondences from map primitives visible in the front view.
    let items: Vec<_> = map
        .primitives
        .iter()
        .filter_map(|p| {
            let cam = pose.transform_point(&p.position);
            if cam.z < 0.5 {
                return None;
            }
            let px = k.project(&cam);
            let in_frame = px.x > 2.0
                && px.x < f64::from(k.width) - 2.0
                && px.y > 2.0
                && px.y < f64::from(k.height) - 2.0;
            in_frame.then_some((px, p.position))
        })
        .take(100)
        .collect();
    let corr = Correspondences { items };
    let config = PnpConfig::default();
    c.bench_function("pnp_ransac_100", |b| {
        b.iter(|| black_box(pnp_ransac(&corr, &k, &config).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_rasterize,
    bench_gradients,
    bench_refine_step,
    bench_masks_and_features,
    bench_pnp
);
criterion_main!(benches);
