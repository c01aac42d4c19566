use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tinycount::density::{generate_density_map, upsample_bilinear};
use tinycount::nms::{soft_nms, NmsConfig};
use tinycount::synthgen::SceneSpec;
use tinycount::tiling::split_merge_detect;
use tinycount::{hybrid_count, plan_tiles, Detection, HybridConfig, KernelConfig};
use tinycount_bench::fixture;

fn bench_nms(c: &mut Criterion) {
    let (ds, _, _) = fixture(&SceneSpec::high_density(), 1, 1);
    let dets: Vec<Detection> = ds.scenes[0]
        .boxes
        .iter()
        .enumerate()
        .map(|(i, b)| Detection::new(*b, 0.3 + 0.7 * ((i * 37) % 101) as f64 / 101.0))
        .collect();
    c.bench_function("soft_nms_300", |b| b.iter(|| soft_nms(black_box(&dets), &NmsConfig::default())));
}

fn bench_tiling(c: &mut Criterion) {
    let (ds, det, _) = fixture(&SceneSpec::default(), 1, 2);
    let scene = &ds.scenes[0];
    let plan = plan_tiles(scene.width, scene.height, 256, 0.2).unwrap();
    c.bench_function("split_merge_640_w256", |b| {
        b.iter(|| split_merge_detect(&scene.image_ref(), &det, &plan, &NmsConfig::default()).unwrap())
    });
}

fn bench_density(c: &mut Criterion) {
    let (ds, _, _) = fixture(&SceneSpec::high_density(), 1, 3);
    let scene = &ds.scenes[0];
    c.bench_function("density_map_640", |b| {
        b.iter(|| generate_density_map(&scene.points, scene.width, scene.height, &KernelConfig::default()).unwrap())
    });
    let native = generate_density_map(&scene.points, scene.width, scene.height, &KernelConfig::default())
        .unwrap()
        .sum_pool(8);
    c.bench_function("upsample_x8_80", |b| b.iter(|| upsample_bilinear(black_box(&native), 8).unwrap()));
}

fn bench_hybrid(c: &mut Criterion) {
    let (ds, det, den) = fixture(&SceneSpec::default(), 8, 4);
    let cfg = HybridConfig::default();
    c.bench_function("hybrid_count_8_images", |b| {
        b.iter(|| {
            for s in &ds.scenes {
                hybrid_count(&s.image_ref(), &det, &den, &cfg).unwrap();
            }
        })
    });
}

criterion_group!(benches, bench_nms, bench_tiling, bench_density, bench_hybrid);
criterion_main!(benches);
