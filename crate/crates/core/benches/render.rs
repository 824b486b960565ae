use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use focal_nerf::exec::Execution;
use focal_nerf::renderer::render_image;
use focal_nerf::scene::{two_district_cameras, two_district_scene, SceneConfig};
use focal_nerf::trainer::{train_global, Dataset, GlobalModel, TrainConfig};

const MODES: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn render(c: &mut Criterion) {
    let scene_cfg = SceneConfig::default();
    let scene = two_district_scene(&scene_cfg).unwrap();
    let cams = two_district_cameras(&scene_cfg).unwrap();
    let cfg = TrainConfig::default();
    let model = GlobalModel::init(&cfg, &scene).unwrap();
    let field = model.field(None).unwrap();
    let settings = cfg.render_settings(scene.background);
    let mut group = c.benchmark_group("render_64x64");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| render_image(&field, &cams[0], 1, &settings, exec).unwrap())
        });
    }
    group.finish();
}

fn train_steps(c: &mut Criterion) {
    let ds = Dataset::generate(
        &SceneConfig {
            width: 32,
            height: 32,
            focal: 30.0,
            reference_steps: 256,
            ..SceneConfig::default()
        },
        Execution::Parallel,
    )
    .unwrap();
    let cfg = TrainConfig {
        global_steps: 4,
        batch_rays: 256,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("global_4_steps");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| train_global(&ds, &cfg, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, render, train_steps);
criterion_main!(benches);
