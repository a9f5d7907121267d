use std::path::Path;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flowis::estimator::SamplerConfig;
use flowis::parallel::Exec;
use flowis::render::render_with;
use flowis::scene::{Scene, SceneConfig};
use flowis::train::{Model, ModelConfig};

const SCENE: &str = r#"
[envmap]
ambient = [0.1, 0.1, 0.1]
width = 32
height = 16

[[envmap.lobes]]
direction = [0.4, -0.3, 1.0]
color = [4.0, 3.5, 3.0]
sharpness = 20.0

[materials.metal]
albedo = [0.9, 0.7, 0.4]
metallic = 0.8
roughness = 0.25

[materials.floor]
albedo = [0.5, 0.5, 0.5]
metallic = 0.0
roughness = 0.7

[[spheres]]
center = [0.0, 0.0, 0.3]
radius = 0.3
material = "metal"

[[planes]]
point = [0.0, 0.0, 0.0]
normal = [0.0, 0.0, 1.0]
material = "floor"

[[cameras]]
position = [0.0, -2.0, 0.8]
look_at = [0.0, 0.0, 0.3]
up = [0.0, 0.0, 1.0]
fov = 35.0
width = 32
height = 32
"#;

fn bench_render(c: &mut Criterion) {
    let cfg = SceneConfig::parse_str(SCENE, Path::new("bench.toml")).unwrap();
    let scene = Scene::from_config(&cfg, Path::new(".")).unwrap();
    let model = Model::new(&ModelConfig::default(), &scene, 0);
    let model_state = flowis::train::TrainState::new(model, &Default::default());
    let samplers = [
        ("predefined", SamplerConfig::predefined(32, 16, 16)),
        ("flow", SamplerConfig::flow(32, 16, 16)),
    ];
    let mut group = c.benchmark_group("render_32x32");
    group.sample_size(10);
    for (name, s) in samplers {
        let bound = s.bind(Some(&model_state.specular_snapshot), Some(&model_state.diffuse_snapshot)).unwrap();
        for (label, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
            group.bench_with_input(BenchmarkId::new(label, name), &exec, |b, &exec| {
                b.iter(|| render_with(exec, &scene, &model_state.model, 0, &bound, 1, 7).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_render);
criterion_main!(benches);
