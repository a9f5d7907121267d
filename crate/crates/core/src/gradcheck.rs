//! Finite-difference checks of every differentiable path.

use rand::Rng;

use crate::brdf::{eval_specular, eval_specular_partials, Material};
use crate::color::Rgb;
use crate::estimator::{SamplerConfig, ShadingPoint};
use crate::flow::{FlowConfig, FlowDomain, NormalizingFlow, PwQuadBins};
use crate::geom::{UnitDir, Vec3};
use crate::image::Image;
use crate::nn::{finite_diff_check, normal_sample, FinalInit, GradCheck, Mlp};
use crate::rng;
use crate::scene::{Scene, SceneConfig};
use crate::tensor::VmGrid;
use crate::train::{ce_loss, CeSample, Model, ModelConfig, Schedule, TrainConfig, TrainData, TrainState};

/// Relative error bound, with absolute floor [`crate::nn::GRAD_ABS_FLOOR`].
pub const TOLERANCE: f64 = 1e-3;

const STEP: f64 = 1e-5;
/// Parameters checked per path: the largest-gradient ones plus a random
/// selection.
const CHECKED_LARGEST: usize = 24;
const CHECKED_RANDOM: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub check: GradCheck,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.check.max_rel_err < TOLERANCE
    }
}

fn pick(grad: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..grad.len()).collect();
    order.sort_by(|a, b| grad[*b].abs().total_cmp(&grad[*a].abs()));
    let mut idx: Vec<usize> = order.into_iter().take(CHECKED_LARGEST).collect();
    for _ in 0..CHECKED_RANDOM.min(grad.len()) {
        idx.push(rng.gen_range(0..grad.len()));
    }
    idx.sort_unstable();
    idx.dedup();
    idx
}

fn report(name: &str, f: impl FnMut(&[f64]) -> f64, params: &[f64], grad: &[f64], rng: &mut impl Rng) -> GradReport {
    let idx = pick(grad, rng);
    GradReport {
        name: name.to_string(),
        check: finite_diff_check(f, params, grad, STEP, Some(&idx)),
    }
}

fn randn(n: usize, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| scale * normal_sample(rng)).collect()
}

fn mlp_checks(rng: &mut impl Rng, out: &mut Vec<GradReport>) {
    let dims = [6, 16, 16, 3];
    let mlp = Mlp::new(&dims, FinalInit::He, rng);
    let x = randn(6, 1.0, rng);
    let u = randn(3, 1.0, rng);
    let (_, tape) = mlp.forward(&x).expect("input width");
    let mut g = vec![0.0; mlp.params().len()];
    let g_x = mlp.backward(&tape, &u, &mut g);
    let dot = |a: &[f64]| a.iter().zip(&u).map(|(p, q)| p * q).sum::<f64>();
    out.push(report(
        "mlp parameters",
        |p| dot(&Mlp::from_params(&dims, p.to_vec()).expect("size").eval(&x)),
        mlp.params(),
        &g,
        rng,
    ));
    out.push(report("mlp input", |xi| dot(&mlp.eval(xi)), &x, &g_x, rng));
}

fn grid_check(rng: &mut impl Rng, out: &mut Vec<GradReport>) {
    let grid = VmGrid::new(4, 8, Vec3::splat(-1.0), Vec3::splat(1.0), 0.5, rng);
    let x = Vec3::new(0.13, -0.42, 0.77);
    let u = randn(grid.feature_dim(), 1.0, rng);
    let mut g = vec![0.0; grid.params().len()];
    grid.feature_query_backward(x, &u, &mut g);
    let mut probe = grid.clone();
    out.push(report(
        "vm grid features",
        |p| {
            probe.params_mut().copy_from_slice(p);
            probe.feature_query(x).iter().zip(&u).map(|(a, b)| a * b).sum()
        },
        grid.params(),
        &g,
        rng,
    ));
}

fn bins_check(rng: &mut impl Rng, out: &mut Vec<GradReport>) {
    let raw = randn(PwQuadBins::raw_len(8), 0.7, rng);
    let x = 0.37;
    let (a, b) = (0.8, -0.3);
    let g = PwQuadBins::from_raw(&raw).backward(x, a, b);
    let f = |r: &[f64]| {
        let bins = PwQuadBins::from_raw(r);
        a * bins.cdf(x) + b * bins.pdf(x)
    };
    out.push(report("piecewise-quadratic warp (bins)", f, &raw, &g.raw, rng));
    let bins = PwQuadBins::from_raw(&raw);
    out.push(report("piecewise-quadratic warp (input)", |p| a * bins.cdf(p[0]) + b * bins.pdf(p[0]), &[x], &[g.x], rng));
}

fn perturbed_flow(domain: FlowDomain, grid: &VmGrid, rng: &mut impl Rng) -> NormalizingFlow {
    let cfg = FlowConfig {
        bins: 8,
        hidden: 16,
        ..FlowConfig::default()
    };
    let mut flow = NormalizingFlow::new(domain, grid.feature_dim() + 3, &cfg, rng);
    let p: Vec<f64> = flow.params_flat().iter().map(|v| v + 0.2 * normal_sample(rng)).collect();
    flow.set_params_flat(&p);
    flow
}

fn flow_checks(rng: &mut impl Rng, out: &mut Vec<GradReport>) {
    let grid = VmGrid::new(2, 6, Vec3::splat(-1.0), Vec3::splat(1.0), 0.3, rng);
    let p = ShadingPoint::new(Vec3::new(0.1, -0.2, 0.3), UnitDir::xyz(0.2, 0.1, 1.0).unwrap(), UnitDir::xyz(0.5, -0.3, 0.8).unwrap());
    let w_i = UnitDir::xyz(-0.2, 0.4, 0.9).unwrap();
    for (domain, label) in [(FlowDomain::Incident, "incident"), (FlowDomain::HalfVector, "half-vector")] {
        let flow = perturbed_flow(domain, &grid, rng);
        let (_, g) = crate::flow::flow_log_pdf_with_grad(&flow, &grid, w_i, p.position, p.normal, p.w_o).expect("in support");
        let mut probe = flow.clone();
        out.push(report(
            &format!("flow log-density, {label} domain (networks)"),
            |q| {
                probe.set_params_flat(q);
                crate::flow::flow_pdf(&probe, &grid, w_i, p.position, p.normal, p.w_o).unwrap().ln()
            },
            &flow.params_flat(),
            &g.net,
            rng,
        ));
        let mut probe = grid.clone();
        out.push(report(
            &format!("flow log-density, {label} domain (grid)"),
            |q| {
                probe.params_mut().copy_from_slice(q);
                crate::flow::flow_pdf(&flow, &probe, w_i, p.position, p.normal, p.w_o).unwrap().ln()
            },
            grid.params(),
            &g.grid,
            rng,
        ));
    }

    let flow = perturbed_flow(FlowDomain::HalfVector, &grid, rng);
    let samples: Vec<CeSample> = (0..6)
        .map(|i| CeSample {
            direction: UnitDir::xyz(0.1 * i as f64 - 0.2, 0.05 * i as f64, 1.0).unwrap(),
            integrand: 0.5 + 0.1 * i as f64,
            q_hat: 0.3 + 0.05 * i as f64,
        })
        .collect();
    let mut gn = vec![0.0; flow.num_params()];
    let mut gg = vec![0.0; grid.params().len()];
    ce_loss(&flow, &grid, &p, &samples, 6.0, 1.0, &mut gn, &mut gg);
    let mut probe = flow.clone();
    out.push(report(
        "cross-entropy loss (flow networks)",
        |q| {
            probe.set_params_flat(q);
            ce_loss(&probe, &grid, &p, &samples, 6.0, 0.0, &mut vec![0.0; gn.len()], &mut vec![0.0; gg.len()])
        },
        &flow.params_flat(),
        &gn,
        rng,
    ));
    let mut probe = grid.clone();
    out.push(report(
        "cross-entropy loss (grid)",
        |q| {
            probe.params_mut().copy_from_slice(q);
            ce_loss(&flow, &probe, &p, &samples, 6.0, 0.0, &mut vec![0.0; gn.len()], &mut vec![0.0; gg.len()])
        },
        grid.params(),
        &gg,
        rng,
    ));
}

fn brdf_check(rng: &mut impl Rng, out: &mut Vec<GradReport>) {
    let n = UnitDir::Z;
    let w_o = UnitDir::xyz(0.3, -0.2, 1.0).unwrap();
    let w_i = UnitDir::xyz(-0.25, 0.3, 1.0).unwrap();
    let u = Rgb::new(0.7, -0.4, 1.1);
    let params = [0.6, 0.4, 0.3, 0.35, 0.45];
    let mat = |p: &[f64]| Material::new(Rgb::new(p[0], p[1], p[2]), p[3], p[4]);
    let sp = eval_specular_partials(w_i, w_o, n, &mat(&params));
    let grad = [
        u[0] * sp.d_albedo[0],
        u[1] * sp.d_albedo[1],
        u[2] * sp.d_albedo[2],
        u.dot(sp.d_metallic),
        u.dot(sp.d_roughness),
    ];
    out.push(report("specular brdf (material)", |p| u.dot(eval_specular(w_i, w_o, n, &mat(p))), &params, &grad, rng));
}

const SCENE: &str = r#"
[envmap]
ambient = [0.3, 0.3, 0.3]
learnable = true
width = 16
height = 8

[[envmap.lobes]]
direction = [0.2, -0.6, 1.0]
color = [2.0, 1.5, 1.0]
sharpness = 6.0

[materials.fit]
learnable = true

[materials.floor]
albedo = [0.5, 0.5, 0.5]
roughness = 0.6

[[spheres]]
center = [0.0, 0.0, 0.0]
radius = 0.3
material = "fit"

[[planes]]
point = [0.0, 0.0, -0.3]
normal = [0.0, 0.0, 1.0]
material = "floor"

[[cameras]]
position = [0.0, -1.5, 0.4]
look_at = [0.0, 0.0, 0.0]
up = [0.0, 0.0, 1.0]
fov = 35.0
width = 6
height = 6
"#;

/// Rendering loss through the estimators. Samples come from flow
/// snapshots so that the drawn directions do not depend on the checked
/// parameters.
fn render_loss_checks(rng: &mut impl Rng, out: &mut Vec<GradReport>) {
    let mut cfg = SceneConfig::parse_str(SCENE, std::path::Path::new("gradcheck.toml")).expect("builtin scene");
    cfg.indirect = true;
    let scene = Scene::from_config(&cfg, std::path::Path::new(".")).expect("builtin scene");
    let refs: Vec<Image> = scene
        .cameras
        .iter()
        .map(|c| Image::from_pixels(c.width, c.height, vec![Rgb::new(0.3, 0.25, 0.2); c.pixel_count()]).unwrap())
        .collect();
    let data = TrainData::new(&scene, &refs).expect("matching references");
    let model_cfg = ModelConfig {
        material: crate::material::MaterialFieldConfig {
            components: 4,
            resolution: 8,
            hidden: 16,
        },
        flow: FlowConfig {
            bins: 8,
            hidden: 16,
            ..FlowConfig::default()
        },
        flow_grid_components: 2,
        flow_grid_resolution: 6,
        indirect_hidden: 8,
        ..ModelConfig::default()
    };
    let mut model = Model::new(&model_cfg, &scene, rng.gen());
    // move off the symmetric zero-initialized outputs
    for v in model.material.mlp_mut().params_mut().iter_mut() {
        *v += 0.05 * normal_sample(rng);
    }
    for v in model.lighting.indirect.mlp_mut().params_mut().iter_mut() {
        *v += 0.05 * normal_sample(rng);
    }
    let train_cfg = TrainConfig {
        schedule: Schedule {
            n_ce: 0,
            n_warmup: 0,
            n_update: 1,
            total_iters: 1,
        },
        sampler: SamplerConfig::flow(4, 2, 4),
        batch: 24,
        seed: rng.gen(),
        ..TrainConfig::default()
    };
    let state = TrainState::new(model, &train_cfg);
    let (_, g) = state.compute(data, &train_cfg).expect("valid config");
    let loss = |s: &TrainState| {
        let m = s.compute(data, &train_cfg).expect("valid config").0;
        m.loss_c + train_cfg.weights.material * m.loss_m
    };

    let mut probe = state.clone();
    out.push(report(
        "rendering loss (material mlp)",
        |p| {
            probe.model.material.mlp_mut().params_mut().copy_from_slice(p);
            loss(&probe)
        },
        state.model.material.mlp().params(),
        &g.material_mlp,
        rng,
    ));
    let mut probe = state.clone();
    out.push(report(
        "rendering loss (material grid)",
        |p| {
            probe.model.material.grid_mut().params_mut().copy_from_slice(p);
            loss(&probe)
        },
        state.model.material.grid().params(),
        &g.material_grid,
        rng,
    ));
    let mut probe = state.clone();
    out.push(report(
        "rendering loss (environment map)",
        |p| {
            probe.model.lighting.env.set_preact(p);
            loss(&probe)
        },
        state.model.lighting.env.preact().expect("learnable"),
        &g.env,
        rng,
    ));
    let mut probe = state.clone();
    out.push(report(
        "rendering loss (indirect field)",
        |p| {
            probe.model.lighting.indirect.mlp_mut().params_mut().copy_from_slice(p);
            loss(&probe)
        },
        state.model.lighting.indirect.mlp().params(),
        &g.indirect,
        rng,
    ));
}

/// Runs every check; deterministic in `seed`.
pub fn run_all(seed: u64) -> Vec<GradReport> {
    let mut rng = rng::stream(seed, 0, 0, rng::stratum::INIT);
    let mut out = Vec::new();
    mlp_checks(&mut rng, &mut out);
    grid_check(&mut rng, &mut out);
    bins_check(&mut rng, &mut out);
    flow_checks(&mut rng, &mut out);
    brdf_check(&mut rng, &mut out);
    render_loss_checks(&mut rng, &mut out);
    out
}
