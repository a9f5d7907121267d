//! The operations behind the command-line tool.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::color::Rgb;
use crate::error::{Error, Result};
use crate::estimator::{estimate_specular, SampleKey, SamplerConfig, ShadingPoint};
use crate::flow::FlowDomain;
use crate::gradcheck::{self, GradReport};
use crate::image::{psnr_tonemapped, Image};
use crate::lighting::EnvMap;
use crate::parallel::map_indexed;
use crate::render::{render, Rendering};
use crate::scene::Scene;
use crate::train::{train, Model, ModelConfig, StepMetrics, TrainConfig, TrainData, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Predefined,
    Flow,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Predefined => "predefined",
            SamplerKind::Flow => "flow",
        }
    }

    pub fn config(self, n_specular: usize, n_diffuse_flow: usize, n_diffuse_cos: usize) -> SamplerConfig {
        match self {
            SamplerKind::Predefined => SamplerConfig::predefined(n_specular, n_diffuse_flow, n_diffuse_cos),
            SamplerKind::Flow => SamplerConfig::flow(n_specular, n_diffuse_flow, n_diffuse_cos),
        }
    }
}

/// `foo/bar.pfm` + `_variance` + `ppm` -> `foo/bar_variance.ppm`.
pub fn sibling(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

/// Writes `path` as PFM with a PPM preview next to it.
pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.write_pfm(path)?;
    img.write_ppm(&sibling(path, "", "ppm"))
}

/// Loads a scene with the model from `checkpoint`, or a fresh model.
pub fn load_model(scene_path: &Path, checkpoint: Option<&Path>, model_config: &ModelConfig, seed: u64) -> Result<(Scene, TrainState)> {
    let (_, scene) = Scene::load(scene_path)?;
    let state = match checkpoint {
        Some(p) => checkpoint::load(p)?,
        None => TrainState::new(Model::new(model_config, &scene, seed), &TrainConfig::default()),
    };
    Ok((scene, state))
}

/// Fails if `domain` was requested but the checkpoint's flows differ.
pub fn check_domain(state: &TrainState, domain: Option<FlowDomain>) -> Result<()> {
    if let Some(d) = domain {
        let m = &state.model;
        if m.specular_flow.domain() != d || m.diffuse_flow.domain() != d {
            return Err(Error::Validation(format!(
                "checkpoint flows use {:?}/{:?}, requested {d:?}",
                m.specular_flow.domain(),
                m.diffuse_flow.domain()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RenderArgs {
    pub scene: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub sampler: SamplerConfig,
    pub flow_domain: Option<FlowDomain>,
    pub spp: usize,
    pub seed: u64,
    /// Output PFM, or a directory receiving `cam<i>.pfm` when
    /// `all_cameras` is set.
    pub out: PathBuf,
    pub camera: usize,
    pub all_cameras: bool,
}

/// Renders radiance and variance images and writes them with previews.
pub fn cmd_render(args: &RenderArgs) -> Result<Vec<Rendering>> {
    let mut model_config = ModelConfig::default();
    if let Some(d) = args.flow_domain {
        model_config.specular_domain = d;
        model_config.diffuse_domain = d;
    }
    let (scene, state) = load_model(&args.scene, args.checkpoint.as_deref(), &model_config, args.seed)?;
    if args.checkpoint.is_some() {
        check_domain(&state, args.flow_domain)?;
    }
    let sampler = args.sampler.bind(Some(&state.specular_snapshot), Some(&state.diffuse_snapshot))?;
    let cameras: Vec<usize> = if args.all_cameras {
        (0..scene.cameras.len()).collect()
    } else {
        if args.camera >= scene.cameras.len() {
            return Err(Error::Validation(format!("camera {} does not exist ({} cameras)", args.camera, scene.cameras.len())));
        }
        vec![args.camera]
    };
    let mut out = Vec::new();
    for c in cameras {
        let r = render(&scene, &state.model, c, &sampler, args.spp, args.seed)?;
        let path = if args.all_cameras {
            args.out.join(format!("cam{c}.pfm"))
        } else {
            args.out.clone()
        };
        write_image(&r.radiance, &path)?;
        write_image(&r.variance, &sibling(&path, "_variance", "pfm"))?;
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub scene: PathBuf,
    /// Directory with `cam<i>.pfm` per camera. Without it references are
    /// rendered from the scene file itself.
    pub references: Option<PathBuf>,
    pub reference_spp: usize,
    /// Resume from this checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    /// Tone-mapped PSNR of camera 0 re-rendered against its reference.
    pub final_psnr: f64,
}

pub fn read_references(dir: &Path, scene: &Scene) -> Result<Vec<Image>> {
    (0..scene.cameras.len()).map(|i| Image::read_pfm(&dir.join(format!("cam{i}.pfm")))).collect()
}

/// Renders every camera of `scene` with predefined samplers.
pub fn render_references(scene: &Scene, model: &Model, spp: usize, seed: u64) -> Result<Vec<Image>> {
    let s = SamplerConfig::predefined(128, 64, 64).bind(None, None)?;
    (0..scene.cameras.len()).map(|c| render(scene, model, c, &s, spp, seed).map(|r| r.radiance)).collect()
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    args.train.validate()?;
    let (_, scene) = Scene::load(&args.scene)?;
    let references = match &args.references {
        Some(dir) => read_references(dir, &scene)?,
        None => {
            let m = Model::new(&args.model, &scene, args.train.seed);
            render_references(&scene, &m, args.reference_spp, args.train.seed ^ 0x5EED)?
        }
    };
    let data = TrainData::new(&scene, &references)?;
    let mut state = match &args.checkpoint {
        Some(p) => checkpoint::load(p)?,
        None => TrainState::new(Model::new(&args.model, &scene, args.train.seed), &args.train),
    };
    let metrics_path = sibling(&args.out, "", "csv");
    let mut log = String::from(StepMetrics::CSV_HEADER);
    log.push('\n');
    let mut metrics = Vec::new();
    let result = train(&mut state, data, &args.train, |m| {
        log.push_str(&m.csv_row());
        log.push('\n');
        metrics.push(*m);
    });
    fs::write(&metrics_path, &log).map_err(|e| Error::io(&metrics_path, e))?;
    if let Err(e) = result {
        let dump = sibling(&args.out, "_failure", "txt");
        let text = format!("training aborted at iteration {}\n{e}\nlast metrics: {:?}\n", state.iteration, metrics.last());
        fs::write(&dump, text).map_err(|e| Error::io(&dump, e))?;
        return Err(e);
    }
    checkpoint::save(&state, &args.out)?;
    let s = SamplerConfig::predefined(64, 32, 32).bind(None, None)?;
    let r = render(&scene, &state.model, 0, &s, 1, args.train.seed)?;
    let final_psnr = psnr_tonemapped(&r.radiance, &references[0])?;
    Ok(TrainOutcome { state, metrics, final_psnr })
}

#[derive(Debug, Clone)]
pub struct VarianceArgs {
    pub scene: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub samplers: Vec<SamplerKind>,
    pub sample_counts: Vec<usize>,
    pub runs: usize,
    pub seed: u64,
    pub camera: usize,
    /// CSV output; a text table with the same numbers is returned.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceRow {
    pub sampler: SamplerKind,
    pub n: usize,
    /// Mean over runs of the per-pixel mean literal variance.
    pub mean: f64,
    pub std: f64,
    /// Same for the variance of the estimator itself.
    pub standard_mean: f64,
    pub standard_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub rows: Vec<VarianceRow>,
    pub footnotes: Vec<String>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Per-run means over the hit pixels of `camera` of the specular
/// estimator's literal and standard variance.
pub fn specular_variance_runs(scene: &Scene, state: &TrainState, sampler: SamplerConfig, camera: usize, runs: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    let bound = sampler.bind(Some(&state.specular_snapshot), Some(&state.diffuse_snapshot))?;
    let cam = scene
        .cameras
        .get(camera)
        .ok_or_else(|| Error::Validation(format!("camera {camera} does not exist")))?;
    let mut out = Vec::with_capacity(runs);
    for run in 0..runs {
        let per_pixel = map_indexed(cam.pixel_count(), |i| {
            let ray = cam.ray(i % cam.width, i / cam.width);
            let hit = scene.geometry.intersect(&ray)?;
            let p = ShadingPoint::new(hit.position, hit.normal, -ray.direction);
            let mat = state.model.material_at(scene.slots[hit.primitive_id], hit.position);
            let key = SampleKey {
                seed: seed.wrapping_add(run as u64),
                pixel: i as u64,
                iteration: 0,
            };
            let e = estimate_specular(&p, &mat, &scene.geometry, &state.model.lighting, &bound, key);
            Some((e.variance, e.standard_variance))
        });
        let hits: Vec<(f64, f64)> = per_pixel.into_iter().flatten().collect();
        if hits.is_empty() {
            return Err(Error::Validation(format!("camera {camera} sees no surface")));
        }
        let n = hits.len() as f64;
        out.push((hits.iter().map(|h| h.0).sum::<f64>() / n, hits.iter().map(|h| h.1).sum::<f64>() / n));
    }
    Ok(out)
}

impl VarianceReport {
    pub const CSV_HEADER: &'static str = "sampler,n,mean_variance,std_variance,mean_standard_variance,std_standard_variance";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6e},{:.6e},{:.6e},{:.6e}", r.sampler.name(), r.n, r.mean, r.std, r.standard_mean, r.standard_std);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<12} {:>6} {:>14} {:>14} {:>14} {:>14}\n",
            "sampler", "N", "variance", "+-", "std variance", "+-"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e}",
                r.sampler.name(),
                r.n,
                r.mean,
                r.std,
                r.standard_mean,
                r.standard_std
            );
        }
        for (i, f) in self.footnotes.iter().enumerate() {
            let _ = writeln!(s, "[{}] {f}", i + 1);
        }
        s
    }
}

pub fn cmd_variance_report(args: &VarianceArgs) -> Result<VarianceReport> {
    let (scene, state) = load_model(&args.scene, args.checkpoint.as_deref(), &ModelConfig::default(), args.seed)?;
    if args.runs == 0 {
        return Err(Error::Validation("runs must be at least 1".into()));
    }
    let mut rows = Vec::new();
    let mut footnotes = Vec::new();
    for &kind in &args.samplers {
        for &n in &args.sample_counts {
            if n < 2 {
                footnotes.push(format!("{} N={n}: {}", kind.name(), Error::InsufficientSamples { needed: 2, got: n }));
                continue;
            }
            let cfg = kind.config(n, 1, 1);
            let runs = specular_variance_runs(&scene, &state, cfg, args.camera, args.runs, args.seed)?;
            let (mean, std) = mean_std(&runs.iter().map(|r| r.0).collect::<Vec<_>>());
            let (standard_mean, standard_std) = mean_std(&runs.iter().map(|r| r.1).collect::<Vec<_>>());
            rows.push(VarianceRow {
                sampler: kind,
                n,
                mean,
                std,
                standard_mean,
                standard_std,
            });
        }
    }
    let report = VarianceReport { rows, footnotes };
    if let Some(p) = &args.out {
        fs::write(p, report.to_csv()).map_err(|e| Error::io(p, e))?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct RelightArgs {
    pub scene: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Replacement environment map (PFM).
    pub envmap: PathBuf,
    pub sampler: SamplerConfig,
    pub spp: usize,
    pub seed: u64,
    pub camera: usize,
    pub out: PathBuf,
}

/// Renders the fitted model under a different environment map with
/// predefined samplers.
pub fn relight(scene: &Scene, model: &Model, env: EnvMap, sampler: SamplerConfig, camera: usize, spp: usize, seed: u64) -> Result<Image> {
    let mut model = model.clone();
    model.lighting.env = env;
    model.lighting.indirect.set_enabled(false);
    let s = SamplerConfig::predefined(sampler.n_specular, sampler.n_diffuse_flow, sampler.n_diffuse_cos).bind(None, None)?;
    Ok(render(scene, &model, camera, &s, spp, seed)?.radiance)
}

pub fn cmd_relight(args: &RelightArgs) -> Result<Image> {
    let (scene, state) = load_model(&args.scene, args.checkpoint.as_deref(), &ModelConfig::default(), args.seed)?;
    let img = Image::read_pfm(&args.envmap)?;
    let env = EnvMap::from_texels(img.width(), img.height(), img.pixels().iter().flat_map(|c| c.0).collect())?;
    if args.camera >= scene.cameras.len() {
        return Err(Error::Validation(format!("camera {} does not exist", args.camera)));
    }
    let out = relight(&scene, &state.model, env, args.sampler, args.camera, args.spp, args.seed)?;
    write_image(&out, &args.out)?;
    Ok(out)
}

/// Runs the finite-difference suite; writes a CSV when `out` is given.
pub fn cmd_gradcheck(seed: u64, out: Option<&Path>) -> Result<Vec<GradReport>> {
    let reports = gradcheck::run_all(seed);
    if let Some(p) = out {
        let mut s = String::from("path,max_rel_err,checked,passed\n");
        for r in &reports {
            let _ = writeln!(s, "\"{}\",{:.6e},{},{}", r.name, r.check.max_rel_err, r.check.checked, r.passed());
        }
        fs::write(p, s).map_err(|e| Error::io(p, e))?;
    }
    Ok(reports)
}

/// Turns the first failed check into a numeric error.
pub fn gradcheck_verdict(reports: &[GradReport]) -> Result<()> {
    match reports.iter().find(|r| !r.passed()) {
        Some(bad) => Err(Error::NonFinite(format!(
            "gradient check failed for {}: relative error {:.3e}",
            bad.name, bad.check.max_rel_err
        ))),
        None => Ok(()),
    }
}

/// Mean RGB of an image's pixels, ignoring pixels where `mask` is false.
pub fn masked_mean(img: &Image, mask: &[bool]) -> Rgb {
    let mut sum = Rgb::BLACK;
    let mut n = 0.0;
    for (p, m) in img.pixels().iter().zip(mask) {
        if *m {
            sum += *p;
            n += 1.0;
        }
    }
    if n == 0.0 {
        Rgb::BLACK
    } else {
        sum * (1.0 / n)
    }
}
