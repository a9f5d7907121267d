use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowis::commands::{self, RelightArgs, RenderArgs, SamplerKind, TrainArgs, VarianceArgs};
use flowis::estimator::SamplerConfig;
use flowis::flow::FlowDomain;
use flowis::train::{ModelConfig, TrainConfig};
use flowis::Result;

#[derive(Parser)]
#[command(name = "flowis", version, about = "Inverse rendering with learned importance samplers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene to PFM with a variance image and PPM previews.
    Render(RenderCmd),
    /// Fit materials, lighting and samplers to reference images.
    Train(TrainCmd),
    /// Tabulate specular estimator variance per sampler and sample count.
    VarianceReport(VarianceCmd),
    /// Re-render a fitted model under a new environment map.
    Relight(RelightCmd),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Predefined,
    Flow,
}

impl From<SamplerArg> for SamplerKind {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Predefined => SamplerKind::Predefined,
            SamplerArg::Flow => SamplerKind::Flow,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Incident,
    Half,
}

impl From<DomainArg> for FlowDomain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Incident => FlowDomain::Incident,
            DomainArg::Half => FlowDomain::HalfVector,
        }
    }
}

#[derive(Args)]
struct SamplerOpts {
    #[arg(long, value_enum, default_value = "flow")]
    sampler: SamplerArg,
    /// Flow parameterization for both flows of a new model.
    #[arg(long, value_enum)]
    flow_domain: Option<DomainArg>,
    #[arg(long, default_value_t = 32)]
    n_specular: usize,
    #[arg(long, default_value_t = 16)]
    n_diffuse_flow: usize,
    #[arg(long, default_value_t = 64)]
    n_diffuse_cos: usize,
}

impl SamplerOpts {
    fn config(&self) -> Result<SamplerConfig> {
        let c = SamplerKind::from(self.sampler).config(self.n_specular, self.n_diffuse_flow, self.n_diffuse_cos);
        c.validate()?;
        Ok(c)
    }

    fn domain(&self) -> Option<FlowDomain> {
        self.flow_domain.map(Into::into)
    }
}

#[derive(Args)]
struct RenderCmd {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    sampler: SamplerOpts,
    #[arg(long, default_value_t = 4)]
    spp: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    camera: usize,
    /// Render every camera into the directory given by --out.
    #[arg(long)]
    all_cameras: bool,
    #[arg(long, default_value = "render.pfm")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    scene: PathBuf,
    /// Directory of cam<i>.pfm reference images.
    #[arg(long)]
    references: Option<PathBuf>,
    /// Passes per pixel when rendering references from the scene.
    #[arg(long, default_value_t = 16)]
    spp: usize,
    /// Resume from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    sampler: SamplerOpts,
    #[arg(long, default_value_t = 5000)]
    iters: u64,
    /// Defaults to iters / 10.
    #[arg(long)]
    n_ce: Option<u64>,
    /// Defaults to iters / 5.
    #[arg(long)]
    n_warmup: Option<u64>,
    /// Defaults to iters / 5.
    #[arg(long)]
    n_update: Option<u64>,
    #[arg(long, default_value_t = 1024)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
}

#[derive(Args)]
struct VarianceCmd {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Restrict the report to one sampler.
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64,128")]
    n_specular: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    camera: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RelightCmd {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    envmap: PathBuf,
    #[arg(long, default_value_t = 256)]
    n_specular: usize,
    #[arg(long, default_value_t = 128)]
    n_diffuse_cos: usize,
    #[arg(long, default_value_t = 4)]
    spp: usize,
    #[arg(long, default_value_t = 0)]
    camera: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "relit.pfm")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckCmd {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn model_config(domain: Option<FlowDomain>) -> ModelConfig {
    let mut m = ModelConfig::default();
    if let Some(d) = domain {
        m.specular_domain = d;
        m.diffuse_domain = d;
    }
    m
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Render(c) => {
            let sampler = c.sampler.config()?;
            commands::cmd_render(&RenderArgs {
                scene: c.scene,
                checkpoint: c.checkpoint,
                sampler,
                flow_domain: c.sampler.domain(),
                spp: c.spp,
                seed: c.seed,
                out: c.out.clone(),
                camera: c.camera,
                all_cameras: c.all_cameras,
            })?;
            println!("wrote {}", c.out.display());
        }
        Command::Train(c) => {
            let mut train = TrainConfig {
                sampler: c.sampler.config()?,
                batch: c.batch,
                seed: c.seed,
                ..TrainConfig::default()
            };
            train.schedule.total_iters = c.iters;
            train.schedule.n_ce = c.n_ce.unwrap_or(c.iters / 10);
            train.schedule.n_warmup = c.n_warmup.unwrap_or(c.iters / 5);
            train.schedule.n_update = c.n_update.unwrap_or((c.iters / 5).max(1));
            let model = model_config(c.sampler.domain());
            if let (Some(p), Some(d)) = (&c.checkpoint, c.sampler.domain()) {
                commands::check_domain(&flowis::checkpoint::load(p)?, Some(d))?;
            }
            let outcome = commands::cmd_train(&TrainArgs {
                scene: c.scene,
                references: c.references,
                reference_spp: c.spp,
                checkpoint: c.checkpoint,
                model,
                train,
                out: c.out.clone(),
            })?;
            if let Some(m) = outcome.metrics.last() {
                println!("iteration {} loss {:.6e}", m.iteration, m.loss_c);
            }
            println!("psnr {:.3} dB", outcome.final_psnr);
            println!("wrote {}", c.out.display());
        }
        Command::VarianceReport(c) => {
            let samplers = match c.sampler {
                Some(s) => vec![s.into()],
                None => vec![SamplerKind::Predefined, SamplerKind::Flow],
            };
            let report = commands::cmd_variance_report(&VarianceArgs {
                scene: c.scene,
                checkpoint: c.checkpoint,
                samplers,
                sample_counts: c.n_specular,
                runs: c.runs,
                seed: c.seed,
                camera: c.camera,
                out: c.out,
            })?;
            print!("{}", report.to_text());
        }
        Command::Relight(c) => {
            commands::cmd_relight(&RelightArgs {
                scene: c.scene,
                checkpoint: c.checkpoint,
                envmap: c.envmap,
                sampler: SamplerConfig::predefined(c.n_specular, 1, c.n_diffuse_cos),
                spp: c.spp,
                seed: c.seed,
                camera: c.camera,
                out: c.out.clone(),
            })?;
            println!("wrote {}", c.out.display());
        }
        Command::Gradcheck(c) => {
            let reports = commands::cmd_gradcheck(c.seed, c.out.as_deref())?;
            println!("{:<48} {:>12} {:>8}  status", "path", "rel err", "checked");
            for r in &reports {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<48} {:>12.3e} {:>8}  {status}", r.name, r.check.max_rel_err, r.check.checked);
            }
            commands::gradcheck_verdict(&reports)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

