use std::io;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pnp_core::equiv_hr::{lift_kernel, verify_equivalence, LiftMethod, SubsampleKind, SubsampleOp};
use pnp_core::harness::config::ExperimentConfig;
use pnp_core::harness::image_io::save_image;
use pnp_core::harness::runner::{prepare_inputs, RunRecord, Runner};
use pnp_core::harness::tensor_io::{load_tensor, save_tensor};
use pnp_core::harness::verify::SuiteRegistry;
use pnp_core::operators::{make_gaussian_kernel, ConvKernel};
use pnp_core::sae::{serve_connection, serve_tcp, EchoService, HelloInfo};
use pnp_core::sampler::Task;
use pnp_core::Tensor;

#[derive(Parser)]
#[command(name = "pnp", version, about = "Plug-and-play image restoration with a consistency-model prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Restore an image with a fixed conditioning vector.
    Solve(RunArgs),
    /// Calibrate the conditioning vector by marginal likelihood, then restore.
    SolvePro(RunArgs),
    /// Simulate a measurement from the configured image and operator.
    Degrade(RunArgs),
    /// Lift a low-resolution blur kernel to an equivalent high-resolution one.
    Hrlift(HrliftArgs),
    /// Run numerical self-checks.
    Verify(VerifyArgs),
    /// Serve a prior that echoes latents back, for protocol testing.
    ServeEcho(EchoArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment file (TOML). Defaults to the built-in deblurring demo.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sampler seed (`degrade`: measurement noise seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `analytic`, `remote:HOST:PORT` or `stdio:COMMAND`.
    #[arg(long)]
    prior: Option<String>,
    #[arg(long, value_parser = ["4", "8"])]
    steps: Option<String>,
    #[arg(long)]
    task: Option<Task>,
    /// Precomputed measurement (`.lten` or `.png`); skips degradation.
    #[arg(long)]
    measurement: Option<String>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::deblur_demo(),
        };
        if let Some(task) = self.task {
            cfg.task = task;
        }
        if let Some(prior) = &self.prior {
            cfg.prior.source = prior.clone();
        }
        if let Some(steps) = &self.steps {
            cfg.sampler.steps = steps.parse()?;
            cfg.sampler.timesteps = None;
        }
        if let Some(m) = &self.measurement {
            cfg.measurement = Some(m.clone());
        }
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Shannon,
    Bicubic,
}

#[derive(Args)]
struct HrliftArgs {
    /// Low-resolution kernel tensor with odd extents, `(h, w)` or `(1, h, w)`.
    #[arg(long, conflicts_with = "gaussian", required_unless_present = "gaussian")]
    kernel: Option<PathBuf>,
    /// Use a Gaussian kernel of this width instead of a file.
    #[arg(long)]
    gaussian: Option<f64>,
    #[arg(long)]
    factor: usize,
    #[arg(long, value_enum, default_value = "shannon")]
    method: Method,
    /// Low-resolution image size `HxW`. Sets the Shannon kernel extent and
    /// the size of the `--check` image.
    #[arg(long, default_value = "32x32")]
    grid: String,
    /// Where to write the lifted kernel tensor.
    #[arg(long)]
    out: PathBuf,
    /// Report the equivalence error on a random image.
    #[arg(long)]
    check: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suites to run; all when omitted.
    suites: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// List the suites and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct EchoArgs {
    #[arg(long, default_value = "127.0.0.1:7070", conflicts_with = "stdio")]
    listen: String,
    /// Serve a single connection on stdin/stdout.
    #[arg(long)]
    stdio: bool,
    /// Latent shape, comma separated.
    #[arg(long, default_value = "1,8,8", value_delimiter = ',')]
    shape: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    cond_dim: usize,
    #[arg(long, default_value = "999,749,499,249", value_delimiter = ',')]
    timesteps: Vec<u32>,
}

fn report(record: &RunRecord) {
    let m = &record.metrics;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2} dB"));
    if m.moments.is_empty() {
        println!(
            "psnr degraded {}, restored {}, residual {}",
            fmt(m.psnr_degraded),
            fmt(m.psnr_restored),
            m.residual.map_or("-".into(), |r| format!("{r:.4}"))
        );
    }
    for r in &m.moments {
        println!(
            "{}: {} chains, mean error {:.2}%, variance error {:.2}%",
            r.operator,
            r.chains,
            100.0 * r.mean_rel_err,
            100.0 * r.var_rel_err
        );
    }
    if let Some(p) = &record.prompt {
        println!("calibrated conditioning vector after {} iterations", p.history.len().saturating_sub(1));
    }
    if let Some(dir) = &record.config.output_dir {
        println!("wrote {}", dir.display());
    }
}

fn solve(args: &RunArgs, calibrate: bool) -> Result<()> {
    let mut cfg = args.load()?;
    if let Some(seed) = args.seed {
        cfg.seeds.sampler = seed;
    }
    if calibrate {
        let mut sapg = cfg.sapg.take().unwrap_or_default();
        if let Some(steps) = &args.steps {
            sapg.inner.steps = steps.parse()?;
            sapg.inner.timesteps = None;
        }
        cfg.sapg = Some(sapg);
        cfg.chains = 1;
    } else {
        cfg.sapg = None;
    }
    let record = Runner::default().run(&cfg)?;
    report(&record);
    Ok(())
}

fn degrade(args: &RunArgs) -> Result<()> {
    let mut cfg = args.load()?;
    if let Some(seed) = args.seed {
        cfg.seeds.measurement = seed;
    }
    let dir = cfg
        .output_dir
        .clone()
        .context("degrade needs --out or output_dir in the config")?;
    let inputs = prepare_inputs(&cfg)?;
    std::fs::create_dir_all(&dir)?;
    let y = &inputs.measurement;
    save_tensor(dir.join("measurement.lten"), y)?;
    if y.image_dims().is_ok() {
        save_image(dir.join("measurement.png"), &y.clamp(0.0, 1.0))?;
    }
    if let Some(x) = &inputs.ground_truth {
        save_tensor(dir.join("truth.lten"), x)?;
        save_image(dir.join("truth.png"), &x.clamp(0.0, 1.0))?;
    }
    println!("measurement {:?} written to {}", y.shape(), dir.display());
    Ok(())
}

fn parse_grid(text: &str) -> Result<(usize, usize)> {
    let (h, w) = text
        .split_once(['x', 'X'])
        .with_context(|| format!("grid must look like 32x32, got {text:?}"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

fn read_kernel(path: &Path) -> Result<ConvKernel> {
    let t = load_tensor(path).with_context(|| format!("reading {}", path.display()))?;
    let t = match t.shape() {
        &[1, h, w] => t.reshape(&[h, w])?,
        _ => t,
    };
    Ok(ConvKernel::new(t)?)
}

fn hrlift(args: &HrliftArgs) -> Result<()> {
    let h = match (&args.kernel, args.gaussian) {
        (Some(path), _) => read_kernel(path)?,
        (None, Some(sigma)) => make_gaussian_kernel(2 * (3.0 * sigma).ceil() as usize + 1, sigma)?,
        (None, None) => bail!("need --kernel or --gaussian"),
    };
    let grid = parse_grid(&args.grid)?;
    let (method, kind) = match args.method {
        Method::Shannon => (LiftMethod::ShannonZeroPad { grid }, SubsampleKind::Shannon),
        Method::Bicubic => (LiftMethod::BicubicUpsample, SubsampleKind::Bicubic),
    };
    let big = lift_kernel(&h, args.factor, method)?;
    save_tensor(&args.out, big.taps())?;
    let (kh, kw) = big.extents();
    println!(
        "lifted kernel {kh}x{kw}, origin {:?}, sum {:.6}, written to {}",
        big.origin(),
        big.sum(),
        args.out.display()
    );
    if args.check {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let x = Tensor::rand_unit(&[1, grid.0 * args.factor, grid.1 * args.factor], &mut rng);
        let sub = SubsampleOp::new(args.factor, kind)?;
        let err = verify_equivalence(&x, &h, &big, &sub)?;
        println!("relative equivalence error {err:.3e}");
    }
    Ok(())
}

fn verify(args: &VerifyArgs) -> Result<bool> {
    let registry = SuiteRegistry::default();
    if args.list {
        for s in registry.suites() {
            println!("{:<14} {}", s.name(), s.description());
        }
        return Ok(true);
    }
    let mut all = true;
    for report in registry.run(&args.suites, args.seed)? {
        println!("[{}] {:.1}s", report.suite, report.seconds);
        for check in &report.checks {
            println!("  {check}");
        }
        all &= report.passed();
    }
    println!("{}", if all { "all checks passed" } else { "some checks failed" });
    Ok(all)
}

fn serve_echo(args: &EchoArgs) -> Result<()> {
    let info = HelloInfo {
        latent_shape: args.shape.clone(),
        cond_dim: args.cond_dim,
        timesteps: args.timesteps.clone(),
    };
    if args.stdio {
        let mut service = EchoService::new(info);
        serve_connection(&mut io::stdin().lock(), &mut io::stdout().lock(), &mut service)?;
        return Ok(());
    }
    let listener = TcpListener::bind(&args.listen).with_context(|| format!("binding {}", args.listen))?;
    info!("echo prior listening on {}", listener.local_addr()?);
    serve_tcp(listener, move || EchoService::new(info.clone()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Solve(a) => solve(&a, false)?,
        Command::SolvePro(a) => solve(&a, true)?,
        Command::Degrade(a) => degrade(&a)?,
        Command::Hrlift(a) => hrlift(&a)?,
        Command::Verify(a) => return verify(&a),
        Command::ServeEcho(a) => serve_echo(&a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use pnp_core::harness::config::ImageSource;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("32x16").unwrap(), (32, 16));
        assert!(parse_grid("32").is_err());
    }

    #[test]
    fn flags_override_the_config() {
        let cli = Cli::try_parse_from([
            "pnp", "solve", "--steps", "8", "--task", "sr8", "--prior", "remote:h:1", "--out", "o",
        ])
        .unwrap();
        let Command::Solve(a) = cli.command else { panic!() };
        let cfg = a.load().unwrap();
        assert_eq!(cfg.sampler.steps, 8);
        assert_eq!(cfg.task, Task::Sr8);
        assert_eq!(cfg.prior.source, "remote:h:1");
        assert_eq!(cfg.output_dir, Some(PathBuf::from("o")));
        assert!(matches!(cfg.image, Some(ImageSource::Demo { .. })));
        assert!(Cli::try_parse_from(["pnp", "solve", "--steps", "5"]).is_err());
    }
}
