use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gpis::harness::{build_disc_mesh, run_study, simulate_dataset, SimConfig, Snr, StudyOptions};
use gpis::hyperparam::{estimate_hyper, HyperEstimate, HyperOptions};
use gpis::inference::{diagnose, posterior_predictive_gof, GofOptions, Variant};
use gpis::io;
use gpis::kernels::CorrelationModel;
use gpis::model::{Design, RegressionDataset};
use gpis::samplers::{fit_conditional, fit_marginal, fit_working, HmcConfig, MarginalPlan, SpatialPrior};
use gpis::sphere::{NeighborIndex, SphericalMesh, DEFAULT_RADIUS_MM};
use gpis::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "gpis", version, about = "Spatial image-on-scalar regression on spherical meshes")]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// key = value file supplying defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one disc dataset with thresholded-GP truth.
    Simulate(SimulateArgs),
    /// Estimate kernel and variance hyperparameters.
    EstimateHyper(HyperArgs),
    /// Fit the spatial model by HMC.
    Fit(FitArgs),
    /// Per-vertex summaries, bands and activation labels from saved draws.
    Infer(InferArgs),
    /// Posterior predictive goodness of fit by region.
    Gof(GofArgs),
    /// Split R-hat for every coefficient and vertex.
    Diagnose(DiagnoseArgs),
    /// Simulation study over SNR and sample-size settings.
    Study(StudyArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Output directory for mesh.csv, covariates.csv, outcomes.bin and truth.csv.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    vertices: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// low (4%) or high (40%).
    #[arg(long)]
    snr: Option<String>,
    #[arg(long)]
    spacing_mm: Option<f64>,
    #[arg(long)]
    sphere_radius_mm: Option<f64>,
    /// Write outcomes as CSV instead of binary.
    #[arg(long)]
    csv: bool,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// Binary or CSV outcome matrix, one image per row.
    #[arg(long)]
    outcomes: PathBuf,
    #[arg(long)]
    sphere_radius_mm: Option<f64>,
}

#[derive(Args, Debug)]
struct HyperArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Neighborhood radius of the surrogate likelihood (mm).
    #[arg(long)]
    nbr_radius_mm: Option<f64>,
    /// Hold the kernel at this FWHM (requires --kernel-nu).
    #[arg(long)]
    kernel_fwhm_mm: Option<f64>,
    #[arg(long)]
    kernel_nu: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct HmcArgs {
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    leapfrog: Option<usize>,
    #[arg(long)]
    target_accept: Option<f64>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// CSV with an id column followed by covariates; an intercept is prepended.
    #[arg(long)]
    covariates: PathBuf,
    #[arg(long)]
    no_intercept: bool,
    /// working, marginal or conditional.
    #[arg(long)]
    variant: Option<String>,
    /// Output of estimate-hyper; required for the marginal variant.
    #[arg(long)]
    hyper: Option<PathBuf>,
    #[arg(long)]
    kernel_fwhm_mm: Option<f64>,
    #[arg(long)]
    kernel_nu: Option<f64>,
    #[command(flatten)]
    hmc: HmcArgs,
    /// Prior neighborhood radius (mm).
    #[arg(long)]
    nbr_radius_mm: Option<f64>,
    /// Mass-matrix neighborhood radius (mm).
    #[arg(long)]
    mass_radius_mm: Option<f64>,
    /// Draws file.
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-vertex summary CSV here.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    draws: PathBuf,
    /// Covariate file used for the fit, for coefficient names.
    #[arg(long)]
    covariates: Option<PathBuf>,
    #[arg(long)]
    band_level: Option<f64>,
    /// Activation threshold on |β|.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GofArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    covariates: PathBuf,
    #[arg(long)]
    no_intercept: bool,
    #[arg(long)]
    draws: PathBuf,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    draws: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StudyArgs {
    /// Comma-separated SNR settings.
    #[arg(long, default_value = "low,high")]
    snr: String,
    /// Comma-separated sample sizes.
    #[arg(long, default_value = "100,500")]
    n: String,
    /// Comma-separated methods (default: all).
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    vertices: Option<usize>,
    #[command(flatten)]
    hmc: HmcArgs,
    /// Run replicates in parallel.
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Flag values fall back to the config file, then to built-in defaults.
struct Settings {
    config: BTreeMap<String, String>,
    seed: Option<u64>,
}

impl Settings {
    fn get<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.config.get(key) {
            Some(raw) => {
                raw.trim().parse().map_err(|_| Error::argument(format!("config key {key}: cannot parse '{raw}'")))
            }
            None => Ok(default),
        }
    }

    fn seed(&self) -> Result<u64> {
        self.get(self.seed, "seed", 1)
    }

    fn radius(&self, flag: Option<f64>) -> Result<f64> {
        self.get(flag, "sphere_radius_mm", DEFAULT_RADIUS_MM)
    }

    fn hmc(&self, a: &HmcArgs) -> Result<HmcConfig> {
        let d = HmcConfig::default();
        let cfg = HmcConfig {
            chains: self.get(a.chains, "chains", d.chains)?,
            warmup: self.get(a.warmup, "warmup", d.warmup)?,
            samples: self.get(a.samples, "samples", d.samples)?,
            thin: self.get(a.thin, "thin", d.thin)?,
            leapfrog_steps: self.get(a.leapfrog, "leapfrog", d.leapfrog_steps)?,
            target_accept: self.get(a.target_accept, "target_accept", d.target_accept)?,
            seed: self.seed()?,
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn kernel(&self, fwhm: Option<f64>, nu: Option<f64>) -> Result<Option<CorrelationModel>> {
        match (fwhm, nu) {
            (Some(f), Some(n)) => Ok(Some(CorrelationModel::from_fwhm(f, n)?)),
            (None, None) => CorrelationModel::from_config(&self.config),
            _ => Err(Error::argument("--kernel-fwhm-mm and --kernel-nu go together")),
        }
    }
}

fn load_mesh(s: &Settings, d: &DataArgs) -> Result<Arc<SphericalMesh>> {
    Ok(Arc::new(io::read_mesh_csv(&d.mesh, s.radius(d.sphere_radius_mm)?)?))
}

fn load_dataset(
    d: &DataArgs,
    covariates: &Path,
    intercept: bool,
    m: usize,
) -> Result<(RegressionDataset, Vec<String>)> {
    let raw = io::read_covariates_csv(covariates)?;
    let cov = if intercept { raw.with_intercept() } else { raw };
    let outcomes: Arc<dyn gpis::model::OutcomeSource> = Arc::from(io::open_outcomes(&d.outcomes)?);
    if outcomes.n_vertices() != m {
        return Err(Error::data(format!("outcomes have {} vertices, mesh has {m}", outcomes.n_vertices())));
    }
    if outcomes.n_images() != cov.n() {
        return Err(Error::data(format!("{} covariate rows but {} images", cov.n(), outcomes.n_images())));
    }
    let design = Design::factorize(&cov.values, cov.n(), cov.p())?;
    Ok((RegressionDataset::new(design, outcomes)?, cov.names))
}

fn simulate(s: &Settings, a: &SimulateArgs) -> Result<()> {
    let d = SimConfig::default();
    let snr = match &a.snr {
        Some(v) => Snr::from_name(v)?,
        None => Snr::from_name(s.config.get("snr").map(String::as_str).unwrap_or("low"))?,
    };
    let cfg = SimConfig {
        vertices: s.get(a.vertices, "vertices", d.vertices)?,
        n: s.get(a.n, "n", d.n)?,
        spacing_mm: s.get(a.spacing_mm, "spacing_mm", d.spacing_mm)?,
        radius_mm: s.radius(a.sphere_radius_mm)?,
        snr,
        seed: s.seed()?,
        ..d
    };
    cfg.validate()?;
    std::fs::create_dir_all(&a.out_dir)?;
    let mesh = build_disc_mesh(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data = simulate_dataset(&cfg, &mesh, &mut rng)?;
    io::write_mesh_csv(a.out_dir.join("mesh.csv"), &mesh)?;
    let p = data.p;
    let cov = io::Covariates {
        ids: (0..data.n).map(|i| format!("s{i}")).collect(),
        names: (1..p).map(|j| format!("x{j}")).collect(),
        values: data.x.chunks(p).flat_map(|r| r[1..].to_vec()).collect(),
    };
    io::write_covariates_csv(a.out_dir.join("covariates.csv"), &cov)?;
    if a.csv {
        io::write_outcomes_csv(a.out_dir.join("outcomes.csv"), &data.y, data.n, data.m)?;
    } else {
        io::write_outcomes_bin(a.out_dir.join("outcomes.bin"), &data.y, data.n, data.m)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(a.out_dir.join("truth.csv"))?);
    writeln!(w, "coefficient,vertex,beta")?;
    for j in 0..p {
        for v in 0..data.m {
            writeln!(w, "{j},{v},{}", data.beta[j * data.m + v])?;
        }
    }
    w.flush()?;
    log::info!("simulated N={} M={} P={} ({} SNR) into {}", data.n, data.m, p, snr.name(), a.out_dir.display());
    Ok(())
}

fn estimate(s: &Settings, a: &HyperArgs) -> Result<()> {
    let mesh = load_mesh(s, &a.data)?;
    let y = io::collect_outcomes(io::open_outcomes(&a.data.outcomes)?.as_ref())?;
    if y.data().len() % mesh.len() != 0 || y.data().len() / mesh.len() == 0 {
        return Err(Error::data("outcomes do not match the mesh"));
    }
    let index = NeighborIndex::build(&mesh, s.get(a.nbr_radius_mm, "nbr_radius_mm", 8.0)?)?;
    let opts = HyperOptions { fixed_kernel: s.kernel(a.kernel_fwhm_mm, a.kernel_nu)?, ..HyperOptions::default() };
    let est = estimate_hyper(y.data(), &mesh, &index, &opts)?;
    if !est.converged {
        log::warn!("hyperparameter search stopped after {} evaluations without converging", est.evaluations);
    }
    let k = est.kernel()?;
    println!(
        "fwhm {:.3} mm, nu {:.3}, tau2 {:.4}, sigma2_0 {:.4} ({} evaluations)",
        k.fwhm(),
        k.nu(),
        est.params.tau2,
        est.params.sigma2_0,
        est.evaluations
    );
    io::write_key_values(&a.out, &est.to_map())
}

fn fit(s: &Settings, a: &FitArgs) -> Result<()> {
    let variant_name = match &a.variant {
        Some(v) => v.clone(),
        None => s.config.get("variant").cloned().unwrap_or_else(|| "working".into()),
    };
    let variant = Variant::from_name(&variant_name)?;
    let mesh = load_mesh(s, &a.data)?;
    let (dataset, names) = load_dataset(&a.data, &a.covariates, !a.no_intercept, mesh.len())?;
    let hyper =
        a.hyper.as_ref().map(|p| io::read_key_values(p).and_then(|m| HyperEstimate::from_map(&m))).transpose()?;
    let kernel = match (&hyper, s.kernel(a.kernel_fwhm_mm, a.kernel_nu)?) {
        (_, Some(k)) => k,
        (Some(h), None) => h.kernel()?,
        (None, None) => {
            return Err(Error::argument(
                "no kernel: pass --hyper, --kernel-fwhm-mm/--kernel-nu or kernel.* config keys",
            ))
        }
    };
    let prior = SpatialPrior::new(
        mesh,
        kernel,
        s.get(a.nbr_radius_mm, "nbr_radius_mm", gpis::samplers::DEFAULT_PRIOR_RADIUS_MM)?,
        s.get(a.mass_radius_mm, "mass_radius_mm", gpis::samplers::DEFAULT_MASS_RADIUS_MM)?,
    )?;
    let cfg = s.hmc(&a.hmc)?;
    let draws = match variant {
        Variant::Working => fit_working(&dataset, &prior, &cfg)?,
        Variant::Marginal => {
            let h = hyper.ok_or_else(|| Error::argument("the marginal variant needs --hyper from estimate-hyper"))?;
            fit_marginal(&dataset, &prior, &MarginalPlan { tau2: h.params.tau2 }, &cfg)?
        }
        Variant::Conditional => {
            let (draws, report) = fit_conditional(&dataset, &prior, &cfg)?;
            log::info!("conditional modes after {} rounds", report.rounds);
            draws
        }
        other => {
            return Err(Error::argument(format!(
                "fit supports working, marginal and conditional, not {}",
                other.name()
            )))
        }
    };
    for (c, ch) in draws.chains.iter().enumerate() {
        log::info!("chain {c}: step {:.4}, acceptance {:.3}", ch.step_size, ch.accept_rate);
    }
    io::write_draws(&a.out, &draws)?;
    if let Some(path) = &a.summary {
        io::write_summary_csv(path, &draws, &names, 0.8, 0.0)?;
    }
    println!(
        "{} draws of {} coefficients x {} vertices written to {}",
        draws.n_draws(),
        draws.p(),
        draws.m(),
        a.out.display()
    );
    Ok(())
}

fn coefficient_names(covariates: Option<&PathBuf>, p: usize) -> Result<Vec<String>> {
    let generic = || (0..p).map(|j| format!("b{j}")).collect::<Vec<_>>();
    let Some(path) = covariates else {
        return Ok(generic());
    };
    let cov = io::read_covariates_csv(path)?;
    if cov.p() + 1 == p {
        Ok(cov.with_intercept().names)
    } else if cov.p() == p {
        Ok(cov.names)
    } else {
        Err(Error::data(format!("covariate file has {} columns, draws have {p} coefficients", cov.p())))
    }
}

fn infer(s: &Settings, a: &InferArgs) -> Result<()> {
    let draws = io::read_draws(&a.draws)?;
    let names = coefficient_names(a.covariates.as_ref(), draws.p())?;
    let level = s.get(a.band_level, "band_level", 0.8)?;
    let threshold = s.get(a.threshold, "threshold", 0.0)?;
    io::write_summary_csv(&a.out, &draws, &names, level, threshold)
}

fn gof(s: &Settings, a: &GofArgs) -> Result<()> {
    let mesh = load_mesh(s, &a.data)?;
    let labels = mesh.regions().ok_or_else(|| Error::data("mesh has no region column"))?.to_vec();
    let (dataset, _) = load_dataset(&a.data, &a.covariates, !a.no_intercept, mesh.len())?;
    let draws = io::read_draws(&a.draws)?;
    let opts = GofOptions {
        replicates: s.get(a.replicates, "gof_replicates", GofOptions::default().replicates)?,
        seed: s.seed()?,
    };
    let report = posterior_predictive_gof(&draws, &dataset, &labels, opts)?;
    io::write_gof_csv(&a.out, &report)
}

fn diagnostics(a: &DiagnoseArgs) -> Result<()> {
    let draws = io::read_draws(&a.draws)?;
    let report = diagnose(&draws)?;
    let w = &report.worst;
    println!(
        "max R-hat {:.4} at coefficient {} vertex {}; {:.2}% of scalars below 1.01",
        report.max_rhat,
        w.coefficient,
        w.vertex,
        100.0 * report.frac_below_101
    );
    if let Some(path) = &a.out {
        io::write_diagnostics_csv(path, &report)?;
    }
    Ok(())
}

fn parse_list<T>(raw: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    raw.split(',').map(str::trim).filter(|t| !t.is_empty()).map(parse).collect()
}

fn study(s: &Settings, a: &StudyArgs) -> Result<()> {
    let snrs = parse_list(&a.snr, Snr::from_name)?;
    let ns = parse_list(&a.n, |t| t.parse::<usize>().map_err(|_| Error::argument(format!("bad sample size '{t}'"))))?;
    let settings: Vec<(Snr, usize)> = snrs.iter().flat_map(|&snr| ns.iter().map(move |&n| (snr, n))).collect();
    let d = SimConfig::default();
    let base = SimConfig {
        vertices: s.get(a.vertices, "vertices", d.vertices)?,
        replicates: s.get(a.replicates, "replicates", d.replicates)?,
        seed: s.seed()?,
        ..d
    };
    let mut opts = StudyOptions { hmc: s.hmc(&a.hmc)?, parallel_replicates: a.parallel, ..StudyOptions::default() };
    if let Some(m) = &a.methods {
        opts.methods = parse_list(m, Variant::from_name)?;
    }
    let results = run_study(&base, &settings, &opts)?;
    results.save_csv(&a.out)?;
    for c in &results.cells {
        if c.failures() > 0 {
            log::warn!("{} at {} SNR, N={}: {} failed replicates", c.method.name(), c.snr.name(), c.n, c.failures());
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => io::read_key_values(p)?,
        None => BTreeMap::new(),
    };
    let s = Settings { config, seed: cli.seed };
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::argument(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Simulate(a) => simulate(&s, a),
        Command::EstimateHyper(a) => estimate(&s, a),
        Command::Fit(a) => fit(&s, a),
        Command::Infer(a) => infer(&s, a),
        Command::Gof(a) => gof(&s, a),
        Command::Diagnose(a) => diagnostics(a),
        Command::Study(a) => study(&s, a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
