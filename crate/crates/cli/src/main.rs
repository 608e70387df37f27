use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use momentflow::activation::{pair_covariance, ActivationKind, CorrelatedPair, SeriesConfig, UnivariateGaussian};
use momentflow::analysis::{error_grid, ErrorGridSpec};
use momentflow::network::{
    load_moments, load_network, save_moments, save_network, save_trace, synthesize, validate, NetworkSpec, SynthConfig,
};
use momentflow::oracle::{mc_propagate, McConfig, Quadrature, QuadratureConfig, QuadratureScheme};
use momentflow::propagation::{propagate, tightness, trial_input};
use momentflow::random::{derive_seed, CovFactory};
use momentflow::{Error, ErrorClass, PsdPolicy};
use serde_json::{json, Value};

const CLI_SCHEMA: &str = "momentflow-cli/1";
const THREADS_ENV: &str = "MOMENTFLOW_THREADS";

#[derive(Parser)]
#[command(
    name = "momentflow",
    version,
    about = "Gaussian moment propagation through neural networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Series covariance of two activation outputs, optionally against quadrature.
    Cov(CovArgs),
    /// Series truncation error over a grid of input means.
    ErrorGrid(ErrorGridArgs),
    /// Propagate an input-moments file through a network file.
    Propagate(PropagateArgs),
    /// Monte Carlo tightness ratios on random inputs.
    Tightness(TightnessArgs),
    /// Write a Kaiming-initialized synthetic network.
    GenNet(GenNetArgs),
    /// Write random input moments (standard normal mean, random covariance).
    GenInput(GenInputArgs),
}

#[derive(Args)]
struct Common {
    /// Print a machine-readable JSON record.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Args)]
struct CovArgs {
    #[arg(long, default_value = "relu")]
    kind: ActivationKind,
    /// Activation of the second unit; defaults to --kind.
    #[arg(long)]
    kind_b: Option<ActivationKind>,
    #[arg(long, num_args = 2, value_names = ["MU_I", "MU_J"], allow_negative_numbers = true, default_values_t = [0.0, 0.0])]
    mu: Vec<f64>,
    #[arg(long, num_args = 2, value_names = ["SIGMA_I", "SIGMA_J"], default_values_t = [1.0, 1.0])]
    sigma: Vec<f64>,
    #[arg(long, allow_negative_numbers = true)]
    rho: f64,
    #[arg(long, default_value_t = 4)]
    order: usize,
    /// Also evaluate the quadrature oracle and report the absolute error.
    #[arg(long)]
    oracle: bool,
    #[arg(long, default_value_t = 60)]
    nodes: usize,
    #[arg(long, value_enum, default_value_t = Scheme::Legendre)]
    scheme: Scheme,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    Legendre,
    Hermite,
}

impl From<Scheme> for QuadratureScheme {
    fn from(s: Scheme) -> Self {
        match s {
            Scheme::Legendre => QuadratureScheme::BreakpointLegendre,
            Scheme::Hermite => QuadratureScheme::GaussHermite,
        }
    }
}

#[derive(Args)]
struct ErrorGridArgs {
    #[arg(long, default_value = "relu")]
    kind: ActivationKind,
    /// Comma-separated ascending truncation orders.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4])]
    orders: Vec<usize>,
    #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
    mu_min: f64,
    #[arg(long, default_value_t = 5.0, allow_negative_numbers = true)]
    mu_max: f64,
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    #[arg(long, num_args = 2, value_names = ["SIGMA_I", "SIGMA_J"], default_values_t = [1.0, 1.0])]
    sigma: Vec<f64>,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    rho: f64,
    #[arg(long, default_value_t = 60)]
    nodes: usize,
    /// Write the per-order summary as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write one error matrix per order (`error_k<K>.csv`) into this directory.
    #[arg(long)]
    cells_dir: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PropagateArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 4)]
    order: usize,
    #[arg(long, default_value = "symmetrize")]
    psd: PsdPolicy,
    /// Write every intermediate snapshot to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Also run a Monte Carlo check with this many samples.
    #[arg(long)]
    mc: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Repair applied to the input covariance before sampling.
    #[arg(long, default_value = "clip")]
    mc_repair: PsdPolicy,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Fc4,
    Fc8,
    Cnn4,
    Cnn8,
}

#[derive(Args)]
struct TightnessArgs {
    #[arg(long, conflicts_with = "net", required_unless_present = "net")]
    preset: Option<Preset>,
    #[arg(long)]
    net: Option<PathBuf>,
    /// Defaults to 20, or 200 with --paper-scale.
    #[arg(long)]
    trials: Option<usize>,
    /// Defaults to 20000, or 75000 with --paper-scale.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    paper_scale: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = McConfig::DEFAULT_CHUNK)]
    chunk: usize,
    #[arg(long, default_value_t = 4)]
    order: usize,
    #[arg(long, default_value_t = 1.0)]
    max_variance: f64,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json_out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Fc,
    Cnn,
}

#[derive(Args)]
struct GenNetArgs {
    #[arg(long, value_enum)]
    family: FamilyArg,
    #[arg(long)]
    depth: usize,
    /// Hidden units (fc) or channels (cnn); defaults to 100 and 10.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, default_value = "relu")]
    activation: ActivationKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GenInputArgs {
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    max_variance: f64,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    common: Common,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Lib(e) => match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Format => 3,
                ErrorClass::Numerical => 4,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Lib(e) => e.to_string(),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn write_file(path: &PathBuf, contents: &str) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::Lib(Error::Io(e)))
}

fn emit(json: bool, command: &str, mut record: Value, human: impl FnOnce() -> String) {
    if json {
        let obj = record.as_object_mut().expect("records are objects");
        obj.insert("schema".into(), CLI_SCHEMA.into());
        obj.insert("command".into(), command.into());
        println!("{}", serde_json::to_string_pretty(&record).expect("record serializes"));
    } else {
        print!("{}", human());
    }
}

fn cmd_cov(a: CovArgs) -> Outcome {
    let kind_b = a.kind_b.unwrap_or(a.kind);
    let pair = CorrelatedPair::new(
        UnivariateGaussian::new(a.mu[0], a.sigma[0])?,
        UnivariateGaussian::new(a.mu[1], a.sigma[1])?,
        a.rho,
    )?;
    let cfg = SeriesConfig::with_order(a.order);
    let series = pair_covariance(&a.kind, &kind_b, &pair, &cfg)?;
    let oracle = if a.oracle {
        let quad = Quadrature::new(QuadratureConfig {
            nodes_per_axis: a.nodes,
            scheme: a.scheme.into(),
        })?;
        Some(quad.covariance(&a.kind, &kind_b, &pair)?)
    } else {
        None
    };
    let record = json!({
        "kind_a": a.kind.to_string(),
        "kind_b": kind_b.to_string(),
        "mu": [a.mu[0], a.mu[1]],
        "sigma": [a.sigma[0], a.sigma[1]],
        "rho": a.rho,
        "order": a.order,
        "series": series,
        "oracle": oracle,
        "abs_error": oracle.map(|o| (series - o).abs()),
    });
    emit(a.common.json, "cov", record, || {
        let mut s = format!("series   {series:.10}\n");
        if let Some(o) = oracle {
            s += &format!("oracle   {o:.10}\nabs err  {:.3e}\n", (series - o).abs());
        }
        s
    });
    Ok(())
}

fn cmd_error_grid(a: ErrorGridArgs) -> Outcome {
    let spec = ErrorGridSpec {
        kind: a.kind,
        mu_min: a.mu_min,
        mu_max: a.mu_max,
        step: a.step,
        sigma_i: a.sigma[0],
        sigma_j: a.sigma[1],
        rho: a.rho,
        orders: a.orders.clone(),
        quadrature: QuadratureConfig::with_nodes(a.nodes),
    };
    let report = error_grid(&spec, a.cells_dir.is_some())?;
    if let Some(path) = &a.csv {
        write_file(path, &report.summary_csv())?;
    }
    if let Some(dir) = &a.cells_dir {
        fs::create_dir_all(dir).map_err(|e| Failure::Lib(Error::Io(e)))?;
        for o in &report.orders {
            let csv = report.cells_csv(o.order).expect("cells were kept");
            write_file(&dir.join(format!("error_k{}.csv", o.order)), &csv)?;
        }
    }
    let record = json!({
        "grid_schema": report.schema,
        "kind": a.kind.to_string(),
        "grid_points": report.mus.len(),
        "orders": report.orders,
    });
    emit(a.common.json, "error-grid", record, || {
        let mut s = format!("{:>5}  {:>12}  {:>12}\n", "order", "max abs err", "mean abs err");
        for o in &report.orders {
            s += &format!(
                "{:>5}  {:>12.4e}  {:>12.4e}\n",
                o.order, o.max_abs_error, o.mean_abs_error
            );
        }
        s
    });
    Ok(())
}

fn cmd_propagate(a: PropagateArgs) -> Outcome {
    let net = load_network(&a.net)?;
    let input = load_moments(&a.input)?;
    let cfg = SeriesConfig {
        psd_policy: a.psd,
        ..SeriesConfig::with_order(a.order)
    };
    let (out, trace) = propagate(&net, &input, &cfg, a.trace.is_some())?;
    save_moments(&out, &a.output)?;
    if let (Some(path), Some(trace)) = (&a.trace, &trace) {
        save_trace(trace, path)?;
    }
    let mc = match a.mc {
        Some(samples) => {
            let mc_cfg = McConfig {
                repair: a.mc_repair,
                ..McConfig::new(samples, a.seed)
            };
            let est = mc_propagate(&net, &input, &mc_cfg)?;
            let q_mu: Vec<f64> = est.mean.iter().zip(out.mean().iter()).map(|(m, a)| m / a).collect();
            let q_var: Vec<f64> = est
                .variance
                .iter()
                .zip(out.variances().iter())
                .map(|(m, a)| m / a)
                .collect();
            Some(json!({
                "samples": samples,
                "seed": a.seed,
                "mean": est.mean.as_slice(),
                "variance": est.variance.as_slice(),
                "std_error": est.std_error.as_slice(),
                "q_mu": q_mu,
                "q_var": q_var,
            }))
        }
        None => None,
    };
    let record = json!({
        "network": net.meta.name,
        "input_dim": input.dim(),
        "output_dim": out.dim(),
        "order": a.order,
        "output": a.output,
        "trace": a.trace,
        "mean": out.mean().as_slice(),
        "variance": out.variances().as_slice(),
        "monte_carlo": mc,
    });
    emit(a.common.json, "propagate", record, || {
        let mut s = format!("wrote {} ({} outputs)\n", a.output.display(), out.dim());
        for (i, (m, v)) in out.mean().iter().zip(out.variances().iter()).take(10).enumerate() {
            s += &format!("  [{i}] mean {m:.6}  var {v:.6}\n");
        }
        s
    });
    Ok(())
}

fn preset_config(p: Preset, seed: u64) -> SynthConfig {
    match p {
        Preset::Fc4 => SynthConfig::fc(4, 100, seed),
        Preset::Fc8 => SynthConfig::fc(8, 100, seed),
        Preset::Cnn4 => SynthConfig::cnn(4, seed),
        Preset::Cnn8 => SynthConfig::cnn(8, seed),
    }
}

/// Trials and samples per trial, falling back to desk or paper-scale defaults.
fn budget(paper_scale: bool, trials: Option<usize>, samples: Option<usize>) -> (usize, usize) {
    let (t, s) = if paper_scale { (200, 75_000) } else { (20, 20_000) };
    (trials.unwrap_or(t), samples.unwrap_or(s))
}

fn cmd_tightness(a: TightnessArgs) -> Outcome {
    let (trials, samples) = budget(a.paper_scale, a.trials, a.samples);
    let net: NetworkSpec = match (&a.preset, &a.net) {
        (Some(p), _) => synthesize(&preset_config(*p, derive_seed(a.seed, 0)))?,
        (None, Some(path)) => load_network(path)?,
        (None, None) => return Err(Failure::Usage("either --preset or --net is required".into())),
    };
    let mc = McConfig {
        chunk: a.chunk,
        ..McConfig::new(samples, derive_seed(a.seed, 2))
    };
    let factory = CovFactory {
        seed: derive_seed(a.seed, 1),
        n: net.input_dim,
        max_variance: a.max_variance,
    };
    let report = tightness(&net, trials, &mc, &SeriesConfig::with_order(a.order), &factory)?;
    if let Some(path) = &a.csv {
        write_file(path, &report.to_csv())?;
    }
    if let Some(path) = &a.json_out {
        write_file(path, &report.to_json())?;
    }
    let record = serde_json::to_value(&report).expect("report serializes");
    emit(a.common.json, "tightness", record, || {
        let mut s = format!(
            "{}: {} trials × {} samples\n{:>6}  {:>17}  {:>17}  {:>8}\n",
            report.meta.network, trials, samples, "output", "Q_mu", "Q_var", "excluded"
        );
        for r in &report.rows {
            s += &format!(
                "{:>6}  {:>8.4} ± {:<6.4}  {:>8.4} ± {:<6.4}  {:>8}\n",
                r.output_index, r.q_mu_mean, r.q_mu_std, r.q_var_mean, r.q_var_std, r.excluded_trials
            );
        }
        s
    });
    Ok(())
}

fn cmd_gen_net(a: GenNetArgs) -> Outcome {
    let mut cfg = match a.family {
        FamilyArg::Fc => SynthConfig::fc(a.depth, a.width.unwrap_or(100), a.seed),
        FamilyArg::Cnn => SynthConfig::cnn(a.depth, a.seed),
    };
    if let (FamilyArg::Cnn, Some(w)) = (a.family, a.width) {
        cfg.width = w;
    }
    cfg.activation = a.activation;
    let net = synthesize(&cfg)?;
    save_network(&net, &a.output)?;
    let dims = net.dims()?;
    let layers: Vec<String> = net.layers.iter().map(|l| l.type_name().to_string()).collect();
    let diagnostics: Vec<String> = validate(&net).iter().map(ToString::to_string).collect();
    let record = json!({
        "output": a.output,
        "name": net.meta.name,
        "layers": layers,
        "dims": dims,
        "diagnostics": diagnostics,
    });
    emit(a.common.json, "gen-net", record, || {
        let mut s = format!("wrote {} ({})\n", a.output.display(), net.meta.name);
        for (i, l) in net.layers.iter().enumerate() {
            s += &format!("  {i:>2} {:<10} {:>6} -> {}\n", l.type_name(), dims[i], dims[i + 1]);
        }
        s
    });
    Ok(())
}

fn cmd_gen_input(a: GenInputArgs) -> Outcome {
    if a.dim == 0 || a.max_variance.is_nan() || a.max_variance <= 0.0 {
        return Err(Failure::Usage("--dim and --max-variance must be positive".into()));
    }
    let input = trial_input(
        &CovFactory {
            seed: a.seed,
            n: a.dim,
            max_variance: a.max_variance,
        },
        0,
    );
    save_moments(&input, &a.output)?;
    let record = json!({ "output": a.output, "dim": a.dim, "seed": a.seed });
    emit(a.common.json, "gen-input", record, || {
        format!("wrote {} (dim {})\n", a.output.display(), a.dim)
    });
    Ok(())
}

fn configure_threads() -> Outcome {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn run(cli: Cli) -> Outcome {
    configure_threads()?;
    match cli.command {
        Command::Cov(a) => cmd_cov(a),
        Command::ErrorGrid(a) => cmd_error_grid(a),
        Command::Propagate(a) => cmd_propagate(a),
        Command::Tightness(a) => cmd_tightness(a),
        Command::GenNet(a) => cmd_gen_net(a),
        Command::GenInput(a) => cmd_gen_input(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
