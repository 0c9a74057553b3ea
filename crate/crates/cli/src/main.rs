use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

mod table;

use table::{read_table, write_table, Table};
use trajlab::guidance::MaskProvider;
use trajlab::report::{csv_row, format_number, svg_scatter, PlotSpec, Series, CSV_HEADER};
use trajlab::{
    load_grid, load_scenario, pareto_indices, preset_grid, proxy_scores, run_sampling, run_sweep, Condition,
    Conditioning, Error, ModelVariant, ParetoPoint, RunConfig, Scenario, ScheduleParams, Strategy, StrategyConfig,
    StrategyKind, StrategyParams, SweepRecord,
};

/// Exit status 2: the invocation or its inputs are wrong.
/// Exit status 1: something failed while running.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_config() {
            CliError::usage(e.to_string())
        } else {
            CliError::runtime(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "trajlab", version, about = "Trajectory-combination sampling for personalized diffusion, on analytic toy models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one sampling configuration and write the final latents.
    Sample(SampleArgs),
    /// Run a hyperparameter grid and write one CSV row per point.
    Sweep(SweepArgs),
    /// Keep the non-dominated rows of a sweep CSV.
    Pareto(ParetoArgs),
    /// Render a sweep CSV as an SVG scatter plot.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SampleArgs {
    /// Scenario file, or the name of a built-in scenario.
    #[arg(long, default_value = "canonical-2d")]
    scenario: String,
    #[arg(long)]
    strategy: String,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 1024)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV of final latents.
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV of every intermediate latent.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    #[command(flatten)]
    strategy_flags: StrategyFlags,
}

#[derive(Args)]
struct StrategyFlags {
    /// Guidance scale of single-scale strategies.
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    omega_c: Option<f64>,
    #[arg(long)]
    omega_s: Option<f64>,
    /// Warm-up concept scale for masked sampling.
    #[arg(long)]
    omega_c0: Option<f64>,
    /// Warm-up superclass scale for masked sampling.
    #[arg(long)]
    omega_s0: Option<f64>,
    #[arg(long)]
    t_sw: Option<usize>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    r: Option<f64>,
    /// Mask provider: divergence or fixed_region.
    #[arg(long)]
    provider: Option<String>,
    /// Use the single-scale masked rule.
    #[arg(long)]
    basic: bool,
    #[arg(long)]
    superclass_variant: Option<String>,
    #[arg(long)]
    superclass_condition: Option<String>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["grid", "preset"])))]
struct SweepArgs {
    /// Grid document.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// One of the built-in grids.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the grid's scenario.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the grid's sample count.
    #[arg(long)]
    n: Option<usize>,
    /// Overrides the grid's step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides the grid's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ParetoArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "context_mean")]
    x: String,
    #[arg(long, default_value = "fidelity_mean")]
    y: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Front CSV to draw as a line.
    #[arg(long)]
    front: Option<PathBuf>,
    #[arg(long, default_value = "context_mean")]
    x: String,
    #[arg(long, default_value = "fidelity_mean")]
    y: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match configure_threads().and_then(|_| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("trajlab: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var("TRAJLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::usage(format!("TRAJLAB_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::runtime(format!("cannot start {n} worker threads: {e}")))
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Sample(a) => cmd_sample(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Pareto(a) => cmd_pareto(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

/// A path that exists is loaded; otherwise the name must be a built-in.
fn resolve_scenario(spec: &str) -> CliResult<Scenario> {
    if Path::new(spec).exists() {
        return Ok(load_scenario(spec)?);
    }
    Scenario::builtin(spec).ok_or_else(|| {
        CliError::usage(format!(
            "no scenario file `{spec}` and no built-in of that name (built-ins: {})",
            Scenario::BUILTIN_NAMES.join(", ")
        ))
    })
}

fn strategy_from_flags(kind: StrategyKind, f: &StrategyFlags) -> CliResult<StrategyConfig> {
    let params = StrategyParams {
        omega: f.omega,
        omega_c: f.omega_c,
        omega_s: f.omega_s,
        omega_c0: f.omega_c0,
        omega_s0: f.omega_s0,
        t_sw: f.t_sw,
        q: f.q,
        r: f.r,
        provider: f.provider.as_deref().map(str::parse::<MaskProvider>).transpose()?,
        basic: f.basic.then_some(true),
    };
    let strategy = Strategy::from_params(kind, &params)?;
    let mut source = Conditioning::SUPERCLASS;
    if let Some(v) = &f.superclass_variant {
        source.variant = v.parse::<ModelVariant>()?;
    }
    if let Some(c) = &f.superclass_condition {
        source.condition = c.parse::<Condition>()?;
    }
    Ok(StrategyConfig::new(strategy).with_superclass_source(source))
}

fn cmd_sample(a: SampleArgs) -> CliResult {
    let kind: StrategyKind = a.strategy.parse()?;
    let strategy = strategy_from_flags(kind, &a.strategy_flags)?;
    let scenario = resolve_scenario(&a.scenario)?;
    let cfg = RunConfig {
        schedule: ScheduleParams::with_steps(a.steps),
        strategy,
        n_samples: a.n,
        seed: a.seed,
        record_trajectory: a.trajectory.is_some(),
    };
    let result = run_sampling(&scenario, &cfg)?;
    let metrics = proxy_scores(&result.finals, &scenario)?;

    let dim = scenario.latent_len();
    let mut header = vec!["sample".to_string()];
    header.extend((0..dim).map(|d| format!("z{d}")));
    let rows = result
        .finals
        .iter()
        .enumerate()
        .map(|(j, z)| std::iter::once(j.to_string()).chain(z.iter().map(|v| format_number(*v))).collect())
        .collect();
    write_table(&a.out, &Table { header, rows })?;

    if let (Some(path), Some(paths)) = (&a.trajectory, &result.trajectories) {
        let mut header = vec!["sample".to_string(), "index".to_string()];
        header.extend((0..dim).map(|d| format!("z{d}")));
        let mut rows = Vec::new();
        for (j, path) in paths.iter().enumerate() {
            for (k, z) in path.iter().enumerate() {
                let index = a.steps - k;
                rows.push(
                    [j.to_string(), index.to_string()]
                        .into_iter()
                        .chain(z.iter().map(|v| format_number(*v)))
                        .collect(),
                );
            }
        }
        write_table(path, &Table { header, rows })?;
    }

    let record = SweepRecord {
        index: 0,
        config: strategy,
        steps: a.steps,
        n_samples: a.n,
        seed: a.seed,
        metrics,
        calls_per_sample: result.calls_per_sample(),
        wall_ms: result.wall_ms,
    };
    println!("{}", CSV_HEADER.join(","));
    println!("{}", csv_row(&record).join(","));
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CliResult {
    let mut grid = match (&a.grid, &a.preset) {
        (Some(path), None) => {
            if !path.exists() {
                return Err(CliError::usage(format!("grid file `{}` does not exist", path.display())));
            }
            load_grid(path).map_err(|e| match e {
                Error::Parse { .. } | Error::Validation(_) => {
                    CliError::usage(format!("{}: {e}", path.display()))
                }
                other => other.into(),
            })?
        }
        (None, Some(name)) => preset_grid(name)?,
        _ => return Err(CliError::usage("give exactly one of --grid or --preset")),
    };
    if let Some(n) = a.n {
        grid.n_samples = n;
    }
    if let Some(steps) = a.steps {
        grid.steps = steps;
    }
    if let Some(seed) = a.seed {
        grid.seed = seed;
    }
    let scenario_name = a
        .scenario
        .clone()
        .or_else(|| grid.scenario.clone())
        .unwrap_or_else(|| "canonical-2d".into());
    let scenario = resolve_scenario(&scenario_name)?;
    let records = run_sweep(&scenario, &grid)?;
    let table = Table {
        header: CSV_HEADER.iter().map(|s| s.to_string()).collect(),
        rows: records.iter().map(csv_row).collect(),
    };
    write_table(&a.out, &table)?;
    eprintln!(
        "trajlab: {} {} points on {} written to {}",
        records.len(),
        grid.strategy,
        scenario.name,
        a.out.display()
    );
    Ok(())
}

fn cmd_pareto(a: ParetoArgs) -> CliResult {
    let table = read_table(&a.input)?;
    if table.rows.is_empty() {
        return Err(CliError::usage(format!("`{}` has no data rows", a.input.display())));
    }
    let xs = table.numeric_column(&a.x)?;
    let ys = table.numeric_column(&a.y)?;
    let points: Vec<ParetoPoint> = xs.iter().zip(&ys).map(|(&x, &y)| ParetoPoint::new(x, y)).collect();
    let keep = pareto_indices(&points);
    let front = Table {
        header: table.header.clone(),
        rows: keep.iter().map(|&k| table.rows[k].clone()).collect(),
    };
    write_table(&a.out, &front)?;
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> CliResult {
    let table = read_table(&a.input)?;
    if table.rows.is_empty() {
        return Err(CliError::usage(format!("`{}` has no data rows", a.input.display())));
    }
    let xs = table.numeric_column(&a.x)?;
    let ys = table.numeric_column(&a.y)?;
    let labels: Vec<String> = match table.column("strategy") {
        Some(k) => table.rows.iter().map(|r| r[k].clone()).collect(),
        None => vec!["points".into(); table.rows.len()],
    };
    let mut series: Vec<Series> = Vec::new();
    for ((label, x), y) in labels.iter().zip(&xs).zip(&ys) {
        match series.iter_mut().find(|s| &s.name == label) {
            Some(s) => s.points.push((*x, *y)),
            None => series.push(Series { name: label.clone(), points: vec![(*x, *y)] }),
        }
    }
    let front = match &a.front {
        Some(path) => {
            let t = read_table(path)?;
            let mut pts: Vec<(f64, f64)> = t.numeric_column(&a.x)?.into_iter().zip(t.numeric_column(&a.y)?).collect();
            pts.sort_by(|p, q| p.0.total_cmp(&q.0));
            Some(pts)
        }
        None => None,
    };
    let title = format!("{} vs {}", a.y, a.x);
    let svg = svg_scatter(&PlotSpec {
        series: &series,
        front: front.as_deref(),
        x_label: &a.x,
        y_label: &a.y,
        title: &title,
    });
    std::fs::write(&a.out, svg)
        .map_err(|e| CliError::runtime(format!("cannot write `{}`: {e}", a.out.display())))
}
