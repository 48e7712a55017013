use std::fs;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use pmdesign::cli::{emit_plot_data, parse_config, run_grid, write_csv, Axis, ExperimentGrid, Preset};
use pmdesign::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    Fig1,
    Fig2,
    Exp,
}

/// Run a design-comparison simulation grid and write one CSV row per cell.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    /// Configuration file (key = value lines).
    config: Option<PathBuf>,
    /// Start from a named grid; keys in the config file still override it.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replicates per cell.
    #[arg(long)]
    reps: Option<usize>,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// CSV output path (stdout if absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for per-panel series files.
    #[arg(long)]
    panels: Option<PathBuf>,
    #[arg(long)]
    bootstrap_reps: Option<usize>,
    #[arg(long)]
    pb_restarts: Option<usize>,
    /// Record wall-clock time per cell (makes output run-dependent).
    #[arg(long)]
    timing: bool,
}

fn load(args: &Args) -> Result<ExperimentGrid, Error> {
    let preset = args.preset.map(|p| match p {
        PresetArg::Fig1 => Preset::Fig1,
        PresetArg::Fig2 => Preset::Fig2,
        PresetArg::Exp => Preset::Exp,
    });
    let mut text = match &args.config {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?,
        None => String::new(),
    };
    if let (Some(p), None) = (preset, &args.config) {
        // a bare preset still needs the seed check, so parse it as config
        text = format!("preset = {}\n", preset_name(p));
    } else if let Some(p) = preset {
        if !text.lines().any(|l| l.split('#').next().unwrap().trim_start().starts_with("preset")) {
            text = format!("preset = {}\n{text}", preset_name(p));
        }
    }
    if let Some(seed) = args.seed {
        text = override_key(&text, "seed", &seed.to_string());
    }
    if let Some(reps) = args.reps {
        text = override_key(&text, "reps", &reps.to_string());
    }
    if let Some(b) = args.bootstrap_reps {
        text = override_key(&text, "bootstrap_reps", &b.to_string());
    }
    if let Some(r) = args.pb_restarts {
        text = override_key(&text, "pb_restarts", &r.to_string());
    }
    let mut grid = parse_config(&text)?;
    if args.out.is_some() {
        grid.output = args.out.clone();
    }
    if args.panels.is_some() {
        grid.panels = args.panels.clone();
    }
    grid.timing |= args.timing;
    Ok(grid)
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Fig1 => "fig1",
        Preset::Fig2 => "fig2",
        Preset::Exp => "exp",
    }
}

/// Replaces `key` in the config text (commenting out any existing line) so
/// command-line flags win over the file.
fn override_key(text: &str, key: &str, value: &str) -> String {
    let mut out: String = text
        .lines()
        .map(|l| {
            let k = l.split('#').next().unwrap().split('=').next().unwrap().trim();
            if k == key {
                format!("# {l}\n")
            } else {
                format!("{l}\n")
            }
        })
        .collect();
    out.push_str(&format!("{key} = {value}\n"));
    out
}

fn run(args: &Args) -> Result<bool, Error> {
    let grid = load(args)?;
    let rows = run_grid(&grid, args.workers)?;
    match &grid.output {
        Some(path) => {
            let file = fs::File::create(path)
                .map_err(|e| Error::Invalid(format!("cannot create {}: {e}", path.display())))?;
            write_csv(&rows, io::BufWriter::new(file))?;
        }
        None => write_csv(&rows, io::stdout().lock())?,
    }
    if let Some(dir) = &grid.panels {
        emit_plot_data(&rows, Axis::for_grid(&grid), dir)?;
    }
    Ok(rows.iter().all(|r| r.report.is_ok()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: one or more cells failed; see the error column");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
