//! Experiment grids: configuration parsing, execution, and CSV / per-panel
//! output.
//!
//! A configuration is plain text with one `key = value` per line and `#`
//! comments:
//!
//! | key              | value                                                 | default            |
//! |------------------|-------------------------------------------------------|--------------------|
//! | `preset`         | `fig1`, `fig2` or `exp`                               |                    |
//! | `responses`      | comma list of response types                          | all five           |
//! | `p`              | comma list of covariate counts                        | `1,2,5`            |
//! | `B`              | comma list of block counts (for `blocks`)             | preset grid        |
//! | `designs`        | comma list of `blocks`, `BCRD`, `PM`, `PB`            |                    |
//! | `covariates`     | `uniform` or `exponential`                            | `uniform`          |
//! | `n_subjects`     | even subject count                                    | `96`               |
//! | `reps`           | replicates per cell                                   | `100000`           |
//! | `q`              | quantile level                                        | `0.95`             |
//! | `seed`           | master seed (required)                                |                    |
//! | `bootstrap_reps` | bootstrap resamples per cell                          | `1000`             |
//! | `pb_restarts`    | greedy pair-switch restarts for PB                    | `10000`            |
//! | `output`         | CSV path                                              | stdout             |
//! | `panels`         | directory for per-panel series files                  | none               |
//! | `timing`         | `true` to fill `runtime_ms`                           | `false`            |
//!
//! A preset fills every key it covers first; explicit keys then override it,
//! whatever their position in the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::designs::{Design, DesignKind};
use crate::error::{Error, Result};
use crate::montecarlo::{run_cell, CellConfig, CovariateSource, CriterionReport, DesignSpec};
use crate::response::{CovariateFamily, ResponseKind, ResponseModel};

/// Block counts for `2n = 96`.
pub const FIG1_BLOCKS: [usize; 10] = [1, 2, 3, 4, 6, 8, 12, 16, 24, 48];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridDesign {
    /// One cell per entry of the `B` list.
    Blocks,
    Bcrd,
    Pm,
    Pb,
}

impl FromStr for GridDesign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "blocks" | "block" => Ok(GridDesign::Blocks),
            "bcrd" => Ok(GridDesign::Bcrd),
            "pm" => Ok(GridDesign::Pm),
            "pb" => Ok(GridDesign::Pb),
            _ => Err(Error::Invalid(format!("unknown design '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Fig1,
    Fig2,
    Exp,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig1" => Ok(Preset::Fig1),
            "fig2" => Ok(Preset::Fig2),
            "exp" => Ok(Preset::Exp),
            _ => Err(Error::Invalid(format!("unknown preset '{s}' (expected fig1, fig2 or exp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentGrid {
    pub responses: Vec<ResponseKind>,
    pub ps: Vec<usize>,
    pub blocks: Vec<usize>,
    pub designs: Vec<GridDesign>,
    pub covariates: CovariateFamily,
    pub n_subjects: usize,
    pub n_reps: usize,
    pub q: f64,
    pub seed: Option<u64>,
    pub bootstrap_reps: usize,
    pub pb_restarts: usize,
    pub output: Option<PathBuf>,
    pub panels: Option<PathBuf>,
    pub timing: bool,
}

impl ExperimentGrid {
    /// Block-design grid over all responses and `p in {1, 2, 5}` at `2n = 96`.
    pub fn preset(preset: Preset) -> Self {
        let mut grid = Self {
            responses: ResponseKind::ALL.to_vec(),
            ps: vec![1, 2, 5],
            blocks: FIG1_BLOCKS.to_vec(),
            designs: vec![GridDesign::Blocks],
            covariates: CovariateFamily::Uniform,
            n_subjects: 96,
            n_reps: 100_000,
            q: 0.95,
            seed: None,
            bootstrap_reps: 1000,
            pb_restarts: 10_000,
            output: None,
            panels: None,
            timing: false,
        };
        match preset {
            Preset::Fig1 => {}
            Preset::Fig2 => {
                grid.designs = vec![GridDesign::Bcrd, GridDesign::Pm, GridDesign::Pb];
                grid.n_reps = 30_000;
            }
            Preset::Exp => grid.covariates = CovariateFamily::Exponential,
        }
        grid
    }

    /// Checks everything a run needs; `line` is reported for grid-shape
    /// errors that cannot be tied to a single key.
    pub fn validate(&self) -> Result<()> {
        self.validate_at(&BTreeMap::new())
    }

    fn validate_at(&self, lines: &BTreeMap<&str, usize>) -> Result<()> {
        let err = |key: &str, message: String| Error::Config { line: lines.get(key).copied().unwrap_or(0), message };
        if self.n_subjects < 4 || !self.n_subjects.is_multiple_of(2) {
            return Err(err("n_subjects", format!("n_subjects must be even and at least 4, got {}", self.n_subjects)));
        }
        if self.responses.is_empty() {
            return Err(err("responses", "responses list is empty".into()));
        }
        if self.ps.is_empty() || self.ps.contains(&0) {
            return Err(err("p", "p must list positive covariate counts".into()));
        }
        if self.designs.is_empty() {
            return Err(err("designs", "designs list is empty".into()));
        }
        if self.designs.contains(&GridDesign::Blocks) {
            if self.blocks.is_empty() {
                return Err(err("B", "B list is empty".into()));
            }
            for &b in &self.blocks {
                if b == 0 || !self.n_subjects.is_multiple_of(b) || !(self.n_subjects / b).is_multiple_of(2) {
                    return Err(err(
                        "B",
                        format!("(2n={}, B={b}) does not split into equal blocks of even size", self.n_subjects),
                    ));
                }
            }
        }
        if self.n_reps == 0 {
            return Err(err("reps", "reps must be at least 1".into()));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(err("q", format!("q must lie in (0, 1), got {}", self.q)));
        }
        if self.designs.contains(&GridDesign::Pb) && self.pb_restarts == 0 {
            return Err(err("pb_restarts", "pb_restarts must be at least 1".into()));
        }
        if self.seed.is_none() {
            return Err(err("seed", "seed is required".into()));
        }
        Ok(())
    }

    /// Cells in output order: response, then `p`, then design (blocks
    /// expanded over `B`).
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &response in &self.responses {
            for &p in &self.ps {
                for &design in &self.designs {
                    let specs: Vec<(Option<usize>, DesignSpec)> = match design {
                        GridDesign::Blocks => self.blocks.iter().map(|&b| (Some(b), DesignSpec::Blocks(b))).collect(),
                        GridDesign::Bcrd => vec![(Some(1), DesignSpec::Bcrd)],
                        GridDesign::Pm => vec![(Some(self.n_subjects / 2), DesignSpec::Matched)],
                        GridDesign::Pb => vec![(None, DesignSpec::PerfectBalance { restarts: self.pb_restarts })],
                    };
                    out.extend(specs.into_iter().map(|(b, spec)| GridCell { response, p, b, spec }));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub response: ResponseKind,
    pub p: usize,
    /// Block count; `None` for perfect balance.
    pub b: Option<usize>,
    pub spec: DesignSpec,
}

/// Parses and validates a configuration.
pub fn parse_config(text: &str) -> Result<ExperimentGrid> {
    let mut entries: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap().trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config { line, message: format!("expected key = value, got '{content}'") })?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(Error::Config { line, message: format!("unknown key '{key}'") });
        }
        if let Some((first, _)) = entries.insert(key, (line, value)) {
            return Err(Error::Config { line, message: format!("duplicate key '{key}' (first set on line {first})") });
        }
    }
    if entries.is_empty() {
        return Err(Error::Config { line: 0, message: "no preset or explicit grid".into() });
    }

    let mut grid = match entries.get("preset") {
        Some(&(line, v)) => ExperimentGrid::preset(v.parse().map_err(|e: Error| config_error(line, e))?),
        None => {
            if !entries.contains_key("designs") {
                return Err(Error::Config { line: 0, message: "no preset or explicit grid".into() });
            }
            let mut g = ExperimentGrid::preset(Preset::Fig1);
            g.designs.clear();
            g
        }
    };
    for (&key, &(line, value)) in &entries {
        apply(&mut grid, key, value).map_err(|e| config_error(line, e))?;
    }
    let lines: BTreeMap<&str, usize> = entries.iter().map(|(&k, &(l, _))| (k, l)).collect();
    grid.validate_at(&lines)?;
    Ok(grid)
}

const KEYS: [&str; 15] = [
    "preset",
    "responses",
    "p",
    "B",
    "designs",
    "covariates",
    "n_subjects",
    "reps",
    "q",
    "seed",
    "bootstrap_reps",
    "pb_restarts",
    "output",
    "panels",
    "timing",
];

fn config_error(line: usize, e: Error) -> Error {
    match e {
        Error::Invalid(message) => Error::Config { line, message },
        other => Error::Config { line, message: other.to_string() },
    }
}

fn apply(grid: &mut ExperimentGrid, key: &str, value: &str) -> Result<()> {
    match key {
        "preset" => {}
        "responses" => grid.responses = list(value)?,
        "p" => grid.ps = list(value)?,
        "B" => grid.blocks = list(value)?,
        "designs" => grid.designs = list(value)?,
        "covariates" => grid.covariates = value.parse()?,
        "n_subjects" => grid.n_subjects = number(value)?,
        "reps" => grid.n_reps = number(value)?,
        "q" => grid.q = number(value)?,
        "seed" => grid.seed = Some(number(value)?),
        "bootstrap_reps" => grid.bootstrap_reps = number(value)?,
        "pb_restarts" => grid.pb_restarts = number(value)?,
        "output" => grid.output = Some(PathBuf::from(value)),
        "panels" => grid.panels = Some(PathBuf::from(value)),
        "timing" => grid.timing = number(value)?,
        _ => unreachable!("key checked against KEYS"),
    }
    Ok(())
}

fn number<T: FromStr>(value: &str) -> Result<T> {
    value.replace('_', "").parse().map_err(|_| Error::Invalid(format!("cannot parse '{value}'")))
}

fn list<T: FromStr>(value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| Error::Invalid(format!("bad list entry '{s}': {e}"))))
        .collect()
}

/// One executed cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub response: ResponseKind,
    pub p: usize,
    pub design: String,
    pub b: Option<usize>,
    pub n_subjects: usize,
    pub n_reps: usize,
    pub seed: u64,
    pub report: std::result::Result<CriterionReport, String>,
    pub runtime_ms: u128,
}

fn design_label(design: &Design) -> &'static str {
    match design.kind() {
        DesignKind::Block => "block",
        other => other.label(),
    }
}

/// Runs every cell on a pool of `workers` threads (0 means one per core).
/// Cell failures are recorded in the row, not propagated.
pub fn run_grid(grid: &ExperimentGrid, workers: usize) -> Result<Vec<GridRow>> {
    grid.validate()?;
    let seed = grid.seed.expect("validated");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start worker pool: {e}")))?;
    let cells = grid.cells();
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let model = ResponseModel::simulation_default(cell.response, cell.p);
                let covariates = CovariateSource::Drawn {
                    dist: grid.covariates.distribution(cell.response),
                    n_subjects: grid.n_subjects,
                    p: cell.p,
                };
                let mut cfg = CellConfig::new(model, covariates, cell.spec.clone(), grid.n_reps, seed);
                cfg.q = grid.q;
                cfg.bootstrap_reps = grid.bootstrap_reps;
                let start = Instant::now();
                let report = run_cell(&cfg);
                let runtime_ms = if grid.timing { start.elapsed().as_millis() } else { 0 };
                if let Err(e) = &report {
                    log::error!("cell {} p={} {:?} failed: {e}", cell.response, cell.p, cell.spec);
                }
                let design = match &report {
                    Ok(r) => design_label(&r.design).to_string(),
                    Err(_) => spec_label(&cell.spec, grid.n_subjects).to_string(),
                };
                GridRow {
                    response: cell.response,
                    p: cell.p,
                    design,
                    b: cell.b,
                    n_subjects: grid.n_subjects,
                    n_reps: grid.n_reps,
                    seed,
                    report: report.map_err(|e| e.to_string()),
                    runtime_ms,
                }
            })
            .collect()
    }))
}

fn spec_label(spec: &DesignSpec, n_subjects: usize) -> &'static str {
    match spec {
        DesignSpec::Bcrd | DesignSpec::Blocks(1) => "BCRD",
        DesignSpec::Blocks(b) if 2 * b == n_subjects => "PM",
        DesignSpec::Blocks(_) => "block",
        DesignSpec::Matched => "PM",
        DesignSpec::PerfectBalance { .. } => "PB",
        DesignSpec::Given(d) => design_label(d),
    }
}

pub const CSV_HEADER: [&str; 17] = [
    "response",
    "p",
    "design",
    "B",
    "n_subjects",
    "n_reps",
    "seed",
    "mean_sq_err",
    "sd_sq_err",
    "emp_q95",
    "emp_q95_lo",
    "emp_q95_hi",
    "approx_q95",
    "approx_q95_lo",
    "approx_q95_hi",
    "runtime_ms",
    "error",
];

/// Writes the rows as CSV (LF line endings, shortest round-trip decimals).
/// Failed cells leave the numeric fields empty and fill `error`.
pub fn write_csv<W: Write>(rows: &[GridRow], out: W) -> Result<()> {
    let io = |e: csv::Error| Error::Invalid(format!("writing CSV: {e}"));
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(CSV_HEADER).map_err(io)?;
    for row in rows {
        let mut rec = vec![
            row.response.to_string(),
            row.p.to_string(),
            row.design.clone(),
            row.b.map(|b| b.to_string()).unwrap_or_default(),
            row.n_subjects.to_string(),
            row.n_reps.to_string(),
            row.seed.to_string(),
        ];
        match &row.report {
            Ok(r) => {
                rec.extend(
                    [
                        r.mean_sq_err,
                        r.sd_sq_err,
                        r.empirical_quantile,
                        r.empirical_ci.0,
                        r.empirical_ci.1,
                        r.approx_quantile,
                        r.approx_ci.0,
                        r.approx_ci.1,
                    ]
                    .map(|v| v.to_string()),
                );
                rec.push(row.runtime_ms.to_string());
                rec.push(String::new());
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), 8));
                rec.push(row.runtime_ms.to_string());
                rec.push(e.clone());
            }
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Invalid(format!("writing CSV: {e}")))?;
    Ok(())
}

/// X axis of a panel series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Block count, numeric.
    Blocks,
    /// Design label, categorical.
    Design,
}

impl Axis {
    pub fn for_grid(grid: &ExperimentGrid) -> Self {
        if grid.designs == [GridDesign::Blocks] {
            Axis::Blocks
        } else {
            Axis::Design
        }
    }
}

/// Writes one tab-separated series file per `(response, p)` panel into
/// `dir`, named `<response>_p<p>.tsv`, with columns
/// `x, emp_q95, emp_q95_lo, emp_q95_hi, approx_q95, approx_q95_lo, approx_q95_hi`.
/// Failed cells are skipped. Returns the files written, in panel order.
pub fn emit_plot_data(rows: &[GridRow], axis: Axis, dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |e: std::io::Error| Error::Invalid(format!("writing panel files in {}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    let mut panels: Vec<((ResponseKind, usize), String)> = Vec::new();
    for row in rows {
        let key = (row.response, row.p);
        let idx = match panels.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                let header = match axis {
                    Axis::Blocks => "B",
                    Axis::Design => "design",
                };
                panels.push((key, format!("{header}\temp_q95\temp_q95_lo\temp_q95_hi\tapprox_q95\tapprox_q95_lo\tapprox_q95_hi\n")));
                panels.len() - 1
            }
        };
        let Ok(r) = &row.report else { continue };
        let x = match axis {
            Axis::Blocks => row.b.map(|b| b.to_string()).unwrap_or_default(),
            Axis::Design => row.design.clone(),
        };
        let body = &mut panels[idx].1;
        writeln!(
            body,
            "{x}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.empirical_quantile, r.empirical_ci.0, r.empirical_ci.1, r.approx_quantile, r.approx_ci.0, r.approx_ci.1
        )
        .expect("writing to a String");
    }
    panels
        .into_iter()
        .map(|((response, p), body)| {
            let path = dir.join(format!("{response}_p{p}.tsv"));
            fs::write(&path, body).map_err(io)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fig1_preset_requires_seed() {
        let err = parse_config("preset = fig1\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref message, .. } if message.contains("seed")));
        let grid = parse_config("preset = fig1\nseed = 7\n").unwrap();
        assert_eq!(grid.n_reps, 100_000);
        assert_eq!(grid.blocks, FIG1_BLOCKS);
        assert_eq!(grid.cells().len(), 5 * 3 * 10);
    }

    #[test]
    fn fig2_preset_cells() {
        let grid = parse_config("preset = fig2\nseed = 1").unwrap();
        assert_eq!(grid.n_reps, 30_000);
        assert_eq!(grid.pb_restarts, 10_000);
        assert_eq!(grid.cells().len(), 45);
    }

    #[test]
    fn exp_preset_uses_exponential_covariates() {
        let grid = parse_config("preset=exp\nseed=1").unwrap();
        assert_eq!(grid.covariates, CovariateFamily::Exponential);
    }

    #[test]
    fn bad_block_count_names_the_pair() {
        let err = parse_config("preset = fig1\nseed = 1\nB = 1, 5\n").unwrap_err();
        match err {
            Error::Config { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("2n=96") && message.contains("B=5"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        // blocks of odd size cannot be balanced
        assert!(parse_config("preset = fig1\nseed = 1\nB = 32\n").is_err());
    }

    #[test]
    fn empty_config() {
        for text in ["", "# only a comment\n\n"] {
            let err = parse_config(text).unwrap_err();
            assert!(err.to_string().contains("no preset or explicit grid"));
        }
    }

    #[test]
    fn unknown_and_duplicate_keys() {
        let err = parse_config("preset = fig1\nseed = 1\ncolour = blue\n").unwrap_err();
        assert_eq!(err, Error::Config { line: 3, message: "unknown key 'colour'".into() });
        let err = parse_config("seed = 1\nseed = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }));
        assert!(matches!(parse_config("preset fig1"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(parse_config("preset = fig3"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(parse_config("preset = fig2\nseed = 1\nreps = lots"), Err(Error::Config { line: 3, .. })));
    }

    #[test]
    fn explicit_grid_and_overrides() {
        let text = "# small grid\nresponses = continuous, count\np = 1\ndesigns = BCRD, PM\nn_subjects = 8\nreps = 10\nseed = 3 # trailing\n";
        let grid = parse_config(text).unwrap();
        assert_eq!(grid.responses, [ResponseKind::Continuous, ResponseKind::Count]);
        assert_eq!(grid.cells().len(), 4);
        let over = parse_config("reps = 5\npreset = fig2\nseed = 2").unwrap();
        assert_eq!(over.n_reps, 5);
        assert!(parse_config("responses = continuous\nseed = 1").is_err());
    }

    fn small_grid(designs: &str) -> ExperimentGrid {
        parse_config(&format!(
            "responses = continuous, survival\np = 1, 2\ndesigns = {designs}\nB = 1, 2, 4\nn_subjects = 8\nreps = 200\nbootstrap_reps = 20\npb_restarts = 5\nseed = 11\n"
        ))
        .unwrap()
    }

    #[test]
    fn grid_runs_and_csv_is_reproducible() {
        let grid = small_grid("blocks");
        let rows = run_grid(&grid, 2).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 3);
        assert!(rows.iter().all(|r| r.report.is_ok()));
        assert_eq!(rows[0].design, "BCRD");
        assert_eq!(rows[2].design, "PM");
        let mut a = Vec::new();
        write_csv(&rows, &mut a).unwrap();
        let mut b = Vec::new();
        write_csv(&run_grid(&grid, 1).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with(&CSV_HEADER.join(",")));
        assert_eq!(text.lines().count(), 13);
        assert!(!text.contains('\r'));
    }

    #[test]
    fn failed_cells_are_recorded() {
        let rows = run_grid(&small_grid("PB"), 1).unwrap();
        let mut broken = rows[0].clone();
        broken.report = Err("boom".into());
        let mut out = Vec::new();
        write_csv(&[broken], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with(",,,,,,,,0,boom"));
    }

    #[test]
    fn panel_files() {
        let dir = tempfile::tempdir().unwrap();
        let grid = small_grid("blocks");
        let rows = run_grid(&grid, 1).unwrap();
        let files = emit_plot_data(&rows, Axis::for_grid(&grid), dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let body = fs::read_to_string(&files[0]).unwrap();
        assert!(body.starts_with("B\t"));
        assert_eq!(body.lines().count(), 4);

        let one = emit_plot_data(&rows[..1], Axis::Blocks, &dir.path().join("one")).unwrap();
        assert_eq!(fs::read_to_string(&one[0]).unwrap().lines().count(), 2);

        let grid = small_grid("BCRD, PM, PB");
        let rows = run_grid(&grid, 1).unwrap();
        let files = emit_plot_data(&rows, Axis::for_grid(&grid), &dir.path().join("fig2")).unwrap();
        let body = fs::read_to_string(&files[0]).unwrap();
        let xs: Vec<&str> = body.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
        assert_eq!(xs, ["BCRD", "PM", "PB"]);
    }
}
