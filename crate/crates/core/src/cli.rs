//! Batch front end: load a model spec, run one verification suite, write a
//! JSON or CSV report.

use std::fs;
use std::io::Write;
use std::path::{Path as FsPath, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::manifold::Distribution;
use crate::models::{load_model_spec, EstimatingFunction, Model, ModelInstance, Parameterization, Which};
use crate::montecarlo::{run_experiment, ExperimentConfig, Scenario};
use crate::numeric::rng;
use crate::robustness::{dr_bruteforce, flatness_suite, iff_check, num, to_csv, CsvRows, FlatnessConfig};
use crate::tangent::{eic_from_chart, verify_influence_curve, Path};
use crate::transport::{duality_survey, random_distribution};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "drgeom", version, about = "Geometry checks for doubly robust estimating functions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Brute-force double robustness and section orthogonality.
    VerifyDr(VerifyDrArgs),
    /// Transport duality, m-flatness and m-curvature of both sections.
    Geometry(GeometryArgs),
    /// Efficient influence curve per state and its Riesz identity.
    Eic(EicArgs),
    /// Monte Carlo bias table under nuisance misspecification.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Model-spec JSON file.
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    /// Report destination; standard output when absent.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Estimating function by name; the efficient one by default.
    #[arg(long, value_name = "NAME")]
    pub function: Option<String>,
}

#[derive(Debug, Args)]
pub struct VerifyDrArgs {
    #[command(flatten)]
    pub common: Common,
    /// Tolerance of the brute-force check.
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    /// Tolerance of the orthogonality checks.
    #[arg(long, default_value_t = 1e-8)]
    pub ortho_tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub grid_size: usize,
    #[arg(long, default_value_t = 50)]
    pub members: usize,
}

#[derive(Debug, Args)]
pub struct GeometryArgs {
    #[command(flatten)]
    pub common: Common,
    /// m-flatness tolerance.
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub curvature_tol: f64,
    #[arg(long, default_value_t = 1e-12)]
    pub duality_tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub duality_tuples: usize,
    #[arg(long, default_value_t = 200)]
    pub grid_size: usize,
    #[arg(long, default_value_t = 50)]
    pub members: usize,
}

#[derive(Debug, Args)]
pub struct EicArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Random paths for the Riesz check, half chart and half mixture.
    #[arg(long, default_value_t = 100)]
    pub paths: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Sample size; repeat for several.
    #[arg(long = "n", value_name = "INT", default_values_t = [50_000])]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    /// Scenario name; repeat for several. All four by default.
    #[arg(long = "scenario", value_name = "NAME")]
    pub scenarios: Vec<Scenario>,
}

impl clap::ValueEnum for Scenario {
    fn value_variants<'a>() -> &'a [Self] {
        &Scenario::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

/// A finished run: the report text and whether every check passed.
#[derive(Debug)]
pub struct Outcome {
    pub text: String,
    pub pass: bool,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            EXIT_PASS
        } else {
            EXIT_CHECK_FAILED
        }
    }
}

fn positive(field: &'static str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::param(field, "must be a positive finite number"))
    }
}

fn select(model: &dyn Model, name: Option<&str>) -> Result<EstimatingFunction> {
    let all = model.estimating_functions();
    match name {
        None => Ok(all.into_iter().next().expect("every model has an efficient function")),
        Some(n) => {
            let names: Vec<String> = all.iter().map(|d| d.name.clone()).collect();
            all.into_iter()
                .find(|d| d.name == n)
                .ok_or_else(|| Error::param("function", format!("unknown function {n:?}; available: {}", names.join(", "))))
        }
    }
}

/// Long-format CSV rows shared by the multi-part reports.
struct Long(Vec<[String; 6]>);

impl Long {
    fn push(&mut self, check: &str, group: &str, index: impl ToString, value: f64, tol: f64) {
        self.0.push([
            check.to_string(),
            group.to_string(),
            index.to_string(),
            num(value),
            num(tol),
            (value <= tol).to_string(),
        ]);
    }
}

impl CsvRows for Long {
    fn header(&self) -> Vec<&'static str> {
        vec!["check", "group", "index", "value", "tolerance", "pass"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.0.iter().map(|r| r.to_vec()).collect()
    }
}

fn envelope(command: &str, config: Value, model: &dyn Model, report: Value, pass: bool) -> Result<String> {
    let mut described = model.describe();
    described["theta"] = json!(model.theta()?);
    let doc = json!({
        "command": command,
        "config": config,
        "model": described,
        "pass": pass,
        "report": report,
    });
    let mut s = serde_json::to_string_pretty(&doc)?;
    s.push('\n');
    Ok(s)
}

struct Loaded {
    model: ModelInstance,
    param: Parameterization,
    function: EstimatingFunction,
}

fn prepare(common: &Common, model: ModelInstance) -> Result<Loaded> {
    let param = model.parameterization();
    let function = select(&*model, common.function.as_deref())?;
    Ok(Loaded { model, param, function })
}

fn common_config(c: &Common) -> Value {
    json!({
        "model_spec": c.model.display().to_string(),
        "format": c.format,
        "seed": c.seed,
    })
}

fn verify_dr(args: &VerifyDrArgs, model: ModelInstance) -> Result<Outcome> {
    positive("tol", args.tol)?;
    positive("ortho_tol", args.ortho_tol)?;
    let c = &args.common;
    let Loaded { model, param, function } = prepare(c, model)?;
    let p = model.truth();
    let g1 = model.nuisance_grid(Which::One, args.grid_size, c.seed);
    let g2 = model.nuisance_grid(Which::Two, args.grid_size, c.seed.wrapping_add(1));
    info!("brute-force DR over {} x {} grid points", g1.len(), g2.len());
    let dr = dr_bruteforce(model.name(), &function, &param, p, &g1, &g2, args.tol)?;
    let m1 = model.sample_section(p, Which::One, args.members, c.seed)?;
    let m2 = model.sample_section(p, Which::Two, args.members, c.seed.wrapping_add(1))?;
    info!("orthogonality over {} + {} section members", m1.len(), m2.len());
    let iff = iff_check(&function, &param, &[&m1, &m2], args.ortho_tol)?;
    let pass = dr.pass && iff.doubly_robust;
    let text = match c.format {
        Format::Json => {
            let mut config = common_config(c);
            config["function"] = json!(function.name);
            config["tol"] = json!(args.tol);
            config["ortho_tol"] = json!(args.ortho_tol);
            config["grid_size"] = json!(args.grid_size);
            config["members"] = json!(args.members);
            envelope("verify-dr", config, &*model, json!({"dr": dr, "orthogonality": iff}), pass)?
        }
        Format::Csv => {
            let mut long = Long(Vec::new());
            for (i, v) in dr.violations1.iter().enumerate() {
                long.push("dr", "grid1", i, *v, args.tol);
            }
            for (i, v) in dr.violations2.iter().enumerate() {
                long.push("dr", "grid2", i, *v, args.tol);
            }
            for s in &iff.sections {
                for r in &s.rows {
                    long.push("orthogonality", &s.section, r.index, r.max_inner, args.ortho_tol);
                    if let Some(g) = r.path_derivative {
                        long.push("path_derivative", &s.section, r.index, g, args.ortho_tol);
                    }
                }
            }
            to_csv(&long)?
        }
    };
    Ok(Outcome { text, pass })
}

fn geometry(args: &GeometryArgs, model: ModelInstance) -> Result<Outcome> {
    positive("tol", args.tol)?;
    positive("curvature_tol", args.curvature_tol)?;
    positive("duality_tol", args.duality_tol)?;
    let c = &args.common;
    let Loaded { model, .. } = prepare(c, model)?;
    let k = model.space().len().max(2);
    info!("duality survey over {} tuples", args.duality_tuples);
    let duality = duality_survey(2..=k, args.duality_tuples, c.seed, args.duality_tol)?;
    let cfg = FlatnessConfig {
        members: args.members,
        seed: c.seed,
        grid_size: args.grid_size,
        tol_flat: args.tol,
        tol_curvature: args.curvature_tol,
        ..Default::default()
    };
    let flat = flatness_suite(&*model, &cfg)?;
    let pass = duality.pass && flat.pass;
    let text = match c.format {
        Format::Json => {
            let mut config = common_config(c);
            config["duality_tol"] = json!(args.duality_tol);
            config["duality_tuples"] = json!(args.duality_tuples);
            config["duality_states"] = json!([2, k]);
            config["flatness"] = json!(cfg);
            envelope("geometry", config, &*model, json!({"duality": duality, "flatness": flat}), pass)?
        }
        Format::Csv => {
            let mut long = Long(Vec::new());
            for (i, g) in duality.pairs.iter().enumerate() {
                long.push("duality", &g.label, i, g.gap, args.duality_tol);
            }
            for s in &flat.sections {
                for (i, g) in s.flatness.pairs.iter().enumerate() {
                    long.push("m_flatness", &s.section, i + 1, g.gap, args.tol);
                }
                for (i, g) in s.curvature.pairs.iter().enumerate() {
                    long.push("m_curvature", &s.section, i + 1, g.gap, args.curvature_tol);
                }
            }
            to_csv(&long)?
        }
    };
    Ok(Outcome { text, pass })
}

fn eic(args: &EicArgs, model: ModelInstance) -> Result<Outcome> {
    positive("tol", args.tol)?;
    if args.paths == 0 {
        return Err(Error::param("paths", "need at least one path"));
    }
    let c = &args.common;
    let Loaded { model, param, .. } = prepare(c, model)?;
    let p = model.truth();
    let chart = model.chart()?;
    let eic = eic_from_chart(&chart, &*param.theta, p)?;
    let mut r = rng(c.seed);
    let chart_paths = args.paths.div_ceil(2);
    let mut paths = Vec::with_capacity(args.paths);
    for _ in 0..chart_paths {
        let dir: Vec<f64> = (0..chart.dim()).map(|_| r.random_range(-1.0..1.0)).collect();
        paths.push(Path::chart(&chart, dir)?);
    }
    if model.saturated() {
        for _ in chart_paths..args.paths {
            let q: Distribution = random_distribution(model.space(), &mut r)?;
            paths.push(Path::mixture(p, &q)?);
        }
    } else {
        // mixtures toward other model members stay inside a convex model
        // only; draw further chart paths instead
        for _ in chart_paths..args.paths {
            let dir: Vec<f64> = (0..chart.dim()).map(|_| r.random_range(-1.0..1.0)).collect();
            paths.push(Path::chart(&chart, dir)?);
        }
    }
    let riesz = verify_influence_curve(&eic.eic, &*param.theta, &paths, p, args.tol)?;
    let pass = riesz.pass;
    let states = model.space().states();
    let text = match c.format {
        Format::Json => {
            let mut config = common_config(c);
            config["tol"] = json!(args.tol);
            config["paths"] = json!(args.paths);
            let values: Vec<Value> = states
                .iter()
                .zip(eic.eic.values())
                .zip(p.probs())
                .map(|((s, v), q)| json!({"state": s.labels, "probability": q, "eic": v}))
                .collect();
            let report = json!({
                "theta": model.theta()?,
                "states": values,
                "rank": eic.rank,
                "pruned": eic.pruned,
                "gradient": eic.gradient,
                "riesz": riesz,
            });
            envelope("eic", config, &*model, report, pass)?
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header: Vec<String> = model.space().variables().to_vec();
            header.extend(["probability".into(), "eic".into()]);
            w.write_record(&header).map_err(csv_err)?;
            for ((s, v), q) in states.iter().zip(eic.eic.values()).zip(p.probs()) {
                let mut row = s.labels.clone();
                row.extend([num(*q), num(*v)]);
                w.write_record(&row).map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            String::from_utf8(bytes).expect("csv output is utf-8")
        }
    };
    Ok(Outcome { text, pass })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn simulate(args: &SimulateArgs, model: ModelInstance) -> Result<Outcome> {
    let c = &args.common;
    let Loaded { model, function, .. } = prepare(c, model)?;
    let cfg = ExperimentConfig {
        n: args.n.clone(),
        reps: args.reps,
        seed: c.seed,
        scenarios: if args.scenarios.is_empty() {
            Scenario::ALL.to_vec()
        } else {
            args.scenarios.clone()
        },
        ..Default::default()
    };
    info!("simulating {} replicates at n = {:?}", cfg.reps, cfg.n);
    let table = run_experiment(&*model, &function, &cfg)?;
    let pass = table.pass;
    let text = match c.format {
        Format::Json => {
            let mut config = common_config(c);
            config["function"] = json!(function.name);
            config["experiment"] = json!(cfg);
            envelope("simulate", config, &*model, json!(table), pass)?
        }
        Format::Csv => to_csv(&table)?,
    };
    Ok(Outcome { text, pass })
}

/// Loads the model spec named by `--model` and runs the command.
pub fn run(command: &Command) -> Result<Outcome> {
    let path = &command.common().model;
    let (model, _) = load_model_spec(path)?;
    info!("loaded {} model from {}", model.name(), path.display());
    run_with(command, model)
}

/// Runs the command against an already built model; `--model` is only echoed.
pub fn run_with(command: &Command, model: ModelInstance) -> Result<Outcome> {
    match command {
        Command::VerifyDr(a) => verify_dr(a, model),
        Command::Geometry(a) => geometry(a, model),
        Command::Eic(a) => eic(a, model),
        Command::Simulate(a) => simulate(a, model),
    }
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::VerifyDr(a) => &a.common,
            Command::Geometry(a) => &a.common,
            Command::Eic(a) => &a.common,
            Command::Simulate(a) => &a.common,
        }
    }

    fn out(&self) -> Option<&FsPath> {
        self.common().out.as_deref()
    }
}

/// Writes through a sibling temporary file and a rename so readers never see
/// a partial report.
pub fn write_atomic(path: &FsPath, text: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::param("out", "not a file path"))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Runs the parsed command and returns the process exit code.
pub fn execute(cli: &Cli) -> i32 {
    let outcome = match run(&cli.command) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let written = match cli.command.out() {
        Some(path) => write_atomic(path, &outcome.text),
        None => std::io::stdout().write_all(outcome.text.as_bytes()).map_err(Error::from),
    };
    if let Err(e) = written {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    if !outcome.pass {
        eprintln!("check failed; see report");
    }
    outcome.exit_code()
}

/// Parses `args` and runs; usage errors map to exit code 1.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
            let _ = e.print();
            code
        }
    }
}
