//! Command-line front-end: fit a model from a CSV file and report estimates,
//! scores, covariance matrices or the cluster-robust sandwich as JSON or CSV.
//!
//! Exit codes: 0 success, 1 input or usage error, 2 the fit did not converge
//! (the report is still written).

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lmmderiv::nalgebra::DMatrix;
use lmmderiv::{
    build_design, converge_report, fit, load_dataset_path, sandwich, score_matrix, vcov_full, FitOptions,
    FittedModel, InfoKind, LoadOptions, Method, ModelSpec, Optimizer, SandwichOptions, ScoreLevel,
};
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lmmderiv", version, about = "Linear mixed model scores, information and robust covariances")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model and report the estimates.
    Fit {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Casewise (level 1) or clusterwise (level 2) score matrix.
    Scores {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        output: OutputArgs,
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
        level: u8,
    },
    /// Model-based covariance matrix of the estimates.
    Vcov {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// Report all parameters (default).
        #[arg(long, overrides_with = "no_full")]
        full: bool,
        /// Report only the fixed-effect block.
        #[arg(long = "no-full", overrides_with = "full")]
        no_full: bool,
        #[arg(long, value_enum, default_value_t = Information::Expected)]
        information: Information,
    },
    /// Cluster-robust sandwich covariance and standard errors.
    Sandwich {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        output: OutputArgs,
        #[arg(long, value_enum, default_value_t = Information::Expected)]
        bread: Information,
        /// Multiply the meat by J/(J-1).
        #[arg(long)]
        cluster_adjust: bool,
    },
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Delimited text file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub response: String,
    /// Comma-separated fixed covariates.
    #[arg(long, value_delimiter = ',')]
    pub fixed: Vec<String>,
    /// Comma-separated random-slope covariates.
    #[arg(long, value_delimiter = ',')]
    pub random: Vec<String>,
    /// Grouping column.
    #[arg(long)]
    pub group: String,
    #[arg(long, value_enum, default_value_t = MethodArg::Ml)]
    pub method: MethodArg,
    /// Field delimiter: a single character, or "tab".
    #[arg(long, default_value = ",", value_parser = parse_delimiter)]
    pub delim: u8,
    #[arg(long)]
    pub no_fixed_intercept: bool,
    #[arg(long)]
    pub no_random_intercept: bool,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Bfgs)]
    pub optimizer: OptimizerArg,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ml,
    Reml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Bfgs,
    NelderMead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Information {
    Expected,
    Observed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

fn parse_delimiter(s: &str) -> Result<u8, String> {
    match s {
        "tab" | "\\t" | "\t" => Ok(b'\t'),
        _ if s.len() == 1 && s.is_ascii() => Ok(s.as_bytes()[0]),
        _ => Err(format!("delimiter must be one ASCII character or \"tab\", got {s:?}")),
    }
}

impl From<Information> for InfoKind {
    fn from(i: Information) -> Self {
        match i {
            Information::Expected => InfoKind::Expected,
            Information::Observed => InfoKind::Observed,
        }
    }
}

/// Round to 15 significant digits; both output formats print this value.
pub fn round15(x: f64) -> f64 {
    if x.is_finite() {
        format!("{x:.14e}").parse().unwrap_or(x)
    } else {
        x
    }
}

#[derive(Debug, Serialize)]
pub struct Estimate {
    pub name: String,
    pub estimate: f64,
}

#[derive(Debug, Serialize)]
pub struct MatrixReport {
    pub labels: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub row_labels: Option<Vec<String>>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
pub struct Diagnostics {
    pub method: String,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub boundary: Vec<String>,
    pub n: usize,
    pub clusters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub information: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster_adjust: Option<bool>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub params: Vec<Estimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrix: Option<MatrixReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robust_se: Option<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

fn matrix_report(m: &DMatrix<f64>, labels: &[String], row_labels: Option<Vec<String>>) -> MatrixReport {
    MatrixReport {
        labels: labels.to_vec(),
        row_labels,
        values: m.row_iter().map(|r| r.iter().copied().map(round15).collect()).collect(),
    }
}

fn info_name(kind: InfoKind) -> &'static str {
    match kind {
        InfoKind::Expected => "expected",
        InfoKind::Observed => "observed",
    }
}

fn fit_model(args: &ModelArgs) -> lmmderiv::Result<FittedModel> {
    let spec = ModelSpec::new(&args.response, &args.group)
        .fixed(&args.fixed)
        .random(&args.random)
        .with_fixed_intercept(!args.no_fixed_intercept)
        .with_random_intercept(!args.no_random_intercept);
    let data = load_dataset_path(&args.data, &spec, &LoadOptions { delimiter: args.delim })?;
    let design = build_design(&data, &spec)?;
    let opts = FitOptions {
        method: match args.method {
            MethodArg::Ml => Method::Ml,
            MethodArg::Reml => Method::Reml,
        },
        optimizer: match args.optimizer {
            OptimizerArg::Bfgs => Optimizer::Bfgs,
            OptimizerArg::NelderMead => Optimizer::NelderMead,
        },
        max_iter: args.max_iter,
        ..FitOptions::default()
    };
    fit(&design, &opts)
}

fn base_report(model: &FittedModel) -> Report {
    let r = converge_report(model);
    let p = model.params();
    Report {
        params: p
            .names()
            .iter()
            .zip(p.to_vector().iter())
            .map(|(name, &v)| Estimate { name: name.clone(), estimate: round15(v) })
            .collect(),
        matrix: None,
        robust_se: None,
        diagnostics: Diagnostics {
            method: r.method.to_string(),
            objective: round15(r.objective),
            converged: r.converged,
            iterations: r.iterations,
            grad_norm: round15(r.grad_norm),
            boundary: r.boundary,
            n: model.design().n(),
            clusters: model.design().n_clusters(),
            level: None,
            information: None,
            cluster_adjust: None,
            warnings: r.warnings,
        },
    }
}

/// Build the report for one subcommand.
pub fn build_report(command: &Command) -> lmmderiv::Result<Report> {
    match command {
        Command::Fit { model, .. } => Ok(base_report(&fit_model(model)?)),
        Command::Scores { model, level, .. } => {
            let m = fit_model(model)?;
            let level = ScoreLevel::from_number(*level).expect("level range checked by the parser");
            let s = score_matrix(&m, level)?;
            let mut report = base_report(&m);
            report.matrix = Some(matrix_report(&s.values, &s.col_labels, Some(s.row_labels)));
            report.diagnostics.level = Some(level.number());
            Ok(report)
        }
        Command::Vcov { model, no_full, information, .. } => {
            let m = fit_model(model)?;
            let kind = InfoKind::from(*information);
            let v = vcov_full(&m, !no_full, kind)?;
            let mut report = base_report(&m);
            report.matrix = Some(matrix_report(&v.values, &v.labels, None));
            report.diagnostics.information = Some(info_name(kind));
            Ok(report)
        }
        Command::Sandwich { model, bread, cluster_adjust, .. } => {
            let m = fit_model(model)?;
            let opts = SandwichOptions { bread: (*bread).into(), cluster_adjust: *cluster_adjust };
            let s = sandwich(&m, &opts)?;
            let mut report = base_report(&m);
            report.matrix = Some(matrix_report(&s.vcov, &s.labels, None));
            report.robust_se = Some(s.robust_se.iter().copied().map(round15).collect());
            report.diagnostics.information = Some(info_name(s.bread_kind));
            report.diagnostics.cluster_adjust = Some(*cluster_adjust);
            report.diagnostics.warnings.extend(s.warnings);
            Ok(report)
        }
    }
}

fn output_args(command: &Command) -> &OutputArgs {
    match command {
        Command::Fit { output, .. }
        | Command::Scores { output, .. }
        | Command::Vcov { output, .. }
        | Command::Sandwich { output, .. } => output,
    }
}

pub fn write_json(report: &Report, out: &mut dyn Write) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut *out, report)?;
    writeln!(out)
}

/// CSV body: the matrix (or the estimates for `fit`), plus a `robust_se` row
/// for sandwich reports. Diagnostics are not part of the CSV.
pub fn write_csv(report: &Report, out: &mut dyn Write) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let num = |v: &f64| v.to_string();
    match &report.matrix {
        None => {
            w.write_record(["name", "estimate"])?;
            for e in &report.params {
                w.write_record([e.name.clone(), num(&e.estimate)])?;
            }
        }
        Some(m) => {
            w.write_record(std::iter::once(String::new()).chain(m.labels.iter().cloned()))?;
            for (i, row) in m.values.iter().enumerate() {
                let label = m.row_labels.as_ref().map_or_else(|| m.labels[i].clone(), |r| r[i].clone());
                w.write_record(std::iter::once(label).chain(row.iter().map(num)))?;
            }
            if let Some(se) = &report.robust_se {
                w.write_record(std::iter::once("robust_se".to_string()).chain(se.iter().map(num)))?;
            }
        }
    }
    w.flush()
}

fn emit(report: &Report, output: &OutputArgs, stdout: &mut dyn Write) -> io::Result<()> {
    let mut file;
    let sink: &mut dyn Write = match &output.output {
        Some(path) => {
            file = BufWriter::new(File::create(path)?);
            &mut file
        }
        None => stdout,
    };
    match output.format {
        Format::Json => write_json(report, sink)?,
        Format::Csv => write_csv(report, sink)?,
    }
    sink.flush()
}

fn diagnostics_text(d: &Diagnostics) -> String {
    let mut s = format!(
        "{}: objective {} ({} after {} iterations, gradient sup-norm {:.3e})\n",
        d.method,
        d.objective,
        if d.converged { "converged" } else { "NOT converged" },
        d.iterations,
        d.grad_norm
    );
    if !d.boundary.is_empty() {
        s.push_str(&format!("boundary estimates: {}\n", d.boundary.join(", ")));
    }
    for w in &d.warnings {
        s.push_str(&format!("warning: {w}\n"));
    }
    s
}

/// Parse `args` (program name first) and execute. Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    let report = match build_report(&cli.command) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_ERROR;
        }
    };
    let output = output_args(&cli.command);
    if let Err(e) = emit(&report, output, stdout) {
        let _ = writeln!(stderr, "error: cannot write report: {e}");
        return EXIT_ERROR;
    }
    if output.format == Format::Csv || !report.diagnostics.converged || !report.diagnostics.warnings.is_empty() {
        let _ = write!(stderr, "{}", diagnostics_text(&report.diagnostics));
    }
    if report.diagnostics.converged {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    }
}
