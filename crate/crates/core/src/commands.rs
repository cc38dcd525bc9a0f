//! Command-line front end: argument definitions, the fit report and the four
//! subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::em::{e_step, multistart_fit, FitControls, FitResult, PosteriorTables};
use crate::error::{Error, Result};
use crate::io::{
    io_error, load_dataset, read_json, write_assignments, write_dataset, write_json, CovariateDecl,
    ModelConfig,
};
use crate::likelihood::ResponseDataset;
use crate::model::{class_ability_summary, count_free_parameters, ModelSpec, ParameterSet, Parameterization};
use crate::selection::{
    aic, assign_schools, assign_students, bic, classify, sweep_school_types, type_probabilities_by_profile,
    BicSampleSize, SweepRow,
};
use crate::simulate::{default_design, generate_dataset, SimulationDesign};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mlirt", version, about = "Multilevel latent-class IRT models fitted by EM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model and write a report plus assignment tables.
    Fit(FitArgs),
    /// Fit increasing numbers of school types and select one by BIC.
    Sweep(SweepArgs),
    /// Generate a synthetic dataset with known parameters.
    Simulate(SimulateArgs),
    /// Recompute MAP assignments from a stored report.
    Classify(ClassifyArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub students: PathBuf,
    #[arg(long)]
    pub schools: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct EstimationArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub starts: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Log-likelihood change below which EM stops.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub parameterization: Option<Parameterization>,
    #[arg(long)]
    pub kv: Option<usize>,
    /// Sample size in BIC: students, schools or an explicit integer.
    #[arg(long, default_value = "students")]
    pub bic_n: BicSampleSize,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub est: EstimationArgs,
    #[arg(long)]
    pub ku: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub est: EstimationArgs,
    /// A single count or an inclusive range `a..b`.
    #[arg(long, value_parser = parse_type_range)]
    pub ku: TypeRange,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML simulation design; the built-in reference design if omitted.
    #[arg(long)]
    pub design: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeRange(pub Vec<usize>);

/// Parses `3`, `1..4` or `1..=4`; both range forms include the upper end.
pub fn parse_type_range(s: &str) -> std::result::Result<TypeRange, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("'{t}' is not a count"));
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (num(a)?, num(b.trim_start_matches('='))?),
        None => {
            let a = num(s)?;
            (a, a)
        }
    };
    if a == 0 || b < a {
        return Err(format!("invalid range '{s}'"));
    }
    Ok(TypeRange((a..=b).collect()))
}

/// Type-probability table row at one school covariate profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub profile: String,
    pub covariates: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Everything `fit` writes about a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub spec: ModelSpec,
    pub student_covariates: Vec<String>,
    pub school_covariates: Vec<String>,
    pub params: ParameterSet,
    pub loglik: f64,
    pub n_par: usize,
    pub bic: f64,
    pub bic_n: usize,
    pub aic: f64,
    pub n_iter: usize,
    pub converged: bool,
    pub n_starts: usize,
    pub best_start: usize,
    pub seed: u64,
    pub trace: Vec<f64>,
    pub average_class_weights: Vec<f64>,
    pub average_type_weights: Vec<f64>,
    /// Per class and dimension; abilities, or mean response logits for LC.
    pub class_abilities: Vec<Vec<f64>>,
    pub standardized_abilities: Vec<Vec<f64>>,
    pub support_points: Vec<Option<f64>>,
    pub standardized_support_points: Vec<Option<f64>>,
    pub type_profiles: Vec<ProfileRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub bic_n: usize,
    pub rows: Vec<SweepRowReport>,
    pub chosen_types: Option<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRowReport {
    pub types: usize,
    pub loglik: Option<f64>,
    pub n_par: usize,
    pub bic: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

impl From<&SweepRow> for SweepRowReport {
    fn from(r: &SweepRow) -> Self {
        Self {
            types: r.n_types,
            loglik: r.loglik,
            n_par: r.n_par,
            bic: r.bic,
            converged: r.converged,
            error: r.error.clone(),
        }
    }
}

/// Labels and parameters of a simulated dataset; labels are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub seed: u64,
    pub spec: ModelSpec,
    pub params: ParameterSet,
    pub school_types: Vec<usize>,
    pub student_classes: Vec<Vec<usize>>,
}

/// Parses `args` and runs the selected subcommand; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Classify(a) => cmd_classify(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
    }
}

fn prepare(data: &DataArgs, est: &EstimationArgs, ku: Option<usize>) -> Result<(ModelConfig, ModelSpec, FitControls, ResponseDataset)> {
    let mut cfg = ModelConfig::from_path(&data.config)?;
    if let Some(k) = est.kv {
        cfg.classes = k;
    }
    if let Some(k) = ku {
        cfg.types = k;
    }
    if let Some(p) = est.parameterization {
        cfg.parameterization = p;
    }
    let spec = cfg.model_spec()?;
    let mut controls = cfg.controls();
    if let Some(s) = est.seed {
        controls.seed = s;
    }
    if let Some(n) = est.starts {
        controls.n_starts = n;
    }
    if let Some(n) = est.max_iter {
        controls.max_iter = n;
    }
    if let Some(t) = est.tol {
        controls.tol_loglik = t;
    }
    controls.validate()?;
    let dataset = load_dataset(&data.students, &data.schools, &cfg)?;
    Ok((cfg, spec, controls, dataset))
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| io_error(out, e))
}

/// Relabels classes by increasing mean ability and types by increasing
/// support point, then recomputes the posteriors.
pub fn canonical_labels(
    data: &ResponseDataset,
    params: &ParameterSet,
    spec: &ModelSpec,
) -> Result<(ParameterSet, PosteriorTables)> {
    let means: Vec<f64> = class_ability_summary(params, spec)
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect();
    let mut order: Vec<usize> = (0..spec.n_classes).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
    let p = params.permute_classes(&order);
    let post = e_step(data, &p, spec)?;
    let support = crate::selection::school_support_points(data, &p, &post, spec).raw;
    let mut types: Vec<usize> = (0..spec.n_types).collect();
    types.sort_by(|&a, &b| match (support[a], support[b]) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let p = p.permute_types(&types);
    let post = e_step(data, &p, spec)?;
    Ok((p, post))
}

/// School covariate profiles: all zeros, then each column switched to one.
pub fn school_profiles(columns: &[String]) -> Vec<(String, Vec<f64>)> {
    let m = columns.len();
    let mut out = vec![("reference".to_string(), vec![0.0; m])];
    for (k, name) in columns.iter().enumerate() {
        let mut w = vec![0.0; m];
        w[k] = 1.0;
        out.push((name.clone(), w));
    }
    out
}

/// Assembles the report for a fit whose labels are already final.
pub fn build_report(
    cfg: &ModelConfig,
    spec: &ModelSpec,
    controls: &FitControls,
    data: &ResponseDataset,
    fit: &FitResult,
    post: &PosteriorTables,
    bic_n: usize,
) -> Result<FitReport> {
    let n_par = count_free_parameters(spec);
    let c = classify(data, &fit.params, post, spec);
    let profiles = school_profiles(&cfg.school_columns());
    let probs = type_probabilities_by_profile(
        &fit.params,
        &profiles.iter().map(|(_, w)| w.clone()).collect::<Vec<_>>(),
    )?;
    Ok(FitReport {
        spec: spec.clone(),
        student_covariates: cfg.student_columns(),
        school_covariates: cfg.school_columns(),
        params: fit.params.clone(),
        loglik: fit.loglik,
        n_par,
        bic: bic(fit.loglik, n_par, bic_n),
        bic_n,
        aic: aic(fit.loglik, n_par),
        n_iter: fit.n_iter,
        converged: fit.converged,
        n_starts: controls.n_starts,
        best_start: fit.start_index,
        seed: controls.seed,
        trace: fit.trace.clone(),
        average_class_weights: c.average_weights.classes,
        average_type_weights: c.average_weights.types,
        class_abilities: class_ability_summary(&fit.params, spec),
        standardized_abilities: c.standardized_abilities,
        support_points: c.support_points.raw,
        standardized_support_points: c.support_points.standardized,
        type_profiles: profiles
            .into_iter()
            .zip(probs)
            .map(|((profile, covariates), probabilities)| ProfileRow {
                profile,
                covariates,
                probabilities,
            })
            .collect(),
    })
}

pub fn cmd_fit(a: &FitArgs) -> Result<i32> {
    let (cfg, spec, controls, data) = prepare(&a.data, &a.est, a.ku)?;
    create_dir(&a.out)?;
    let mut fit = multistart_fit(&data, &spec, &controls)?;
    let (params, post) = canonical_labels(&data, &fit.params, &spec)?;
    fit.params = params;
    let bic_n = a.est.bic_n.resolve(&data);
    let report = build_report(&cfg, &spec, &controls, &data, &fit, &post, bic_n)?;
    write_json(&report, &a.out.join("fit.json"))?;
    write_assignments(
        &data,
        &assign_students(&post),
        &assign_schools(&post),
        &a.out.join("student_classes.csv"),
        &a.out.join("school_types.csv"),
    )?;
    println!(
        "loglik {:.6}  n_par {}  BIC {:.4}  iterations {}  converged {}",
        report.loglik, report.n_par, report.bic, report.n_iter, report.converged
    );
    Ok(if fit.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<i32> {
    let first = a.ku.0[0];
    let (_, spec, controls, data) = prepare(&a.data, &a.est, Some(first))?;
    create_dir(&a.out)?;
    let bic_n = a.est.bic_n.resolve(&data);
    let res = sweep_school_types(&data, &spec, &a.ku.0, &controls, bic_n)?;
    for w in &res.warnings {
        eprintln!("warning: {w}");
    }
    println!("{:>5} {:>18} {:>6} {:>18}", "k_U", "loglik", "n_par", "BIC");
    for r in &res.rows {
        match (r.loglik, r.bic) {
            (Some(l), Some(b)) => println!("{:>5} {:>18.4} {:>6} {:>18.4}", r.n_types, l, r.n_par, b),
            _ => println!(
                "{:>5} {:>18} {:>6} {:>18}  {}",
                r.n_types,
                "failed",
                r.n_par,
                "-",
                r.error.as_deref().unwrap_or("")
            ),
        }
    }
    match res.chosen_n_types {
        Some(k) => println!("chosen k_U = {k}"),
        None => println!("no fit succeeded"),
    }
    let report = SweepReport {
        bic_n,
        rows: res.rows.iter().map(SweepRowReport::from).collect(),
        chosen_types: res.chosen_n_types,
        warnings: res.warnings.clone(),
    };
    write_json(&report, &a.out.join("sweep.json"))?;
    Ok(if res.chosen_n_types.is_none() {
        EXIT_INPUT
    } else if res.rows.iter().any(|r| r.loglik.is_some() && !r.converged) {
        EXIT_NOT_CONVERGED
    } else {
        EXIT_OK
    })
}

/// Configuration describing the files written by `simulate`.
pub fn simulated_config(design: &SimulationDesign) -> ModelConfig {
    let spec = &design.spec;
    let names = |prefix: &str, m: usize| (1..=m).map(|k| CovariateDecl::numeric(&format!("{prefix}{k}"))).collect();
    ModelConfig {
        classes: spec.n_classes,
        types: spec.n_types,
        parameterization: spec.parameterization,
        items: Some(spec.n_items()),
        dimensions: Some(spec.items.dims().iter().map(|d| d + 1).collect()),
        reference_items: Some(spec.items.reference_items().iter().map(|j| j + 1).collect()),
        student_covariates: names("x", spec.n_student_covariates),
        school_covariates: names("w", spec.n_school_covariates),
        controls: None,
    }
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<i32> {
    let mut design = match &a.design {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            toml::from_str::<SimulationDesign>(&text).map_err(|e| Error::Config {
                path: path.display().to_string(),
                message: e.message().to_string(),
            })?
        }
        None => default_design(1),
    };
    if let Some(s) = a.seed {
        design.seed = s;
    }
    let (data, labels) = generate_dataset(&design)?;
    create_dir(&a.out)?;
    let cfg = simulated_config(&design);
    write_dataset(&data, &cfg, &a.out.join("students.csv"), &a.out.join("schools.csv"))?;
    let path = a.out.join("model.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| io_error(&path, e))?;
    let truth = TruthFile {
        seed: design.seed,
        spec: design.spec.clone(),
        params: design.truth.clone(),
        school_types: labels.types.iter().map(|u| u + 1).collect(),
        student_classes: labels
            .classes
            .iter()
            .map(|g| g.iter().map(|v| v + 1).collect())
            .collect(),
    };
    write_json(&truth, &a.out.join("truth.json"))?;
    println!(
        "wrote {} schools and {} students to {}",
        data.n_groups(),
        data.n_students(),
        a.out.display()
    );
    Ok(EXIT_OK)
}

pub fn cmd_classify(a: &ClassifyArgs) -> Result<i32> {
    let report: FitReport = read_json(&a.report)?;
    let cfg = ModelConfig::from_path(&a.data.config)?;
    let layout = cfg.model_spec()?;
    let spec = &report.spec;
    if layout.items != spec.items {
        return Err(Error::SpecMismatch(format!(
            "the report has {} items, the configuration {}",
            spec.n_items(),
            layout.n_items()
        )));
    }
    if layout.n_student_covariates != spec.n_student_covariates || layout.n_school_covariates != spec.n_school_covariates {
        return Err(Error::SpecMismatch("covariate columns differ".into()));
    }
    report.params.check(spec)?;
    let data = load_dataset(&a.data.students, &a.data.schools, &cfg)?;
    let post = e_step(&data, &report.params, spec)?;
    create_dir(&a.out)?;
    write_assignments(
        &data,
        &assign_students(&post),
        &assign_schools(&post),
        &a.out.join("student_classes.csv"),
        &a.out.join("school_types.csv"),
    )?;
    Ok(EXIT_OK)
}
