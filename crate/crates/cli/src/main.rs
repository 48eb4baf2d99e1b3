use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use swedge::data_model::{load_trial_csv, validate, Severity};
use swedge::report::{render, Format};
use swedge::simulation::{run_study_with, SimulationConfig};
use swedge::{
    estimate_estimands_gee, extract_estimands, fit_gee, fit_lmm, lmm_g_estimands, lrt_fit,
    Adjustment, CorrelationKind, CovStructure, Error, EstimandReport, GeeOptions, Link, LmmOptions,
    Scale, StructureKind, SummaryKind, SummaryRequest, TreatmentEffectSpec, WorkingCorrelation,
};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_FIT: u8 = 4;

#[derive(Parser)]
#[command(
    name = "swedge",
    version,
    about = "Estimand-aligned analysis of stepped-wedge trials"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a working model to a trial CSV and report marginal estimands.
    Analyze(AnalyzeArgs),
    /// Run a Monte Carlo study from a TOML or JSON config.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Long-format CSV with columns cluster, period, id, y, z, covariates...
    #[arg(long)]
    data: PathBuf,
    /// lmm, lmm-g or gee.
    #[arg(long, default_value = "lmm")]
    estimator: String,
    /// constant, duration, period or saturated.
    #[arg(long, default_value = "constant")]
    structure: String,
    /// independence, exchangeable or nested. Defaults to exchangeable for
    /// mixed models and independence for GEE.
    #[arg(long)]
    correlation: Option<String>,
    /// identity, logit or log (GEE only).
    #[arg(long, default_value = "identity")]
    link: String,
    /// difference, rr or or.
    #[arg(long, default_value = "difference")]
    scale: String,
    /// Comma-separated covariates, `all`, or `none`.
    #[arg(long, default_value = "none")]
    adjust: String,
    /// Design adoption probabilities p1,...,pJ instead of the empirical ones.
    #[arg(long, value_delimiter = ',')]
    design_probs: Option<Vec<f64>>,
    /// Likelihood-ratio structure test `restricted:general` (mixed models).
    #[arg(long)]
    lrt: Option<String>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Format printed to stdout: table, json or csv.
    #[arg(long, default_value = "table")]
    format: String,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_validation() || matches!(e, Error::Io(_)) {
            EXIT_DATA
        } else if e.is_fit_failure() {
            EXIT_FIT
        } else {
            EXIT_USAGE
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Estimator {
    Lmm,
    LmmG,
    Gee,
}

fn parse_estimator(s: &str) -> Result<Estimator, Failure> {
    match s.to_ascii_lowercase().as_str() {
        "lmm" => Ok(Estimator::Lmm),
        "lmm-g" | "lmm_g" => Ok(Estimator::LmmG),
        "gee" => Ok(Estimator::Gee),
        other => Err(Failure::usage(format!(
            "unknown estimator `{other}` (expected lmm, lmm-g or gee)"
        ))),
    }
}

fn parse_adjust(s: &str) -> Adjustment {
    match s.trim().to_ascii_lowercase().as_str() {
        "none" | "" => Adjustment::None,
        "all" => Adjustment::All,
        _ => Adjustment::Covariates(s.split(',').map(|c| c.trim().to_string()).collect()),
    }
}

fn parse_format(s: &str) -> Result<Format, Failure> {
    match s {
        "table" | "txt" => Ok(Format::Table),
        "json" => Ok(Format::Json),
        "csv" => Ok(Format::Csv),
        other => Err(Failure::usage(format!("unknown format `{other}`"))),
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

fn analyze(a: AnalyzeArgs) -> Result<(), Failure> {
    let mut estimator = parse_estimator(&a.estimator)?;
    let structure = StructureKind::parse(&a.structure)?;
    let scale = Scale::parse(&a.scale)?;
    let link = Link::parse(&a.link)?;
    let format = parse_format(&a.format)?;
    if scale.is_ratio() && matches!(structure, StructureKind::Constant | StructureKind::Duration) {
        return Err(Failure::usage(format!(
            "--scale {} needs --structure period or saturated; ratio estimands are not defined for the {} structure",
            a.scale,
            structure.name()
        )));
    }
    if estimator != Estimator::Gee && link != Link::Identity {
        return Err(Failure::usage("--link applies to --estimator gee only"));
    }
    if estimator == Estimator::Lmm && scale.is_ratio() {
        estimator = Estimator::LmmG;
    }
    let lrt = match &a.lrt {
        None => None,
        Some(s) => {
            if estimator == Estimator::Gee {
                return Err(Failure::usage("--lrt needs a mixed-model estimator"));
            }
            let (r, g) = s.split_once(':').ok_or_else(|| {
                Failure::usage("--lrt expects restricted:general, e.g. constant:duration")
            })?;
            Some((StructureKind::parse(r)?, StructureKind::parse(g)?))
        }
    };

    let mut data = load_trial_csv(&a.data, &Default::default())?;
    if let Some(p) = &a.design_probs {
        data = data.with_design_probabilities(p)?;
    }
    for d in validate(&data) {
        let tag = if d.severity == Severity::Error {
            "error"
        } else {
            "warning"
        };
        eprintln!("{tag}: {}", d.message);
    }
    data.ensure_fittable()?;

    let adjustment = parse_adjust(&a.adjust);
    let spec = TreatmentEffectSpec::new(structure, data.n_periods)?;
    let summaries: Vec<SummaryRequest> = SummaryKind::default_for(structure)
        .map(SummaryRequest::Fixed)
        .into_iter()
        .collect();
    let mut report: EstimandReport = match estimator {
        Estimator::Lmm | Estimator::LmmG => {
            let cov = CovStructure::parse(a.correlation.as_deref().unwrap_or("exchangeable"))?;
            let opts = LmmOptions {
                adjustment: adjustment.clone(),
                ..LmmOptions::default()
            };
            let fit = fit_lmm(&data, spec, cov, &opts)?;
            if estimator == Estimator::Lmm {
                extract_estimands(&fit, &summaries)?
            } else {
                lmm_g_estimands(&fit, scale, &summaries)?.report
            }
        }
        Estimator::Gee => {
            let kind = CorrelationKind::parse(a.correlation.as_deref().unwrap_or("independence"))?;
            let opts = GeeOptions {
                adjustment: adjustment.clone(),
                ..GeeOptions::default()
            };
            let fit = fit_gee(
                &data,
                spec,
                WorkingCorrelation::estimated(kind),
                link,
                &opts,
            )?;
            for w in &fit.warnings {
                eprintln!("warning: {w}");
            }
            if !fit.converged {
                return Err(Failure {
                    code: EXIT_FIT,
                    message: format!("GEE did not converge in {} iterations", fit.iterations),
                });
            }
            estimate_estimands_gee(&fit, scale, &summaries)?.report
        }
    };
    report.provenance.data_fingerprint = Some(data.fingerprint());
    if let Some((r, g)) = lrt {
        let cov = CovStructure::parse(a.correlation.as_deref().unwrap_or("exchangeable"))?;
        let opts = LmmOptions {
            adjustment,
            ..LmmOptions::default()
        };
        let (_, _, res) = lrt_fit(&data, r, g, cov, &opts)?;
        report.lrt = Some(res);
    }

    std::fs::create_dir_all(&a.out)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", a.out.display())))?;
    write(&a.out.join("report.json"), &render(&report, Format::Json))?;
    write(&a.out.join("report.csv"), &render(&report, Format::Csv))?;
    write(&a.out.join("report.txt"), &render(&report, Format::Table))?;
    print!("{}", render(&report, format));
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<(), Failure> {
    let cfg = SimulationConfig::load(&a.config)
        .map_err(|e| Failure::usage(format!("{}: {e}", a.config.display())))?
        .with_env_seed()?;
    eprintln!(
        "design {:?}, {} clusters, {} replicates, seed {}",
        cfg.design, cfg.clusters, cfg.replicates, cfg.seed
    );
    let step = (cfg.replicates / 10).max(1);
    let progress = move |done: usize, total: usize| {
        if done.is_multiple_of(step) || done == total {
            eprintln!("{done}/{total} replicates");
        }
    };
    let metrics = run_study_with(&cfg, a.threads, Some(&progress))?;
    for (model, msg) in &metrics.failures {
        eprintln!("warning: {model}: first failure: {msg}");
    }
    std::fs::create_dir_all(&a.out)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", a.out.display())))?;
    let csv = metrics.to_csv();
    write(&a.out.join("metrics.csv"), &csv)?;
    write(&a.out.join("metrics.json"), &metrics.to_json())?;
    print!("{csv}");
    if let Some(l) = metrics.lrt_csv() {
        write(&a.out.join("lrt.csv"), &l)?;
        print!("{l}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Simulate(a) => simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
