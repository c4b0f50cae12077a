//! Command-line interface. Exit codes: 0 success, 1 usage error, 2 data
//! error, 3 numerical failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use crate::analysis::{
    agreement_stats, concentration_ellipse, majority_vote, pca_biplot, subsample_annotations, CorrelationReport,
    SubsamplePlan,
};
use crate::em::{fit_with_progress, EmConfig, MStep};
use crate::error::{Error, Result};
use crate::io::{
    fmt_f64, load_dataset, load_saved_fit, sha256_hex, write_dataset, write_outputs, write_reports, DatasetFormat,
    OutputDir, Reports, RunConfig, FORMAT_VERSION,
};
use crate::kernels::{clamp_events, moment_surface, GridRange};
use crate::model::{AnnotationDataset, ClassLabels, GaussianPrior};
use crate::sampler::{McmcConfig, PosteriorDraws, Proposal};
use crate::simulate::{sample_dataset, AnnotatorCount, SimSpec};

/// Environment variable with the default number of E-step workers.
pub const WORKERS_ENV: &str = "EGT_WORKERS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "egt",
    version,
    about = "Embedded ground truth estimation for multiply-annotated data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit embeddings and the empirical-Bayes prior by stochastic EM.
    Fit(FitArgs),
    /// Recompute correlation, PCA and ellipses from a saved fit.
    Analyze(AnalyzeArgs),
    /// Thin annotations into cohorts with fewer annotations per instance.
    Subsample(SubsampleArgs),
    /// Simulate a dataset from the generative model.
    Simulate(SimulateArgs),
    /// Tabulate the Beta mean and log-variance over a (z1, z2) grid.
    MomentSurface(SurfaceArgs),
    /// Parse and validate a dataset without fitting.
    Validate(InputArgs),
}

#[derive(Args, Debug, Clone)]
struct InputArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Wide)]
    format: FormatArg,
    /// Comma-separated class order (authoritative over file order).
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum FormatArg {
    Wide,
    Long,
}

impl From<FormatArg> for DatasetFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Wide => DatasetFormat::Wide,
            FormatArg::Long => DatasetFormat::Long,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ProposalArg {
    Isotropic,
    Laplace,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum MStepArg {
    PosteriorMeans,
    FullDraws,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Replay a saved run_config.json; other fit flags except --out,
    /// --workers and --quiet are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Wide)]
    format: FormatArg,
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    em_iters: usize,
    #[arg(long, default_value_t = 5)]
    min_iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    rel_tol: f64,
    /// Retained MCMC draws per chain.
    #[arg(long, default_value_t = 1000)]
    mcmc: usize,
    #[arg(long, default_value_t = 50)]
    burnin: usize,
    #[arg(long, default_value_t = 20)]
    thin: usize,
    #[arg(long, default_value_t = 0.5)]
    proposal_scale: f64,
    #[arg(long)]
    no_adapt: bool,
    /// Random-walk proposal shape.
    #[arg(long, value_enum, default_value_t = ProposalArg::Isotropic)]
    proposal: ProposalArg,
    /// Use burn-in 500 and thinning 5 (overrides --burnin/--thin).
    #[arg(long)]
    robust: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = MStepArg::PosteriorMeans)]
    m_step: MStepArg,
    /// Standardize embedding dimensions before PCA.
    #[arg(long)]
    pca_scale: bool,
    /// Biplot grouping: majority, gold or meta:<key>.
    #[arg(long, default_value = "majority")]
    group_by: String,
    #[arg(long, default_value_t = 0.95)]
    coverage: f64,
    /// Write per-instance draws to draws/<id>.csv.
    #[arg(long)]
    save_draws: bool,
    /// E-step worker threads (default from EGT_WORKERS, else all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dataset used for grouping; without it instances are grouped by the
    /// argmax class of their embedding.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Wide)]
    format: FormatArg,
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
    #[arg(long, default_value = "majority")]
    group_by: String,
    #[arg(long)]
    pca_scale: bool,
    #[arg(long, default_value_t = 0.95)]
    coverage: f64,
}

#[derive(Args, Debug)]
struct SubsampleArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Cohorts as n@J, e.g. 514@100,500@25,500@5.
    #[arg(long)]
    groups: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    n: usize,
    /// Number of classes (ignored when --labels is given).
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
    /// Annotations per instance: one value, or one per instance.
    #[arg(long, value_delimiter = ',', default_value = "50")]
    j: Vec<u32>,
    /// Prior mean (default zeros).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    mu: Option<Vec<f64>>,
    /// Prior covariance: a scalar variance, K diagonal entries, or K*K
    /// row-major entries.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    sigma: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the latent embeddings here.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SurfaceArgs {
    /// start:stop:step
    #[arg(long, allow_hyphen_values = true)]
    z1: String,
    #[arg(long, allow_hyphen_values = true)]
    z2: String,
    /// Output CSV (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Domain(_) | Error::Parse { .. } | Error::Io { .. } => EXIT_DATA,
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the
/// exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Subsample(a) => cmd_subsample(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::MomentSurface(a) => cmd_surface(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn labels_arg(labels: &Option<Vec<String>>) -> Result<Option<ClassLabels>> {
    labels.as_ref().map(|l| ClassLabels::new(l.clone())).transpose()
}

fn load(path: &Path, format: DatasetFormat, labels: Option<&ClassLabels>) -> Result<AnnotationDataset> {
    if format == DatasetFormat::Long && labels.is_none() {
        eprintln!("warning: class order taken from first appearance; pass --labels to fix it");
    }
    load_dataset(path, format, labels)
}

/// Per-instance group names for the biplot.
fn group_names(ds: &AnnotationDataset, group_by: &str) -> Result<Vec<String>> {
    let labels = ds.labels();
    ds.instances()
        .iter()
        .map(|inst| match group_by {
            "majority" => Ok(labels.name(majority_vote(&inst.votes).0).to_string()),
            "gold" => Ok(inst.gold.map_or_else(String::new, |g| labels.name(g).to_string())),
            other => match other.strip_prefix("meta:") {
                Some(key) => Ok(inst.metadata.get(key).cloned().unwrap_or_default()),
                None => Err(Error::domain(format!(
                    "unknown --group-by {other:?} (majority|gold|meta:<key>)"
                ))),
            },
        })
        .collect()
}

/// Correlation, PCA and per-group ellipses. Analyses that are undefined for
/// the data (constant columns, rank < 2, tiny groups) are skipped.
fn build_reports(
    embeddings: &DMatrix<f64>,
    draws: Option<&[&PosteriorDraws]>,
    labels: &ClassLabels,
    groups: Vec<String>,
    pca_scale: bool,
    coverage: f64,
) -> Reports {
    let correlation = match CorrelationReport::new(embeddings, draws, Some(labels)) {
        Ok(c) => Some(c),
        Err(e) => {
            eprintln!("warning: correlation skipped: {e}");
            None
        }
    };
    let pca = match pca_biplot(embeddings, Some(groups), pca_scale) {
        Ok(p) => Some(p),
        Err(e) => {
            eprintln!("warning: PCA skipped: {e}");
            None
        }
    };
    let mut ellipses = Vec::new();
    if let Some(p) = &pca {
        let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, g) in p.groups.as_ref().expect("groups set").iter().enumerate() {
            members.entry(g.as_str()).or_default().push(i);
        }
        for (g, idx) in members {
            if idx.len() < 3 {
                continue;
            }
            let pts = DMatrix::from_fn(idx.len(), 2, |r, c| p.scores[(idx[r], c)]);
            match concentration_ellipse(&pts, coverage, g) {
                Ok(e) => ellipses.push(e),
                Err(e) => eprintln!("warning: ellipse skipped: {e}"),
            }
        }
    }
    Reports {
        correlation,
        pca,
        ellipses,
        coverage,
    }
}

fn worker_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::domain(format!("{WORKERS_ENV}={v:?} is not a count"))),
        Err(_) => Ok(None),
    }
}

fn run_config_from_args(a: &FitArgs) -> Result<RunConfig> {
    let input = a.input.clone().expect("clap requires --input");
    let bytes = fs::read(&input).map_err(|source| Error::Io {
        path: input.display().to_string(),
        source,
    })?;
    let (burn_in, thin) = if a.robust {
        let r = McmcConfig::robust();
        (r.burn_in, r.thin)
    } else {
        (a.burnin, a.thin)
    };
    Ok(RunConfig {
        format_version: FORMAT_VERSION.to_string(),
        command: "fit".to_string(),
        input: input.display().to_string(),
        input_sha256: sha256_hex(&bytes),
        format: a.format.into(),
        labels: a.labels.clone(),
        em: EmConfig {
            max_iterations: a.em_iters,
            rel_tol: a.rel_tol,
            min_iterations: a.min_iters,
            m_step: match a.m_step {
                MStepArg::PosteriorMeans => MStep::PosteriorMeans,
                MStepArg::FullDraws => MStep::FullDraws,
            },
            mcmc: McmcConfig {
                n_retained: a.mcmc,
                burn_in,
                thin,
                proposal_scale: a.proposal_scale,
                adapt: !a.no_adapt,
                seed: a.seed,
                proposal: match a.proposal {
                    ProposalArg::Isotropic => Proposal::Isotropic,
                    ProposalArg::Laplace => Proposal::Laplace,
                },
            },
        },
        group_by: a.group_by.clone(),
        pca_scale: a.pca_scale,
        coverage: a.coverage,
        save_draws: a.save_draws,
    })
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let config = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.display().to_string(),
                source,
            })?;
            let rc: RunConfig =
                serde_json::from_str(&text).map_err(|e| Error::domain(format!("{}: {e}", path.display())))?;
            let bytes = fs::read(&rc.input).map_err(|source| Error::Io {
                path: rc.input.clone(),
                source,
            })?;
            if sha256_hex(&bytes) != rc.input_sha256 {
                return Err(Error::domain(format!("{} changed since the recorded run", rc.input)));
            }
            rc
        }
        None => run_config_from_args(&a)?,
    };
    let labels = labels_arg(&config.labels)?;
    let dataset = load(Path::new(&config.input), config.format, labels.as_ref())?;
    let groups = group_names(&dataset, &config.group_by)?;
    let quiet = a.quiet;
    let clamps_before = clamp_events();

    let fit_once = || {
        fit_with_progress(&dataset, &config.em, |r| {
            if !quiet {
                eprintln!(
                    "iter {:>3}  mu_change {:.3e}  sigma_change {:.3e}  |Sigma|_F {:.4}  accept {:.3}",
                    r.iteration, r.mu_change, r.sigma_change, r.sigma_frobenius, r.mean_acceptance
                );
            }
        })
    };
    let fit = match worker_count(a.workers)? {
        #[cfg(feature = "parallel")]
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::numerical(format!("thread pool: {e}")))?
            .install(fit_once)?,
        _ => fit_once()?,
    };
    if !quiet {
        let low = fit.pattern_draws.iter().filter(|d| d.acceptance_warning()).count();
        if low > 0 {
            eprintln!("warning: {low} chains with acceptance outside [0.05, 0.95]");
        }
        let clamps = clamp_events() - clamps_before;
        if clamps > 0 {
            eprintln!("warning: {clamps} embedding entries clamped to +-30");
        }
        eprintln!(
            "{} after {} iterations",
            if fit.converged { "converged" } else { "stopped" },
            fit.iterations_run
        );
    }
    let draws = fit.final_draws();
    let reports = build_reports(
        &fit.embedding_matrix(),
        Some(&draws),
        dataset.labels(),
        groups,
        config.pca_scale,
        config.coverage,
    );
    write_outputs(&dataset, &fit, &reports, &config, &a.out)?;
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let saved = load_saved_fit(&a.input)?;
    let groups = match &a.dataset {
        Some(path) => {
            let labels = labels_arg(&a.labels)?.unwrap_or_else(|| saved.labels.clone());
            let ds = load(path, a.format.into(), Some(&labels))?;
            let by_id: BTreeMap<&str, usize> = ds
                .instances()
                .iter()
                .enumerate()
                .map(|(i, x)| (x.id.as_str(), i))
                .collect();
            let names = group_names(&ds, &a.group_by)?;
            saved
                .ids
                .iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|&i| names[i].clone())
                        .ok_or_else(|| Error::domain(format!("instance {id:?} not in dataset")))
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => (0..saved.ids.len())
            .map(|i| {
                let row = saved.embeddings.row(i);
                saved.labels.name(row.iamax_full().1).to_string()
            })
            .collect(),
    };
    let draws: Option<Vec<&PosteriorDraws>> = saved.draws.as_ref().map(|d| d.iter().collect());
    let reports = build_reports(
        &saved.embeddings,
        draws.as_deref(),
        &saved.labels,
        groups,
        a.pca_scale,
        a.coverage,
    );
    let mut out = OutputDir::create(&a.out)?;
    write_reports(&mut out, &saved.ids, &saved.labels, &reports)?;
    out.finish()?;
    Ok(())
}

fn cmd_subsample(a: SubsampleArgs) -> Result<()> {
    let labels = labels_arg(&a.input.labels)?;
    let ds = load(&a.input.input, a.input.format.into(), labels.as_ref())?;
    let plan: SubsamplePlan = a.groups.parse()?;
    let out = subsample_annotations(&ds, &plan, a.seed)?;
    write_dataset(&out, &a.out)
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let labels = labels_arg(&a.labels)?;
    let k = labels.as_ref().map_or(a.k, ClassLabels::len);
    let mu = a.mu.clone().unwrap_or_else(|| vec![0.0; k]);
    if mu.len() != k {
        return Err(Error::domain(format!("--mu has {} entries for {k} classes", mu.len())));
    }
    let sigma = match a.sigma.len() {
        1 => DMatrix::from_diagonal_element(k, k, a.sigma[0]),
        n if n == k => DMatrix::from_diagonal(&nalgebra::DVector::from_vec(a.sigma.clone())),
        n if n == k * k => DMatrix::from_row_slice(k, k, &a.sigma),
        n => {
            return Err(Error::domain(format!(
                "--sigma has {n} entries; expected 1, {k} or {}",
                k * k
            )))
        }
    };
    let annotators = match a.j.as_slice() {
        [j] => AnnotatorCount::Fixed(*j),
        js => AnnotatorCount::PerInstance(js.to_vec()),
    };
    let spec = SimSpec {
        n: a.n,
        annotators,
        prior: GaussianPrior::new(mu, sigma)?,
        labels,
        seed: a.seed,
    };
    let (ds, truth) = sample_dataset(&spec)?;
    write_dataset(&ds, &a.out)?;
    if let Some(path) = &a.truth {
        let mut text = String::from("instance_id");
        for c in ds.labels().names() {
            text.push_str(&format!(",z_{c}"));
        }
        text.push('\n');
        for (i, inst) in ds.instances().iter().enumerate() {
            text.push_str(&inst.id);
            for v in truth.row(i).iter() {
                text.push(',');
                text.push_str(&fmt_f64(*v));
            }
            text.push('\n');
        }
        fs::write(path, text).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

fn cmd_surface(a: SurfaceArgs) -> Result<()> {
    let z1: GridRange = a.z1.parse()?;
    let z2: GridRange = a.z2.parse()?;
    let rows = moment_surface(&z1, &z2)?;
    let mut text = String::from("z1,z2,mean,log_variance\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(r.z1),
            fmt_f64(r.z2),
            fmt_f64(r.mean),
            fmt_f64(r.log_variance)
        ));
    }
    match &a.out {
        Some(path) => fs::write(path, text).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        }),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|source| Error::Io {
                path: "<stdout>".to_string(),
                source,
            }),
    }
}

fn cmd_validate(a: InputArgs) -> Result<()> {
    let labels = labels_arg(&a.labels)?;
    let ds = load(&a.input, a.format.into(), labels.as_ref())?;
    let stats = agreement_stats(&ds);
    let js: Vec<u32> = ds.instances().iter().map(|i| i.votes.total()).collect();
    println!("instances: {}", ds.len());
    println!("classes: {} ({})", ds.k(), ds.labels().names().join(", "));
    println!(
        "annotations per instance: {}..{}",
        js.iter().min().expect("non-empty"),
        js.iter().max().expect("non-empty")
    );
    println!("distinct annotation patterns: {}", stats.distinct_patterns);
    println!("full agreement: {:.4}", stats.full_agreement_fraction);
    for (k, c) in stats.majority_counts.iter().enumerate() {
        println!("majority {}: {c}", ds.labels().name(k));
    }
    Ok(())
}
