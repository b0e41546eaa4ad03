//! Command-line front end: subcommands, TOML configuration, the formula
//! mini-language, and text/JSON reports.
//!
//! Exit codes: 0 on success, 2 on configuration or validation errors, 3 on
//! numerical failures.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::chibarsq::{draw_sample, estimate_weights, exact_weights, WeightEstimate};
use crate::cone::Cone;
use crate::data::{load_csv, CategoricalSpec, ColumnRoles, Dataset, Term};
use crate::engine::{
    parse_fit_summary, run_coverage_study, var_comp_test, BlockSummary, CoverageConfig, CoverageResult, FimMode, FitSummary, FixedSummary, PvalMode, TestInput,
    TestOptions, TestResult,
};
use crate::error::{Error, Result};
use crate::fim::load_fim;
use crate::lmm::{fit_ml, FitOptions, LmmSpec};
use crate::structure::CovarianceLayout;

#[derive(Parser, Debug)]
#[command(
    name = "conetest",
    version,
    about = "Likelihood ratio tests for variance components in mixed-effects models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Fit two nested mixed models from a dataset and test the variance
    /// components dropped by the null model
    Test(TestArgs),
    /// Run the test on two fit-summary JSON files from an external fitter
    TestSummary(SummaryArgs),
    /// Estimate chi-bar-square mixture weights for a declared structure and
    /// an information matrix file
    Weights(WeightsArgs),
    /// Simulation study: empirical coverage of Wald intervals per
    /// information-matrix estimate
    Coverage(CoverageArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// p-value computation mode
    #[arg(long, value_enum)]
    pval: Option<PvalArg>,
    /// information matrix source: "extract", "compute", or a file path
    #[arg(long)]
    fim: Option<String>,
    /// Monte Carlo sample size for weight estimation
    #[arg(long = "M")]
    m: Option<usize>,
    /// bootstrap sample size for computed information matrices
    #[arg(long = "B")]
    b: Option<usize>,
    /// random seed (falls back to CONETEST_SEED, then 0)
    #[arg(long)]
    seed: Option<u64>,
    /// worker threads for Monte Carlo and bootstrap
    #[arg(long)]
    workers: Option<usize>,
    /// report format
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Args, Debug)]
struct TestArgs {
    /// TOML configuration with data and model declarations
    #[arg(long)]
    config: PathBuf,
    /// dataset path, overriding the configuration file
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct SummaryArgs {
    /// fit summary of the alternative model
    #[arg(long)]
    m1: PathBuf,
    /// fit summary of the null model
    #[arg(long)]
    m0: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct WeightsArgs {
    /// TOML configuration declaring the tested structure
    #[arg(long)]
    config: PathBuf,
    /// information matrix file (required unless the config embeds one)
    #[arg(long)]
    fim: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct CoverageArgs {
    /// TOML configuration of the simulation study
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum PvalArg {
    Bounds,
    Approx,
    Both,
}

impl From<PvalArg> for PvalMode {
    fn from(p: PvalArg) -> PvalMode {
        match p {
            PvalArg::Bounds => PvalMode::Bounds,
            PvalArg::Approx => PvalMode::Approx,
            PvalArg::Both => PvalMode::Both,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum FormatArg {
    Text,
    Json,
}

// ---------------------------------------------------------------------------
// configuration file

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    data: Option<DataConfig>,
    m1: Option<ModelConfig>,
    m0: Option<ModelConfig>,
    options: Option<OptionsConfig>,
    structure: Option<StructureConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataConfig {
    path: String,
    group: String,
    response: String,
    #[serde(default)]
    categorical: Vec<CategoricalConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CategoricalConfig {
    column: String,
    reference: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelConfig {
    fixed: String,
    /// e.g. "1 + age | Subject"; absent means no random effects
    random: Option<String>,
    gamma: Option<GammaConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum GammaConfig {
    /// "full" or "diag"
    Named(String),
    /// explicit block sizes
    Blocks(Vec<usize>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptionsConfig {
    #[serde(rename = "M")]
    m: Option<usize>,
    #[serde(rename = "B")]
    b: Option<usize>,
    seed: Option<u64>,
    pval: Option<String>,
    fim: Option<String>,
    workers: Option<usize>,
    format: Option<String>,
}

/// Structure declaration for the `weights` subcommand; same block schema as
/// the fit-summary files.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StructureConfig {
    fixed_count: usize,
    #[serde(default)]
    tested_fixed: Vec<usize>,
    blocks: Vec<BlockSummary>,
    residual_param_count: usize,
}

fn read_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// formula mini-language

/// A term as written in a formula, before categorical expansion.
#[derive(Debug, Clone, PartialEq, Eq)]
enum RawTerm {
    Intercept,
    Name(String),
    Interaction(String, String),
}

fn parse_formula(src: &str) -> Result<Vec<RawTerm>> {
    let mut terms = Vec::new();
    for piece in src.split('+') {
        let piece = piece.trim();
        if piece.is_empty() {
            return Err(Error::Config(format!("empty term in formula '{src}'")));
        }
        let term = if piece == "1" {
            RawTerm::Intercept
        } else if let Some((a, b)) = piece.split_once(':') {
            let (a, b) = (a.trim(), b.trim());
            if a.is_empty() || b.is_empty() {
                return Err(Error::Config(format!("malformed interaction '{piece}'")));
            }
            RawTerm::Interaction(a.to_string(), b.to_string())
        } else if piece.contains(char::is_whitespace) {
            return Err(Error::Config(format!("malformed term '{piece}'")));
        } else {
            RawTerm::Name(piece.to_string())
        };
        if terms.contains(&term) {
            return Err(Error::Config(format!("duplicate term '{piece}' in formula")));
        }
        terms.push(term);
    }
    Ok(terms)
}

/// "1 + age | Subject" -> (terms, grouping column)
fn parse_random_formula(src: &str) -> Result<(Vec<RawTerm>, String)> {
    let (lhs, group) = src
        .split_once('|')
        .ok_or_else(|| Error::Config(format!("random formula '{src}' lacks '| group'")))?;
    let group = group.trim();
    if group.is_empty() {
        return Err(Error::Config(format!("random formula '{src}' lacks a grouping column")));
    }
    Ok((parse_formula(lhs.trim())?, group.to_string()))
}

/// column names a raw term references
fn raw_names(term: &RawTerm) -> Vec<&str> {
    match term {
        RawTerm::Intercept => vec![],
        RawTerm::Name(n) => vec![n.as_str()],
        RawTerm::Interaction(a, b) => vec![a.as_str(), b.as_str()],
    }
}

/// Expand one formula name against the loaded dataset: either a plain column
/// or all indicator columns of a categorical (`name=level`).
fn expand_name(ds: &Dataset, name: &str) -> Result<Vec<String>> {
    if ds.column_index(name).is_some() {
        return Ok(vec![name.to_string()]);
    }
    let prefix = format!("{name}=");
    let hits: Vec<String> = ds
        .column_names
        .iter()
        .filter(|c| c.starts_with(&prefix))
        .cloned()
        .collect();
    if hits.is_empty() {
        return Err(Error::Config(format!("formula references unknown column '{name}'")));
    }
    Ok(hits)
}

fn expand_terms(ds: &Dataset, raw: &[RawTerm]) -> Result<Vec<Term>> {
    let mut out = Vec::new();
    for t in raw {
        match t {
            RawTerm::Intercept => out.push(Term::Intercept),
            RawTerm::Name(n) => {
                for c in expand_name(ds, n)? {
                    out.push(Term::Column(c));
                }
            }
            RawTerm::Interaction(a, b) => {
                for ca in expand_name(ds, a)? {
                    for cb in expand_name(ds, b)? {
                        out.push(Term::Interaction(ca.clone(), cb.clone()));
                    }
                }
            }
        }
    }
    Ok(out)
}

fn gamma_layout(gamma: &Option<GammaConfig>, p: usize) -> Result<CovarianceLayout> {
    let blocks = match gamma {
        None => vec![p],
        Some(GammaConfig::Named(name)) => match name.as_str() {
            "full" => vec![p],
            "diag" => vec![1; p],
            other => {
                return Err(Error::Config(format!(
                    "gamma must be \"full\", \"diag\" or a block list, got \"{other}\""
                )))
            }
        },
        Some(GammaConfig::Blocks(blocks)) => blocks.clone(),
    };
    let layout = CovarianceLayout::new(blocks)?;
    if layout.p() != p {
        return Err(Error::Config(format!(
            "covariance blocks cover {} random effects but the formula declares {p}",
            layout.p()
        )));
    }
    Ok(layout)
}

/// Build and fit one model declared in the configuration.
fn build_model(ds: &Dataset, mc: &ModelConfig, group: &str) -> Result<TestInput> {
    let fixed = expand_terms(ds, &parse_formula(&mc.fixed)?)?;
    let (random, layout) = match &mc.random {
        None => (Vec::new(), CovarianceLayout::new(vec![])?),
        Some(src) => {
            let (raw, g) = parse_random_formula(src)?;
            if g != group {
                return Err(Error::Config(format!(
                    "random formula groups by '{g}' but the data is grouped by '{group}'"
                )));
            }
            let terms = expand_terms(ds, &raw)?;
            let layout = gamma_layout(&mc.gamma, terms.len())?;
            (terms, layout)
        }
    };
    let spec = LmmSpec::from_dataset(ds, &fixed, &random, layout)?;
    let fit = fit_ml(&spec, &FitOptions::default())?;
    Ok(TestInput::fitted(spec, fit))
}

// ---------------------------------------------------------------------------
// option resolution

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OutputFormat {
    Text,
    Json,
}

fn parse_pval(s: &str) -> Result<PvalMode> {
    match s {
        "bounds" => Ok(PvalMode::Bounds),
        "approx" => Ok(PvalMode::Approx),
        "both" => Ok(PvalMode::Both),
        other => Err(Error::Config(format!(
            "pval must be bounds, approx or both, got '{other}'"
        ))),
    }
}

fn parse_fim_mode(s: &str) -> FimMode {
    match s {
        "extract" => FimMode::Extract,
        "compute" => FimMode::Compute,
        path => FimMode::File(PathBuf::from(path)),
    }
}

fn parse_format(s: &str) -> Result<OutputFormat> {
    match s {
        "text" => Ok(OutputFormat::Text),
        "json" => Ok(OutputFormat::Json),
        other => Err(Error::Config(format!("format must be text or json, got '{other}'"))),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("CONETEST_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("CONETEST_SEED is not an integer: '{v}'"))),
        Err(_) => Ok(None),
    }
}

/// CLI flags override configuration values, which override the defaults.
fn resolve_options(
    common: &CommonArgs,
    file: Option<&OptionsConfig>,
) -> Result<(TestOptions, OutputFormat)> {
    let mut opts = TestOptions::default();
    let mut format = OutputFormat::Text;
    if let Some(fc) = file {
        if let Some(m) = fc.m {
            opts.m = m;
        }
        if let Some(b) = fc.b {
            opts.b = b;
        }
        if let Some(seed) = fc.seed {
            opts.seed = seed;
        }
        if let Some(p) = &fc.pval {
            opts.pval_mode = parse_pval(p)?;
        }
        if let Some(f) = &fc.fim {
            opts.fim_mode = parse_fim_mode(f);
        }
        if let Some(w) = fc.workers {
            opts.workers = w;
        }
        if let Some(f) = &fc.format {
            format = parse_format(f)?;
        }
    }
    if let Some(p) = common.pval {
        opts.pval_mode = p.into();
    }
    if let Some(f) = &common.fim {
        opts.fim_mode = parse_fim_mode(f);
    }
    if let Some(m) = common.m {
        opts.m = m;
    }
    if let Some(b) = common.b {
        opts.b = b;
    }
    match (common.seed, env_seed()?) {
        (Some(s), _) => opts.seed = s,
        (None, Some(s)) => opts.seed = s,
        (None, None) => {}
    }
    if let Some(w) = common.workers {
        opts.workers = w;
    }
    if let Some(f) = common.format {
        format = match f {
            FormatArg::Text => OutputFormat::Text,
            FormatArg::Json => OutputFormat::Json,
        };
    }
    if opts.m == 0 {
        return Err(Error::Validation("Monte Carlo sample size M must be >= 1".into()));
    }
    if opts.workers == 0 {
        return Err(Error::Validation("workers must be >= 1".into()));
    }
    Ok((opts, format))
}

// ---------------------------------------------------------------------------
// number formatting (7 significant digits, mirroring the reference output)

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let s = s.trim_end_matches('0');
    s.trim_end_matches('.').to_string()
}

/// Format with 7 significant digits: fixed notation in a moderate range,
/// otherwise scientific with a two-digit exponent (e.g. "9.114967e-05").
pub fn fmt_sig7(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let e = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(6 - e);
    let r = (x * scale).round() / scale;
    // rounding may bump the exponent (9.9999996 -> 10)
    let e = r.abs().log10().floor() as i32;
    if (-4..7).contains(&e) {
        let dec = (6 - e).max(0) as usize;
        trim_zeros(format!("{r:.dec$}"))
    } else {
        let mant = r / 10f64.powi(e);
        let mant = trim_zeros(format!("{mant:.6}"));
        format!("{mant}e{}{:02}", if e < 0 { "-" } else { "+" }, e.abs())
    }
}

// ---------------------------------------------------------------------------
// reports

fn tested_sentence(desc: &str) -> String {
    let plural = desc.starts_with("variances")
        || desc.starts_with("covariance")
        || desc.contains("components");
    format!(
        "Testing that {desc} {} null",
        if plural { "are" } else { "is" }
    )
}

fn weights_line(w: &WeightEstimate) -> String {
    let parts: Vec<String> = w
        .weights
        .iter()
        .zip(&w.sd)
        .map(|(wi, sdi)| format!("{} ({})", fmt_sig7(*wi), fmt_sig7(*sdi)))
        .collect();
    format!("\tassociated weights (and sd): {}", parts.join(" "))
}

/// The standard text block for a test result.
pub fn render_text(r: &TestResult) -> String {
    let mut out = String::new();
    out.push_str("Variance components testing in mixed effects models\n");
    out.push_str(&tested_sentence(&r.tested_description));
    out.push_str("\n\n Likelihood ratio test statistic:\n");
    out.push_str(&format!("\tLRT =  {}\n", fmt_sig7(r.lrt)));
    out.push_str("\n Limiting distribution:\n");
    let dfs: Vec<String> = r.dims.dfs().iter().map(|d| d.to_string()).collect();
    out.push_str(&format!(
        "\tmixture of {} chi-bar-square distributions with degrees of freedom {}\n",
        r.dims.n_weights,
        dfs.join(" ")
    ));
    if let Some(w) = &r.weights {
        out.push_str(&weights_line(w));
        out.push('\n');
    }
    out.push_str("\n p-value of the test:\n");
    if let Some(p) = r.pvalues.from_weights {
        out.push_str(&format!("\tfrom estimated weights: {}\n", fmt_sig7(p)));
    }
    if let Some(p) = r.pvalues.from_sample {
        out.push_str(&format!("\tfrom random sample: {}\n", fmt_sig7(p)));
    }
    out.push_str(&format!(
        "\tbounds on p-value: lower  {} upper  {}\n",
        fmt_sig7(r.pvalues.lower_bound),
        fmt_sig7(r.pvalues.upper_bound)
    ));
    out
}

pub fn render_json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::Numerical(format!("report serialization failed: {e}")))
}

fn render_weights_text(w: &WeightEstimate) -> String {
    let dfs: Vec<String> = w.dfs.iter().map(|d| d.to_string()).collect();
    let mut out = String::new();
    out.push_str("Chi-bar-square mixture weights\n");
    out.push_str(&format!("\tdegrees of freedom: {}\n", dfs.join(" ")));
    out.push_str(&weights_line(w));
    out.push('\n');
    out.push_str(&format!(
        "\texact: {}\n",
        if w.exact { "yes" } else { "no (Monte Carlo)" }
    ));
    out
}

fn render_coverage_text(c: &CoverageResult) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "Empirical coverage of 95% confidence intervals ({} repetitions, {} failures)\n",
        c.repetitions, c.failures
    ));
    out.push_str("parameter");
    for row in &c.modes {
        out.push_str(&format!("\t{:?}", row.mode));
    }
    out.push('\n');
    for (k, name) in c.param_names.iter().enumerate() {
        out.push_str(name);
        for row in &c.modes {
            out.push_str(&format!("\t{}", fmt_sig7(row.coverage[k])));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// subcommand drivers

/// A completed run: report text plus warnings for standard error.
pub struct Rendered {
    pub stdout: String,
    pub warnings: Vec<String>,
}

fn run_test(args: &TestArgs) -> Result<Rendered> {
    let mut cfg = read_config(&args.config)?;
    let data = cfg
        .data
        .as_mut()
        .ok_or_else(|| Error::Config("configuration lacks a [data] section".into()))?;
    if let Some(p) = &args.data {
        data.path = p.display().to_string();
    }
    // dataset paths are relative to the configuration file
    let base = args.config.parent().unwrap_or(Path::new("."));
    let path = base.join(&data.path);
    let m1c = cfg
        .m1
        .as_ref()
        .ok_or_else(|| Error::Config("configuration lacks an [m1] section".into()))?;
    let m0c = cfg
        .m0
        .as_ref()
        .ok_or_else(|| Error::Config("configuration lacks an [m0] section".into()))?;

    // covariates: every plain (non-categorical) column any formula mentions
    let categorical: Vec<CategoricalSpec> = data
        .categorical
        .iter()
        .map(|c| CategoricalSpec {
            column: c.column.clone(),
            reference: c.reference.clone(),
        })
        .collect();
    let mut covariates: Vec<String> = Vec::new();
    for src in [&m1c.fixed, &m0c.fixed]
        .into_iter()
        .cloned()
        .chain(m1c.random.iter().map(|s| s.split('|').next().unwrap().to_string()))
        .chain(m0c.random.iter().map(|s| s.split('|').next().unwrap().to_string()))
    {
        for t in parse_formula(src.trim())? {
            for n in raw_names(&t) {
                let is_cat = categorical.iter().any(|c| c.column == n);
                if !is_cat && !covariates.iter().any(|c| c == n) {
                    covariates.push(n.to_string());
                }
            }
        }
    }
    let roles = ColumnRoles {
        group: data.group.clone(),
        response: data.response.clone(),
        covariates,
        categorical,
    };
    let ds = load_csv(&path, &roles)?;

    let m1 = build_model(&ds, m1c, &data.group)?;
    let m0 = build_model(&ds, m0c, &data.group)?;
    let (opts, format) = resolve_options(&args.common, cfg.options.as_ref())?;
    let result = var_comp_test(&m1, &m0, &opts)?;
    let stdout = match format {
        OutputFormat::Text => render_text(&result),
        OutputFormat::Json => render_json(&result)?,
    };
    Ok(Rendered {
        stdout,
        warnings: result.warnings.clone(),
    })
}

fn run_test_summary(args: &SummaryArgs) -> Result<Rendered> {
    let s1 = parse_fit_summary(&args.m1)?;
    let s0 = parse_fit_summary(&args.m0)?;
    let (opts, format) = resolve_options(&args.common, None)?;
    let result = var_comp_test(&TestInput::Summary(s1), &TestInput::Summary(s0), &opts)?;
    let stdout = match format {
        OutputFormat::Text => render_text(&result),
        OutputFormat::Json => render_json(&result)?,
    };
    Ok(Rendered {
        stdout,
        warnings: result.warnings.clone(),
    })
}

fn run_weights(args: &WeightsArgs) -> Result<Rendered> {
    let cfg = read_config(&args.config)?;
    let sc = cfg
        .structure
        .as_ref()
        .ok_or_else(|| Error::Config("configuration lacks a [structure] section".into()))?;
    // reuse the fit-summary structure plumbing
    let summary = FitSummary {
        loglik: 0.0,
        fixed: FixedSummary {
            count: sc.fixed_count,
            tested_indices: sc.tested_fixed.clone(),
        },
        blocks: sc.blocks.clone(),
        residual_param_count: sc.residual_param_count,
        theta: None,
        fim: None,
        fim_is_inverse: None,
        lrt_override: None,
    };
    let ts = summary.test_structure()?;
    let dims = ts.cone_dims();
    let cone = Cone::from_index_sets(dims.q, &ts.tested_index_sets());
    let (opts, format) = resolve_options(&args.common, cfg.options.as_ref())?;
    let est = load_fim(&args.fim, dims.q, false)?;
    let v = est.to_v()?;
    let mut warnings = Vec::new();
    let weights = match exact_weights(&cone, &dims) {
        Some(w) => w,
        None => {
            let sample = draw_sample(&cone, &v, opts.m, opts.seed, opts.workers)?;
            let w = estimate_weights(&sample, &dims)?;
            if w.suspicious() {
                warnings.push(format!(
                    "estimated weights {:?} fall outside [0, 1]; treat with caution",
                    w.weights
                ));
            }
            w
        }
    };
    let stdout = match format {
        OutputFormat::Text => render_weights_text(&weights),
        OutputFormat::Json => render_json(&weights)?,
    };
    Ok(Rendered { stdout, warnings })
}

fn run_coverage(args: &CoverageArgs) -> Result<Rendered> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut cfg: CoverageConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", args.config.display())))?;
    match (args.common.seed, env_seed()?) {
        (Some(s), _) => cfg.seed = s,
        (None, Some(s)) => cfg.seed = s,
        (None, None) => {}
    }
    if let Some(w) = args.common.workers {
        cfg.workers = w;
    }
    if let Some(b) = args.common.b {
        cfg.b = b;
    }
    let format = match args.common.format {
        Some(FormatArg::Json) => OutputFormat::Json,
        _ => OutputFormat::Text,
    };
    let result = run_coverage_study(&cfg)?;
    let stdout = match format {
        OutputFormat::Text => render_coverage_text(&result),
        OutputFormat::Json => render_json(&result)?,
    };
    Ok(Rendered {
        stdout,
        warnings: Vec::new(),
    })
}

fn dispatch(cli: &Cli) -> Result<Rendered> {
    match &cli.cmd {
        Cmd::Test(a) => run_test(a),
        Cmd::TestSummary(a) => run_test_summary(a),
        Cmd::Weights(a) => run_weights(a),
        Cmd::Coverage(a) => run_coverage(a),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Parse(_)
        | Error::Validation(_)
        | Error::NotNested(_)
        | Error::Io(_) => 2,
        Error::Eval(_) | Error::Numerical(_) => 3,
    }
}

/// Entry point used by the binary: parse arguments, run, print, return the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version with success exit codes
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(rendered) => {
            for w in &rendered.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", rendered.stdout);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
