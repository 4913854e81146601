use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use bsplda::engine::evaluate;
use bsplda::io::{load_stats, write_data, write_labels};
use bsplda::{
    fit_stats, sample, FitConfig, FitOutput, GenSpec, ModelParams, PriorConfig, SplitMix64, SuffStats, TrainedModel,
    VPrior, Variant, WPrior,
};
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use crate::config::{parse_anneal, Config, ADAPT_KEYS, FIT_KEYS, SPEC_KEYS, TRAIN_KEYS};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Variational Bayes training and adaptation of simplified PLDA models.
#[derive(Debug, Parser)]
#[command(name = "bsplda", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from labelled vectors.
    Train(TrainArgs),
    /// Adapt a trained model to new data, using its posterior as the prior.
    Adapt(AdaptArgs),
    /// Sample a labelled dataset from a model or a random specification.
    Simulate(SimulateArgs),
    /// Print the lower bound of a model on a dataset.
    Elbo(ElboArgs),
}

/// Flags shared by `train` and `adapt`; each overrides its config key.
#[derive(Debug, Args)]
struct FitFlags {
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Annealing schedule `k1:n1,k2:n2,...`.
    #[arg(long)]
    anneal: Option<String>,
    #[arg(long)]
    hyperopt_every: Option<usize>,
    #[arg(long)]
    mindiv_every: Option<usize>,
    /// Write the per-iteration lower bound as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    ny: Option<usize>,
    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    /// Trained model whose posterior becomes the prior.
    #[arg(long)]
    prior: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Must match the prior model's precision posterior.
    #[arg(long)]
    variant: Option<String>,
    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["model", "spec"]))]
struct SimulateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Config with keys `d`, `ny`, `spec_seed` for random parameters.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    speakers: usize,
    #[arg(long)]
    per_speaker: usize,
    #[arg(long)]
    seed: u64,
    /// Writes `PREFIX.data` and `PREFIX.labels`.
    #[arg(long)]
    out: String,
}

#[derive(Debug, Args)]
struct ElboArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Adapt(a) => adapt(a),
        Command::Simulate(a) => simulate(a),
        Command::Elbo(a) => elbo(a),
    }
}

fn parse_variant(s: &str) -> Result<Variant> {
    Ok(s.parse::<Variant>()?)
}

fn fit_config(ny: usize, cfg: &Config, flags: &FitFlags) -> Result<FitConfig> {
    let mut c = FitConfig::new(ny);
    if let Some(n) = flags.iters.or(cfg.get("iters")?) {
        c.max_iterations = n;
    }
    if let Some(t) = flags.tol.or(cfg.get("tol")?) {
        c.elbo_rel_tol = t;
    }
    if let Some(s) = flags.seed.or(cfg.get("seed")?) {
        c.seed = s;
    }
    if let Some(a) = flags.anneal.clone().or(cfg.get("anneal")?) {
        c.annealing = parse_anneal(&a)?;
    }
    if let Some(k) = flags.hyperopt_every.or(cfg.get("hyperopt_every")?) {
        c.hyperopt_every = k;
    }
    if let Some(k) = flags.mindiv_every.or(cfg.get("mindiv_every")?) {
        c.mindiv_every = k;
    }
    Ok(c)
}

/// Broad prior for `variant` with the config's hyperparameter overrides.
fn train_prior(variant: Variant, d: usize, cfg: &Config) -> Result<PriorConfig> {
    let mut prior = PriorConfig::broad(variant, d)?;
    if let VPrior::Ard {
        a_alpha, b_alpha, beta, ..
    } = &mut prior.v_prior
    {
        if let Some(x) = cfg.get("a_alpha")? {
            *a_alpha = x;
        }
        if let Some(x) = cfg.get("b_alpha")? {
            *b_alpha = x;
        }
        if let Some(x) = cfg.get::<f64>("beta")? {
            beta.fill(x);
        }
    }
    let misplaced = |keys: &[&str]| -> Result<()> {
        match keys.iter().find(|k| cfg.contains(k)) {
            Some(k) => Err(CliError::input(format!("config key `{k}` does not apply to {variant}"))),
            None => Ok(()),
        }
    };
    match &mut prior.w_prior {
        WPrior::Wishart { psi0, nu } => {
            misplaced(&["a_w", "b_w"])?;
            if let Some(x) = cfg.get("nu")? {
                *nu = x;
            }
            if let Some(s) = cfg.get::<f64>("psi0_scale")? {
                *psi0 = DMatrix::identity(d, d) * s;
            }
        }
        WPrior::NonInformative => misplaced(&["a_w", "b_w", "nu", "psi0_scale"])?,
        WPrior::GammaDiagonal { a, b } => {
            misplaced(&["nu", "psi0_scale"])?;
            if let Some(x) = cfg.get("a_w")? {
                *a = x;
            }
            if let Some(x) = cfg.get::<f64>("b_w")? {
                b.fill(x);
            }
        }
        WPrior::GammaIsotropic { a, b } => {
            misplaced(&["nu", "psi0_scale"])?;
            if let Some(x) = cfg.get("a_w")? {
                *a = x;
            }
            if let Some(x) = cfg.get("b_w")? {
                *b = x;
            }
        }
    }
    prior.validate(d, None)?;
    Ok(prior)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = Config::load(&a.config, &[TRAIN_KEYS, FIT_KEYS])?;
    let variant = match a.variant.or(cfg.get("variant")?) {
        Some(v) => parse_variant(&v)?,
        None => return Err(CliError::input("no variant given (config key `variant` or --variant)")),
    };
    let ny = a
        .ny
        .or(cfg.get("ny")?)
        .ok_or_else(|| CliError::input("no latent dimension given (config key `ny` or --ny)"))?;
    let stats = load_stats(&a.data, &a.labels)?;
    if stats.count == 0.0 {
        return Err(CliError::input("training data is empty"));
    }
    let prior = train_prior(variant, stats.dim(), &cfg)?;
    let mut config = fit_config(ny, &cfg, &a.fit)?;
    config.whiten = cfg.get("whiten")?.unwrap_or(false);
    let out = fit_stats(&stats, &prior, &config)?;
    finish(&out, &a.out, a.fit.trace.as_deref())
}

fn adapt(a: AdaptArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => Config::load(p, &[ADAPT_KEYS, FIT_KEYS])?,
        None => Config::default(),
    };
    let source = TrainedModel::load(&a.prior)?;
    let target = a.variant.or(cfg.get("variant")?).map(|v| parse_variant(&v)).transpose()?;
    let prior = source.adaptation_prior(target)?;
    let stats = load_stats(&a.data, &a.labels)?;
    check_dim(source.dim(), stats.dim())?;
    let mut config = fit_config(source.ny(), &cfg, &a.fit)?;
    config.rotation = source.rotation.clone();
    let out = fit_stats(&stats, &prior, &config)?;
    finish(&out, &a.out, a.fit.trace.as_deref())
}

fn finish(out: &FitOutput, model_path: &Path, trace: Option<&Path>) -> Result<()> {
    TrainedModel::from_fit(out).save(model_path)?;
    if let Some(path) = trace {
        std::fs::write(path, trace_csv(out)).map_err(bsplda::Error::from)?;
    }
    let r = &out.report;
    let mut summary = format!(
        "{}: {} iterations, {}, lower bound {:.10e}",
        out.state.variant,
        r.iterations,
        if r.converged { "converged" } else { "iteration limit reached" },
        r.final_elbo().total
    );
    if let Some(k) = r.effective_rank {
        let _ = write!(summary, ", effective rank {k}");
    }
    eprintln!("{summary}");
    Ok(())
}

fn trace_csv(out: &FitOutput) -> String {
    let mut s = String::from("iteration,total");
    for name in bsplda::ElboBreakdown::TERM_NAMES {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for (t, e) in out.report.trace.iter().enumerate() {
        let _ = write!(s, "{},{:.16e}", t + 1, e.total);
        for v in e.terms() {
            let _ = write!(s, ",{v:.16e}");
        }
        s.push('\n');
    }
    s
}

fn check_dim(model: usize, data: usize) -> Result<()> {
    if model == data {
        Ok(())
    } else {
        Err(CliError::input(format!("model has dimension {model} but data has dimension {data}")))
    }
}

/// Random parameters: standard normal mean and loadings, noise covariance
/// `AAᵀ/d + I` with standard normal `A`.
fn spec_params(cfg: &Config) -> Result<ModelParams> {
    let need = |k: &str| CliError::input(format!("spec config lacks key `{k}`"));
    let d: usize = cfg.get("d")?.ok_or_else(|| need("d"))?;
    let ny: usize = cfg.get("ny")?.ok_or_else(|| need("ny"))?;
    let seed: u64 = cfg.get("spec_seed")?.unwrap_or(0);
    if d == 0 || ny == 0 {
        return Err(CliError::input("spec dimensions must be positive"));
    }
    let mut rng = SplitMix64::new(seed);
    let mu = rng.normal_vector(d);
    let v = DMatrix::from_fn(d, ny, |_, _| rng.next_normal());
    let a = DMatrix::from_fn(d, d, |_, _| rng.next_normal());
    let cov = &a * a.transpose() / d as f64 + DMatrix::identity(d, d);
    let w = cov
        .cholesky()
        .ok_or_else(|| bsplda::Error::NotPositiveDefinite("noise covariance".into()))?
        .inverse();
    Ok(ModelParams::new(mu, v, (&w + w.transpose()) * 0.5)?)
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let params = match (&a.model, &a.spec) {
        (Some(m), _) => TrainedModel::load(m)?.params,
        (None, Some(s)) => spec_params(&Config::load(s, &[SPEC_KEYS])?)?,
        (None, None) => unreachable!("clap enforces one source"),
    };
    if a.speakers == 0 || a.per_speaker == 0 {
        return Err(CliError::input("--speakers and --per-speaker must be positive"));
    }
    let s = sample(&GenSpec::uniform(params, a.speakers, a.per_speaker, a.seed))?;
    let create = |ext: &str| -> Result<BufWriter<File>> {
        let path = format!("{}.{ext}", a.out);
        let f = File::create(&path).map_err(|e| CliError::input(format!("cannot create {path}: {e}")))?;
        Ok(BufWriter::new(f))
    };
    write_data(create("data")?, s.dataset.vectors())?;
    write_labels(create("labels")?, s.dataset.ids(), &s.labels())?;
    Ok(())
}

fn elbo(a: ElboArgs) -> Result<()> {
    let model = TrainedModel::load(&a.model)?;
    let stats: SuffStats = load_stats(&a.data, &a.labels)?;
    check_dim(model.dim(), stats.dim())?;
    let (_, e) = evaluate(
        model.variant,
        &model.qv,
        &model.qw,
        model.qalpha.as_ref(),
        &stats,
        &model.prior,
        model.rotation.as_ref(),
    )?;
    println!("{e}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_the_prior() {
        let cfg = Config::parse("a_alpha = 2\nbeta = 3\nnu = 7\npsi0_scale = 0.5", &[TRAIN_KEYS]).unwrap();
        let p = train_prior(Variant::WishartInformative, 4, &cfg).unwrap();
        match (&p.v_prior, &p.w_prior) {
            (VPrior::Ard { a_alpha, beta, .. }, WPrior::Wishart { psi0, nu }) => {
                assert_eq!(*a_alpha, 2.0);
                assert!(beta.iter().all(|&b| b == 3.0));
                assert_eq!(*nu, 7.0);
                assert_eq!(psi0[(1, 1)], 0.5);
            }
            _ => panic!("wrong prior arms"),
        }
    }

    #[test]
    fn misplaced_keys_are_rejected() {
        let cfg = Config::parse("nu = 7", &[TRAIN_KEYS]).unwrap();
        assert!(train_prior(Variant::GammaDiagonal, 3, &cfg).is_err());
        let cfg = Config::parse("a_w = 2", &[TRAIN_KEYS]).unwrap();
        assert!(train_prior(Variant::WishartNonInformative, 3, &cfg).is_err());
    }

    #[test]
    fn spec_params_are_deterministic() {
        let cfg = Config::parse("d = 3\nny = 2\nspec_seed = 9", &[SPEC_KEYS]).unwrap();
        assert_eq!(spec_params(&cfg).unwrap(), spec_params(&cfg).unwrap());
    }

    #[test]
    fn numerical_errors_exit_three() {
        let e = CliError::from(bsplda::Error::NotPositiveDefinite("x".into()));
        assert_eq!(e.exit_code(), 3);
        assert_eq!(CliError::input("x").exit_code(), 2);
    }
}
