use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hwu_core::engine::PermutationConfig;
use hwu_core::quadform::{davies_pvalue, moment_match_pvalue, tail_pvalue, ChiSquareMixture, PValue};
use hwu_core::scan::{load_inputs, run_scan_with, KappaSource, LoadOptions, ResultWriter, ScanOptions};
use hwu_core::simgen::{
    power_study, BetaSpec, ErrorDist, KernelChoice, Method, PhenotypeKind, Scenario, SimulationConfig,
};
use hwu_core::weights::{SimilarityKind, WeightMode};

#[derive(Parser)]
#[command(name = "hwu", version, about = "Heterogeneity weighted U association testing")]
struct Cli {
    /// Log progress at info level (twice for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test every variant of a genotype file.
    Scan(ScanArgs),
    /// Estimate rejection rates on simulated data.
    Sim(SimArgs),
    /// Upper tail of a weighted sum of chi-square(1) variables.
    Pvalue(PvalueArgs),
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long)]
    geno: PathBuf,
    #[arg(long)]
    pheno: PathBuf,
    /// Adjustment covariates (an intercept is always included).
    #[arg(long)]
    covar: Option<PathBuf>,
    /// euclidean:<covfile> | crossprod:<covfile> | ibs:<genofile> | constant | file:<matrix>
    #[arg(long, default_value = "constant")]
    kappa: String,
    /// crossprod | match
    #[arg(long, default_value = "crossprod")]
    gsim: String,
    /// Comma-separated subset of hwu, nhwu, phwu.
    #[arg(long, default_value = "hwu")]
    mode: String,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also compute a permutation p-value with this many permutations.
    #[arg(long)]
    perm: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Default)]
struct SimArgs {
    /// key=value file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// two_pop | multi_pop | nonnormal | random_effect
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// binary | continuous
    #[arg(long)]
    kind: Option<String>,
    /// fixed:b1,b2,... | uniform:mu,sigma | kernel:mu,sigma
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    maf: Option<f64>,
    /// normal | t<df> | cauchy | mixture
    #[arg(long)]
    error: Option<String>,
    #[arg(long)]
    sigma_c: Option<f64>,
    #[arg(long)]
    confounding: Option<bool>,
    /// Kernel generating correlated effects and used by hwu: euclidean | crossprod
    #[arg(long)]
    kernel: Option<String>,
    /// Comma-separated: hwu, nhwu, phwu, glm, vcscore, hwu_mis
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Output TSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PvalueArgs {
    /// Mixture weights, comma-separated; negative values are allowed.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    lambdas: Vec<f64>,
    #[arg(long, allow_negative_numbers = true)]
    q: f64,
    /// auto (inversion with fallback) | davies | moment
    #[arg(long, default_value = "auto")]
    method: String,
}

fn parse_modes(s: &str) -> Result<Vec<WeightMode>> {
    s.split(',')
        .filter(|m| !m.trim().is_empty())
        .map(|m| m.parse::<WeightMode>().map_err(Into::into))
        .collect()
}

fn scan(args: ScanArgs) -> Result<()> {
    let kappa: KappaSource = args.kappa.parse()?;
    let similarity: SimilarityKind = args.gsim.parse()?;
    let modes = parse_modes(&args.mode)?;
    let permutation = args
        .perm
        .map(|b| PermutationConfig::new(b, args.seed))
        .transpose()?;
    let inputs = load_inputs(&LoadOptions {
        genotypes: args.geno,
        phenotypes: args.pheno,
        covariates: args.covar,
        kappa,
    })?;
    let c = inputs.counts;
    log::info!(
        "{} variants; {} samples analysed ({} genotyped, {} phenotyped, {} without phenotype); {} dosages imputed",
        c.variants,
        c.used,
        c.genotype_samples,
        c.phenotype_samples,
        c.missing_phenotype,
        c.imputed_dosages
    );
    let opts = ScanOptions {
        modes,
        similarity,
        permutation,
        threads: args.threads.max(1),
        ..ScanOptions::default()
    };
    let mut writer = ResultWriter::create(&args.out)?;
    run_scan_with(&inputs, &opts, |rec| writer.write(&rec))?;
    let s = writer.finish()?;
    eprintln!(
        "{} records written to {}: {} ok, {} moment-match fallback, {} skipped, {} failed",
        s.records,
        args.out.display(),
        s.ok,
        s.fallback,
        s.skipped,
        s.failed
    );
    Ok(())
}

fn read_config(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value", path.display(), i + 1);
        };
        out.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(out)
}

/// Fills unset flags from the config file.
fn merge_config(mut a: SimArgs) -> Result<SimArgs> {
    let Some(path) = a.config.clone() else {
        return Ok(a);
    };
    let mut cfg = read_config(&path)?;
    fn take<T: std::str::FromStr>(
        cfg: &mut HashMap<String, String>,
        key: &str,
        slot: &mut Option<T>,
    ) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = cfg.remove(key) {
            if slot.is_none() {
                *slot = Some(v.parse().map_err(|e| anyhow::anyhow!("config key {key}: {e}"))?);
            }
        }
        Ok(())
    }
    take(&mut cfg, "scenario", &mut a.scenario)?;
    take(&mut cfg, "n", &mut a.n)?;
    take(&mut cfg, "kind", &mut a.kind)?;
    take(&mut cfg, "beta", &mut a.beta)?;
    take(&mut cfg, "maf", &mut a.maf)?;
    take(&mut cfg, "error", &mut a.error)?;
    take(&mut cfg, "sigma_c", &mut a.sigma_c)?;
    take(&mut cfg, "confounding", &mut a.confounding)?;
    take(&mut cfg, "kernel", &mut a.kernel)?;
    take(&mut cfg, "methods", &mut a.methods)?;
    take(&mut cfg, "replicates", &mut a.replicates)?;
    take(&mut cfg, "alpha", &mut a.alpha)?;
    take(&mut cfg, "seed", &mut a.seed)?;
    take(&mut cfg, "threads", &mut a.threads)?;
    take(&mut cfg, "out", &mut a.out)?;
    if let Some(k) = cfg.keys().next() {
        bail!("{}: unknown key {k:?}", path.display());
    }
    Ok(a)
}

fn sim_config(a: &SimArgs) -> Result<SimulationConfig> {
    let scenario: Scenario = a.scenario.as_deref().unwrap_or("two_pop").parse()?;
    let kind: PhenotypeKind = a.kind.as_deref().unwrap_or("continuous").parse()?;
    let error: Option<ErrorDist> = a.error.as_deref().map(str::parse).transpose()?;
    let kernel: KernelChoice = a.kernel.as_deref().unwrap_or("euclidean").parse()?;
    let mut cfg = match scenario {
        Scenario::TwoPop => SimulationConfig::two_pop(kind, 0.0, 0.0),
        Scenario::MultiPop => SimulationConfig::multi_pop(kind, 0.0, 0.0),
        Scenario::NonNormal => {
            SimulationConfig::nonnormal(error.unwrap_or(ErrorDist::Cauchy), a.confounding.unwrap_or(false))
        }
        Scenario::RandomEffect => SimulationConfig::random_effect(kernel, 0.0, 0.0),
    };
    if let Some(b) = &a.beta {
        cfg.betas = b.parse::<BetaSpec>()?;
        if let (Scenario::NonNormal, BetaSpec::Fixed(v)) = (scenario, &cfg.betas) {
            if v.len() == 1 {
                cfg.betas = BetaSpec::Fixed(vec![v[0]; cfg.n_subpop]);
            }
        }
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(m) = a.maf {
        cfg.maf = m;
    }
    if let Some(e) = error {
        cfg.error_dist = e;
    }
    if let Some(s) = a.sigma_c {
        cfg.sigma_c = s;
    }
    if let Some(c) = a.confounding {
        cfg.confounding = c;
    }
    cfg.true_kernel = kernel;
    cfg.seed = a.seed.unwrap_or(1);
    cfg.validate()?;
    Ok(cfg)
}

fn sim(args: SimArgs) -> Result<()> {
    let a = merge_config(args)?;
    let cfg = sim_config(&a)?;
    let methods: Vec<Method> = a
        .methods
        .as_deref()
        .unwrap_or("hwu,nhwu,glm")
        .split(',')
        .filter(|m| !m.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    let replicates = a.replicates.unwrap_or(1000);
    let alpha = a.alpha.unwrap_or(0.05);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.threads.unwrap_or(0))
        .build()?;
    let est = pool.install(|| power_study(&methods, &cfg, replicates, alpha))?;

    let mut out = String::from("method\tscenario\tbeta_spec\trejection_rate\treplicates\tmc_stderr\n");
    for e in &est {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{}\t{:.6}\n",
            e.method, cfg.scenario, cfg.betas, e.rejection_rate, e.replicates, e.mc_stderr
        ));
    }
    match &a.out {
        Some(p) => fs::write(p, out).with_context(|| format!("writing {}", p.display()))?,
        None => io::stdout().write_all(out.as_bytes())?,
    }
    Ok(())
}

fn pvalue(args: PvalueArgs) -> Result<()> {
    let mix = ChiSquareMixture::new(args.lambdas)?;
    let p: PValue = match args.method.as_str() {
        "auto" => tail_pvalue(&mix, args.q)?,
        "davies" => davies_pvalue(&mix, args.q),
        "moment" => moment_match_pvalue(&mix, args.q)?,
        other => bail!("unknown method {other:?}"),
    };
    let fault = p.fault.map_or_else(|| "-".to_string(), |f| format!("{f:?}"));
    println!("{:.12e}\t{}\t{}", p.value, p.method, fault);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    let res = match cli.command {
        Command::Scan(a) => scan(a),
        Command::Sim(a) => sim(a),
        Command::Pvalue(a) => pvalue(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
