//! `contrastive`: reproducible experiment runs over analytic and learned score models.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure,
//! 3 acceptance failure (`verify` only).

mod artifacts;
mod commands;
mod config;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use contrastive_core::world::PromptId;
use serde::Serialize;

use artifacts::RunDir;
use commands::Outcome;
use config::{
    DensityConfig, DivergenceKind, EditConfig, ExpertRunConfig, MethodKind, SampleConfig, SamplerKind, SearchKind,
    SweepConfig, TerminalKind, VerifyRunConfig,
};

#[derive(Parser)]
#[command(
    name = "contrastive",
    version,
    about = "Contrastive guidance experiments on Gaussian-mixture worlds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the acceptance checks and write a pass/fail table.
    Verify(VerifyArgs),
    /// Sample with guidance and compare against the unguided base under shared noise.
    Sample(SampleArgs),
    /// Sweep the contrastive weight λ with shared noise.
    Sweep(SweepArgs),
    /// Edit source samples toward a target prompt (SDEdit or cycle-consistent).
    Edit(EditArgs),
    /// Guide a domain expert with a generalist's contrastive term.
    Expert(ExpertArgs),
    /// Compare probability-flow log-densities with closed forms.
    Density(DensityArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; flags override its fields. A run's `config.json` replays it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory (default `runs/<command>-seed<seed>`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SamplingArgs {
    /// Preset name or world JSON file.
    #[arg(long)]
    world: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    sampler: Option<SamplerKind>,
    /// DDIM stochasticity in [0, 1].
    #[arg(long)]
    eta: Option<f64>,
    /// Samples per configuration.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Subset of criteria to run, e.g. `1,2,4`.
    #[arg(long, value_delimiter = ',')]
    criteria: Option<Vec<u32>>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Base prompt (`a+b`; `empty` for ∅).
    #[arg(long)]
    prompt: Option<PromptId>,
    /// CFG strength on the base prompt.
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long)]
    positive: Option<PromptId>,
    #[arg(long)]
    negative: Option<PromptId>,
    /// Constant contrastive weight.
    #[arg(long, allow_negative_numbers = true, conflicts_with = "gamma")]
    lambda: Option<f64>,
    /// Use the exact classifier weight with this temperature instead of a constant λ.
    #[arg(long)]
    gamma: Option<f64>,
    /// Drop the contrastive term and sample the base alone.
    #[arg(long)]
    no_contrast: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    prompt: Option<PromptId>,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long)]
    positive: Option<PromptId>,
    #[arg(long)]
    negative: Option<PromptId>,
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    lambdas: Option<Vec<f64>>,
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    world: Option<String>,
    #[arg(long, value_enum)]
    method: Option<MethodKind>,
    /// Contrastive weight (default 6 for cycle, 10 for sdedit).
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Encode time as a fraction of T.
    #[arg(long)]
    t_e: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    source: Option<PromptId>,
    #[arg(long)]
    target: Option<PromptId>,
    /// Number of edit tasks.
    #[arg(long)]
    n: Option<usize>,
    /// Fixed source point, e.g. `-1,0`.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    x0: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    search: Option<SearchKind>,
    /// Trials per grid point when searching.
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Args)]
struct ExpertArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    /// Strength of the CFG-positive and negative baselines.
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long)]
    domain: Option<PromptId>,
    #[arg(long)]
    positive: Option<PromptId>,
    #[arg(long)]
    negative: Option<PromptId>,
    /// Use exact scores instead of trained networks.
    #[arg(long)]
    analytic: bool,
    #[arg(long)]
    generalist_budget: Option<usize>,
    #[arg(long)]
    expert_budget: Option<usize>,
}

#[derive(Args)]
struct DensityArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    world: Option<String>,
    #[arg(long)]
    prompt: Option<PromptId>,
    #[arg(long)]
    steps: Option<usize>,
    /// Number of evaluation points.
    #[arg(long)]
    n: Option<usize>,
    /// Fixed evaluation time (stratified over (0, 1] otherwise).
    #[arg(long)]
    t: Option<f64>,
    #[arg(long, value_enum)]
    terminal: Option<TerminalKind>,
    #[arg(long, value_enum)]
    divergence: Option<DivergenceKind>,
    #[arg(long)]
    probes: Option<usize>,
}

macro_rules! set {
    ($($field:expr => $flag:expr),* $(,)?) => {
        $(if let Some(v) = $flag {
            $field = v;
        })*
    };
}

fn apply_sampling(
    s: SamplingArgs,
    world: &mut String,
    steps: &mut usize,
    sampler: &mut SamplerKind,
    eta: &mut f64,
    n: &mut usize,
) {
    set!(*world => s.world, *steps => s.steps, *sampler => s.sampler, *eta => s.eta, *n => s.n);
}

fn out_dir(run: &RunArgs, command: &str, seed: u64) -> PathBuf {
    run.out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(format!("{command}-seed{seed}")))
}

/// Echo the resolved config, then run the command body.
fn execute<C: Serialize>(
    command: &str,
    run: &RunArgs,
    cfg: &C,
    seed: u64,
    body: impl FnOnce(&C, &mut RunDir) -> Result<Outcome>,
) -> Result<Outcome> {
    let mut dir = RunDir::create(&out_dir(run, command, seed))?;
    dir.echo(cfg, seed)?;
    let outcome = body(cfg, &mut dir)?;
    println!("wrote {} files to {}", dir.written().len(), dir.path().display());
    Ok(outcome)
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Verify(a) => {
            let mut c: VerifyRunConfig = config::load(a.run.config.as_deref())?;
            set!(c.seed => a.run.seed, c.criteria => a.criteria);
            c.resolve()?;
            execute("verify", &a.run, &c, c.seed, commands::verify)
        }
        Command::Sample(a) => {
            let mut c: SampleConfig = config::load(a.run.config.as_deref())?;
            set!(c.seed => a.run.seed, c.prompt => a.prompt, c.tau => a.tau);
            apply_sampling(
                a.sampling,
                &mut c.world,
                &mut c.steps,
                &mut c.sampler,
                &mut c.eta,
                &mut c.n,
            );
            if a.positive.is_some() {
                c.positive = a.positive;
            }
            if a.negative.is_some() {
                c.negative = a.negative;
            }
            if a.no_contrast {
                (c.positive, c.negative, c.lambda, c.gamma) = (None, None, None, None);
            }
            if a.lambda.is_some() {
                (c.lambda, c.gamma) = (a.lambda, None);
            }
            if a.gamma.is_some() {
                (c.lambda, c.gamma) = (None, a.gamma);
            }
            c.resolve()?;
            execute("sample", &a.run, &c, c.seed, commands::sample)
        }
        Command::Sweep(a) => {
            let mut c: SweepConfig = config::load(a.run.config.as_deref())?;
            set!(
                c.seed => a.run.seed,
                c.prompt => a.prompt,
                c.tau => a.tau,
                c.positive => a.positive,
                c.negative => a.negative,
                c.lambdas => a.lambdas,
            );
            apply_sampling(
                a.sampling,
                &mut c.world,
                &mut c.steps,
                &mut c.sampler,
                &mut c.eta,
                &mut c.n,
            );
            c.resolve()?;
            execute("sweep", &a.run, &c, c.seed, commands::sweep)
        }
        Command::Edit(a) => {
            let mut c: EditConfig = config::load(a.run.config.as_deref())?;
            if let Some(m) = a.method {
                // A new method gets its own default λ unless one is given.
                if m != c.method {
                    c.lambda = None;
                }
                c.method = m;
            }
            set!(
                c.seed => a.run.seed,
                c.world => a.world,
                c.tau => a.tau,
                c.t_e => a.t_e,
                c.eta => a.eta,
                c.source => a.source,
                c.target => a.target,
                c.n => a.n,
                c.search => a.search,
                c.trials => a.trials,
            );
            if a.lambda.is_some() {
                c.lambda = a.lambda;
            }
            if a.x0.is_some() {
                c.x0 = a.x0;
            }
            c.resolve()?;
            execute("edit", &a.run, &c, c.seed, commands::edit)
        }
        Command::Expert(a) => {
            let mut c: ExpertRunConfig = config::load(a.run.config.as_deref())?;
            let p = &mut c.pipeline;
            set!(
                p.seed => a.run.seed,
                p.lambda => a.lambda,
                p.tau => a.tau,
                p.domain => a.domain,
                p.positive => a.positive,
                p.negative => a.negative,
                p.generalist_budget => a.generalist_budget,
                p.expert_budget => a.expert_budget,
            );
            let (mut kind, eta) = SamplerKind::from_sampler(p.sampler);
            let mut eta = eta.unwrap_or(0.1);
            let mut world = c.world.clone();
            apply_sampling(a.sampling, &mut world, &mut p.steps, &mut kind, &mut eta, &mut p.n);
            p.sampler = kind.with_eta(eta);
            c.world = world;
            c.analytic |= a.analytic;
            c.resolve()?;
            execute("expert", &a.run, &c, c.pipeline.seed, commands::expert)
        }
        Command::Density(a) => {
            let mut c: DensityConfig = config::load(a.run.config.as_deref())?;
            set!(
                c.seed => a.run.seed,
                c.world => a.world,
                c.prompt => a.prompt,
                c.steps => a.steps,
                c.n => a.n,
                c.terminal => a.terminal,
                c.divergence => a.divergence,
                c.probes => a.probes,
            );
            if a.t.is_some() {
                c.t = a.t;
            }
            c.resolve()?;
            execute("density", &a.run, &c, c.seed, commands::density)
        }
    }
}

/// 2 when the root cause is a numeric failure inside the library, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<contrastive_core::Error>())
        .any(|e| e.is_numeric());
    if numeric {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::AcceptanceFailed) => ExitCode::from(3),
        Err(e) => {
            let code = exit_code(&e);
            let kind = if code == 2 { "numeric failure" } else { "error" };
            eprintln!("{kind}: {e:#}");
            ExitCode::from(code)
        }
    }
}
