//! Subcommand bodies. Each takes a resolved config and a run directory.

use std::sync::Arc;

use anyhow::{bail, Context, Result};
use contrastive_core::analysis::{
    contrastive_likelihood_score, mean, rig_sweep_samples, sample_covariance, sample_mean, standard_error,
    DisplacementStats, MetricReport, SweepRow,
};
use contrastive_core::density::{log_density_ode, DivergenceMode, Terminal};
use contrastive_core::editing::{hyperparameter_search, EditMethod, EditTask};
use contrastive_core::guidance::{compose, GuidanceSpec, LambdaMode, Term, TimeSchedule};
use contrastive_core::pipeline::{
    off_concept_coordinates, run_expert_guidance, run_expert_guidance_analytic, Arm, ExpertReport, Orderings,
};
use contrastive_core::sampler::{derive_seed, rng_from_seed, sample_endpoints, standard_normal};
use contrastive_core::schedule::{perturb, NoiseSchedule, TimeGrid, T_EPS};
use contrastive_core::score::{ConditionalModel, PromptScore};
use contrastive_core::verify::{run_criterion, VerifyConfig, CRITERIA};
use contrastive_core::world::{AnalyticModel, PromptId, World};
use contrastive_core::Vector;
use serde::Serialize;

use crate::artifacts::{coord_names, num, RunDir};
use crate::config::{
    load_world, DensityConfig, DivergenceKind, EditConfig, ExpertRunConfig, SampleConfig, SweepConfig, TerminalKind,
    VerifyRunConfig,
};
use crate::svg::{bar_chart, histogram, line_plot, Curve};

const HIST_BINS: usize = 40;

/// Whether a run met its own pass criteria (only `verify` can fail).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Done,
    AcceptanceFailed,
}

fn analytic(world: &World, sched: NoiseSchedule) -> Arc<dyn ConditionalModel> {
    Arc::new(AnalyticModel::new(world.clone(), sched))
}

fn prepare_world(spec: &str, run: &mut RunDir) -> Result<World> {
    let world = load_world(spec)?;
    run.text("world.json", &(world.to_json()? + "\n"))?;
    Ok(world)
}

fn base_spec(prompt: &PromptId, tau: f64) -> GuidanceSpec {
    if tau == 1.0 {
        GuidanceSpec::conditional(prompt.clone())
    } else {
        GuidanceSpec::cfg(prompt.clone(), tau)
    }
}

fn lambda_mode(lambda: Option<f64>, gamma: Option<f64>) -> LambdaMode {
    match gamma {
        Some(g) => LambdaMode::Exact {
            gamma: TimeSchedule::Constant(g),
            prior_positive: 0.5,
            prior_negative: 0.5,
            ode_steps: 64,
        },
        None => lambda.unwrap_or(0.0).into(),
    }
}

fn coordinate(samples: &[Vector], k: usize) -> Vec<f64> {
    samples.iter().map(|v| v[k]).collect()
}

#[derive(Debug, Serialize)]
struct Summary {
    n: usize,
    mean: Vec<f64>,
    se: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

impl Summary {
    fn of(samples: &[Vector]) -> Self {
        let d = samples.first().map_or(0, |v| v.len());
        Self {
            n: samples.len(),
            mean: sample_mean(samples).iter().copied().collect(),
            se: (0..d).map(|k| standard_error(&coordinate(samples, k))).collect(),
            covariance: sample_covariance(samples)
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        }
    }
}

fn concept_scores(
    model: &dyn ConditionalModel,
    samples: &[Vector],
    positive: &PromptId,
    negative: &PromptId,
    seed: u64,
) -> Result<MetricReport> {
    let values = samples
        .iter()
        .map(|x| contrastive_likelihood_score(model, x, positive, negative))
        .collect::<contrastive_core::Result<Vec<f64>>>()?;
    Ok(MetricReport::mean_with_bootstrap("concept_score", &values, seed))
}

fn displacement_plot(run: &mut RunDir, title: &str, stats: &DisplacementStats) -> Result<()> {
    let labels = coord_names("x", stats.coord_mean.len());
    let err: Vec<f64> = stats.coord_se.iter().map(|s| 3.0 * s).collect();
    run.text(
        "displacement.svg",
        &bar_chart(
            title,
            "mean displacement (±3 SE)",
            &labels,
            &stats.coord_mean,
            Some(&err),
        ),
    )
}

#[derive(Serialize)]
struct SampleMetrics {
    sampler: String,
    guidance: GuidanceSpec,
    summary: Summary,
    baseline: Option<Summary>,
    displacement: Option<DisplacementStats>,
    concept_score: Option<MetricReport>,
    baseline_concept_score: Option<MetricReport>,
}

pub fn sample(cfg: &SampleConfig, run: &mut RunDir) -> Result<Outcome> {
    let sched = NoiseSchedule::default();
    let world = prepare_world(&cfg.world, run)?;
    let model = analytic(&world, sched);
    let base = base_spec(&cfg.prompt, cfg.tau);
    let spec = match (&cfg.positive, &cfg.negative) {
        (Some(p), Some(n)) => base.clone().with_term(Term::Contrastive {
            positive: p.clone(),
            negative: n.clone(),
            lambda: lambda_mode(cfg.lambda, cfg.gamma),
        }),
        _ => base.clone(),
    };
    let grid = TimeGrid::generation(cfg.steps)?;
    let sampler = cfg.sampler.with_eta(cfg.eta);
    let field = compose(&spec, model.clone(), None, sched)?;
    let guided = sample_endpoints(&field, &grid, &sched, sampler, cfg.n, cfg.seed).context("sampler: guided run")?;
    let baseline = if spec.terms.is_empty() {
        None
    } else {
        let base_field = compose(&base, model.clone(), None, sched)?;
        Some(sample_endpoints(&base_field, &grid, &sched, sampler, cfg.n, cfg.seed).context("sampler: base run")?)
    };

    let mut groups = vec![("guided".to_string(), guided.as_slice())];
    if let Some(b) = &baseline {
        groups.push(("base".to_string(), b.as_slice()));
    }
    run.samples("samples.csv", Some("arm"), &groups)?;

    let displacement = baseline
        .as_ref()
        .map(|b| DisplacementStats::from_pairs(b, &guided))
        .transpose()?;
    let (concept_score, baseline_concept_score) = match (&cfg.positive, &cfg.negative) {
        (Some(p), Some(n)) => (
            Some(concept_scores(model.as_ref(), &guided, p, n, cfg.seed)?),
            baseline
                .as_ref()
                .map(|b| concept_scores(model.as_ref(), b, p, n, cfg.seed))
                .transpose()?,
        ),
        _ => (None, None),
    };
    let metrics = SampleMetrics {
        sampler: sampler.name(),
        guidance: spec,
        summary: Summary::of(&guided),
        baseline: baseline.as_deref().map(Summary::of),
        displacement,
        concept_score,
        baseline_concept_score,
    };
    run.json("metrics.json", &metrics)?;

    for k in 0..world.dim() {
        let g = coordinate(&guided, k);
        let mut series = vec![("guided", g.as_slice())];
        let b = baseline.as_ref().map(|b| coordinate(b, k));
        if let Some(b) = &b {
            series.push(("base", b.as_slice()));
        }
        run.text(
            &format!("hist_x{k}.svg"),
            &histogram(
                &format!("endpoint coordinate x{k}"),
                &format!("x{k}"),
                &series,
                HIST_BINS,
            ),
        )?;
    }
    if let Some(d) = &metrics.displacement {
        displacement_plot(run, "guided − base, shared noise", d)?;
        println!("mean L2 displacement {:.4}", d.mean_l2);
    }
    println!("sampled {} endpoints, mean {:?}", cfg.n, metrics.summary.mean);
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct SweepMetrics {
    rows: Vec<SweepRow>,
    concept_coordinates: Vec<usize>,
    off_concept_coordinates: Vec<usize>,
    /// Per concept coordinate: strictly increasing mean in λ.
    monotone: Vec<bool>,
}

pub fn sweep(cfg: &SweepConfig, run: &mut RunDir) -> Result<Outcome> {
    let sched = NoiseSchedule::default();
    let world = prepare_world(&cfg.world, run)?;
    let model = analytic(&world, sched);
    let template = base_spec(&cfg.prompt, cfg.tau).with_contrastive(cfg.positive.clone(), cfg.negative.clone(), 0.0);
    let grid = TimeGrid::generation(cfg.steps)?;
    let results = rig_sweep_samples(
        &template,
        &cfg.lambdas,
        cfg.n,
        model,
        None,
        &grid,
        &sched,
        cfg.sampler.with_eta(cfg.eta),
        cfg.seed,
    )
    .context("analysis: λ sweep")?;
    let d = world.dim();
    let off = off_concept_coordinates(&world, &cfg.positive, &cfg.negative)?;
    let concept: Vec<usize> = (0..d).filter(|k| !off.contains(k)).collect();

    let mut header = vec!["lambda".to_string(), "n".to_string()];
    header.extend(coord_names("mean_x", d));
    header.extend(coord_names("se_x", d));
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|(r, _)| {
            let mut row = vec![num(r.lambda), r.n.to_string()];
            row.extend(r.mean.iter().chain(&r.se).map(|v| num(*v)));
            row
        })
        .collect();
    run.csv("sweep.csv", &header, &rows)?;
    let groups: Vec<(String, &[Vector])> = results.iter().map(|(r, s)| (num(r.lambda), s.as_slice())).collect();
    run.samples("samples.csv", Some("lambda"), &groups)?;

    let mut order: Vec<&SweepRow> = results.iter().map(|(r, _)| r).collect();
    order.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    let monotone = concept
        .iter()
        .map(|&k| order.windows(2).all(|w| w[1].mean[k] > w[0].mean[k]))
        .collect::<Vec<_>>();
    let xs: Vec<f64> = order.iter().map(|r| r.lambda).collect();
    let names = coord_names("x", d);
    let curves: Vec<Curve> = (0..d)
        .map(|k| Curve {
            name: &names[k],
            y: order.iter().map(|r| r.mean[k]).collect(),
            err: Some(order.iter().map(|r| 3.0 * r.se[k]).collect()),
        })
        .collect();
    run.text(
        "sweep.svg",
        &line_plot("endpoint mean vs λ (±3 SE)", "λ", "endpoint mean", &xs, &curves),
    )?;
    for r in &order {
        println!("λ = {:>6}: mean {:?}", r.lambda, r.mean);
    }
    run.json(
        "metrics.json",
        &SweepMetrics {
            rows: results.into_iter().map(|(r, _)| r).collect(),
            concept_coordinates: concept,
            off_concept_coordinates: off,
            monotone,
        },
    )?;
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct EditMetrics {
    method: EditMethod,
    lambda: f64,
    n: usize,
    selector: MetricReport,
    /// The same tasks and seeds with λ = 0; absent when λ is already 0.
    baseline_selector: Option<MetricReport>,
    /// Fraction of tasks where the guided edit beats the λ = 0 edit.
    win_rate: Option<f64>,
    mean_distance_sq: f64,
    displacement: DisplacementStats,
}

pub fn edit(cfg: &EditConfig, run: &mut RunDir) -> Result<Outcome> {
    let sched = NoiseSchedule::default();
    let world = prepare_world(&cfg.world, run)?;
    let model = analytic(&world, sched);
    let method: EditMethod = cfg.method.into();
    let lambda = cfg.lambda();
    let grid = cfg.grid();
    let trials = cfg.trials();
    let source = world.mixture(&cfg.source)?;
    let d = world.dim();

    let mut sources = Vec::with_capacity(cfg.n);
    let mut edited = Vec::with_capacity(cfg.n);
    let mut rows = Vec::with_capacity(cfg.n);
    let (mut selectors, mut baselines, mut distances) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..cfg.n {
        let task_seed = derive_seed(cfg.seed, i as u64);
        let x0 = match &cfg.x0 {
            Some(v) => Vector::from_vec(v.clone()),
            None => source.sample(&mut rng_from_seed(derive_seed(task_seed, 0))),
        };
        let mut task = EditTask::new(x0.clone(), cfg.source.clone(), cfg.target.clone(), cfg.t_e)
            .with_tau(cfg.tau)
            .with_lambda(lambda);
        task.eta = cfg.eta;
        let edit_seed = derive_seed(task_seed, 1);
        let report = hyperparameter_search(&task, method, &grid, trials, &model, &sched, edit_seed)
            .with_context(|| format!("editing: task {i}"))?;
        let best = report.best_row().clone();
        let baseline = if lambda != 0.0 {
            let base = task.clone().with_lambda(0.0);
            Some(
                hyperparameter_search(&base, method, &grid, trials, &model, &sched, edit_seed)
                    .with_context(|| format!("editing: task {i} at λ = 0"))?
                    .best_row()
                    .selector,
            )
        } else {
            None
        };
        let mut row = vec![i.to_string(), num(best.tau), num(best.t_e), num(best.selector)];
        row.push(baseline.map(num).unwrap_or_default());
        row.extend(x0.iter().chain(best.edited.iter()).map(|v| num(*v)));
        rows.push(row);
        selectors.push(best.selector);
        baselines.extend(baseline);
        distances.push(best.distance_sq);
        sources.push(x0);
        edited.push(best.edited);
    }
    let mut header: Vec<String> = ["task", "tau", "t_e", "selector", "baseline_selector"]
        .map(String::from)
        .to_vec();
    header.extend(coord_names("x0_", d));
    header.extend(coord_names("edited_", d));
    run.csv("edits.csv", &header, &rows)?;
    run.samples("samples.csv", None, &[("edited".into(), edited.as_slice())])?;

    let wins = (!baselines.is_empty())
        .then(|| selectors.iter().zip(&baselines).filter(|(s, b)| s > b).count() as f64 / baselines.len() as f64);
    let metrics = EditMetrics {
        method,
        lambda,
        n: cfg.n,
        selector: MetricReport::mean_with_bootstrap("selector", &selectors, cfg.seed),
        baseline_selector: (!baselines.is_empty())
            .then(|| MetricReport::mean_with_bootstrap("selector_lambda0", &baselines, cfg.seed)),
        win_rate: wins,
        mean_distance_sq: mean(&distances),
        displacement: DisplacementStats::from_pairs(&sources, &edited)?,
    };
    run.json("metrics.json", &metrics)?;

    let mut series = vec![("guided", selectors.as_slice())];
    if !baselines.is_empty() {
        series.push(("λ = 0", baselines.as_slice()));
    }
    run.text(
        "selector_hist.svg",
        &histogram("directional selector per task", "selector", &series, HIST_BINS),
    )?;
    displacement_plot(run, "edited − source", &metrics.displacement)?;
    println!(
        "{} edits with {:?}, λ = {lambda}: mean selector {:.4}{}",
        cfg.n,
        method,
        metrics.selector.value,
        wins.map(|w| format!(", beats λ = 0 on {:.1}% of tasks", 100.0 * w))
            .unwrap_or_default()
    );
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct DensityMetrics {
    n: usize,
    steps: usize,
    max_abs_error: f64,
    mean_abs_error: f64,
}

pub fn density(cfg: &DensityConfig, run: &mut RunDir) -> Result<Outcome> {
    let sched = NoiseSchedule::default();
    let world = prepare_world(&cfg.world, run)?;
    let model = analytic(&world, sched);
    let mixture = world.mixture(&cfg.prompt)?;
    let score = PromptScore::new(model, cfg.prompt.clone())?;
    let terminal = match cfg.terminal {
        TerminalKind::Exact => Terminal::Exact(mixture.clone()),
        TerminalKind::StandardNormal => Terminal::StandardNormal,
    };
    let d = world.dim();
    let mut rng = rng_from_seed(cfg.seed);
    let (mut points, mut rows, mut errors) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..cfg.n {
        // Stratified evaluation times unless one is fixed.
        let t = cfg.t.unwrap_or(T_EPS + (1.0 - T_EPS) * (i as f64 + 0.5) / cfg.n as f64);
        let x = perturb(&mixture.sample(&mut rng), t, &sched, &standard_normal(d, &mut rng))?;
        let mode = match cfg.divergence {
            DivergenceKind::Exact => DivergenceMode::ExactJacobian,
            DivergenceKind::Hutchinson => DivergenceMode::Hutchinson {
                probes: cfg.probes,
                seed: derive_seed(cfg.seed, i as u64),
            },
        };
        let est = log_density_ode(&score, &x, t, &sched, cfg.steps, &terminal, mode)
            .with_context(|| format!("density: point {i}"))?;
        let exact = world.log_density(&cfg.prompt, &x, t, &sched)?;
        let err = (est.log_density - exact).abs();
        let mut row = vec![num(t)];
        row.extend(x.iter().map(|v| num(*v)));
        row.extend([est.log_density, exact, err, est.divergence_integral].map(num));
        rows.push(row);
        errors.push(err);
        points.push(x);
    }
    let mut header = vec!["t".to_string()];
    header.extend(coord_names("x", d));
    header.extend(["ode", "exact", "abs_error", "divergence_integral"].map(String::from));
    run.csv("density.csv", &header, &rows)?;
    run.samples("samples.csv", None, &[("points".into(), points.as_slice())])?;
    let metrics = DensityMetrics {
        n: cfg.n,
        steps: cfg.steps,
        max_abs_error: errors.iter().copied().fold(0.0, f64::max),
        mean_abs_error: mean(&errors),
    };
    run.json("metrics.json", &metrics)?;
    let log_err: Vec<f64> = errors.iter().map(|e| e.max(1e-300).log10()).collect();
    run.text(
        "error_hist.svg",
        &histogram(
            "ODE log-density error",
            "log10 |error|",
            &[("points", &log_err)],
            HIST_BINS,
        ),
    )?;
    println!(
        "{} points at {} steps: max |error| {:.3e}, mean {:.3e}",
        cfg.n, cfg.steps, metrics.max_abs_error, metrics.mean_abs_error
    );
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct ExpertMetrics<'a> {
    report: &'a ExpertReport,
    orderings: Orderings,
}

pub fn expert(cfg: &ExpertRunConfig, run: &mut RunDir) -> Result<Outcome> {
    let sched = NoiseSchedule::default();
    let world = prepare_world(&cfg.world, run)?;
    let report = if cfg.analytic {
        run_expert_guidance_analytic(&world, &cfg.pipeline, &sched).context("learned pipeline (analytic)")?
    } else {
        run_expert_guidance(&world, &cfg.pipeline, &sched).context("learned pipeline")?
    };
    let d = world.dim();
    let mut header: Vec<String> = [
        "arm",
        "domain_fit",
        "domain_fit_full",
        "concept_score",
        "concept_half_width",
    ]
    .map(String::from)
    .to_vec();
    header.extend(coord_names("mean_x", d));
    let rows: Vec<Vec<String>> = report
        .arms
        .iter()
        .map(|a| {
            let mut row = vec![
                a.arm.name().to_string(),
                num(a.domain_fit),
                num(a.domain_fit_full),
                num(a.concept_score.value),
                a.concept_score.half_width.map(num).unwrap_or_default(),
            ];
            row.extend(a.mean.iter().map(|v| num(*v)));
            row
        })
        .collect();
    run.csv("table.csv", &header, &rows)?;
    let groups: Vec<(String, &[Vector])> = report
        .arms
        .iter()
        .map(|a| (a.arm.name().to_string(), a.samples.as_slice()))
        .collect();
    run.samples("samples.csv", Some("arm"), &groups)?;
    let orderings = report.orderings();
    run.json(
        "metrics.json",
        &ExpertMetrics {
            report: &report,
            orderings,
        },
    )?;

    let labels: Vec<String> = report.arms.iter().map(|a| a.arm.name().to_string()).collect();
    let fit: Vec<f64> = report.arms.iter().map(|a| a.domain_fit).collect();
    run.text(
        "domain_fit.svg",
        &bar_chart(
            "domain fit (energy distance, off-concept)",
            "energy distance",
            &labels,
            &fit,
            None,
        ),
    )?;
    let score: Vec<f64> = report.arms.iter().map(|a| a.concept_score.value).collect();
    let hw: Vec<f64> = report
        .arms
        .iter()
        .map(|a| a.concept_score.half_width.unwrap_or(0.0))
        .collect();
    run.text(
        "concept_score.svg",
        &bar_chart(
            "concept score (95% CI)",
            "contrastive log-likelihood ratio",
            &labels,
            &score,
            Some(&hw),
        ),
    )?;
    if let Some(k) = (0..d).find(|k| !report.off_concept.contains(k)) {
        let cols: Vec<Vec<f64>> = report.arms.iter().map(|a| coordinate(&a.samples, k)).collect();
        let series: Vec<(&str, &[f64])> = Arm::ALL
            .iter()
            .zip(&cols)
            .map(|(a, c)| (a.name(), c.as_slice()))
            .collect();
        run.text(
            "hist_concept.svg",
            &histogram(
                &format!("concept coordinate x{k} per arm"),
                &format!("x{k}"),
                &series,
                HIST_BINS,
            ),
        )?;
    }
    for a in &report.arms {
        println!(
            "{:<14} domain fit {:.4}  concept score {:.4}",
            a.arm.name(),
            a.domain_fit,
            a.concept_score.value
        );
    }
    println!("orderings: {orderings:?}");
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct VerifyRow {
    id: u32,
    name: String,
    passed: bool,
    error: bool,
    detail: String,
    budget_secs: Option<f64>,
}

/// Row 10 summarizes the run itself: every one of criteria 1–9 ran and passed.
pub const SELF_CHECK_ID: u32 = 10;

pub fn verify(cfg: &VerifyRunConfig, run: &mut RunDir) -> Result<Outcome> {
    let config = VerifyConfig { seed: cfg.seed };
    let mut rows = Vec::new();
    for id in &cfg.criteria {
        let r = run_criterion(*id, &config);
        println!("{r}");
        rows.push(VerifyRow {
            id: r.id,
            name: r.name,
            passed: r.passed,
            error: r.error,
            detail: r.detail,
            budget_secs: r.budget_secs,
        });
    }
    let complete = CRITERIA.iter().all(|c| cfg.criteria.contains(&c.0));
    if complete {
        let passed = rows.iter().all(|r| r.passed);
        let row = VerifyRow {
            id: SELF_CHECK_ID,
            name: "verify exits 0".into(),
            passed,
            error: false,
            detail: format!(
                "{}/{} criteria passed",
                rows.iter().filter(|r| r.passed).count(),
                rows.len()
            ),
            budget_secs: None,
        };
        println!(
            "[{}] {:>2} {:<28} {:>9}  {}",
            if passed { "PASS" } else { "FAIL" },
            row.id,
            row.name,
            "",
            row.detail
        );
        rows.push(row);
    }
    let header = ["id", "name", "status", "detail"].map(String::from);
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let status = match (r.passed, r.error) {
                (true, _) => "pass",
                (false, true) => "error",
                (false, false) => "fail",
            };
            vec![r.id.to_string(), r.name.clone(), status.into(), r.detail.clone()]
        })
        .collect();
    run.csv("verify.csv", &header, &table)?;
    let all_passed = rows.iter().all(|r| r.passed);
    run.json(
        "metrics.json",
        &serde_json::json!({ "all_passed": all_passed, "criteria": rows }),
    )?;
    if rows.is_empty() {
        bail!("no criteria selected");
    }
    Ok(if all_passed {
        Outcome::Done
    } else {
        Outcome::AcceptanceFailed
    })
}
