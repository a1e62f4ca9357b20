use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dfm_guidance::approximator::{Activation, ApproximatorConfig};
use dfm_guidance::container::{self, ModelRole};
use dfm_guidance::ctmc::{CallCounts, InitialState, SamplerConfig};
use dfm_guidance::energy2d::{
    empirical_on_grid, generate_dataset, grid_space, guided_target, masked_grid_space, EnergyProblem, RunRecord,
};
use dfm_guidance::guidance::{
    call_count, sample_guided, tabulate_guidance, ExactGuidance, GuidanceKind, GuidanceModels, GuidanceScheme,
    LearnedGuidance, PosteriorGuidance, RateGuidance,
};
use dfm_guidance::io::{read_samples_csv, write_pmf_csv, write_samples_csv, Heatmap};
use dfm_guidance::paths::{ConditionalPath, Init, PathKind};
use dfm_guidance::posterior::{fit_posterior, ExactPosterior, LearnedPosterior, PosteriorModel};
use dfm_guidance::statespace::{DensityRatio, Pmf};
use dfm_guidance::training::{
    check_loss_gradients, fit_guidance, fit_ratio, GuidanceData, LearnedRatio, LossKind, SampleSource,
};
use dfm_guidance::{Error, Result};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::run::RunDir;

/// Gradient checks above this relative error fail `grad-check`.
pub const GRAD_TOLERANCE: f64 = 1e-4;

fn problem(config: &RunConfig) -> Result<EnergyProblem> {
    let d = &config.data;
    EnergyProblem::new(d.shape, d.size, d.seed, config.guidance.classifier)
}

/// The configured path and the space it lives on.
pub fn build_path(config: &RunConfig) -> Result<ConditionalPath> {
    let p = &config.path;
    match p.kind.as_str() {
        "mixture" => {
            let space = match p.init {
                Init::Masked => masked_grid_space(),
                Init::Uniform => grid_space(),
            };
            ConditionalPath::mixture(space, p.scheduler, p.init)
        }
        "metric" => {
            if p.init == Init::Masked {
                return Err(Error::InvalidConfig("the metric path needs init = \"uniform\"".into()));
            }
            ConditionalPath::metric(grid_space(), p.scheduler)
        }
        other => Err(Error::InvalidConfig(format!("unknown path kind '{other}' (expected mixture or metric)"))),
    }
}

fn timed<T>(what: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    info!("{what} took {:.2}s", start.elapsed().as_secs_f64());
    Ok(out)
}

pub fn gen_data(config: &RunConfig, run: &mut RunDir) -> Result<()> {
    let d = &config.data;
    let data = timed("dataset generation", || generate_dataset(d.shape, d.size, d.seed))?;
    let name = d.shape.name();
    let mut w = csv::Writer::from_writer(run.create_file(&format!("{name}.csv"))?);
    w.write_record(["x", "y", "i", "j"])?;
    for (p, q) in data.raw.iter().zip(&data.quantized) {
        w.write_record([p[0].to_string(), p[1].to_string(), q[0].to_string(), q[1].to_string()])?;
    }
    w.flush()?;
    let mut f = run.create_file(&format!("{name}.pmf.csv"))?;
    write_pmf_csv(&data.pmf()?, &mut f)?;
    f.flush()?;
    info!("wrote {} points of {name}", data.len());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FitKind {
    Posterior,
    Guidance,
    Ratio,
}

fn write_curve(run: &mut RunDir, csv: &str) -> Result<()> {
    let mut f = run.create_file("loss_curve.csv")?;
    f.write_all(csv.as_bytes())?;
    f.flush()?;
    Ok(())
}

fn save_model(run: &mut RunDir, name: &str, model: &dfm_guidance::approximator::Approximator, role: ModelRole, config: &RunConfig) -> Result<()> {
    let meta = json!({ "data": config.data, "seed": config.fit.optimizer.seed });
    container::save(&run.path(name), model, role, meta)?;
    run.record(name);
    run.record(&format!("{name}.json"));
    Ok(())
}

pub fn fit(kind: FitKind, config: &RunConfig, run: &mut RunDir) -> Result<()> {
    let f = &config.fit;
    match kind {
        FitKind::Posterior => {
            let path = build_path(config)?;
            let p1 = problem(config)?.p1.embed(path.space())?;
            let (posterior, report) =
                timed("posterior fit", || fit_posterior(&p1, &path, &f.approximator, &f.optimizer))?;
            save_model(run, "posterior.dfmp", posterior.model(), ModelRole::Posterior { path }, config)?;
            write_curve(run, &report.curve.to_csv())?;
            run.write_json(
                "report.json",
                &json!({
                    "final_loss": report.final_loss,
                    "heldout_gap": report.heldout_gap,
                    "clamped": report.clamped,
                }),
            )
        }
        FitKind::Guidance => {
            let path = build_path(config)?;
            let problem = problem(config)?;
            let space = *path.space();
            let p1 = problem.p1.embed(&space)?;
            let ratio = match &f.ratio_model {
                Some(file) => load_ratio(file)?.to_density_ratio(),
                None => problem.energy.density_ratio(space, config.guidance.gamma),
            };
            if f.exact {
                let exact = ExactGuidance::new(p1, ratio, path)?.with_marginal_fallback()?;
                let buckets = match f.approximator {
                    ApproximatorConfig::Tabular { time_buckets } => time_buckets,
                    _ => return Err(Error::InvalidConfig("exact guidance is stored as a tabular model".into())),
                };
                let buckets = if path.is_masked() { 1 } else { buckets };
                let table = timed("exact guidance tabulation", || tabulate_guidance(&exact, f.guidance_kind, buckets))?;
                save_model(run, "guidance.dfmp", table.model(), ModelRole::Guidance { kind: f.guidance_kind, path }, config)?;
                return run.write_json("report.json", &json!({ "exact": true, "time_buckets": buckets }));
            }
            let source = SampleSource::from_pmf(&p1);
            let target_pmf = match f.target {
                Some(shape) => Some(generate_dataset(shape, config.data.size, config.data.seed ^ 0x7A)?.pmf()?.embed(&space)?),
                None => None,
            };
            let target = target_pmf.as_ref().map(SampleSource::from_pmf);
            let exact_posterior = ExactPosterior::new(p1.clone(), path)?.with_marginal_fallback()?;
            let data = GuidanceData {
                path: &path,
                source: &source,
                ratio: &ratio,
                target: target.as_ref(),
                posterior: Some(&exact_posterior),
                exact_source: Some(&p1),
            };
            let (model, report) =
                timed("guidance fit", || fit_guidance(f.guidance_kind, &data, &f.approximator, &f.optimizer))?;
            save_model(run, "guidance.dfmp", model.model(), ModelRole::Guidance { kind: f.guidance_kind, path }, config)?;
            write_curve(run, &report.curve.to_csv())?;
            run.write_json(
                "report.json",
                &json!({
                    "final_loss": report.final_loss,
                    "grad_check": report.grad_check,
                    "gap_to_exact": report.gap_to_exact,
                }),
            )
        }
        FitKind::Ratio => {
            let target_shape = f
                .target
                .ok_or_else(|| Error::Precondition("ratio fitting needs [fit].target".into()))?;
            let d = &config.data;
            let source = generate_dataset(d.shape, d.size, d.seed)?;
            let target = generate_dataset(target_shape, d.size, d.seed ^ 0x7A)?;
            let space = grid_space();
            let source = SampleSource::from_samples(space, source.to_batch())?;
            let target = SampleSource::from_samples(space, target.to_batch())?;
            let (ratio, report) = timed("ratio fit", || fit_ratio(&source, &target, &f.approximator, &f.optimizer))?;
            save_model(run, "ratio.dfmp", ratio.model(), ModelRole::DensityRatio, config)?;
            write_curve(run, &report.curve.to_csv())?;
            run.write_json("report.json", &json!({ "final_loss": report.final_loss, "grad_check": report.grad_check }))
        }
    }
}

fn load_ratio(file: &Path) -> Result<LearnedRatio> {
    let (model, sidecar) = container::load(file)?;
    match sidecar.model {
        ModelRole::DensityRatio => LearnedRatio::new(model),
        other => Err(Error::InvalidConfig(format!("{} holds a {other:?} model, not a density ratio", file.display()))),
    }
}

fn load_posterior(file: &Path, path: &ConditionalPath) -> Result<LearnedPosterior> {
    let (model, sidecar) = container::load(file)?;
    match sidecar.model {
        ModelRole::Posterior { path: stored } if stored == *path => LearnedPosterior::new(model, stored),
        ModelRole::Posterior { .. } => Err(Error::InvalidConfig(format!(
            "{} was trained on a different path than [path] describes",
            file.display()
        ))),
        other => Err(Error::InvalidConfig(format!("{} holds a {other:?} model, not a posterior", file.display()))),
    }
}

fn load_guidance(file: &Path, path: &ConditionalPath) -> Result<LearnedGuidance> {
    let (model, sidecar) = container::load(file)?;
    match sidecar.model {
        ModelRole::Guidance { kind, path: stored } if stored == *path => LearnedGuidance::new(model, kind),
        ModelRole::Guidance { .. } => Err(Error::InvalidConfig(format!(
            "{} was trained on a different path than [path] describes",
            file.display()
        ))),
        other => Err(Error::InvalidConfig(format!("{} holds a {other:?} model, not guidance", file.display()))),
    }
}

/// Call counts written next to the samples and read back by `eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CallReport {
    pub scheme: String,
    pub steps: usize,
    pub chains: usize,
    pub loop_steps: usize,
    pub calls: CallCounts,
    /// Guidance inputs per chain per jump step.
    pub guidance_calls_per_step: Option<f64>,
    /// Value predicted by the call-count table for this configuration.
    pub expected_per_step: Option<u64>,
}

pub fn sample(config: &RunConfig, run: &mut RunDir) -> Result<()> {
    let scheme = config.guidance.parsed_scheme()?;
    let path = build_path(config)?;
    let space = *path.space();
    let problem = problem(config)?;
    let p1 = problem.p1.embed(&space)?;

    let posterior: Box<dyn PosteriorModel> = match &config.guidance.posterior {
        Some(file) => Box::new(load_posterior(file, &path)?),
        None => Box::new(ExactPosterior::new(p1.clone(), path)?.with_marginal_fallback()?),
    };
    let gamma = config.guidance.gamma;
    let learned = match &config.guidance.model {
        Some(file) => Some(load_guidance(file, &path)?),
        None => None,
    };
    let exact_matrix = ExactGuidance::new(p1.clone(), problem.energy.density_ratio(space, gamma), path)?
        .with_marginal_fallback()?;
    // The predictor reweights with the classifier expectation, raised to its own strength.
    let scalar_gamma = if matches!(scheme, GuidanceScheme::Predictor { .. }) { 1.0 } else { gamma };
    let exact_scalar = ExactGuidance::new(p1, problem.energy.density_ratio(space, scalar_gamma), path)?
        .with_marginal_fallback()?;
    let models = match &learned {
        Some(g) => match g.kind() {
            GuidanceKind::PosteriorBased => GuidanceModels { posterior_based: Some(g as &dyn PosteriorGuidance), rate_based: None },
            GuidanceKind::RateBased => GuidanceModels { posterior_based: None, rate_based: Some(g as &dyn RateGuidance) },
        },
        None => GuidanceModels { posterior_based: Some(&exact_matrix), rate_based: Some(&exact_scalar) },
    };

    let s = &config.sample;
    let sampler = SamplerConfig::new(s.steps, s.chains, InitialState::from_path(&path), s.seed);
    let out = timed("sampling", || {
        sample_guided(&scheme, posterior.as_ref(), models, &path, &sampler, config.guidance.rate_mode)
    })?;
    let mut f = run.create_file("samples.csv")?;
    write_samples_csv(&out.batch, &mut f)?;
    f.flush()?;
    let per_step = (out.loop_steps > 0)
        .then(|| out.calls.guidance as f64 / (out.loop_steps * s.chains) as f64);
    let expected = (path.kind() == PathKind::Mixture && config.guidance.rate_mode.is_none())
        .then(|| call_count(&scheme, &space, path.init()));
    run.write_json(
        "calls.json",
        &CallReport {
            scheme: scheme.to_string(),
            steps: s.steps,
            chains: s.chains,
            loop_steps: out.loop_steps,
            calls: out.calls,
            guidance_calls_per_step: per_step,
            expected_per_step: expected,
        },
    )?;
    info!("sampled {} chains with {scheme}", s.chains);
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub samples: usize,
    pub gamma: f64,
    pub tv: f64,
    pub kl: Option<f64>,
    pub call_count: Option<f64>,
    pub calls: Option<CallCounts>,
}

fn sidecar_calls(samples: &Path) -> Result<Option<CallReport>> {
    let file = samples.with_file_name("calls.json");
    if !file.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_reader(BufReader::new(File::open(file)?))?))
}

pub fn eval(config: &RunConfig, samples: &Path, run: &mut RunDir) -> Result<()> {
    let batch = read_samples_csv(BufReader::new(File::open(samples)?))?;
    let empirical = empirical_on_grid(&batch)?;
    let problem = problem(config)?;
    let (target, _) = guided_target(&problem.p1, &problem.energy, config.guidance.gamma)?;
    let kl = empirical.kl_divergence(&target)?;
    let calls = sidecar_calls(samples)?;
    let metrics = Metrics {
        samples: batch.len(),
        gamma: config.guidance.gamma,
        tv: empirical.total_variation(&target)?,
        kl: kl.is_finite().then_some(kl),
        call_count: calls.as_ref().and_then(|c| c.guidance_calls_per_step),
        calls: calls.map(|c| c.calls),
    };
    info!("tv {:.4}", metrics.tv);
    run.write_json("metrics.json", &metrics)
}

/// Panels in row-major order, `columns` per row; the exact target for
/// `gamma` comes first when `with_target` is set.
pub fn render(config: &RunConfig, samples: &[PathBuf], columns: usize, with_target: bool, run: &mut RunDir) -> Result<()> {
    if columns == 0 {
        return Err(Error::InvalidConfig("columns must be >= 1".into()));
    }
    let mut panels = Vec::new();
    if with_target {
        let problem = problem(config)?;
        panels.push(Heatmap::from_pmf(&guided_target(&problem.p1, &problem.energy, config.guidance.gamma)?.0)?);
    }
    for file in samples {
        let batch = read_samples_csv(BufReader::new(File::open(file)?))?;
        panels.push(Heatmap::from_pmf(&empirical_on_grid(&batch)?)?);
    }
    let rows: Vec<Vec<Heatmap>> = panels.chunks(columns).map(|c| c.to_vec()).collect();
    let mut f = run.create_file("panels.pgm")?;
    Heatmap::grid(&rows, 1)?.write_pgm(&mut f)?;
    f.flush()?;
    Ok(())
}

/// Rows: exact target, then one row per (scheme, init); columns: gamma.
pub fn reproduce_fig3(config: &RunConfig, run: &mut RunDir) -> Result<()> {
    let e = &config.experiment;
    let problem = timed("problem setup", || EnergyProblem::new(e.shape, e.data_size, e.data_seed, e.classifier))?;
    let mut records: Vec<RunRecord> = Vec::new();
    for spec in e.runs() {
        let record = timed(&format!("{} {} gamma={} seed={}", spec.scheme, spec.init.name(), spec.gamma, spec.seed), || {
            problem.run(&spec)
        })?;
        info!("{} {} gamma={}: tv {:.4}", record.scheme, record.init, record.gamma, record.tv);
        records.push(record);
    }
    let mut rows = vec![e
        .gammas
        .iter()
        .map(|&g| Heatmap::from_pmf(&guided_target(&problem.p1, &problem.energy, g)?.0))
        .collect::<Result<Vec<_>>>()?];
    let first_seed = e.seeds.first().copied().unwrap_or(0);
    for scheme in &e.schemes {
        for init in &e.inits {
            let mut row = Vec::new();
            for &g in &e.gammas {
                let rec = records
                    .iter()
                    .find(|r| r.scheme == scheme.to_string() && r.init == init.name() && r.gamma == g && r.seed == first_seed)
                    .expect("every configuration was run");
                row.push(Heatmap::from_pmf(rec.empirical.as_ref().expect("runs keep their histogram"))?);
            }
            rows.push(row);
        }
    }
    let mut f = run.create_file("fig3.pgm")?;
    Heatmap::grid(&rows, 1)?.write_pgm(&mut f)?;
    f.flush()?;
    let mut pmf = run.create_file("data.pmf.csv")?;
    write_pmf_csv(&problem.p1, &mut pmf)?;
    pmf.flush()?;
    run.write_json("records.json", &records)
}

#[derive(Debug, Clone, Serialize)]
struct GradCheckRow {
    loss: &'static str,
    backend: &'static str,
    max_rel_error: f64,
    coords_checked: usize,
    pass: bool,
}

/// Checks every loss on a small masked toy with both backends. Returns
/// whether all checks passed.
pub fn grad_check(config: &RunConfig, run: &mut RunDir) -> Result<bool> {
    use dfm_guidance::statespace::StateSpace;
    let data = StateSpace::new(2, 3)?;
    let space = StateSpace::with_mask(2, 3)?;
    let p1 = Pmf::new(data, vec![0.05, 0.1, 0.05, 0.2, 0.05, 0.1, 0.15, 0.1, 0.2])?.embed(&space)?;
    let ratio = DensityRatio::tabulated(space, (0..16).map(|i| 0.5 + 0.25 * (i % 5) as f64).collect())?;
    let path = ConditionalPath::mixture(space, config.path.scheduler, Init::Masked)?;
    let backends = [
        ("tabular", ApproximatorConfig::Tabular { time_buckets: 4 }),
        ("mlp", ApproximatorConfig::Mlp { hidden: vec![16, 16], activation: Activation::Tanh }),
    ];
    let mut rows = Vec::new();
    for kind in LossKind::ALL {
        for (backend, approx) in &backends {
            let check = check_loss_gradients(kind, approx, &p1, &ratio, &path, config.fit.optimizer.seed)?;
            info!("{} / {backend}: max relative error {:.2e}", kind.name(), check.max_rel_error);
            rows.push(GradCheckRow {
                loss: kind.name(),
                backend,
                max_rel_error: check.max_rel_error,
                coords_checked: check.coords_checked,
                pass: check.max_rel_error < GRAD_TOLERANCE,
            });
        }
    }
    let pass = rows.iter().all(|r| r.pass);
    run.write_json("grad_check.json", &json!({ "tolerance": GRAD_TOLERANCE, "checks": rows }))?;
    Ok(pass)
}
