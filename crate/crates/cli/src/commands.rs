use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use serde::de::DeserializeOwned;
use serde::Serialize;
use vine_metic::data::MeticDataset;
use vine_metic::estimation::{fit_all, tau_unconditional, FitConfig, FitResult, ModelSpec, TauEstimate, VarianceMethod};
use vine_metic::simulation::{
    simulate_nested_clayton_draw, simulate_sim1_draw, simulate_vine, Sim1Config, Sim2Config, SimDraw, VineSimConfig,
};
use vine_metic::study::{run_study, Scenario, StudyConfig};
use vine_metic::MeticError;

use crate::{Cli, Command, Common, SimScenario, StudyScenario, Variance};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_STAGE: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

type Outcome<T> = std::result::Result<T, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: EXIT_USAGE, error: e.into() }
}

fn metic(e: MeticError) -> Failure {
    let code = if e.is_numeric() { EXIT_NUMERIC } else { EXIT_USAGE };
    Failure { code, error: e.into() }
}

fn io<T>(r: std::io::Result<T>, what: impl Display) -> Outcome<T> {
    r.with_context(|| what.to_string()).map_err(usage)
}

/// Written next to every output as `<output>.manifest.json` so the data
/// files themselves stay byte-identical across runs.
#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    config_path: Option<PathBuf>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
    tool_version: String,
    started: f64,
    wall_clock: f64,
}

struct Run {
    command: &'static str,
    config: Option<PathBuf>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
    started: SystemTime,
    clock: Instant,
}

impl Run {
    fn new(command: &'static str, common: &Common) -> Self {
        Self {
            command,
            config: common.config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: common.seed,
            started: SystemTime::now(),
            clock: Instant::now(),
        }
    }

    fn finish(self, primary: &Path) -> Outcome<()> {
        let m = RunManifest {
            command: self.command.into(),
            args: std::env::args().collect(),
            config_path: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started: self.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
            wall_clock: self.clock.elapsed().as_secs_f64(),
        };
        let path = sidecar(primary, "manifest.json");
        let text = serde_json::to_string_pretty(&m).map_err(usage)?;
        io(fs::write(&path, text), format_args!("writing {}", path.display()))
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// `fit.json` -> `fit.baseline_T1.csv`.
pub fn baseline_path(output: &Path, event: usize) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.baseline_T{event}.csv"))
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Outcome<T> {
    let text = io(fs::read_to_string(path), format_args!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(usage)
}

fn load_or_default<T: DeserializeOwned + Default>(common: &Common) -> Outcome<T> {
    common.config.as_deref().map_or_else(|| Ok(T::default()), load_json)
}

pub fn run(cli: Cli) -> Outcome<u8> {
    match cli.command {
        Command::Simulate { scenario, n, output, common } => simulate(scenario, n, &output, &common),
        Command::Fit { data, model, pooled, variance, output, common } => {
            fit(&data, &model, &pooled, variance, &output, &common)
        }
        Command::Replicate { scenario, n, reps, output, common } => replicate(scenario, n, reps, &output, &common),
        Command::Tau { fit, w, samples, edges_only, output, common } => {
            tau(&fit, w, samples, edges_only, output.as_deref(), &common)
        }
    }
}

fn simulate(scenario: SimScenario, n: Option<usize>, output: &Path, common: &Common) -> Outcome<u8> {
    let mut run = Run::new("simulate", common);
    let need_n = || n.ok_or_else(|| usage(anyhow!("--n is required for this scenario")));
    let draw: SimDraw = match scenario {
        SimScenario::Sim1 => {
            let mut cfg: Sim1Config = load_or_default(common)?;
            cfg.n = need_n()?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            run.seed = Some(cfg.seed);
            simulate_sim1_draw(&cfg).map_err(metic)?
        }
        SimScenario::Sim2 => {
            let mut cfg: Sim2Config = load_or_default(common)?;
            cfg.n = need_n()?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            run.seed = Some(cfg.seed);
            simulate_nested_clayton_draw(&cfg).map_err(metic)?
        }
        SimScenario::Vine => {
            let path = common
                .config
                .as_deref()
                .ok_or_else(|| usage(anyhow!("the vine scenario needs --config with a vine simulation file")))?;
            let mut cfg: VineSimConfig = load_json(path)?;
            cfg.n = n.unwrap_or(cfg.n);
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            run.seed = Some(cfg.seed);
            simulate_vine(&cfg).map_err(metic)?
        }
    };
    io(
        draw.data.write_csv_path(output).map_err(std::io::Error::other),
        format_args!("writing {}", output.display()),
    )?;
    run.outputs.push(output.to_path_buf());

    let rates = draw.data.censoring_rates();
    println!("n = {}", draw.data.n());
    for (j, r) in rates.iter().enumerate() {
        println!("censoring rate T{}: {:.1}%", j + 1, 100.0 * r);
    }
    let jn = draw.data.n_events();
    for a in 0..jn {
        for b in a + 1..jn {
            let x: Vec<f64> = draw.latent_t.iter().map(|t| t[a]).collect();
            let y: Vec<f64> = draw.latent_t.iter().map(|t| t[b]).collect();
            let tau = kendalls::tau_b_with_comparator(&x, &y, |p: &f64, q: &f64| p.total_cmp(q))
                .map(|(t, _)| t)
                .map_err(|e| usage(anyhow!("Kendall's tau failed: {e:?}")))?;
            println!("latent tau(T{}, T{}): {tau:.4}", a + 1, b + 1);
        }
    }
    run.finish(output)?;
    Ok(0)
}

/// `"1,3;2,3"` pools the first-tree edges `(1,3)` and `(2,3)`; each edge
/// must involve the terminal event `j_terminal`.
pub fn parse_pooled(spec: &str, j_terminal: usize) -> anyhow::Result<Vec<usize>> {
    let mut group = Vec::new();
    for edge in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let ends: Vec<usize> = edge
            .trim_matches(|c| c == '(' || c == ')')
            .split(',')
            .map(|v| v.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("pooled edge '{edge}' is not of the form a,b"))?;
        match ends[..] {
            [a, b] if b == j_terminal && a != b => group.push(a),
            [a, b] if a == j_terminal && a != b => group.push(b),
            _ => {
                return Err(anyhow!(
                    "pooled edge '{edge}' is not a first-tree edge with the terminal event {j_terminal}"
                ))
            }
        }
    }
    if group.is_empty() {
        return Err(anyhow!("empty --pooled group"));
    }
    Ok(group)
}

fn load_model(model: &str) -> Outcome<ModelSpec> {
    match model {
        "sim1" => Ok(ModelSpec::sim1()),
        "sim2" => Ok(ModelSpec::sim2()),
        path => load_json(Path::new(path)),
    }
}

fn fit(
    data_path: &Path,
    model: &str,
    pooled: &[String],
    variance: Option<Variance>,
    output: &Path,
    common: &Common,
) -> Outcome<u8> {
    let mut run = Run::new("fit", common);
    let data = MeticDataset::read_csv_path(data_path)
        .with_context(|| format!("reading {}", data_path.display()))
        .map_err(usage)?;
    run.inputs.push(data_path.to_path_buf());
    let spec = load_model(model)?;
    if !matches!(model, "sim1" | "sim2") {
        run.inputs.push(PathBuf::from(model));
    }
    let mut cfg: FitConfig = load_or_default(common)?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    run.seed = Some(cfg.seed);
    if let Some(v) = variance {
        cfg.variance = match v {
            Variance::Sandwich => VarianceMethod::Sandwich,
            Variance::Bootstrap => VarianceMethod::Bootstrap,
            Variance::None => VarianceMethod::None,
        };
    }
    for p in pooled {
        cfg.pooled.push(parse_pooled(p, data.n_events()).map_err(usage)?);
    }

    let res = fit_all(&data, &spec, &cfg).map_err(metic)?;
    write_fit(&res, output, &mut run)?;

    println!("{:<28} {:>6} {:>14} {:>12}", "parameter", "stage", "estimate", "se");
    for p in &res.parameters {
        let se = p.se.map_or_else(|| "-".into(), |s| format!("{s:.6}"));
        println!("{:<28} {:>6} {:>14.6} {:>12}", p.name, p.stage, p.estimate, se);
    }
    for s in &res.stages {
        for w in &s.warnings {
            eprintln!("warning: stage {} ({}): {w}", s.stage, s.target);
        }
    }
    run.finish(output)?;
    match &res.failure {
        Some(f) => {
            eprintln!(
                "error: stage {} ({}) failed: {}; estimates from earlier stages were written",
                f.stage, f.target, f.error
            );
            Ok(EXIT_STAGE)
        }
        None => Ok(0),
    }
}

fn write_fit(res: &FitResult, output: &Path, run: &mut Run) -> Outcome<()> {
    let json = res.to_json().map_err(metic)?;
    io(fs::write(output, json), format_args!("writing {}", output.display()))?;
    run.outputs.push(output.to_path_buf());
    for m in &res.margins {
        let path = baseline_path(output, m.event);
        let model = m.model().map_err(metic)?;
        let file = io(fs::File::create(&path), format_args!("creating {}", path.display()))?;
        model.write_baseline_csv(file).map_err(metic)?;
        run.outputs.push(path);
    }
    Ok(())
}

fn replicate(
    scenario: StudyScenario,
    n: Option<usize>,
    reps: Option<usize>,
    output: &Path,
    common: &Common,
) -> Outcome<u8> {
    let mut run = Run::new("replicate", common);
    let mut cfg = match &common.config {
        Some(p) => load_json::<StudyConfig>(p)?,
        None => {
            let mut c = StudyConfig::default();
            if matches!(scenario, StudyScenario::Sim2) {
                c.n = 300;
                c.replications = 200;
            }
            c
        }
    };
    cfg.scenario = match scenario {
        StudyScenario::Sim1 => Scenario::Sim1,
        StudyScenario::Sim2 => Scenario::Sim2,
    };
    cfg.n = n.unwrap_or(cfg.n);
    cfg.replications = reps.unwrap_or(cfg.replications);
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    run.seed = Some(cfg.seed);

    let report = run_study(&cfg, common.threads).map_err(metic)?;
    let file = io(fs::File::create(output), format_args!("creating {}", output.display()))?;
    report.write_csv(file).map_err(metic)?;
    run.outputs.push(output.to_path_buf());

    println!(
        "{} replications of n = {}, {} failed",
        report.replications, report.n, report.failures
    );
    println!(
        "{:<22} {:<10} {:>9} {:>9} {:>8} {:>8} {:>8} {:>7} {:>8}",
        "parameter", "method", "truth", "mean", "rBIAS", "rESD", "rASE", "ECP", "rRMSE"
    );
    let opt = |v: Option<f64>, p: usize| v.map_or_else(|| "-".into(), |x| format!("{x:.p$}"));
    for r in &report.rows {
        println!(
            "{:<22} {:<10} {:>9.4} {:>9.4} {:>8.2} {:>8.2} {:>8} {:>7} {:>8.2}",
            r.parameter,
            r.method,
            r.truth,
            r.mean,
            r.rbias,
            r.resd,
            opt(r.rase, 2),
            opt(r.ecp, 1),
            r.rrmse
        );
    }
    run.finish(output)?;
    Ok(0)
}

#[derive(Debug, Serialize)]
struct EdgeTau {
    label: String,
    family: String,
    tau: f64,
    se: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TauReport {
    w: Vec<f64>,
    edges: Vec<EdgeTau>,
    tau_12: Option<TauEstimate>,
    samples: usize,
    seed: u64,
}

fn tau(
    fit_path: &Path,
    w: Option<Vec<f64>>,
    samples: usize,
    edges_only: bool,
    output: Option<&Path>,
    common: &Common,
) -> Outcome<u8> {
    let mut run = Run::new("tau", common);
    run.inputs.push(fit_path.to_path_buf());
    let text = io(fs::read_to_string(fit_path), format_args!("reading {}", fit_path.display()))?;
    let res = FitResult::from_json(&text)
        .with_context(|| format!("parsing {}", fit_path.display()))
        .map_err(usage)?;
    if res.j != 3 && !edges_only {
        return Err(usage(anyhow!(
            "the unconditional tau of (T1, T2) is only supported for J = 3 (this fit has J = {}); use --edges-only",
            res.j
        )));
    }
    let w = w.unwrap_or_else(|| res.w_mean.clone());
    if w.len() != res.w_design.len() {
        return Err(usage(anyhow!(
            "--w has {} entries but the copula design ({}) has {}",
            w.len(),
            res.w_design.0.join(","),
            res.w_design.len()
        )));
    }
    let seed = common.seed.unwrap_or(1);
    run.seed = Some(seed);

    let edges: Vec<EdgeTau> = res
        .copulas
        .iter()
        .map(|c| {
            let (tau, se) = c.tau_at(&w);
            EdgeTau { label: c.labels.join("+"), family: c.family.to_string(), tau, se }
        })
        .collect();
    let tau_12 = if edges_only {
        None
    } else {
        if res.failure.is_some() {
            return Err(Failure {
                code: EXIT_STAGE,
                error: anyhow!("the fit is incomplete, so the unconditional tau is unavailable; use --edges-only"),
            });
        }
        let (graph, specs) = res.vine().map_err(metic)?;
        Some(tau_unconditional(&graph, &specs, &w, samples, seed).map_err(metic)?)
    };

    for e in &edges {
        let se = e.se.map_or_else(|| "-".into(), |s| format!("{s:.4}"));
        println!("tau {:<12} {:<8} {:.4} (se {se})", e.label, e.family, e.tau);
    }
    if let Some(t) = &tau_12 {
        println!("tau(T1, T2)  {:.4} (Monte Carlo se {:.4}, {samples} draws)", t.tau, t.se);
    }
    let report = TauReport { w, edges, tau_12, samples, seed };
    if let Some(out) = output {
        let json = serde_json::to_string_pretty(&report).map_err(usage)?;
        io(fs::write(out, json), format_args!("writing {}", out.display()))?;
        run.outputs.push(out.to_path_buf());
        run.finish(out)?;
    }
    Ok(0)
}
