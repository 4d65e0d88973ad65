use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;

use refinebridge::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use refinebridge::data::{
    load_dataset, make_samples, read_forecasts, save_dataset, triplets, write_forecasts, Dataset,
    ForecastRow, Manifest, PriorKind, Provenance, RawSeries, Sample, Split,
};
use refinebridge::eval::{
    compare, mae, mse, render_svg, write_plot_csv, write_report_csv, EvalReport, MetricSpace,
    PlotSample, RunMetrics,
};
use refinebridge::parallel::{self, Exec};
use refinebridge::sampler::{refine, refine_batch, SamplerKind};
use refinebridge::synth::{synth_generate, SynthSpec};
use refinebridge::trainer::train_with_progress;
use refinebridge::{Error, ModelConfig, RefineBridgeModel};
use serde::{Deserialize, Serialize};

use crate::config::{check_inputs, sidecar, RunConfig};
use crate::{
    Cli, Command, EvalArgs, InitConfigArgs, ParamsArgs, PrepareArgs, RefineArgs, SynthArgs,
    TrainArgs,
};

/// A failed command: message for stderr and the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    fn usage(msg: impl Display) -> Self {
        Self {
            code: 1,
            msg: msg.to_string(),
        }
    }

    fn config(errs: Vec<String>) -> Self {
        Self::usage(format!("invalid configuration:\n  {}", errs.join("\n  ")))
    }

    fn data(msg: impl Display) -> Self {
        Self {
            code: 2,
            msg: msg.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidArgument { .. } | Error::Schedule(_) => 1,
            Error::NonFinite { .. } | Error::NanLoss { .. } | Error::EmptyTape => 3,
            _ => 2,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

pub fn run(cli: Cli) -> CmdResult {
    let mut cfg = match &cli.config {
        Some(path) => {
            if let Some(missing) = check_inputs(&[("config file", path)]).pop() {
                return Err(Failure::usage(missing));
            }
            RunConfig::load(path).map_err(Failure::usage)?
        }
        None => RunConfig::default(),
    };
    if let Some(t) = cli.threads {
        cfg.runtime.threads = t;
    }
    let threads = cfg.runtime.threads;
    let exec = Exec::from_threads(threads);
    let explicit_config = cli.config.is_some();
    parallel::with_threads(threads, move || match cli.command {
        Command::Prepare(a) => prepare(a, cfg, exec),
        Command::Train(a) => train(a, cfg, explicit_config, exec),
        Command::Refine(a) => refine_cmd(a, cfg, explicit_config, exec),
        Command::Eval(a) => eval(a, cfg, explicit_config, exec),
        Command::Synth(a) => synth(a),
        Command::Params(a) => params(a, cfg),
        Command::InitConfig(a) => init_config(a),
    })
}

fn validated(cfg: &RunConfig) -> CmdResult {
    let errs = cfg.validate();
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Failure::config(errs))
    }
}

fn require_inputs(paths: &[(&str, &Path)]) -> CmdResult {
    let missing = check_inputs(paths);
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Failure::data(missing.join("\n  ")))
    }
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("metadata serialises")
}

/// Adopt the dataset's shape, warning when an explicit configuration
/// disagreed.
fn adopt_dataset(cfg: &mut RunConfig, manifest: &Manifest, explicit: bool) {
    let d = &manifest.config;
    if explicit && (cfg.data.context != d.context || cfg.data.horizon != d.horizon) {
        eprintln!(
            "note: using the dataset's C={} H={} (configuration had C={} H={})",
            d.context, d.horizon, cfg.data.context, cfg.data.horizon
        );
    }
    cfg.data.context = d.context;
    cfg.data.horizon = d.horizon;
    cfg.data.eps = d.eps;
    cfg.data.normalization = d.normalization;
    cfg.data.transform = d.transform;
    cfg.data.split = d.split;
    cfg.data.asset = manifest.asset.clone();
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    s.parse().map_err(Failure::usage)
}

fn prepare(a: PrepareArgs, mut cfg: RunConfig, exec: Exec) -> CmdResult {
    if let Some(c) = a.context {
        cfg.data.context = c;
    }
    if let Some(h) = a.horizon {
        cfg.data.horizon = h;
    }
    if let Some(p) = &a.prior {
        cfg.data.prior = p.parse::<PriorKind>().map_err(Failure::usage)?;
    }
    if let Some(asset) = a.asset {
        cfg.data.asset = asset;
    }
    validated(&cfg)?;
    let mut inputs = vec![("input series", a.input.as_path())];
    if let PriorKind::File(p) = &cfg.data.prior {
        inputs.push(("prior file", p.as_path()));
    }
    require_inputs(&inputs)?;

    let series = RawSeries::read_csv(&a.input, cfg.data.asset.clone())?;
    let provider = cfg.data.prior.provider(cfg.data.horizon)?;
    let ds = make_samples(&series, &cfg.data.dataset_config(), provider.as_ref(), exec)?;
    let manifest = save_dataset(
        &a.out,
        &ds,
        &Provenance {
            asset: cfg.data.asset.clone(),
            source: Some(a.input.clone()),
            prior: cfg.data.prior.to_string(),
        },
    )?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml())?;
    println!(
        "prepared {} windows from {} rows (C={}, H={}): train {}, val {}, test {}, dropped {}",
        manifest.windows,
        series.len(),
        cfg.data.context,
        cfg.data.horizon,
        manifest.counts.train,
        manifest.counts.val,
        manifest.counts.test,
        manifest.counts.dropped
    );
    println!("dataset sha256 {}", manifest.dataset_sha256);
    Ok(())
}

fn train(a: TrainArgs, mut cfg: RunConfig, explicit_config: bool, exec: Exec) -> CmdResult {
    require_inputs(&[("dataset directory", a.data.as_path())])?;
    if let Some(v) = a.max_steps {
        cfg.train.max_steps = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.eval_every {
        cfg.train.eval_every = v;
    }
    let manifest = refinebridge::data::load_manifest(&a.data)?;
    adopt_dataset(&mut cfg, &manifest, explicit_config);
    validated(&cfg)?;
    let (ds, _) = load_dataset(&a.data)?;
    if ds.train.is_empty() {
        return Err(Failure::data("the training split is empty"));
    }

    let schedule = cfg.schedule().map_err(Failure::usage)?;
    let mut model = RefineBridgeModel::new(cfg.model_config(), cfg.model.init_seed)?;
    eprintln!(
        "training {} parameters on {} samples ({} validation), schedule beta0={} beta1={}",
        model.param_count(),
        ds.train.len(),
        ds.val.len(),
        schedule.beta0(),
        schedule.beta1()
    );
    let (tr, va) = (triplets(&ds.train), triplets(&ds.val));
    let outcome = train_with_progress(&mut model, &tr, &va, &schedule, &cfg.train, exec, |r| {
        if let Some(v) = r.val_mse {
            eprintln!("step {:>6}  loss {:.6}  val_mse {:.6}", r.step, r.loss, v);
        }
    })?;

    let history = a.history.unwrap_or_else(|| sidecar(&a.out, ".loss.csv"));
    outcome.history.write_csv(&history)?;
    let ck = Checkpoint {
        model,
        schedule,
        train_step: outcome.steps as u64,
        config: cfg.to_json(),
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
    }
    save_checkpoint(&ck, &a.out)?;
    let last = outcome.history.records.last().map(|r| r.loss);
    match (outcome.best, last) {
        (Some((step, v)), Some(l)) => println!(
            "trained {} steps, final loss {l:.6}, best val_mse {v:.6} at step {step}; checkpoint {}",
            outcome.steps,
            a.out.display()
        ),
        (None, Some(l)) => println!("trained {} steps, final loss {l:.6}; checkpoint {}", outcome.steps, a.out.display()),
        _ => println!("no training steps run; checkpoint {} holds the initialisation", a.out.display()),
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct RefineMeta {
    method: String,
    checkpoint: String,
    data: String,
    dataset_sha256: String,
    split: String,
    runs: usize,
    seeds: Vec<u64>,
    scale: String,
    config: RunConfig,
}

fn method_label(kind: SamplerKind) -> &'static str {
    match kind {
        SamplerKind::Ode => "refined-ODE",
        SamplerKind::Sde => "refined-SDE",
    }
}

fn check_shapes(model: &ModelConfig, ds: &Dataset) -> CmdResult {
    let d = &ds.config;
    if model.horizon != d.horizon || model.context != d.context {
        return Err(Failure::data(format!(
            "checkpoint expects H={} C={}, dataset has H={} C={}",
            model.horizon, model.context, d.horizon, d.context
        )));
    }
    Ok(())
}

fn refine_cmd(a: RefineArgs, file_cfg: RunConfig, explicit_config: bool, exec: Exec) -> CmdResult {
    require_inputs(&[
        ("checkpoint", a.checkpoint.as_path()),
        ("dataset directory", a.data.as_path()),
    ])?;
    let split = parse_split(&a.split)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut cfg = if explicit_config {
        file_cfg
    } else {
        serde_json::from_value::<RunConfig>(ck.config.clone()).unwrap_or(file_cfg)
    };
    if let Some(s) = &a.sampler {
        cfg.sampler.kind = s.parse().map_err(|e: Error| Failure::usage(e))?;
    }
    if let Some(v) = a.steps {
        cfg.sampler.steps = v;
    }
    if let Some(v) = a.tau {
        cfg.sampler.temperature = v;
    }
    if let Some(v) = a.seed {
        cfg.sampler.seed = v;
    }
    if let Some(v) = a.runs {
        cfg.sampler.runs = v;
    }
    let (ds, manifest) = load_dataset(&a.data)?;
    check_shapes(ck.model.config(), &ds)?;
    adopt_dataset(&mut cfg, &manifest, explicit_config);
    validated(&cfg)?;
    for note in cfg.sampler.refinement(0).regime_warnings(ds.config.horizon) {
        eprintln!("note: {note}");
    }
    if cfg.sampler.kind == SamplerKind::Ode && a.runs.is_some_and(|r| r > 1) {
        eprintln!("note: ODE refinement is deterministic, writing a single run");
    }

    let samples = ds.split(split);
    if samples.is_empty() {
        return Err(Failure::data(format!("the {split} split is empty")));
    }
    let items: Vec<(&[f64], &[f64])> = samples
        .iter()
        .map(|s| (s.context.as_slice(), s.prior.as_slice()))
        .collect();
    let runs = cfg.sampler.effective_runs();
    let seeds: Vec<u64> = (0..runs as u64)
        .map(|r| cfg.sampler.seed.wrapping_add(r))
        .collect();
    let mut rows = Vec::with_capacity(runs * samples.len());
    for (run, &seed) in seeds.iter().enumerate() {
        let out = refine_batch(
            &ck.model,
            &items,
            &ck.schedule,
            &cfg.sampler.refinement(seed),
            exec,
        )?;
        for (s, r) in samples.iter().zip(out) {
            rows.push(ForecastRow {
                line: 0,
                origin_index: s.origin_index,
                run,
                values: s.stats.denormalize_all(&r.output),
            });
        }
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
    }
    write_forecasts(&a.out, ds.config.horizon, &rows)?;

    if let Some(dir) = &a.trajectory_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
        let mut rc = cfg.sampler.refinement(seeds[0]);
        rc.record_trajectory = true;
        for s in samples.iter().take(a.trajectory_limit) {
            let r = refine(&ck.model, &s.context, &s.prior, &ck.schedule, &rc)?;
            if let Some(tr) = r.trajectory {
                tr.write_csv(&dir.join(format!("trajectory_{}.csv", s.origin_index)))?;
            }
        }
    }

    let method = method_label(cfg.sampler.kind).to_string();
    let meta = RefineMeta {
        method: method.clone(),
        checkpoint: a.checkpoint.display().to_string(),
        data: a.data.display().to_string(),
        dataset_sha256: manifest.dataset_sha256.clone(),
        split: split.to_string(),
        runs,
        seeds,
        scale: "raw".into(),
        config: cfg,
    };
    write_text(&sidecar(&a.out, ".meta.toml"), &to_toml(&meta))?;
    println!(
        "{method}: refined {} {split} samples x {runs} run(s) -> {}",
        samples.len(),
        a.out.display()
    );
    Ok(())
}

/// Predictions grouped by run, aligned to the split's samples.
fn aligned_runs(
    path: &Path,
    samples: &[Sample],
    horizon: usize,
    limit: Option<usize>,
) -> Result<Vec<Vec<Vec<f64>>>, Failure> {
    let rows = read_forecasts(path, horizon)?;
    let mut by_run: BTreeMap<usize, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        if by_run
            .entry(r.run)
            .or_default()
            .insert(r.origin_index, r.values)
            .is_some()
        {
            return Err(Failure::data(format!(
                "{}:{}: duplicate prediction for origin {} run {}",
                path.display(),
                r.line,
                r.origin_index,
                r.run
            )));
        }
    }
    if by_run.is_empty() {
        return Err(Failure::data(format!("{}: no predictions", path.display())));
    }
    let available = by_run.len();
    let take = match limit {
        Some(0) => return Err(Failure::usage("--runs must be >= 1")),
        Some(k) if k > available => {
            return Err(Failure::data(format!(
                "{}: {k} runs requested, file has {available}",
                path.display()
            )))
        }
        Some(k) => k,
        None => available,
    };
    let wanted: BTreeSet<usize> = samples.iter().map(|s| s.origin_index).collect();
    let mut out = Vec::with_capacity(take);
    for (run, preds) in by_run.into_iter().take(take) {
        let mut aligned = Vec::with_capacity(samples.len());
        for s in samples {
            let Some(v) = preds.get(&s.origin_index) else {
                return Err(Failure::data(format!(
                    "{}: misaligned predictions, run {run} has no row for origin_index {}",
                    path.display(),
                    s.origin_index
                )));
            };
            aligned.push(s.stats.normalize_all(v));
        }
        let extra = preds.keys().filter(|o| !wanted.contains(o)).count();
        if extra > 0 && run == 0 {
            eprintln!("note: ignoring {extra} prediction rows outside the split");
        }
        out.push(aligned);
    }
    Ok(out)
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{:.2}%", 100.0 * v))
}

fn eval(a: EvalArgs, mut cfg: RunConfig, explicit_config: bool, exec: Exec) -> CmdResult {
    let mut inputs = vec![("dataset directory", a.data.as_path())];
    if let Some(p) = &a.pred {
        inputs.push(("predictions", p.as_path()));
    }
    require_inputs(&inputs)?;
    let split = parse_split(&a.split)?;
    if a.raw {
        cfg.eval.space = MetricSpace::Raw;
    }
    if let Some(n) = a.plot_samples {
        cfg.eval.plot_samples = n;
    }
    let (ds, manifest) = load_dataset(&a.data)?;
    adopt_dataset(&mut cfg, &manifest, explicit_config);
    validated(&cfg)?;
    let samples = ds.split(split);
    if samples.is_empty() {
        return Err(Failure::data(format!("the {split} split is empty")));
    }
    let h = ds.config.horizon;
    let space = cfg.eval.space;
    let project = |values: &[Vec<f64>]| -> Vec<Vec<f64>> {
        samples
            .iter()
            .zip(values)
            .map(|(s, v)| space.project(v, &s.stats))
            .collect()
    };
    let truth = project(&samples.iter().map(|s| s.target.clone()).collect::<Vec<_>>());
    let prior = project(&samples.iter().map(|s| s.prior.clone()).collect::<Vec<_>>());
    let asset = manifest.asset.as_str();

    let mut reports: Vec<EvalReport> = Vec::new();
    let mut refined_first: Option<Vec<Vec<f64>>> = None;
    match &a.pred {
        None => {
            let m = RunMetrics {
                mse: mse(&prior, &truth)?,
                mae: mae(&prior, &truth)?,
            };
            let report = EvalReport::from_runs(asset, h, "prior", vec![m])?;
            println!(
                "prior: mse {:.6} mae {:.6} over {} samples",
                report.mse,
                report.mae,
                samples.len()
            );
            reports.push(report);
        }
        Some(path) => {
            let runs: Vec<Vec<Vec<f64>>> = aligned_runs(path, samples, h, a.runs)?
                .iter()
                .map(|r| project(r))
                .collect();
            let method = a.method.clone().unwrap_or_else(|| {
                std::fs::read_to_string(sidecar(path, ".meta.toml"))
                    .ok()
                    .and_then(|t| toml::from_str::<RefineMeta>(&t).ok())
                    .map_or_else(|| "refined".into(), |m| m.method)
            });
            let c = compare(asset, h, &method, &prior, &runs, &truth, exec)?;
            println!(
                "prior: mse {:.6} mae {:.6}\n{method}: mse {:.6} mae {:.6} ({} run(s))",
                c.prior.mse, c.prior.mae, c.refined.mse, c.refined.mae, c.refined.runs
            );
            if c.degenerate_truth {
                println!("improvement: not reported, the truth is constant");
            } else {
                println!(
                    "improvement: mse {} mae {}",
                    pct(c.improvement.mse),
                    pct(c.improvement.mae)
                );
            }
            refined_first = runs.into_iter().next();
            reports.push(c.prior);
            reports.push(c.refined);
        }
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
    }
    write_report_csv(&a.out, &reports)?;
    write_text(&sidecar(&a.out, ".config.toml"), &cfg.to_toml())?;

    if let (Some(dir), n) = (&a.plot_dir, cfg.eval.plot_samples) {
        let n = if n == 0 { 5 } else { n };
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
        let plots: Vec<PlotSample> = samples
            .iter()
            .enumerate()
            .take(n)
            .map(|(i, s)| {
                let tail = s.context.len().saturating_sub(cfg.eval.plot_context);
                PlotSample {
                    origin_index: s.origin_index,
                    context_tail: space.project(&s.context[tail..], &s.stats),
                    prior: prior[i].clone(),
                    refined: refined_first
                        .as_ref()
                        .map_or_else(Vec::new, |r| r[i].clone()),
                    truth: truth[i].clone(),
                }
            })
            .collect();
        write_plot_csv(&dir.join("plot.csv"), &plots)?;
        for p in &plots {
            write_text(
                &dir.join(format!("sample_{}.svg", p.origin_index)),
                &render_svg(p),
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SynthMeta<'a> {
    seed: u64,
    rows: usize,
    switches: usize,
    spec: &'a SynthSpec,
}

fn synth(a: SynthArgs) -> CmdResult {
    let spec = match &a.spec {
        Some(p) => {
            require_inputs(&[("synth spec", p.as_path())])?;
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
            toml::from_str::<SynthSpec>(&text)
                .map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    let out = synth_generate(&spec, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
    }
    out.series.write_csv(&a.out)?;
    let meta = SynthMeta {
        seed: a.seed,
        rows: out.series.len(),
        switches: out.switches,
        spec: &spec,
    };
    write_text(&sidecar(&a.out, ".meta.toml"), &to_toml(&meta))?;
    println!(
        "wrote {} rows with {} regime switches to {}",
        out.series.len(),
        out.switches,
        a.out.display()
    );
    Ok(())
}

fn params(a: ParamsArgs, cfg: RunConfig) -> CmdResult {
    let model = match &a.checkpoint {
        Some(p) => {
            require_inputs(&[("checkpoint", p.as_path())])?;
            load_checkpoint(p)?.model
        }
        None => {
            let mc = if a.full_size {
                let base = ModelConfig::full_size();
                cfg.model.model_config(base.horizon, base.context)
            } else {
                validated(&cfg)?;
                cfg.model_config()
            };
            RefineBridgeModel::new(mc, cfg.model.init_seed)?
        }
    };
    let store = model.params();
    let encoder: usize = store
        .ids()
        .filter(|&id| model.is_encoder_param(id))
        .map(|id| store.get(id).numel())
        .sum();
    let total = model.param_count();
    let mc = model.config();
    if a.verbose {
        for (name, t) in store.iter() {
            println!("{name:<40} {:>10}  {:?}", t.numel(), t.shape());
        }
    }
    println!(
        "parameters: {total} (encoder {encoder}, denoiser {}) for H={} C={} d={} base={}",
        total - encoder,
        mc.horizon,
        mc.context,
        mc.embed_dim,
        mc.base_channels
    );
    Ok(())
}

fn init_config(a: InitConfigArgs) -> CmdResult {
    let text = RunConfig::default().to_toml();
    match a.out {
        Some(p) => {
            write_text(&p, &text)?;
            println!("wrote default configuration to {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}
