use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use msr_core::analysis::{analyze as analyze_policy, AnalysisReport};
use msr_core::par::{self, Execution};
use msr_core::policy::build;
use msr_core::simulator::{simulate_firstfit, simulate_maxweight, simulate_msr, ArrivalSource, SimConfig, SimReport};
use msr_core::synthesis::{default_alpha_grid, predict_alpha_star, synthesize, AlphaPrediction, SynthesisResult};
use msr_core::trace::{
    downsample, fit_workload, group_types, parse_trace, summarize, to_arrivals, write_trace, SyntheticTrace,
    TraceSummary, TypedTrace,
};
use msr_core::{Error, Mode, ModulatingProcess, PolicySpec, ResourceVector, Workload};
use serde::Serialize;

use crate::output::{emit, fmt9, fmt9_opt, to_json, RunManifest};
use crate::{
    AnalyzeArgs, Dimension, PolicyName, SimArgs, SimulateArgs, SweepArgs, SynthArgs, TraceGenArgs, TraceInput,
    TracePrepArgs, TraceSimArgs, EXIT_ANALYTIC, EXIT_INPUT, EXIT_SIM_UNSTABLE,
};

/// Default switching rate for pMSR.
const PMSR_ALPHA: f64 = 2.0;
/// Points on the grid searched for the best nMSR/sMSR switching rate.
const ALPHA_GRID_POINTS: usize = 20;

pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(
            Error::InfeasibleWorkload(_)
            | Error::UnservableType { .. }
            | Error::UnstableType { .. }
            | Error::TypeNeverServed { .. }
            | Error::LpInfeasible,
        ) => EXIT_ANALYTIC,
        Some(Error::Singular { .. } | Error::LpUnbounded) => 1,
        _ => EXIT_INPUT,
    }
}

fn read_workload(path: &Path) -> Result<Workload> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Workload::from_json(&text).with_context(|| format!("parsing workload {}", path.display()))
}

/// Accepts either a `msr synth` output or a bare modulating process.
fn read_process(path: &Path) -> Result<ModulatingProcess> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)
        .map_err(Error::from)
        .with_context(|| format!("parsing {}", path.display()))?;
    let inner = match doc.get_mut("process") {
        Some(p) => p.take(),
        None => doc,
    };
    serde_json::from_value(inner)
        .map_err(Error::from)
        .with_context(|| format!("parsing modulating process in {}", path.display()))
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn sim_config(a: &SimArgs) -> SimConfig {
    let mut cfg = SimConfig::new(a.horizon, a.warmup.unwrap_or(0.1 * a.horizon), a.seed, a.reps);
    cfg.guard = a.guard;
    cfg.execution = execution(a.sequential);
    cfg
}

/// A policy ready to analyze and simulate.
#[derive(Serialize)]
struct Resolved {
    synthesis: SynthesisResult,
    spec: PolicySpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha_prediction: Option<AlphaPrediction>,
    process: ModulatingProcess,
}

/// With `fallback`, an unstabilizable workload still yields a policy (at
/// switching rate 1 when no rate is given and none can be predicted).
fn resolve(w: &Workload, mode: Mode, alpha: Option<f64>, gamma: Option<f64>, fallback: bool) -> Result<Resolved> {
    let synthesis = synthesize(w)?;
    if !synthesis.feasible && !fallback {
        return Err(Error::InfeasibleWorkload(format!(
            "max load {} is not below 1",
            synthesis.rho_max
        ))
        .into());
    }
    let mut spec = PolicySpec::new(mode, synthesis.candidates.clone(), synthesis.pi.clone(), PMSR_ALPHA);
    if let Some(g) = gamma {
        spec = spec.with_gamma(g);
    }
    let mut alpha_prediction = None;
    spec.alpha = match (alpha, mode) {
        (Some(a), _) => a,
        (None, Mode::Pmsr) => PMSR_ALPHA,
        (None, _) => {
            let predicted = default_alpha_grid(w, &spec, ALPHA_GRID_POINTS)
                .and_then(|grid| predict_alpha_star(w, &spec, &grid, Execution::Parallel));
            match predicted {
                Ok(p) => {
                    let star = p.alpha_star;
                    alpha_prediction = Some(p);
                    match star {
                        Some(a) => a,
                        None if fallback => 1.0,
                        None => {
                            return Err(
                                Error::InfeasibleWorkload("no switching rate on the grid is stable".into()).into(),
                            )
                        }
                    }
                }
                Err(_) if fallback => 1.0,
                Err(e) => return Err(e.into()),
            }
        }
    };
    let process = build(&spec, w)?;
    Ok(Resolved {
        synthesis,
        spec,
        alpha_prediction,
        process,
    })
}

pub fn synth(a: &SynthArgs) -> Result<u8> {
    let w = read_workload(&a.workload)?;
    let resolved = resolve(&w, a.mode, a.alpha, a.gamma, a.allow_unstable)?;
    emit(
        a.output.as_deref(),
        &to_json(&resolved)?,
        RunManifest::new("synth", a, None)?,
        &[],
    )?;
    Ok(0)
}

pub fn analyze(a: &AnalyzeArgs) -> Result<u8> {
    let w = read_workload(&a.workload)?;
    let mp = read_process(&a.policy)?;
    mp.check_against(&w)?;
    let report = analyze_policy(&mp, &w)?;
    emit(
        a.output.as_deref(),
        &to_json(&report)?,
        RunManifest::new("analyze", a, None)?,
        &[],
    )?;
    Ok(if report.is_stable() { 0 } else { EXIT_ANALYTIC })
}

fn write_events(path: &Path, report: &SimReport) -> Result<()> {
    let mut out = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    out.write_record(["time", "kind", "job_type", "state"])?;
    if let Some(run) = report.runs.first() {
        for e in &run.events {
            out.write_record([
                fmt9(e.time),
                e.kind.to_string(),
                e.job_type.map(|t| t.to_string()).unwrap_or_default(),
                e.state.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn simulate(a: &SimulateArgs) -> Result<u8> {
    let w = read_workload(&a.workload)?;
    let mut cfg = sim_config(&a.sim);
    cfg.log_events = a.events.is_some();
    let report = match a.policy.as_str() {
        "maxweight" => simulate_maxweight(&w, &cfg)?,
        "firstfit" => simulate_firstfit(&w, &cfg)?,
        path => simulate_msr(&w, &read_process(Path::new(path))?, &cfg, a.sim.backfill)?,
    };
    if a.sim.backfill && matches!(a.policy.as_str(), "maxweight" | "firstfit") {
        log::warn!("--backfill has no effect on baseline policies");
    }
    let extra: Vec<PathBuf> = a.events.iter().cloned().collect();
    if let Some(p) = &a.events {
        write_events(p, &report)?;
    }
    emit(
        a.output.as_deref(),
        &to_json(&report)?,
        RunManifest::new("simulate", a, Some(a.sim.seed))?,
        &extra,
    )?;
    Ok(if report.unstable { EXIT_SIM_UNSTABLE } else { 0 })
}

/// One (grid point, policy) cell of a sweep.
struct SweepRow {
    grid_value: f64,
    policy: PolicyName,
    status: String,
    alpha: Option<f64>,
    gamma: Option<f64>,
    analysis: Option<AnalysisReport>,
    sim: Option<SimReport>,
    message: String,
}

fn sweep_row(a: &SweepArgs, base: &Workload, index: usize, grid_value: f64, policy: PolicyName) -> SweepRow {
    let mut row = SweepRow {
        grid_value,
        policy,
        status: "ok".into(),
        alpha: None,
        gamma: None,
        analysis: None,
        sim: None,
        message: String::new(),
    };
    if let Err(e) = fill_row(a, base, index, &mut row) {
        row.status = match exit_code(&e) {
            EXIT_ANALYTIC => "unstable".into(),
            _ => "error".into(),
        };
        row.message = format!("{e:#}");
    }
    row
}

fn fill_row(a: &SweepArgs, base: &Workload, index: usize, row: &mut SweepRow) -> Result<()> {
    let w = match a.dimension {
        Dimension::Load => base.scale_arrivals(row.grid_value)?,
        _ => base.clone(),
    };
    let mp = match row.policy.mode() {
        Some(mode) => {
            let alpha = if a.dimension == Dimension::Alpha {
                Some(row.grid_value)
            } else {
                a.alpha
            };
            let gamma = if a.dimension == Dimension::Gamma {
                Some(row.grid_value)
            } else {
                a.gamma
            };
            let gamma = if mode == Mode::Smsr { gamma } else { None };
            let r = resolve(&w, mode, alpha, gamma, false)?;
            row.alpha = Some(r.spec.alpha);
            row.gamma = r.spec.gamma;
            let report = analyze_policy(&r.process, &w)?;
            let stable = report.is_stable();
            row.analysis = Some(report);
            if !stable {
                row.status = "unstable".into();
                return Ok(());
            }
            Some(r.process)
        }
        None => None,
    };
    if a.analytic_only {
        return Ok(());
    }
    let mut cfg = sim_config(&a.sim);
    cfg.stream = (index as u64) << 32;
    let report = match (row.policy, &mp) {
        (PolicyName::Maxweight, _) => simulate_maxweight(&w, &cfg)?,
        (PolicyName::Firstfit, _) => simulate_firstfit(&w, &cfg)?,
        (_, Some(mp)) => simulate_msr(&w, mp, &cfg, a.sim.backfill)?,
        (_, None) => unreachable!("MSR rows always carry a process"),
    };
    if report.unstable {
        row.status = "sim_unstable".into();
    }
    row.sim = Some(report);
    Ok(())
}

fn sweep_csv(rows: &[SweepRow], k: usize) -> Result<String> {
    let mut out = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["grid_value", "policy", "status", "alpha", "gamma"]
        .map(String::from)
        .to_vec();
    for i in 0..k {
        for f in ["sim_mean", "sim_ci", "lower", "approx", "upper"] {
            header.push(format!("q{i}_{f}"));
        }
    }
    header.extend(
        [
            "total_sim_mean",
            "total_sim_ci",
            "total_lower",
            "total_approx",
            "total_upper",
            "response_sim_mean",
            "response_sim_ci",
            "response_approx",
            "message",
        ]
        .map(String::from),
    );
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            fmt9(r.grid_value),
            r.policy.as_str().into(),
            r.status.clone(),
            fmt9_opt(r.alpha),
            fmt9_opt(r.gamma),
        ];
        let typed = |i: usize| {
            r.analysis
                .as_ref()
                .and_then(|an| an.types.get(i))
                .and_then(|t| t.stable())
        };
        for i in 0..k {
            let q = r.sim.as_ref().map(|s| s.queue_length[i]);
            let t = typed(i);
            rec.push(fmt9_opt(q.map(|e| e.mean)));
            rec.push(fmt9_opt(q.and_then(|e| e.half_width)));
            rec.push(fmt9_opt(t.map(|t| t.lower)));
            rec.push(fmt9_opt(t.map(|t| t.approx)));
            rec.push(fmt9_opt(t.map(|t| t.upper)));
        }
        let totals = r.analysis.as_ref().and_then(|an| an.totals.as_ref());
        let total_q = r.sim.as_ref().map(|s| s.total_queue_length);
        let resp = r.sim.as_ref().and_then(|s| s.mean_response_time);
        rec.push(fmt9_opt(total_q.map(|e| e.mean)));
        rec.push(fmt9_opt(total_q.and_then(|e| e.half_width)));
        rec.push(fmt9_opt(totals.map(|t| t.lower)));
        rec.push(fmt9_opt(totals.map(|t| t.mean_queue_length)));
        rec.push(fmt9_opt(totals.map(|t| t.upper)));
        rec.push(fmt9_opt(resp.map(|e| e.mean)));
        rec.push(fmt9_opt(resp.and_then(|e| e.half_width)));
        rec.push(fmt9_opt(totals.map(|t| t.mean_response_time)));
        rec.push(r.message.clone());
        out.write_record(&rec)?;
    }
    let bytes = out.into_inner().map_err(|e| anyhow!("flushing csv: {e}"))?;
    Ok(String::from_utf8(bytes)?)
}

pub fn sweep(a: &SweepArgs) -> Result<u8> {
    let w = read_workload(&a.workload)?;
    if a.grid.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
        bail!(Error::InvalidInput("grid values must be positive and finite".into()));
    }
    if a.grid.windows(2).any(|p| p[1] <= p[0]) {
        bail!(Error::InvalidInput("grid must be strictly increasing".into()));
    }
    if a.policies.is_empty() {
        bail!(Error::InvalidInput("no policies given".into()));
    }
    if !a.analytic_only {
        sim_config(&a.sim).validate()?;
    }
    let cells: Vec<(usize, f64, PolicyName)> = a
        .grid
        .iter()
        .flat_map(|&g| a.policies.iter().map(move |&p| (g, p)))
        .enumerate()
        .map(|(i, (g, p))| (i, g, p))
        .collect();
    let rows = par::map(execution(a.sim.sequential), &cells, |&(i, g, p)| {
        sweep_row(a, &w, i, g, p)
    });
    for r in rows.iter().filter(|r| !r.message.is_empty()) {
        log::warn!("{} at {}: {}", r.policy.as_str(), r.grid_value, r.message);
    }
    let body = sweep_csv(&rows, w.num_types())?;
    emit(
        a.output.as_deref(),
        &body,
        RunManifest::new("sweep", a, Some(a.sim.seed))?,
        &[],
    )?;
    if rows.iter().all(|r| r.status == "error") {
        return Ok(EXIT_INPUT);
    }
    Ok(0)
}

fn load_trace(input: &TraceInput, seed: u64) -> Result<(TypedTrace, Workload)> {
    let records = parse_trace(&input.trace).with_context(|| format!("reading trace {}", input.trace.display()))?;
    let grouped = group_types(&records, input.tolerance, input.top_n)?;
    let typed = if input.keep < 1.0 {
        downsample(&grouped, input.keep, seed)?
    } else {
        grouped
    };
    let w = fit_workload(&typed, ResourceVector::new(input.capacity.clone())?)?;
    Ok((typed, w))
}

#[derive(Serialize)]
struct TracePrepOutput {
    summary: TraceSummary,
    workload: Workload,
}

pub fn trace_prep(a: &TracePrepArgs) -> Result<u8> {
    let (typed, workload) = load_trace(&a.input, a.seed)?;
    let out = TracePrepOutput {
        summary: summarize(&typed)?,
        workload,
    };
    emit(
        a.output.as_deref(),
        &to_json(&out)?,
        RunManifest::new("trace prep", a, Some(a.seed))?,
        &[],
    )?;
    Ok(0)
}

#[derive(Serialize)]
struct TraceSimOutput {
    summary: TraceSummary,
    workload: Workload,
    #[serde(skip_serializing_if = "Option::is_none")]
    spec: Option<PolicySpec>,
    report: SimReport,
}

pub fn trace_sim(a: &TraceSimArgs) -> Result<u8> {
    let (typed, w) = load_trace(&a.input, a.seed)?;
    let arrivals = to_arrivals(&typed);
    let span = arrivals.last().map_or(0.0, |x| x.time);
    let horizon = match (a.horizon, a.fitted) {
        (Some(h), _) => h,
        (None, false) => span,
        (None, true) => bail!(Error::InvalidInput("--fitted needs --horizon".into())),
    };
    let mut cfg = SimConfig::new(horizon, a.warmup.unwrap_or(0.1 * horizon), a.seed, a.reps);
    cfg.guard = a.guard;
    cfg.execution = execution(a.sequential);
    if !a.fitted {
        cfg.arrivals = ArrivalSource::Trace(Arc::from(arrivals));
    }
    let (spec, report) = match a.policy {
        PolicyName::Maxweight => (None, simulate_maxweight(&w, &cfg)?),
        PolicyName::Firstfit => (None, simulate_firstfit(&w, &cfg)?),
        p => {
            let mode = p.mode().expect("MSR policy");
            let r = resolve(&w, mode, a.alpha, a.gamma, true)?;
            let report = simulate_msr(&w, &r.process, &cfg, a.backfill)?;
            (Some(r.spec), report)
        }
    };
    let unstable = report.unstable;
    let out = TraceSimOutput {
        summary: summarize(&typed)?,
        workload: w,
        spec,
        report,
    };
    emit(
        a.output.as_deref(),
        &to_json(&out)?,
        RunManifest::new("trace sim", a, Some(a.seed))?,
        &[],
    )?;
    Ok(if unstable { EXIT_SIM_UNSTABLE } else { 0 })
}

pub fn trace_gen(a: &TraceGenArgs) -> Result<u8> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let synth: SyntheticTrace = serde_json::from_str(&text)
        .map_err(Error::from)
        .with_context(|| format!("parsing {}", a.config.display()))?;
    let records = synth.generate(a.seed)?;
    let mut buf = Vec::new();
    write_trace(&records, &mut buf)?;
    emit(
        a.output.as_deref(),
        std::str::from_utf8(&buf)?,
        RunManifest::new("trace gen", a, Some(a.seed))?,
        &[],
    )?;
    Ok(0)
}
