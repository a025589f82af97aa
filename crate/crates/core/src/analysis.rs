//! Queue-length bounds and approximations for MSR policies.
//!
//! Each job type is analysed on its own through the MSR-1 system that shares
//! the policy's modulating process: in state `s` type-`i` jobs complete at
//! rate `μᵢ·uᵢ(s)` whenever there is work. "Queue length" throughout means
//! the number of jobs in system (waiting plus in service).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::Workload;
use crate::numerics::{erlang_c, solve_linear};
use crate::policy::ModulatingProcess;

/// Stability guard on `1 - ρ`.
const STABILITY_MARGIN: f64 = 1e-9;

/// Relative completions `Δ(s)` of type `i`: expected extra completions,
/// starting from state `s`, compared to the long-run rate. Normalized so
/// that `E[Δ(m)] = 0` under the stationary distribution.
pub fn relative_completions(mp: &ModulatingProcess, i: usize, mu_i: f64) -> Result<Vec<f64>> {
    if i >= mp.num_types() {
        return Err(invalid(format!("type {i} out of range")));
    }
    let pi = mp.stationary()?;
    let rate: Vec<f64> = mp.serving(i).iter().map(|u| mu_i * u).collect();
    relative_completions_with(mp, &pi, &rate)
}

fn relative_completions_with(mp: &ModulatingProcess, pi: &[f64], rate: &[f64]) -> Result<Vec<f64>> {
    let n = mp.num_states();
    let mean: f64 = pi.iter().zip(rate).map(|(p, r)| p * r).sum();
    let g = mp.generator();
    let mut a = g.clone();
    let mut b: Vec<f64> = rate.iter().map(|r| mean - r).collect();
    for (j, p) in pi.iter().enumerate() {
        a[(n - 1, j)] = *p;
    }
    b[n - 1] = 0.0;
    let delta = solve_linear(&a, &b)?;

    let scale = 1.0 + rate.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let gd = g.mul_vec(&delta);
    let residual = gd
        .iter()
        .zip(rate)
        .map(|(x, r)| (x - (mean - r)).abs())
        .fold(0.0f64, f64::max);
    if residual > 1e-9 * scale {
        return Err(Error::Singular { pivot: residual });
    }
    Ok(delta)
}

/// Completion-weighted distribution: `P{ν = s} ∝ π_s·uᵢ(s)`.
pub fn nu_distribution(mp: &ModulatingProcess, i: usize) -> Result<Vec<f64>> {
    let pi = mp.stationary()?;
    nu_with(&pi, &mp.serving(i), i)
}

fn nu_with(pi: &[f64], u: &[f64], i: usize) -> Result<Vec<f64>> {
    let weights: Vec<f64> = pi.iter().zip(u).map(|(p, x)| p * x).collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::TypeNeverServed { job_type: i });
    }
    Ok(weights.into_iter().map(|x| x / total).collect())
}

/// Per-type analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeAnalysis {
    pub job_type: usize,
    pub rho: f64,
    /// Largest number of type-`i` slots in any state.
    pub beta: u32,
    /// Mean number of type-`i` slots, `E[uᵢ]`.
    pub mean_slots: f64,
    pub delta: Vec<f64>,
    pub e_delta_nu: f64,
    pub lower: f64,
    pub upper: f64,
    pub approx: f64,
}

/// Bounds on the mean number of type-`i` jobs in system. The `approx` field
/// is left equal to the midpoint; use [`queue_approx`] or [`analyze_type`]
/// for the approximation.
pub fn queue_bounds(mp: &ModulatingProcess, w: &Workload, i: usize) -> Result<TypeAnalysis> {
    let pi = mp.stationary()?;
    bounds_with(mp, w, i, &pi)
}

fn bounds_with(mp: &ModulatingProcess, w: &Workload, i: usize, pi: &[f64]) -> Result<TypeAnalysis> {
    if mp.num_types() != w.num_types() {
        return Err(invalid("process and workload disagree on the number of types"));
    }
    if i >= w.num_types() {
        return Err(invalid(format!("type {i} out of range")));
    }
    let jt = &w.types()[i];
    let u = mp.serving(i);
    let beta = mp.beta(i);
    let n = mp.num_states();
    if jt.arrival_rate == 0.0 {
        return Ok(TypeAnalysis {
            job_type: i,
            rho: 0.0,
            beta,
            mean_slots: pi.iter().zip(&u).map(|(p, x)| p * x).sum(),
            delta: vec![0.0; n],
            e_delta_nu: 0.0,
            lower: 0.0,
            upper: 0.0,
            approx: 0.0,
        });
    }
    let nu = nu_with(pi, &u, i)?;
    let mean_slots: f64 = pi.iter().zip(&u).map(|(p, x)| p * x).sum();
    let rho = jt.arrival_rate / (jt.service_rate * mean_slots);
    if 1.0 - rho < STABILITY_MARGIN {
        return Err(Error::UnstableType { job_type: i, rho });
    }
    let rate: Vec<f64> = u.iter().map(|x| jt.service_rate * x).collect();
    let delta = relative_completions_with(mp, pi, &rate)?;
    let e_delta_nu: f64 = nu.iter().zip(&delta).map(|(a, b)| a * b).sum();
    let primary = (rho + e_delta_nu) / (1.0 - rho);
    let dmax = delta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let dmin = delta.iter().cloned().fold(f64::INFINITY, f64::min);
    let lower = primary - dmax;
    let upper = primary - dmin + beta as f64;
    Ok(TypeAnalysis {
        job_type: i,
        rho,
        beta,
        mean_slots,
        delta,
        e_delta_nu,
        lower,
        upper,
        approx: 0.5 * (lower + upper),
    })
}

fn approx_from(t: &TypeAnalysis) -> Result<f64> {
    if t.rho == 0.0 {
        return Ok(0.0);
    }
    let k = t.mean_slots;
    let pq = erlang_c(k, t.rho)?.probability;
    let raw = pq * (t.rho + t.rho * t.e_delta_nu) / (1.0 - t.rho) + t.rho * k;
    Ok(raw.clamp(t.lower, t.upper))
}

/// Approximate mean number of type-`i` jobs in system, clamped into the
/// bounds.
pub fn queue_approx(mp: &ModulatingProcess, w: &Workload, i: usize) -> Result<f64> {
    approx_from(&queue_bounds(mp, w, i)?)
}

/// Bounds plus approximation for type `i`.
pub fn analyze_type(mp: &ModulatingProcess, w: &Workload, i: usize) -> Result<TypeAnalysis> {
    let pi = mp.stationary()?;
    analyze_type_with(mp, w, i, &pi)
}

fn analyze_type_with(mp: &ModulatingProcess, w: &Workload, i: usize, pi: &[f64]) -> Result<TypeAnalysis> {
    let mut t = bounds_with(mp, w, i, pi)?;
    t.approx = approx_from(&t)?;
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TypeOutcome {
    Stable(TypeAnalysis),
    Unstable { job_type: usize, rho: f64 },
}

impl TypeOutcome {
    pub fn stable(&self) -> Option<&TypeAnalysis> {
        match self {
            TypeOutcome::Stable(t) => Some(t),
            TypeOutcome::Unstable { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub lower: f64,
    pub upper: f64,
    /// Sum of per-type approximations.
    pub mean_queue_length: f64,
    /// Little's law: total mean number in system over total arrival rate.
    pub mean_response_time: f64,
    /// `(Σ λᵢ E[Qᵢ]) / Λ²`, an arrival-weighted aggregate kept for
    /// comparison only.
    pub weighted_response_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub types: Vec<TypeOutcome>,
    /// Absent when any type is unstable.
    pub totals: Option<Totals>,
}

impl AnalysisReport {
    pub fn is_stable(&self) -> bool {
        self.totals.is_some()
    }

    pub fn mean_response_time(&self) -> Option<f64> {
        self.totals.as_ref().map(|t| t.mean_response_time)
    }
}

/// Full per-type analysis plus totals.
pub fn analyze(mp: &ModulatingProcess, w: &Workload) -> Result<AnalysisReport> {
    let pi = mp.stationary()?;
    let mut types = Vec::with_capacity(w.num_types());
    for i in 0..w.num_types() {
        match analyze_type_with(mp, w, i, &pi) {
            Ok(t) => types.push(TypeOutcome::Stable(t)),
            Err(Error::UnstableType { job_type, rho }) => types.push(TypeOutcome::Unstable { job_type, rho }),
            Err(Error::TypeNeverServed { job_type }) => types.push(TypeOutcome::Unstable {
                job_type,
                rho: f64::INFINITY,
            }),
            Err(e) => return Err(e),
        }
    }
    let stable: Vec<&TypeAnalysis> = types.iter().filter_map(TypeOutcome::stable).collect();
    let totals = (stable.len() == types.len()).then(|| {
        let lambda = w.total_arrival_rate();
        let q: f64 = stable.iter().map(|t| t.approx).sum();
        let weighted: f64 = stable
            .iter()
            .map(|t| w.types()[t.job_type].arrival_rate * t.approx)
            .sum();
        Totals {
            lower: stable.iter().map(|t| t.lower).sum(),
            upper: stable.iter().map(|t| t.upper).sum(),
            mean_queue_length: q,
            mean_response_time: q / lambda,
            weighted_response_time: weighted / (lambda * lambda),
        }
    });
    Ok(AnalysisReport { types, totals })
}
