//! Modulating processes for MSR policies.
//!
//! A modulating process is a finite CTMC whose states carry the schedule the
//! server uses while the chain sits there. Three constructions are provided,
//! all built around a loop through the candidate schedules in lexicographic
//! order:
//!
//! * pMSR: the loop itself; jobs are preempted freely on every change.
//! * nMSR: each hop from `w_a` to `w_b` passes through a teardown route that
//!   removes one surplus job at a time, advancing only when one of the
//!   removed slots fires a completion.
//! * sMSR: each hop preempts the surplus jobs at once and waits for all of
//!   their exponential setups to finish, one state per outstanding setup.
//!
//! The switching rate `alpha` is the cycle flow rate: working state `j`
//! leaves at rate `alpha / pi_j`, so `alpha` loop traversals happen per unit
//! time when no switching routes are present.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{feasible, fits, Schedule, Workload};
use crate::numerics::{is_irreducible, stationary_distribution, validate_generator, Matrix};

/// Preemption model of an MSR policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pmsr,
    Nmsr,
    Smsr,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pmsr" => Ok(Mode::Pmsr),
            "nmsr" => Ok(Mode::Nmsr),
            "smsr" => Ok(Mode::Smsr),
            other => Err(invalid(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Pmsr => "pmsr",
            Mode::Nmsr => "nmsr",
            Mode::Smsr => "smsr",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateKind {
    Working,
    Switching,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessState {
    /// Schedule actually served while in this state.
    pub schedule: Schedule,
    pub kind: StateKind,
    /// Jobs holding resources while in setup (sMSR only).
    pub setup_counts: Vec<u32>,
    /// Index into the policy's candidate list for working states.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<usize>,
}

/// What makes a transition fire.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Trigger {
    /// An exponential clock independent of the jobs.
    Timer,
    /// A potential completion of one of the state's slots of this type. The
    /// rate must equal `μᵢ` times the state's type-`i` count.
    Completion { job_type: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
    pub rate: f64,
    pub trigger: Trigger,
}

/// Inputs for building a modulating process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub mode: Mode,
    pub candidates: Vec<Schedule>,
    pub pi: Vec<f64>,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl PolicySpec {
    pub fn new(mode: Mode, candidates: Vec<Schedule>, pi: Vec<f64>, alpha: f64) -> Self {
        Self {
            mode,
            candidates,
            pi,
            alpha,
            gamma: None,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self { alpha, ..self.clone() }
    }

    fn check_shape(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(invalid("policy needs at least one candidate schedule"));
        }
        if self.pi.len() != self.candidates.len() {
            return Err(invalid(format!(
                "pi has {} entries for {} candidates",
                self.pi.len(),
                self.candidates.len()
            )));
        }
        let k = self.candidates[0].len();
        if self.candidates.iter().any(|c| c.len() != k) {
            return Err(invalid("candidate schedules differ in length"));
        }
        if self.pi.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid("pi entries must be finite and non-negative"));
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("pi sums to {total}, expected 1")));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0) || !g.is_finite() {
                return Err(invalid(format!("gamma must be positive, got {g}")));
            }
        }
        Ok(())
    }

    /// Checks the spec's invariants against a workload.
    pub fn validate(&self, w: &Workload) -> Result<()> {
        self.check_shape()?;
        for c in &self.candidates {
            if !feasible(c, w)? {
                return Err(invalid(format!("candidate {c} is not feasible")));
            }
        }
        if self.mode == Mode::Smsr && self.gamma.is_none() {
            return Err(invalid("sMSR policy needs a setup rate gamma"));
        }
        Ok(())
    }
}

/// Working states in loop order: `(candidate index, schedule, pi)`.
fn loop_order(spec: &PolicySpec, notes: &mut Vec<String>) -> Vec<(usize, Schedule, f64)> {
    let mut entries: Vec<(usize, Schedule, f64)> = Vec::new();
    for (idx, (c, &p)) in spec.candidates.iter().zip(&spec.pi).enumerate() {
        if p <= 0.0 {
            notes.push(format!("dropped candidate {c} with zero probability"));
            continue;
        }
        if let Some(e) = entries.iter_mut().find(|e| e.1 == *c) {
            notes.push(format!("merged duplicate candidate {c}"));
            e.2 += p;
        } else {
            entries.push((idx, c.clone(), p));
        }
    }
    let total: f64 = entries.iter().map(|e| e.2).sum();
    for e in &mut entries {
        e.2 /= total;
    }
    entries.sort_by(|a, b| a.1.cmp(&b.1));
    entries
}

/// Finite CTMC driving an MSR policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProcessDoc")]
pub struct ModulatingProcess {
    pub mode: Mode,
    states: Vec<ProcessState>,
    transitions: Vec<Transition>,
    generator: Matrix,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Deserialize)]
struct ProcessDoc {
    mode: Mode,
    states: Vec<ProcessState>,
    transitions: Vec<Transition>,
    generator: Matrix,
    #[serde(default)]
    notes: Vec<String>,
}

impl TryFrom<ProcessDoc> for ModulatingProcess {
    type Error = Error;
    fn try_from(doc: ProcessDoc) -> Result<Self> {
        let mut mp = ModulatingProcess::from_transitions(doc.mode, doc.states, doc.transitions)?;
        let diff = doc
            .generator
            .to_rows()
            .iter()
            .flatten()
            .zip(mp.generator.to_rows().iter().flatten())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if doc.generator.rows() != mp.generator.rows() || diff > 1e-9 * (1.0 + mp.generator.max_abs()) {
            return Err(invalid("serialized generator disagrees with the transition list"));
        }
        mp.notes = doc.notes;
        Ok(mp)
    }
}

impl ModulatingProcess {
    /// Builds a process from states and transitions; the generator is
    /// derived from the transitions.
    pub fn from_transitions(mode: Mode, states: Vec<ProcessState>, transitions: Vec<Transition>) -> Result<Self> {
        let n = states.len();
        if n == 0 {
            return Err(invalid("modulating process needs at least one state"));
        }
        let k = states[0].schedule.len();
        for (i, s) in states.iter().enumerate() {
            if s.schedule.len() != k || s.setup_counts.len() != k {
                return Err(invalid(format!("state {i} has inconsistent dimensions")));
            }
        }
        let mut g = Matrix::zeros(n, n);
        for t in &transitions {
            if t.from >= n || t.to >= n || t.from == t.to {
                return Err(invalid(format!("bad transition {} -> {}", t.from, t.to)));
            }
            if !(t.rate > 0.0) || !t.rate.is_finite() {
                return Err(invalid(format!("transition rate {} must be positive", t.rate)));
            }
            if let Trigger::Completion { job_type } = t.trigger {
                if job_type >= k || states[t.from].schedule.0[job_type] == 0 {
                    return Err(invalid(format!(
                        "completion-triggered transition out of state {} has no type-{job_type} slot",
                        t.from
                    )));
                }
                let dup = transitions
                    .iter()
                    .filter(|u| u.from == t.from && u.trigger == t.trigger);
                if dup.count() > 1 {
                    return Err(invalid("at most one completion transition per state and type"));
                }
            }
            g[(t.from, t.to)] += t.rate;
            g[(t.from, t.from)] -= t.rate;
        }
        validate_generator(&g)?;
        if !is_irreducible(&g) {
            return Err(Error::ReducibleChain("modulating process is not irreducible".into()));
        }
        Ok(Self {
            mode,
            states,
            transitions,
            generator: g,
            notes: Vec::new(),
        })
    }

    /// Process driven by timer transitions only, read off a generator.
    pub fn from_generator(schedules: Vec<Schedule>, generator: &Matrix) -> Result<Self> {
        let n = schedules.len();
        if generator.rows() != n || !generator.is_square() {
            return Err(invalid("generator size does not match state count"));
        }
        let k = schedules.first().map_or(0, Schedule::len);
        let states = schedules
            .into_iter()
            .enumerate()
            .map(|(i, schedule)| ProcessState {
                schedule,
                kind: StateKind::Working,
                setup_counts: vec![0; k],
                candidate: Some(i),
            })
            .collect();
        let mut transitions = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && generator[(i, j)] > 0.0 {
                    transitions.push(Transition {
                        from: i,
                        to: j,
                        rate: generator[(i, j)],
                        trigger: Trigger::Timer,
                    });
                }
            }
        }
        Self::from_transitions(Mode::Pmsr, states, transitions)
    }

    pub fn states(&self) -> &[ProcessState] {
        &self.states
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn generator(&self) -> &Matrix {
        &self.generator
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_types(&self) -> usize {
        self.states[0].schedule.len()
    }

    pub fn outgoing(&self, s: usize) -> impl Iterator<Item = &Transition> {
        self.transitions.iter().filter(move |t| t.from == s)
    }

    /// Per-state type-`i` count.
    pub fn serving(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|s| s.schedule.0[i] as f64).collect()
    }

    /// Largest type-`i` count over all states.
    pub fn beta(&self, i: usize) -> u32 {
        self.states.iter().map(|s| s.schedule.0[i]).max().unwrap_or(0)
    }

    pub fn stationary(&self) -> Result<Vec<f64>> {
        stationary_distribution(&self.generator)
    }

    pub fn working_states(&self) -> impl Iterator<Item = (usize, &ProcessState)> {
        self.states
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == StateKind::Working)
    }

    /// Stationary mass of switching states.
    pub fn switching_fraction(&self) -> Result<f64> {
        let pi = self.stationary()?;
        Ok(self
            .states
            .iter()
            .zip(&pi)
            .filter(|(s, _)| s.kind == StateKind::Switching)
            .map(|(_, p)| p)
            .sum())
    }

    /// Checks `schedule·D + setup·D ≤ P` for every state and that
    /// completion-triggered rates equal `μᵢ` times the slot count.
    pub fn check_against(&self, w: &Workload) -> Result<()> {
        if self.num_types() != w.num_types() {
            return Err(invalid("process and workload disagree on the number of types"));
        }
        for (i, s) in self.states.iter().enumerate() {
            let mut used = w.footprint(s.schedule.counts());
            for (u, x) in used.iter_mut().zip(w.footprint(&s.setup_counts)) {
                *u += x;
            }
            if !fits(&used, w.capacity().as_slice()) {
                return Err(invalid(format!("state {i} exceeds capacity")));
            }
        }
        for t in &self.transitions {
            if let Trigger::Completion { job_type } = t.trigger {
                let expect = w.types()[job_type].service_rate * self.states[t.from].schedule.0[job_type] as f64;
                if (t.rate - expect).abs() > 1e-9 * expect.max(1.0) {
                    return Err(invalid(format!(
                        "completion-triggered rate {} out of state {} should be {expect}",
                        t.rate, t.from
                    )));
                }
            }
        }
        Ok(())
    }
}

fn working(schedule: Schedule, candidate: usize) -> ProcessState {
    let k = schedule.len();
    ProcessState {
        schedule,
        kind: StateKind::Working,
        setup_counts: vec![0; k],
        candidate: Some(candidate),
    }
}

fn switching(schedule: Schedule, setup_counts: Vec<u32>) -> ProcessState {
    ProcessState {
        schedule,
        kind: StateKind::Switching,
        setup_counts,
        candidate: None,
    }
}

fn timer(from: usize, to: usize, rate: f64) -> Transition {
    Transition {
        from,
        to,
        rate,
        trigger: Trigger::Timer,
    }
}

/// Route builder: given source/target working-state indices and schedules,
/// appends switching states and transitions.
fn build_loop(
    spec: &PolicySpec,
    mode: Mode,
    mut route: impl FnMut(usize, usize, &Schedule, &Schedule, f64, &mut Vec<ProcessState>, &mut Vec<Transition>),
) -> Result<ModulatingProcess> {
    spec.check_shape()?;
    let mut notes = Vec::new();
    let order = loop_order(spec, &mut notes);
    let n = order.len();
    let mut states: Vec<ProcessState> = order.iter().map(|(idx, s, _)| working(s.clone(), *idx)).collect();
    let mut transitions = Vec::new();
    if n > 1 {
        for j in 0..n {
            let next = (j + 1) % n;
            let exit_rate = spec.alpha / order[j].2;
            route(
                j,
                next,
                &order[j].1,
                &order[next].1,
                exit_rate,
                &mut states,
                &mut transitions,
            );
        }
    }
    let mut mp = ModulatingProcess::from_transitions(mode, states, transitions)?;
    mp.notes = notes;
    Ok(mp)
}

/// Loop through the candidates with exit rate `alpha/pi_j` from state `j`.
pub fn build_pmsr(spec: &PolicySpec) -> Result<ModulatingProcess> {
    build_loop(spec, Mode::Pmsr, |a, b, _, _, rate, _, transitions| {
        transitions.push(timer(a, b, rate));
    })
}

/// Non-preemptive loop: surplus jobs of `w_a` over `min(w_a, w_b)` are torn
/// down one at a time in increasing type order, each step waiting for a
/// potential completion of the type being removed.
pub fn build_nmsr(spec: &PolicySpec, mu: &[f64]) -> Result<ModulatingProcess> {
    if let Some(c) = spec.candidates.first() {
        if mu.len() != c.len() {
            return Err(invalid("service-rate vector has the wrong length"));
        }
    }
    if mu.iter().any(|m| !(*m > 0.0)) {
        return Err(invalid("service rates must be positive"));
    }
    build_loop(spec, Mode::Nmsr, |a, b, wa, wb, exit_rate, states, transitions| {
        let target = wa.meet(wb);
        let steps: u32 = wa.total() - target.total();
        if steps == 0 {
            transitions.push(timer(a, b, exit_rate));
            return;
        }
        let k = wa.len();
        states.push(switching(wa.clone(), vec![0; k]));
        let mut at = states.len() - 1;
        transitions.push(timer(a, at, exit_rate));
        let mut current = wa.clone();
        let mut done = 0;
        for i in 0..k {
            while current.0[i] > target.0[i] {
                let rate = mu[i] * current.0[i] as f64;
                current.0[i] -= 1;
                done += 1;
                let to = if done == steps {
                    b
                } else {
                    states.push(switching(current.clone(), vec![0; k]));
                    states.len() - 1
                };
                transitions.push(Transition {
                    from: at,
                    to,
                    rate,
                    trigger: Trigger::Completion { job_type: i },
                });
                at = to;
            }
        }
    })
}

/// Setup-time loop: the surplus jobs of `w_a` all enter setup at once and the
/// route holds their resources until every setup completes (rates `mγ`).
pub fn build_smsr(spec: &PolicySpec) -> Result<ModulatingProcess> {
    let gamma = spec
        .gamma
        .ok_or_else(|| invalid("sMSR policy needs a setup rate gamma"))?;
    build_loop(spec, Mode::Smsr, |a, b, wa, wb, exit_rate, states, transitions| {
        let serving = wa.meet(wb);
        let mut setup: Vec<u32> = wa.0.iter().zip(&serving.0).map(|(x, y)| x - y).collect();
        let total: u32 = setup.iter().sum();
        if total == 0 {
            transitions.push(timer(a, b, exit_rate));
            return;
        }
        states.push(switching(serving.clone(), setup.clone()));
        let mut at = states.len() - 1;
        transitions.push(timer(a, at, exit_rate));
        for m in (1..=total).rev() {
            let rate = m as f64 * gamma;
            let to = if m == 1 {
                b
            } else {
                let i = setup.iter().position(|&c| c > 0).expect("outstanding setup");
                setup[i] -= 1;
                states.push(switching(serving.clone(), setup.clone()));
                states.len() - 1
            };
            transitions.push(timer(at, to, rate));
            at = to;
        }
    })
}

/// Builds the process for `spec.mode`, validating the spec against `w`.
pub fn build(spec: &PolicySpec, w: &Workload) -> Result<ModulatingProcess> {
    spec.validate(w)?;
    let mp = match spec.mode {
        Mode::Pmsr => build_pmsr(spec)?,
        Mode::Nmsr => build_nmsr(spec, &w.service_rates())?,
        Mode::Smsr => build_smsr(spec)?,
    };
    mp.check_against(w)?;
    Ok(mp)
}

/// Steady-state average schedule `Σ_s π_s u(s)`.
pub fn average_schedule(mp: &ModulatingProcess) -> Result<Vec<f64>> {
    let pi = mp.stationary()?;
    let mut avg = vec![0.0; mp.num_types()];
    for (s, p) in mp.states().iter().zip(&pi) {
        for (a, &c) in avg.iter_mut().zip(s.schedule.counts()) {
            *a += p * c as f64;
        }
    }
    Ok(avg)
}
