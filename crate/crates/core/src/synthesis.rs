//! Candidate-set optimization and switching-rate selection.

use serde::{Deserialize, Serialize};

use crate::analysis::analyze;
use crate::error::{invalid, Error, Result};
use crate::model::{enumerate_maximal_schedules, unservable_type, Schedule, Workload, DEFAULT_ENUMERATION_CAP};
use crate::numerics::{lp_maximize, LinearProgram, PIVOT_TOL};
use crate::par::{self, Execution};
use crate::policy::{build, Mode, PolicySpec};

/// Weights below this are treated as zero.
const DROP_TOL: f64 = 1e-12;

/// Optimal candidate schedules and their time fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub candidates: Vec<Schedule>,
    pub pi: Vec<f64>,
    pub rho_per_type: Vec<f64>,
    pub rho_max: f64,
    pub feasible: bool,
}

impl SynthesisResult {
    /// Time-averaged schedule `πW`.
    pub fn average_schedule(&self) -> Vec<f64> {
        average(&self.candidates, &self.pi)
    }
}

fn average(candidates: &[Schedule], pi: &[f64]) -> Vec<f64> {
    let k = candidates.first().map_or(0, Schedule::len);
    let mut avg = vec![0.0; k];
    for (c, p) in candidates.iter().zip(pi) {
        for (a, &x) in avg.iter_mut().zip(c.counts()) {
            *a += p * x as f64;
        }
    }
    avg
}

/// Per-type load `ρᵢ = (λᵢ/μᵢ)/(πW)ᵢ` of a hand-supplied `(W, π)`.
pub fn evaluate(w: &Workload, candidates: &[Schedule], pi: &[f64]) -> Result<Vec<f64>> {
    if candidates.len() != pi.len() || candidates.is_empty() {
        return Err(invalid("candidates and pi must be non-empty and of equal length"));
    }
    if candidates.iter().any(|c| c.len() != w.num_types()) {
        return Err(invalid("candidate length does not match the number of types"));
    }
    let avg = average(candidates, pi);
    Ok(w.offered_load()
        .iter()
        .zip(&avg)
        .map(|(&l, &a)| match (l > 0.0, a > 0.0) {
            (false, _) => 0.0,
            (true, true) => l / a,
            (true, false) => f64::INFINITY,
        })
        .collect())
}

/// Solves the min-max load problem over maximal schedules.
pub fn synthesize(w: &Workload) -> Result<SynthesisResult> {
    synthesize_with_cap(w, DEFAULT_ENUMERATION_CAP)
}

pub fn synthesize_with_cap(w: &Workload, cap: usize) -> Result<SynthesisResult> {
    let load = w.offered_load();
    if load.iter().all(|&l| l == 0.0) {
        return Err(invalid("synthesis needs at least one positive arrival rate"));
    }
    let schedules = enumerate_maximal_schedules(w, cap)?;
    if let Some(job_type) = unservable_type(&load, &schedules) {
        return Err(Error::UnservableType { job_type });
    }
    let m = schedules.len();
    let mut objective = vec![0.0; m + 1];
    objective[m] = 1.0;
    let mut lp = LinearProgram::new(objective);
    let active: Vec<usize> = (0..load.len()).filter(|&i| load[i] > 0.0).collect();
    for &i in &active {
        let mut row: Vec<f64> = schedules.iter().map(|s| -(s.0[i] as f64)).collect();
        row.push(load[i]);
        lp.add_ub(row, 0.0);
    }
    let mut sum = vec![1.0; m];
    sum.push(0.0);
    lp.add_eq(sum, 1.0);
    let sol = lp_maximize(&lp)?;
    if sol.values[m] <= DROP_TOL {
        return Err(Error::UnservableType { job_type: active[0] });
    }

    let mut support: Vec<usize> = (0..m).filter(|&s| sol.values[s] > DROP_TOL).collect();
    let mut weights: Vec<f64> = support.iter().map(|&s| sol.values[s]).collect();
    reduce_support(&schedules, &active, &mut support, &mut weights);

    let total: f64 = weights.iter().sum();
    let pi: Vec<f64> = weights.iter().map(|x| x / total).collect();
    let candidates: Vec<Schedule> = support.iter().map(|&s| schedules[s].clone()).collect();
    let rho_per_type = evaluate(w, &candidates, &pi)?;
    let rho_max = rho_per_type.iter().cloned().fold(0.0, f64::max);
    Ok(SynthesisResult {
        candidates,
        pi,
        rho_per_type,
        rho_max,
        feasible: rho_max < 1.0 - 1e-9,
    })
}

/// Drops weights until at most `active.len()` schedules remain, never
/// lowering any type's completion rate relative to the total weight.
fn reduce_support(schedules: &[Schedule], active: &[usize], support: &mut Vec<usize>, weights: &mut Vec<f64>) {
    while support.len() > active.len().max(1) {
        let rows: Vec<Vec<f64>> = active
            .iter()
            .map(|&i| support.iter().map(|&s| schedules[s].0[i] as f64).collect())
            .collect();
        let Some(mut d) = null_vector(&rows, support.len()) else {
            break;
        };
        let sum: f64 = d.iter().sum();
        if sum > PIVOT_TOL || (sum.abs() <= PIVOT_TOL && d.iter().all(|&x| x >= -PIVOT_TOL)) {
            d.iter_mut().for_each(|x| *x = -*x);
        }
        // Step until the first weight hits zero; Σd ≤ 0 so normalizing the
        // result can only raise every completion rate.
        let (step, hit) = d
            .iter()
            .zip(weights.iter())
            .enumerate()
            .filter(|(_, (x, _))| **x < -PIVOT_TOL)
            .map(|(j, (x, wgt))| (wgt / -x, j))
            .fold((f64::INFINITY, usize::MAX), |a, b| if b.0 < a.0 { b } else { a });
        if hit == usize::MAX {
            break;
        }
        for (wgt, x) in weights.iter_mut().zip(&d) {
            *wgt = (*wgt + step * x).max(0.0);
        }
        weights[hit] = 0.0;
        let keep: Vec<bool> = weights.iter().map(|&x| x > DROP_TOL).collect();
        let mut j = 0;
        support.retain(|_| {
            j += 1;
            keep[j - 1]
        });
        weights.retain(|&x| x > DROP_TOL);
    }
}

/// A non-zero `d` with `rows · d = 0`, if the columns are dependent.
fn null_vector(rows: &[Vec<f64>], n: usize) -> Option<Vec<f64>> {
    let mut a: Vec<Vec<f64>> = rows.to_vec();
    let mut pivots: Vec<usize> = Vec::new();
    let mut r = 0;
    for c in 0..n {
        if r == a.len() {
            break;
        }
        let (best, val) = (r..a.len())
            .map(|i| (i, a[i][c].abs()))
            .fold((r, 0.0), |m, x| if x.1 > m.1 { x } else { m });
        if val <= 1e-10 {
            continue;
        }
        a.swap(r, best);
        let p = a[r][c];
        a[r].iter_mut().for_each(|x| *x /= p);
        let pivot_row = a[r].clone();
        for (i, row) in a.iter_mut().enumerate() {
            if i != r && row[c] != 0.0 {
                let f = row[c];
                row.iter_mut().zip(&pivot_row).for_each(|(x, y)| *x -= f * y);
            }
        }
        pivots.push(c);
        r += 1;
    }
    let free = (0..n).find(|c| !pivots.contains(c))?;
    let mut d = vec![0.0; n];
    d[free] = 1.0;
    for (row, &c) in pivots.iter().enumerate() {
        d[c] = -a[row][free];
    }
    Some(d)
}

/// One point of a predicted response-time curve. `mean_response_time` is
/// `None` where some type is unstable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub mean_response_time: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaPrediction {
    pub alpha_star: Option<f64>,
    pub curve: Vec<AlphaPoint>,
}

/// Evaluates the approximate mean response time over `alpha_grid` and
/// returns the minimizer (first one on ties).
pub fn predict_alpha_star(
    w: &Workload,
    family: &PolicySpec,
    alpha_grid: &[f64],
    exec: Execution,
) -> Result<AlphaPrediction> {
    if alpha_grid.is_empty() {
        return Err(invalid("alpha grid is empty"));
    }
    if alpha_grid.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
        return Err(invalid("alpha grid entries must be positive"));
    }
    let results = par::map(exec, alpha_grid, |&alpha| -> Result<AlphaPoint> {
        let mp = build(&family.with_alpha(alpha), w)?;
        Ok(AlphaPoint {
            alpha,
            mean_response_time: analyze(&mp, w)?.mean_response_time(),
        })
    });
    let curve = results.into_iter().collect::<Result<Vec<_>>>()?;
    let alpha_star = curve
        .iter()
        .filter_map(|p| p.mean_response_time.map(|t| (p.alpha, t)))
        .fold(None, |best: Option<(f64, f64)>, (a, t)| match best {
            Some((_, bt)) if bt <= t => best,
            _ => Some((a, t)),
        })
        .map(|(a, _)| a);
    Ok(AlphaPrediction { alpha_star, curve })
}

/// Largest switching rate at which every type is still stable, for
/// families whose stability degrades with `alpha` (nMSR, sMSR). `None` for
/// pMSR or when no limit is found below `1e6`.
pub fn alpha_stability_limit(w: &Workload, family: &PolicySpec) -> Result<Option<f64>> {
    if family.mode == Mode::Pmsr {
        return Ok(None);
    }
    let stable = |alpha: f64| -> Result<bool> { Ok(analyze(&build(&family.with_alpha(alpha), w)?, w)?.is_stable()) };
    let (mut lo, mut hi) = (1.0f64, 1.0f64);
    if stable(1.0)? {
        while stable(hi)? {
            lo = hi;
            hi *= 2.0;
            if hi > 1e6 {
                return Ok(None);
            }
        }
    } else {
        while !stable(lo)? {
            hi = lo;
            lo /= 2.0;
            if lo < 1e-12 {
                return Err(Error::InfeasibleWorkload(
                    "no switching rate stabilizes this policy family".into(),
                ));
            }
        }
    }
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        if stable(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(lo))
}

/// Default switching-rate grid: log-spaced on `[limit/30, 0.95·limit]` when
/// the family has a stability limit, else on `[0.25, 8]`.
pub fn default_alpha_grid(w: &Workload, family: &PolicySpec, n: usize) -> Result<Vec<f64>> {
    Ok(match alpha_stability_limit(w, family)? {
        Some(lim) => log_grid(lim / 30.0, 0.95 * lim, n),
        None => log_grid(0.25, 8.0, n),
    })
}

/// `n` log-spaced points on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut grid: Vec<f64> = (0..n)
        .map(|j| (a + (b - a) * j as f64 / (n - 1) as f64).exp())
        .collect();
    grid[0] = lo;
    grid[n - 1] = hi;
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::{example_workload, single};
    use crate::model::{feasible, JobType, ResourceVector};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn s(v: &[u32]) -> Schedule {
        Schedule(v.to_vec())
    }

    #[test]
    fn single_type() {
        let r = synthesize(&single(1.0, 4.0, 2.0, 1.0)).unwrap();
        assert_eq!(r.candidates, vec![s(&[4])]);
        assert_eq!(r.pi, vec![1.0]);
        assert_relative_eq!(r.rho_max, 0.5, epsilon = 1e-12);
        assert!(r.feasible);
    }

    #[test]
    fn example_system() {
        let r = synthesize(&example_workload(1.0)).unwrap();
        assert_relative_eq!(r.rho_max, 1.0, epsilon = 1e-9);
        assert!(!r.feasible);
        let r = synthesize(&example_workload(0.9)).unwrap();
        assert_relative_eq!(r.rho_max, 0.9, epsilon = 1e-9);
        assert!(r.feasible);
        assert!(r.candidates.contains(&s(&[1, 4, 0])));
        assert!(r.candidates.contains(&s(&[0, 0, 2])));
        assert!(r.candidates.len() <= 3);
    }

    #[test]
    fn only_zero_arrivals_is_rejected() {
        let w = example_workload(0.0);
        assert!(matches!(synthesize(&w), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn unservable_type_is_reported() {
        let w = Workload::new(
            ResourceVector::new(vec![2.0]).unwrap(),
            vec![
                JobType::new("a", vec![1.0], 1.0, 1.0).unwrap(),
                JobType::new("b", vec![3.0], 1.0, 1.0).unwrap(),
            ],
        )
        .unwrap();
        assert!(matches!(synthesize(&w), Err(Error::UnservableType { job_type: 1 })));
    }

    #[test]
    fn null_vector_basics() {
        let d = null_vector(&[vec![1.0, 2.0, 3.0]], 3).unwrap();
        assert!((d[0] + 2.0 * d[1] + 3.0 * d[2]).abs() < 1e-12);
        assert!(null_vector(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2).is_none());
    }

    #[test]
    fn reduction_keeps_rates() {
        // Three schedules of a single active type: weights collapse to one.
        let sched = vec![s(&[1]), s(&[2]), s(&[3])];
        let mut support = vec![0, 1, 2];
        let mut weights = vec![0.2, 0.3, 0.5];
        let before: f64 = weights.iter().zip([1.0, 2.0, 3.0]).map(|(w, u)| w * u).sum();
        reduce_support(&sched, &[0], &mut support, &mut weights);
        assert_eq!(support.len(), 1);
        let total: f64 = weights.iter().sum();
        let after: f64 = support
            .iter()
            .zip(&weights)
            .map(|(&j, w)| w / total * sched[j].0[0] as f64)
            .sum();
        assert!(after >= before - 1e-12);
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(0.01, 1.0, 3);
        assert_relative_eq!(g[0], 0.01, epsilon = 1e-15);
        assert_relative_eq!(g[1], 0.1, epsilon = 1e-12);
        assert_relative_eq!(g[2], 1.0, epsilon = 1e-12);
    }

    fn pmsr_family() -> (Workload, PolicySpec) {
        let w = example_workload(0.9);
        let r = synthesize(&w).unwrap();
        (w, PolicySpec::new(Mode::Pmsr, r.candidates, r.pi, 1.0))
    }

    #[test]
    fn pmsr_curve_is_non_increasing() {
        let (w, spec) = pmsr_family();
        let grid = log_grid(0.01, 100.0, 12);
        let p = predict_alpha_star(&w, &spec, &grid, Execution::Sequential).unwrap();
        let ts: Vec<f64> = p.curve.iter().map(|c| c.mean_response_time.unwrap()).collect();
        for pair in ts.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "{ts:?}");
        }
        assert_eq!(p.alpha_star, Some(100.0));
    }

    #[test]
    fn single_candidate_curve_is_flat() {
        let w = single(1.0, 4.0, 2.0, 1.0);
        let spec = PolicySpec::new(Mode::Nmsr, vec![s(&[4])], vec![1.0], 1.0);
        let grid = [0.5, 1.0, 2.0];
        let p = predict_alpha_star(&w, &spec, &grid, Execution::Parallel).unwrap();
        assert_eq!(p.alpha_star, Some(0.5));
        let t0 = p.curve[0].mean_response_time.unwrap();
        assert!(p.curve.iter().all(|c| c.mean_response_time == Some(t0)));
    }

    #[test]
    fn nmsr_curve_has_interior_minimum() {
        let (w, spec) = pmsr_family();
        let spec = PolicySpec {
            mode: Mode::Nmsr,
            ..spec
        };
        let grid = log_grid(1e-4, 0.5, 25);
        let p = predict_alpha_star(&w, &spec, &grid, Execution::Parallel).unwrap();
        let star = p.alpha_star.unwrap();
        assert!(star > grid[0] && star < grid[grid.len() - 1], "{p:?}");
        assert!(p.curve.last().unwrap().mean_response_time.is_none());
    }

    #[test]
    fn stability_limit_brackets_the_switch() {
        let (w, spec) = pmsr_family();
        assert_eq!(alpha_stability_limit(&w, &spec).unwrap(), None);
        let spec = PolicySpec {
            mode: Mode::Nmsr,
            ..spec
        };
        let lim = alpha_stability_limit(&w, &spec).unwrap().unwrap();
        let at = |a: f64| {
            analyze(&build(&spec.with_alpha(a), &w).unwrap(), &w)
                .unwrap()
                .is_stable()
        };
        assert!(at(lim * 0.999) && !at(lim * 1.001), "{lim}");
        let grid = default_alpha_grid(&w, &spec, 20).unwrap();
        assert_eq!(grid.len(), 20);
        assert!((grid[19] - 0.95 * lim).abs() < 1e-15);
    }

    fn arb_workload() -> impl Strategy<Value = Workload> {
        (1usize..=3, 1usize..=2).prop_flat_map(|(k, r)| {
            (
                prop::collection::vec(4.0f64..12.0, r),
                prop::collection::vec((prop::collection::vec(0.5f64..4.0, r), 0.1f64..2.0, 0.5f64..2.0), k),
            )
                .prop_map(|(cap, types)| {
                    let types = types
                        .into_iter()
                        .enumerate()
                        .map(|(i, (d, l, m))| JobType::new(format!("t{i}"), d, l, m).unwrap())
                        .collect();
                    Workload::new(ResourceVector::new(cap).unwrap(), types).unwrap()
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn result_invariants(w in arb_workload()) {
            let r = synthesize(&w).unwrap();
            prop_assert!(r.candidates.len() <= w.num_types());
            prop_assert!((r.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.pi.iter().all(|&p| p > 0.0));
            let maximal = enumerate_maximal_schedules(&w, DEFAULT_ENUMERATION_CAP).unwrap();
            for c in &r.candidates {
                prop_assert!(feasible(c, &w).unwrap());
                prop_assert!(maximal.contains(c));
            }
            let avg = r.average_schedule();
            for (i, jt) in w.types().iter().enumerate() {
                prop_assert!((r.rho_per_type[i] - jt.arrival_rate / jt.service_rate / avg[i]).abs() < 1e-9);
            }
            prop_assert_eq!(r.feasible, r.rho_max < 1.0 - 1e-9);
            if r.feasible {
                for (i, jt) in w.types().iter().enumerate() {
                    prop_assert!(jt.service_rate * avg[i] > jt.arrival_rate);
                }
            }
            // Optimal against every single maximal schedule used alone.
            for m in &maximal {
                let single = evaluate(&w, std::slice::from_ref(m), &[1.0]).unwrap();
                let worst = single.iter().cloned().fold(0.0, f64::max);
                prop_assert!(r.rho_max <= worst + 1e-9);
            }
        }

        #[test]
        fn load_scaling_invariance(w in arb_workload(), c in 0.2f64..3.0) {
            let base = synthesize(&w).unwrap();
            let scaled = synthesize(&w.scale_arrivals(c).unwrap()).unwrap();
            prop_assert_eq!(&base.candidates, &scaled.candidates);
            for (a, b) in base.pi.iter().zip(&scaled.pi) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert!((scaled.rho_max - c * base.rho_max).abs() < 1e-9 * (1.0 + base.rho_max));
        }
    }
}
