//! Multiresource workload model: resource vectors, job types, schedules,
//! feasibility, maximal-schedule enumeration and system load.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{lp_maximize, LinearProgram};

/// Default cap on the number of schedules visited by enumeration.
pub const DEFAULT_ENUMERATION_CAP: usize = 1_000_000;

/// Relative slack allowed when comparing floating-point demands to capacity.
const CAPACITY_SLACK: f64 = 1e-9;

/// Non-negative amounts of each resource (capacities or demands).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResourceVector(Vec<f64>);

impl ResourceVector {
    pub fn new(amounts: Vec<f64>) -> Result<Self> {
        if amounts.is_empty() {
            return Err(invalid("resource vector must have at least one entry"));
        }
        if let Some(x) = amounts.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(invalid(format!(
                "resource amount {x} is not a finite non-negative number"
            )));
        }
        Ok(Self(amounts))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn fits_within(&self, capacity: &[f64]) -> bool {
        fits(&self.0, capacity)
    }
}

impl std::ops::Index<usize> for ResourceVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub(crate) fn fits(used: &[f64], capacity: &[f64]) -> bool {
    used.iter()
        .zip(capacity)
        .all(|(u, p)| *u <= p + CAPACITY_SLACK * p.max(1.0))
}

/// One class of jobs: resource demand, Poisson arrival rate and exponential
/// service rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobType {
    #[serde(default)]
    pub name: String,
    pub demand: ResourceVector,
    #[serde(rename = "lambda")]
    pub arrival_rate: f64,
    #[serde(rename = "mu")]
    pub service_rate: f64,
}

impl JobType {
    pub fn new(name: impl Into<String>, demand: Vec<f64>, arrival_rate: f64, service_rate: f64) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            demand: ResourceVector::new(demand)?,
            arrival_rate,
            service_rate,
        })
    }
}

/// Server capacity plus `K` job types.
///
/// A type whose demand exceeds capacity is accepted here; it surfaces later
/// as an unservable type when load or synthesis is computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorkloadDoc")]
pub struct Workload {
    capacity: ResourceVector,
    types: Vec<JobType>,
}

#[derive(Deserialize)]
struct WorkloadDoc {
    capacity: ResourceVector,
    types: Vec<JobType>,
}

impl TryFrom<WorkloadDoc> for Workload {
    type Error = Error;
    fn try_from(doc: WorkloadDoc) -> Result<Self> {
        Workload::new(doc.capacity, doc.types)
    }
}

impl Workload {
    pub fn new(capacity: ResourceVector, types: Vec<JobType>) -> Result<Self> {
        if types.is_empty() {
            return Err(invalid("workload needs at least one job type"));
        }
        let r = capacity.len();
        for (i, t) in types.iter().enumerate() {
            if t.demand.len() != r {
                return Err(invalid(format!(
                    "type {i} demand has {} resources, capacity has {r}",
                    t.demand.len()
                )));
            }
            if t.demand.as_slice().iter().all(|&d| d == 0.0) {
                return Err(invalid(format!("type {i} has an all-zero demand")));
            }
            if !t.arrival_rate.is_finite() || t.arrival_rate < 0.0 {
                return Err(invalid(format!("type {i} has invalid arrival rate {}", t.arrival_rate)));
            }
            if !t.service_rate.is_finite() || t.service_rate <= 0.0 {
                return Err(invalid(format!("type {i} has invalid service rate {}", t.service_rate)));
            }
        }
        Ok(Self { capacity, types })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn capacity(&self) -> &ResourceVector {
        &self.capacity
    }

    pub fn types(&self) -> &[JobType] {
        &self.types
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn num_resources(&self) -> usize {
        self.capacity.len()
    }

    pub fn demand(&self, i: usize) -> &[f64] {
        self.types[i].demand.as_slice()
    }

    pub fn arrival_rates(&self) -> Vec<f64> {
        self.types.iter().map(|t| t.arrival_rate).collect()
    }

    pub fn service_rates(&self) -> Vec<f64> {
        self.types.iter().map(|t| t.service_rate).collect()
    }

    pub fn total_arrival_rate(&self) -> f64 {
        self.types.iter().map(|t| t.arrival_rate).sum()
    }

    /// Offered load per type, `λᵢ/μᵢ`.
    pub fn offered_load(&self) -> Vec<f64> {
        self.types.iter().map(|t| t.arrival_rate / t.service_rate).collect()
    }

    /// Copy of this workload with every arrival rate multiplied by `c`.
    pub fn scale_arrivals(&self, c: f64) -> Result<Self> {
        if !(c >= 0.0) || !c.is_finite() {
            return Err(invalid(format!("arrival scale factor {c} must be finite and >= 0")));
        }
        let mut w = self.clone();
        for t in &mut w.types {
            t.arrival_rate *= c;
        }
        Ok(w)
    }

    pub fn with_arrival_rates(&self, rates: &[f64]) -> Result<Self> {
        if rates.len() != self.num_types() {
            return Err(invalid("arrival rate vector has the wrong length"));
        }
        let mut types = self.types.clone();
        for (t, &r) in types.iter_mut().zip(rates) {
            t.arrival_rate = r;
        }
        Self::new(self.capacity.clone(), types)
    }

    /// Total resource usage of `counts` jobs of each type.
    pub fn footprint(&self, counts: &[u32]) -> Vec<f64> {
        let mut used = vec![0.0; self.num_resources()];
        for (i, &c) in counts.iter().enumerate() {
            if c > 0 {
                for (u, d) in used.iter_mut().zip(self.demand(i)) {
                    *u += c as f64 * d;
                }
            }
        }
        used
    }
}

/// Number of jobs of each type served in parallel.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule(pub Vec<u32>);

impl Schedule {
    pub fn zeros(k: usize) -> Self {
        Self(vec![0; k])
    }

    pub fn counts(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }

    /// Component-wise minimum.
    pub fn meet(&self, other: &Schedule) -> Schedule {
        Schedule(self.0.iter().zip(&other.0).map(|(a, b)| *a.min(b)).collect())
    }

    pub fn dominated_by(&self, other: &Schedule) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }

    pub fn with_added(&self, i: usize) -> Schedule {
        let mut s = self.clone();
        s.0[i] += 1;
        s
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

impl From<Vec<u32>> for Schedule {
    fn from(v: Vec<u32>) -> Self {
        Schedule(v)
    }
}

/// True iff `Σ uᵢ·Dᵢ ≤ P` component-wise.
pub fn feasible(s: &Schedule, w: &Workload) -> Result<bool> {
    if s.len() != w.num_types() {
        return Err(invalid(format!(
            "schedule has {} entries, workload has {} types",
            s.len(),
            w.num_types()
        )));
    }
    Ok(fits(&w.footprint(s.counts()), w.capacity.as_slice()))
}

fn max_copies(demand: &[f64], remaining: &[f64]) -> u32 {
    demand
        .iter()
        .zip(remaining)
        .filter(|(d, _)| **d > 0.0)
        .map(|(d, r)| {
            let slack = CAPACITY_SLACK * r.abs().max(1.0);
            ((r + slack) / d).floor().max(0.0) as u32
        })
        .min()
        .unwrap_or(0)
}

/// All maximal feasible schedules (no job of any type can be added),
/// deduplicated and sorted lexicographically.
pub fn enumerate_maximal_schedules(w: &Workload, cap: usize) -> Result<Vec<Schedule>> {
    let k = w.num_types();
    let mut out = Vec::new();
    let mut current = vec![0u32; k];
    let mut remaining = w.capacity.as_slice().to_vec();
    let mut visited = 0usize;
    dfs(w, 0, &mut current, &mut remaining, &mut out, &mut visited, cap)?;
    out.sort();
    out.dedup();
    Ok(out)
}

fn dfs(
    w: &Workload,
    i: usize,
    current: &mut [u32],
    remaining: &mut [f64],
    out: &mut Vec<Schedule>,
    visited: &mut usize,
    cap: usize,
) -> Result<()> {
    let k = current.len();
    let bound = max_copies(w.demand(i), remaining);
    let counts: Box<dyn Iterator<Item = u32>> = if i + 1 == k {
        // Only the largest count of the last type can be maximal.
        Box::new(std::iter::once(bound))
    } else {
        Box::new((0..=bound).rev())
    };
    for c in counts {
        current[i] = c;
        for (r, d) in remaining.iter_mut().zip(w.demand(i)) {
            *r -= c as f64 * d;
        }
        if i + 1 == k {
            *visited += 1;
            if *visited > cap {
                return Err(Error::ResourceLimit { cap });
            }
            let maximal = (0..k).all(|j| max_copies(w.demand(j), remaining) == 0);
            if maximal {
                out.push(Schedule(current.to_vec()));
            }
        } else {
            dfs(w, i + 1, current, remaining, out, visited, cap)?;
        }
        for (r, d) in remaining.iter_mut().zip(w.demand(i)) {
            *r += c as f64 * d;
        }
    }
    current[i] = 0;
    Ok(())
}

/// Smallest `ρ` such that `(λ⊘μ)/ρ` lies in the convex hull of feasible
/// schedules. `ρ < 1` iff the arrival vector is inside the capacity region.
pub fn system_load(w: &Workload) -> Result<f64> {
    let schedules = enumerate_maximal_schedules(w, DEFAULT_ENUMERATION_CAP)?;
    system_load_over(w, &schedules)
}

/// [`system_load`] over a precomputed set of maximal schedules.
pub fn system_load_over(w: &Workload, schedules: &[Schedule]) -> Result<f64> {
    let load = w.offered_load();
    if load.iter().all(|&x| x == 0.0) {
        return Err(invalid("system load needs at least one positive arrival rate"));
    }
    let m = schedules.len();
    let mut lp = LinearProgram::new({
        let mut c = vec![0.0; m + 1];
        c[m] = 1.0;
        c
    });
    for (i, &r) in load.iter().enumerate() {
        if r > 0.0 {
            let mut row: Vec<f64> = schedules.iter().map(|s| -(s.0[i] as f64)).collect();
            row.push(r);
            lp.add_ub(row, 0.0);
        }
    }
    let mut sum = vec![1.0; m];
    sum.push(0.0);
    lp.add_ub(sum, 1.0);
    let sol = lp_maximize(&lp)?;
    let z = sol.values[m];
    if z <= 1e-12 {
        let culprit = unservable_type(&load, schedules).unwrap_or(0);
        return Err(Error::InfeasibleWorkload(format!(
            "type {culprit} has positive arrivals but no schedule serves it"
        )));
    }
    Ok(1.0 / z)
}

pub(crate) fn unservable_type(load: &[f64], schedules: &[Schedule]) -> Option<usize> {
    (0..load.len()).find(|&i| load[i] > 0.0 && schedules.iter().all(|s| s.0[i] == 0))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Three-resource, three-type example server (20 cores, 15 GB, 50 Gbps).
    pub fn example_workload(scale: f64) -> Workload {
        let types = vec![
            JobType::new("t1", vec![3.0, 7.0, 1.0], 0.5 * scale, 1.0).unwrap(),
            JobType::new("t2", vec![4.0, 1.0, 1.0], 2.0 * scale, 1.0).unwrap(),
            JobType::new("t3", vec![10.0, 1.0, 5.0], 1.0 * scale, 1.0).unwrap(),
        ];
        Workload::new(ResourceVector::new(vec![20.0, 15.0, 50.0]).unwrap(), types).unwrap()
    }

    pub fn single(demand: f64, capacity: f64, lambda: f64, mu: f64) -> Workload {
        Workload::new(
            ResourceVector::new(vec![capacity]).unwrap(),
            vec![JobType::new("a", vec![demand], lambda, mu).unwrap()],
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn s(v: &[u32]) -> Schedule {
        Schedule(v.to_vec())
    }

    #[test]
    fn feasibility_examples() {
        let w = example_workload(1.0);
        assert!(feasible(&s(&[1, 4, 0]), &w).unwrap());
        assert!(feasible(&s(&[0, 0, 0]), &w).unwrap());
        assert!(!feasible(&s(&[2, 0, 2]), &w).unwrap());
        assert!(feasible(&s(&[1, 0]), &w).is_err());
    }

    #[test]
    fn enumeration_examples() {
        assert_eq!(
            enumerate_maximal_schedules(&single(1.0, 3.0, 1.0, 1.0), 100).unwrap(),
            vec![s(&[3])]
        );
        let w = example_workload(1.0);
        let all = enumerate_maximal_schedules(&w, 1000).unwrap();
        for want in [[1, 4, 0], [0, 0, 2], [1, 1, 1]] {
            assert!(all.contains(&s(&want)), "missing {want:?}");
        }
        // Exhaustive listing cross-checked by brute force in the property test.
        assert_eq!(
            all,
            vec![
                s(&[0, 0, 2]),
                s(&[0, 2, 1]),
                s(&[0, 5, 0]),
                s(&[1, 1, 1]),
                s(&[1, 4, 0]),
                s(&[2, 0, 1]),
                s(&[2, 1, 0]),
            ]
        );
        let zero_cap = Workload::new(
            ResourceVector::new(vec![0.0, 0.0]).unwrap(),
            vec![
                JobType::new("a", vec![1.0, 0.0], 1.0, 1.0).unwrap(),
                JobType::new("b", vec![0.0, 2.0], 1.0, 1.0).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(enumerate_maximal_schedules(&zero_cap, 10).unwrap(), vec![s(&[0, 0])]);
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let w = example_workload(1.0);
        match enumerate_maximal_schedules(&w, 3) {
            Err(Error::ResourceLimit { cap }) => assert_eq!(cap, 3),
            other => panic!("expected resource limit, got {other:?}"),
        }
    }

    #[test]
    fn system_load_examples() {
        assert_relative_eq!(system_load(&single(1.0, 1.0, 1.0, 2.0)).unwrap(), 0.5, epsilon = 1e-12);
        assert_relative_eq!(system_load(&example_workload(1.0)).unwrap(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(system_load(&example_workload(0.9)).unwrap(), 0.9, epsilon = 1e-9);
    }

    #[test]
    fn system_load_errors() {
        let zero = single(1.0, 1.0, 0.0, 1.0);
        assert!(matches!(system_load(&zero), Err(Error::InvalidInput(_))));
        let too_big = single(2.0, 1.0, 1.0, 1.0);
        assert!(matches!(system_load(&too_big), Err(Error::InfeasibleWorkload(_))));
    }

    #[test]
    fn workload_validation() {
        let cap = ResourceVector::new(vec![1.0]).unwrap();
        assert!(Workload::new(cap.clone(), vec![]).is_err());
        let bad = JobType::new("z", vec![0.0], 1.0, 1.0).unwrap();
        assert!(Workload::new(cap.clone(), vec![bad]).is_err());
        let mismatch = JobType::new("m", vec![1.0, 1.0], 1.0, 1.0).unwrap();
        assert!(Workload::new(cap, vec![mismatch]).is_err());
        assert!(ResourceVector::new(vec![-1.0]).is_err());
    }

    #[test]
    fn workload_json_field_names() {
        let text = r#"{"capacity":[4],"types":[{"name":"a","demand":[1],"lambda":2,"mu":1}]}"#;
        let w = Workload::from_json(text).unwrap();
        assert_eq!(w.types()[0].arrival_rate, 2.0);
        let back = serde_json::to_value(&w).unwrap();
        assert_eq!(back["types"][0]["lambda"], 2.0);
        assert_eq!(back["types"][0]["mu"], 1.0);
        assert!(Workload::from_json(r#"{"capacity":[4],"types":[]}"#).is_err());
    }

    fn brute_force_maximal(w: &Workload) -> Vec<Schedule> {
        let k = w.num_types();
        let bounds: Vec<u32> = (0..k)
            .map(|i| max_copies(w.demand(i), w.capacity().as_slice()))
            .collect();
        let mut all = vec![vec![]];
        for &b in &bounds {
            all = all
                .into_iter()
                .flat_map(|p: Vec<u32>| {
                    (0..=b).map(move |c| {
                        let mut q = p.clone();
                        q.push(c);
                        q
                    })
                })
                .collect();
        }
        let feas: Vec<Schedule> = all
            .into_iter()
            .map(Schedule)
            .filter(|s| feasible(s, w).unwrap())
            .collect();
        let mut maximal: Vec<Schedule> = feas
            .iter()
            .filter(|s| !feas.iter().any(|t| t != *s && s.dominated_by(t)))
            .cloned()
            .collect();
        maximal.sort();
        maximal
    }

    fn small_workload() -> impl Strategy<Value = Workload> {
        (1usize..=3, 1usize..=3).prop_flat_map(|(r, k)| {
            (
                prop::collection::vec(0u32..=8, r),
                prop::collection::vec(prop::collection::vec(0u32..=4, r), k),
                prop::collection::vec(0.1f64..3.0, k),
            )
                .prop_filter_map("all-zero demand", |(cap, demands, lam)| {
                    let types = demands
                        .into_iter()
                        .zip(lam)
                        .enumerate()
                        .map(|(i, (d, l))| {
                            JobType::new(format!("t{i}"), d.into_iter().map(f64::from).collect(), l, 1.0).unwrap()
                        })
                        .collect();
                    Workload::new(
                        ResourceVector::new(cap.into_iter().map(f64::from).collect()).unwrap(),
                        types,
                    )
                    .ok()
                })
        })
    }

    proptest! {
        #[test]
        fn enumeration_matches_brute_force(w in small_workload()) {
            let fast = enumerate_maximal_schedules(&w, 100_000).unwrap();
            prop_assert_eq!(&fast, &brute_force_maximal(&w));
            for s in &fast {
                prop_assert!(feasible(s, &w).unwrap());
                for i in 0..w.num_types() {
                    prop_assert!(!feasible(&s.with_added(i), &w).unwrap());
                }
            }
        }

        #[test]
        fn feasibility_is_monotone(w in small_workload(), seed in 0u64..1000) {
            let all = enumerate_maximal_schedules(&w, 100_000).unwrap();
            for s in &all {
                let smaller = Schedule(
                    s.0.iter().enumerate().map(|(i, &c)| c.saturating_sub(((seed >> i) & 1) as u32)).collect(),
                );
                prop_assert!(feasible(&smaller, &w).unwrap());
            }
        }

        #[test]
        fn system_load_is_homogeneous(w in small_workload(), c in 0.1f64..5.0) {
            let base = system_load(&w);
            if let Ok(base) = base {
                let scaled = system_load(&w.scale_arrivals(c).unwrap()).unwrap();
                prop_assert!((scaled - c * base).abs() <= 1e-9 * (1.0 + c * base));
            }
        }
    }
}
