//! Trace ingestion: parsing, type grouping, thinning, and workload fitting.
//!
//! The CSV format has a header naming at least `arrival_time`, `cpu`, `mem`
//! and `duration`; other columns are ignored.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{JobType, ResourceVector, Workload};
use crate::simulator::TraceArrival;

pub const DEFAULT_TOLERANCE: f64 = 0.001;
pub const DEFAULT_TOP_N: usize = 10;

const COLUMNS: [&str; 4] = ["arrival_time", "cpu", "mem", "duration"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub arrival_time: f64,
    pub cpu: f64,
    pub mem: f64,
    pub duration: f64,
}

impl TraceRecord {
    fn demand(&self) -> [f64; 2] {
        [self.cpu, self.mem]
    }
}

pub fn parse_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    parse_trace_reader(std::fs::File::open(path)?)
}

pub fn parse_trace_reader(reader: impl Read) -> Result<Vec<TraceRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let parse_err = |line: u64, message: String| Error::Parse {
        line: line as usize,
        message,
    };
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let mut idx = [0usize; 4];
    for (slot, name) in idx.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column {name:?}")))?;
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let mut v = [0.0f64; 4];
        for ((x, &j), name) in v.iter_mut().zip(&idx).zip(COLUMNS) {
            let field = row
                .get(j)
                .ok_or_else(|| parse_err(line, format!("missing field {name:?}")))?;
            *x = field
                .parse()
                .map_err(|_| parse_err(line, format!("{name} is not a number: {field:?}")))?;
            if !x.is_finite() || *x < 0.0 {
                return Err(parse_err(
                    line,
                    format!("{name} must be finite and non-negative, got {field}"),
                ));
            }
        }
        if v[3] <= 0.0 {
            return Err(parse_err(line, "duration must be positive".into()));
        }
        records.push(TraceRecord {
            arrival_time: v[0],
            cpu: v[1],
            mem: v[2],
            duration: v[3],
        });
    }
    records.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    Ok(records)
}

pub fn write_trace(records: &[TraceRecord], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(COLUMNS).map_err(csv_io)?;
    for r in records {
        w.write_record([
            format!("{}", r.arrival_time),
            format!("{}", r.cpu),
            format!("{}", r.mem),
            format!("{}", r.duration),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceType {
    /// Representative `[cpu, mem]` demand: the first record of the type.
    pub demand: [f64; 2],
    pub count: usize,
}

/// Records grouped into types, most popular first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypedTrace {
    pub types: Vec<TraceType>,
    pub records: Vec<TraceRecord>,
    /// Type index of each retained record.
    pub assignment: Vec<usize>,
}

fn within(x: f64, rep: f64, tol: f64) -> bool {
    (x - rep).abs() <= tol * rep.abs()
}

/// Greedy grouping in arrival order, then keeps the `top_n` most frequent
/// types (ties go to the type seen first).
pub fn group_types(records: &[TraceRecord], tolerance: f64, top_n: usize) -> Result<TypedTrace> {
    if !(tolerance > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    if top_n == 0 {
        return Err(invalid("top_n must be at least 1"));
    }
    let mut reps: Vec<[f64; 2]> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut raw = Vec::with_capacity(records.len());
    for r in records {
        let d = r.demand();
        let t = match reps
            .iter()
            .position(|rep| within(d[0], rep[0], tolerance) && within(d[1], rep[1], tolerance))
        {
            Some(t) => t,
            None => {
                reps.push(d);
                counts.push(0);
                reps.len() - 1
            }
        };
        counts[t] += 1;
        raw.push(t);
    }
    let mut order: Vec<usize> = (0..reps.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order.truncate(top_n);
    let mut rank = vec![usize::MAX; reps.len()];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    let types = order
        .iter()
        .map(|&t| TraceType {
            demand: reps[t],
            count: counts[t],
        })
        .collect();
    let (mut kept, mut assignment) = (Vec::new(), Vec::new());
    for (r, t) in records.iter().zip(raw) {
        if rank[t] != usize::MAX {
            kept.push(*r);
            assignment.push(rank[t]);
        }
    }
    Ok(TypedTrace {
        types,
        records: kept,
        assignment,
    })
}

/// Keeps each record independently with probability `keep`.
pub fn downsample(tt: &TypedTrace, keep: f64, seed: u64) -> Result<TypedTrace> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(invalid(format!("keep fraction must lie in (0, 1], got {keep}")));
    }
    if keep == 1.0 {
        return Ok(tt.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut types: Vec<TraceType> = tt.types.iter().map(|t| TraceType { count: 0, ..t.clone() }).collect();
    let (mut records, mut assignment) = (Vec::new(), Vec::new());
    for (r, &t) in tt.records.iter().zip(&tt.assignment) {
        if rng.gen::<f64>() < keep {
            records.push(*r);
            assignment.push(t);
            types[t].count += 1;
        }
    }
    Ok(TypedTrace {
        types,
        records,
        assignment,
    })
}

/// Per-type fitted statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeFit {
    pub demand: [f64; 2],
    pub count: usize,
    pub lambda: f64,
    pub mu: f64,
}

pub fn fit_types(tt: &TypedTrace) -> Result<Vec<TypeFit>> {
    let first = tt.records.first().map(|r| r.arrival_time);
    let last = tt.records.last().map(|r| r.arrival_time);
    let span = match (first, last) {
        (Some(a), Some(b)) if b > a => b - a,
        _ => return Err(invalid("trace timespan is zero")),
    };
    let mut dur = vec![0.0; tt.types.len()];
    let mut n = vec![0usize; tt.types.len()];
    for (r, &t) in tt.records.iter().zip(&tt.assignment) {
        dur[t] += r.duration;
        n[t] += 1;
    }
    tt.types
        .iter()
        .enumerate()
        .map(|(t, ty)| {
            if n[t] < 2 {
                return Err(invalid(format!("type {t} has fewer than two records")));
            }
            Ok(TypeFit {
                demand: ty.demand,
                count: n[t],
                lambda: n[t] as f64 / span,
                mu: n[t] as f64 / dur[t],
            })
        })
        .collect()
}

/// Fits `λᵢ = count/timespan`, `μᵢ = 1/mean duration`.
pub fn fit_workload(tt: &TypedTrace, capacity: ResourceVector) -> Result<Workload> {
    if capacity.len() != 2 {
        return Err(invalid("trace workloads have two resources (cpu, mem)"));
    }
    let types = fit_types(tt)?
        .into_iter()
        .enumerate()
        .map(|(i, f)| JobType::new(format!("type{i}"), f.demand.to_vec(), f.lambda, f.mu))
        .collect::<Result<Vec<_>>>()?;
    Workload::new(capacity, types)
}

/// Arrivals for trace replay, times shifted so the first arrival is at 0.
pub fn to_arrivals(tt: &TypedTrace) -> Vec<TraceArrival> {
    let t0 = tt.records.first().map_or(0.0, |r| r.arrival_time);
    tt.records
        .iter()
        .zip(&tt.assignment)
        .map(|(r, &t)| TraceArrival {
            time: r.arrival_time - t0,
            job_type: t,
            duration: r.duration,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceSummary {
    pub records: usize,
    pub types: Vec<TypeFit>,
}

pub fn summarize(tt: &TypedTrace) -> Result<TraceSummary> {
    Ok(TraceSummary {
        records: tt.records.len(),
        types: fit_types(tt)?,
    })
}

/// Arrival pattern of a synthetic trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ArrivalPattern {
    Poisson,
    /// A shared on/off environment: during bursts every type arrives
    /// `factor` times faster than in calm periods. Long-run rates match the
    /// nominal ones.
    Bursty {
        factor: f64,
        mean_burst: f64,
        mean_calm: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DurationDist {
    Exponential,
    /// Lognormal with the nominal mean and shape `sigma`.
    Lognormal {
        sigma: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticType {
    pub cpu: f64,
    pub mem: f64,
    pub rate: f64,
    pub mean_duration: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTrace {
    pub types: Vec<SyntheticType>,
    pub horizon: f64,
    pub arrivals: ArrivalPattern,
    pub durations: DurationDist,
}

impl SyntheticTrace {
    pub fn generate(&self, seed: u64) -> Result<Vec<TraceRecord>> {
        if !(self.horizon > 0.0) {
            return Err(invalid("horizon must be positive"));
        }
        for t in &self.types {
            if !(t.rate > 0.0) || !(t.mean_duration > 0.0) || t.cpu < 0.0 || t.mem < 0.0 {
                return Err(invalid("synthetic types need positive rates and durations"));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: f64 = self.types.iter().map(|t| t.rate).sum();
        let (calm_scale, burst_scale, periods) = match self.arrivals {
            ArrivalPattern::Poisson => (1.0, 1.0, None),
            ArrivalPattern::Bursty {
                factor,
                mean_burst,
                mean_calm,
            } => {
                if !(factor >= 1.0) || !(mean_burst > 0.0) || !(mean_calm > 0.0) {
                    return Err(invalid("bursty arrivals need factor >= 1 and positive period means"));
                }
                let p = mean_burst / (mean_burst + mean_calm);
                let calm = 1.0 / (1.0 + p * (factor - 1.0));
                (calm, calm * factor, Some((mean_calm, mean_burst)))
            }
        };
        let mut out = Vec::new();
        let mut t = 0.0;
        let mut burst = false;
        let mut switch_at = match periods {
            Some((calm, _)) => rng.sample::<f64, _>(Exp1) * calm,
            None => f64::INFINITY,
        };
        loop {
            let rate = total * if burst { burst_scale } else { calm_scale };
            let next = t + rng.sample::<f64, _>(Exp1) / rate;
            if next >= switch_at {
                // Memoryless: restart the arrival clock at the switch.
                t = switch_at;
                burst = !burst;
                let (calm, on) = periods.expect("bursty");
                switch_at = t + rng.sample::<f64, _>(Exp1) * if burst { on } else { calm };
                if t >= self.horizon {
                    break;
                }
                continue;
            }
            t = next;
            if t >= self.horizon {
                break;
            }
            let mut x = rng.gen::<f64>() * total;
            let mut ty = &self.types[self.types.len() - 1];
            for cand in &self.types {
                if x < cand.rate {
                    ty = cand;
                    break;
                }
                x -= cand.rate;
            }
            let duration = match self.durations {
                DurationDist::Exponential => rng.sample::<f64, _>(Exp1) * ty.mean_duration,
                DurationDist::Lognormal { sigma } => {
                    let m = ty.mean_duration.ln() - 0.5 * sigma * sigma;
                    LogNormal::new(m, sigma)
                        .map_err(|e| invalid(e.to_string()))?
                        .sample(&mut rng)
                }
            };
            out.push(TraceRecord {
                arrival_time: t,
                cpu: ty.cpu,
                mem: ty.mem,
                duration: duration.max(f64::MIN_POSITIVE),
            });
        }
        Ok(out)
    }
}
