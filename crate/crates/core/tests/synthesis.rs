use msr_core::synthesis::{evaluate, synthesize};
use msr_core::{enumerate_maximal_schedules, feasible, system_load, JobType, ResourceVector, Schedule, Workload};

fn vm_mix(c: f64) -> Workload {
    let demands = [
        [1.0, 4.0, 50.0, 1.0],
        [4.0, 1.0, 10.0, 10.0],
        [2.0, 2.0, 100.0, 5.0],
        [8.0, 4.0, 10.0, 1.0],
    ];
    let lambda = [4.0, 5.0, 2.0, 1.5];
    let types = (0..4)
        .map(|i| JobType::new(format!("vm{}", i + 1), demands[i].to_vec(), lambda[i] * c, 1.0).unwrap())
        .collect();
    Workload::new(ResourceVector::new(vec![128.0, 256.0, 1024.0, 100.0]).unwrap(), types).unwrap()
}

fn printed() -> (Vec<Schedule>, Vec<f64>) {
    let w = [[0, 7, 4, 10], [0, 5, 9, 5], [0, 10, 0, 0], [10, 9, 0, 0]];
    (
        w.iter().map(|r| Schedule(r.to_vec())).collect(),
        vec![0.07633588, 0.30534351, 0.00763359, 0.61068702],
    )
}

#[test]
fn maximal_schedule_count() {
    let schedules = enumerate_maximal_schedules(&vm_mix(1.0), 1_000_000).unwrap();
    assert_eq!(schedules.len(), 408);
}

#[test]
fn published_solution_is_feasible_with_equal_loads() {
    let w = vm_mix(1.0);
    let (cands, pi) = printed();
    assert!(cands.iter().all(|c| feasible(c, &w).unwrap()));
    let avg: Vec<f64> = (0..4)
        .map(|i| cands.iter().zip(&pi).map(|(c, p)| p * c.0[i] as f64).sum())
        .collect();
    for (a, want) in avg.iter().zip([6.1069, 7.6336, 3.0534, 2.2901]) {
        assert!((a - want).abs() < 1e-4, "{a} vs {want}");
    }
    let rho = evaluate(&w, &cands, &pi).unwrap();
    for r in &rho {
        assert!((r - 0.655).abs() < 1e-8, "{r}");
    }
}

#[test]
fn optimum_matches_published_objective() {
    let w = vm_mix(1.0);
    let s = synthesize(&w).unwrap();
    let (cands, pi) = printed();
    let published = evaluate(&w, &cands, &pi).unwrap().into_iter().fold(0.0, f64::max);
    assert!((s.rho_max - published).abs() < 1e-6);
    assert!((s.rho_max - system_load(&w).unwrap()).abs() < 1e-9);
    assert!(s.pi.iter().all(|&p| p > 0.0));
    assert!((s.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(s.candidates.len() <= w.num_types() + 1);
}
