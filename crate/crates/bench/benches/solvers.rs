use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DVector;
use platoon_bench::reference_case;
use platoon_core::solvers::{warmup_initial_guess, WarmStart};
use platoon_core::{solve_centralized, solve_with_warm_start, SolverParams};

fn local_prox(c: &mut Criterion) {
    let mut g = c.benchmark_group("local_prox");
    for p in [1, 3, 5] {
        let (_, dp) = reference_case(p, 1);
        let agent = &dp.agents[4];
        let point = DVector::from_element(agent.dim(), 0.5);
        let rho = SolverParams::reference(p).rho;
        g.bench_with_input(BenchmarkId::new("constrained", p), &p, |b, _| b.iter(|| agent.prox(&point, rho)));
        g.bench_with_input(BenchmarkId::new("closed_form", p), &p, |b, _| b.iter(|| agent.prox_free(&point, rho)));
    }
    g.finish();
}

fn distributed_solve(c: &mut Criterion) {
    let mut g = c.benchmark_group("distributed_solve");
    g.sample_size(20);
    for p in [1, 3, 5] {
        let (_, dp) = reference_case(p, 2);
        let params = SolverParams::reference(p);
        g.bench_with_input(BenchmarkId::new("dr_zero_start", p), &p, |b, _| {
            b.iter(|| solve_with_warm_start(&dp, &params, None).expect("solve"))
        });
        let warm = SolverParams { warm_start: WarmStart::WarmupProjection, ..params.clone() };
        g.bench_with_input(BenchmarkId::new("dr_warmup", p), &p, |b, _| {
            b.iter(|| solve_with_warm_start(&dp, &warm, None).expect("solve"))
        });
        g.bench_with_input(BenchmarkId::new("warmup_only", p), &p, |b, _| {
            b.iter(|| warmup_initial_guess(&dp, &params).expect("warm-up"))
        });
    }
    g.finish();
}

fn centralized(c: &mut Criterion) {
    let mut g = c.benchmark_group("centralized");
    for p in [1, 3, 5] {
        let (inst, _) = reference_case(p, 3);
        g.bench_with_input(BenchmarkId::new("ipm", p), &p, |b, _| {
            b.iter(|| solve_centralized(&inst.prob, 1e-10).expect("solve"))
        });
    }
    g.finish();
}

criterion_group!(benches, local_prox, distributed_solve, centralized);
criterion_main!(benches);
