use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use marketirl::entropy_rl::{backward_pass, stationary_solve, StationaryOptions};
use marketirl_bench::{market, prior, start_point};
use nalgebra::DVector;
use num_dual::Dual64;

fn backward(c: &mut Criterion) {
    let p = market();
    let pr = prior(p.n_y());
    let pt = start_point(&p, &pr);
    let mut g = c.benchmark_group("backward_pass");
    for horizon in [10usize, 100] {
        let points = vec![pt.clone(); horizon + 1];
        let da = DVector::zeros(p.n_a());
        g.bench_with_input(BenchmarkId::from_parameter(horizon), &points, |b, pts| {
            b.iter(|| backward_pass(&p, &pr, pts, &da).unwrap())
        });
    }
    g.finish();
}

fn stationary(c: &mut Criterion) {
    let p = market();
    let pr = prior(p.n_y());
    let pt = start_point(&p, &pr);
    let opts = StationaryOptions::default();
    c.bench_function("stationary_solve/f64", |b| {
        b.iter(|| stationary_solve(&p, &pr, p.beta, &pt, &opts).unwrap())
    });
    let (pd, prd, ptd) = (p.lift::<Dual64>(), pr.lift::<Dual64>(), pt.lift::<Dual64>());
    let beta = Dual64::from(p.beta).derivative();
    c.bench_function("stationary_solve/dual", |b| {
        b.iter(|| stationary_solve(&pd, &prd, beta, &ptd, &opts).unwrap())
    });
}

criterion_group!(benches, backward, stationary);
criterion_main!(benches);
